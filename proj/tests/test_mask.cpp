#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dam/mask.hpp"
#include "dam/nn.hpp"

using namespace dam;

TEST_CASE("sampled masks follow the concrete transform") {
    MaskState state(256, 0.5, Rng(31));
    Rng lr(32);
    for (double& v : state.logits.data) v = lr.normal(0.0, 1.5);
    const MaskSample s = sample(state);
    for (std::size_t j = 0; j < 256; ++j) {
        CHECK(s.m.data[j] > 0.0);
        CHECK(s.m.data[j] < 1.0);
        const double want =
            sigmoid((logit(s.u.data[j]) + state.logits.data[j]) / state.temperature);
        CHECK(s.m.data[j] == want);  // same formula path, bit-identical
    }
}

TEST_CASE("the concrete transform hits the known values") {
    // u = 0.5 makes the logistic noise vanish: m = sigmoid(x / T)
    CHECK(sigmoid((logit(0.5) + 0.0) / 0.7) == 0.5);

    // frozen oracle value: x = logit(0.8), u = 0.3, T = 0.5
    const double x = logit(0.8);
    CHECK(x == doctest::Approx(1.386294361119891).epsilon(1e-15));
    const double m = sigmoid((logit(0.3) + x) / 0.5);
    CHECK(m == doctest::Approx(0.746113989637306).epsilon(1e-12));

    // limits: large logits saturate toward 1, T -> 0 approaches a step
    CHECK(sigmoid((logit(0.3) + 40.0) / 0.5) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(sigmoid((logit(0.3) + 1.0) / 1e-3) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sigmoid((logit(0.3) - 1.0) / 1e-3) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("sampling is deterministic per seed and unbiased at zero logits") {
    MaskState a(10'000, 0.5, Rng(77));
    MaskState b(10'000, 0.5, Rng(77));
    const MaskSample sa = sample(a);
    const MaskSample sb = sample(b);
    CHECK(sa.m.data == sb.m.data);
    CHECK(sa.u.data == sb.u.data);

    double sum = 0.0;
    for (double v : sa.m.data) sum += v;
    const double mean_m = sum / 10'000.0;
    CHECK(std::abs(mean_m - 0.5) < 0.02);

    // distribution symmetric about 0.5: near-zero skewness
    double m2 = 0.0, m3 = 0.0;
    for (double v : sa.m.data) {
        const double c = v - mean_m;
        m2 += c * c;
        m3 += c * c * c;
    }
    m2 /= 10'000.0;
    m3 /= 10'000.0;
    const double skew = m3 / std::pow(m2, 1.5);
    CHECK(std::abs(skew) < 0.1);
}

TEST_CASE("rescale") {
    const ArchSpec tiny{1, {}, 1};
    const TaskVector tau{tiny, Tensor({2}, {2, 4}), "t"};

    const TaskVector same = rescale(tau, Tensor({2}, {1.0, 1.0}));
    CHECK(same.flat.data == std::vector<double>{2, 4});

    const TaskVector scaled = rescale(tau, Tensor({2}, {0.5, 1.0}));
    CHECK(scaled.flat.data[0] == doctest::Approx(2.0 * 0.5 / 0.75).epsilon(1e-15));
    CHECK(scaled.flat.data[1] == doctest::Approx(4.0 / 0.75).epsilon(1e-15));

    CHECK_THROWS_AS(rescale(tau, Tensor({2}, {0.0, 1e-13})), std::runtime_error);
    CHECK_THROWS_AS(rescale(tau, Tensor({3}, 0.5)), std::invalid_argument);
}

TEST_CASE("rescale preserves the sign pattern wherever the mask is positive") {
    const ArchSpec arch{3, {2}, 2};
    Rng rng(5);
    Tensor flat({arch.param_count()}, 0.0);
    for (double& v : flat.data) v = rng.normal(0.0, 1.0);
    const TaskVector tau{arch, flat, "t"};
    MaskState state(arch.param_count(), 0.5, Rng(6));
    const MaskSample s = sample(state);
    const TaskVector out = rescale(tau, s.m);
    for (std::size_t j = 0; j < flat.numel(); ++j) {
        if (flat.data[j] > 0.0) CHECK(out.flat.data[j] > 0.0);
        if (flat.data[j] < 0.0) CHECK(out.flat.data[j] < 0.0);
        if (flat.data[j] == 0.0) CHECK(out.flat.data[j] == 0.0);
    }
}

TEST_CASE("monte-carlo mean of the rescaled vector tracks tau * p / mean(p)") {
    // The sampled mask has E[m] = sigmoid(x) exactly in the low-temperature
    // (Bernoulli) limit; run the oracle there so the analytic target is sharp.
    const std::size_t d = 2048;
    ArchSpec synth{d - 1, {}, 1};  // (d-1) weights + 1 bias = d
    REQUIRE(synth.param_count() == d);
    Rng rng(9);
    Tensor flat({d}, 0.0);
    for (double& v : flat.data) v = rng.normal(0.0, 1.0);
    const TaskVector tau{synth, flat, "t"};

    MaskState state(d, 0.02, Rng(10));
    Rng lrng(11);
    for (double& v : state.logits.data) v = lrng.normal(0.0, 1.0);
    const Tensor p = sigmoid(state.logits);
    const double mean_p = mean(p);

    const std::size_t trials = 10'000;
    const std::size_t coords[5] = {0, 17, 255, 1023, 2047};
    std::vector<std::vector<double>> samples(5);
    for (std::size_t t = 0; t < trials; ++t) {
        const MaskSample s = sample(state);
        const TaskVector out = rescale(tau, s.m);
        for (int c = 0; c < 5; ++c) samples[c].push_back(out.flat.data[coords[c]]);
    }
    for (int c = 0; c < 5; ++c) {
        double mu = 0.0;
        for (double v : samples[c]) mu += v;
        mu /= trials;
        double var = 0.0;
        for (double v : samples[c]) var += (v - mu) * (v - mu);
        var /= trials - 1;
        const double stderr_mu = std::sqrt(var / trials);
        const double want = flat.data[coords[c]] * p.data[coords[c]] / mean_p;
        // 3 sigma plus a small allowance for the O(1/d) denominator bias
        CHECK(std::abs(mu - want) <=
              3.0 * stderr_mu + 2e-3 * std::abs(want) + 1e-6);
    }
}

TEST_CASE("logit gradient is the diagonal concrete derivative") {
    MaskState state(4, 0.5, Rng(21));
    MaskSample s;
    s.m = Tensor({4}, {0.5, 0.9, 0.0001, 0.9999});
    s.u = Tensor({4}, 0.5);
    const Tensor g = grad_logits(s, state, Tensor({4}, 1.0));
    CHECK(g.data[0] == doctest::Approx(0.5).epsilon(1e-15));  // 0.5*0.5/0.5
    CHECK(g.data[1] == doctest::Approx(0.9 * 0.1 / 0.5).epsilon(1e-12));
    CHECK(g.data[2] <= 1e-3);   // saturation
    CHECK(g.data[3] <= 1e-3);
}

TEST_CASE("full chain gradient matches finite differences with frozen noise") {
    // loss(x) = entropy(merge(pre, rescale(tau, m(x)), lambda)) with u and the
    // rescale denominator held fixed.
    ArchSpec arch{4, {6}, 3};
    const std::size_t d = arch.param_count();
    Rng rng(31);
    ParamVector pre = init_params(arch, rng);
    std::vector<TaskVector> taus;
    for (int i = 0; i < 2; ++i) {
        Rng r2(40 + i);
        ParamVector m = init_params(arch, r2);
        taus.push_back(task_vector(m, pre, "t"));
    }
    Tensor batch({6, 4}, 0.0);
    Rng brng(32);
    for (double& v : batch.data) v = 0.05 + 0.9 * brng.uniform01_open();

    MaskState state(d, 0.5, Rng(33));
    Rng xr(34);
    for (double& v : state.logits.data) v = xr.normal(0.0, 0.5);
    const MaskSample s = sample(state);
    const double denom = mean(s.m);
    const auto coeffs = MergeCoefficients::constant(Granularity::task_wise, 2, 2, 0.4);

    auto loss_at = [&](const Tensor& logits) {
        Tensor m({d}, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
            m.data[j] = sigmoid((logit(s.u.data[j]) + logits.data[j]) / state.temperature);
        }
        Tensor flat = pre.flat;
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (const auto& tau : taus) acc += 0.4 * tau.flat.data[j];
            flat.data[j] += acc * m.data[j] / denom;  // frozen denominator
        }
        return entropy_loss(ParamVector(arch, flat), batch);
    };

    // analytic: g_theta -> upstream -> grad_logits
    Tensor m_now({d}, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        m_now.data[j] =
            sigmoid((logit(s.u.data[j]) + state.logits.data[j]) / state.temperature);
    }
    Tensor flat = pre.flat;
    Tensor eff({d}, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        for (const auto& tau : taus) eff.data[j] += 0.4 * tau.flat.data[j];
        flat.data[j] += eff.data[j] * m_now.data[j] / denom;
    }
    const Tensor gtheta =
        grad_params(ParamVector(arch, flat), batch, LossKind::entropy);
    Tensor upstream({d}, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        upstream.data[j] = gtheta.data[j] * eff.data[j] / denom;
    }
    MaskSample frozen;
    frozen.m = m_now;
    frozen.u = s.u;
    const Tensor gx = grad_logits(frozen, state, upstream);

    const double h = 1e-5;
    Rng pick(35);
    int checked = 0;
    for (int trial = 0; trial < 120 && checked < 60; ++trial) {
        const std::size_t j = pick.below(d);
        Tensor lp = state.logits, lm = state.logits;
        lp.data[j] += h;
        lm.data[j] -= h;
        const double fd = (loss_at(lp) - loss_at(lm)) / (2 * h);
        if (std::abs(gx.data[j]) > 1e-8) {
            CHECK(std::abs(gx.data[j] - fd) / std::abs(gx.data[j]) <= 1e-4);
            ++checked;
        } else {
            CHECK(std::abs(gx.data[j] - fd) <= 1e-8);
        }
    }
    CHECK(checked >= 30);
}

TEST_CASE("deploy mask") {
    MaskState state(6, 0.5, Rng(41));
    const Tensor soft = deploy_mask(state);
    for (double v : soft.data) CHECK(v == 0.5);  // zero logits

    // rescale with the all-0.5 mask leaves tau unchanged: 0.5 / mean(0.5) = 1
    ArchSpec synth{5, {}, 1};
    REQUIRE(synth.param_count() == 6);
    Rng rng(42);
    Tensor flat({6}, 0.0);
    for (double& v : flat.data) v = rng.normal(0.0, 1.0);
    const TaskVector tau{synth, flat, "t"};
    const TaskVector out = rescale(tau, soft);
    CHECK(out.flat.data == flat.data);

    // a strongly negative logit sends that parameter back to theta_pre
    state.logits.data[2] = -40.0;
    const Tensor p = deploy_mask(state);
    CHECK(p.data[2] <= 1e-12);

    // hard mode agrees with soft when probabilities saturate
    MaskState sat(4, 0.5, Rng(43));
    sat.logits = Tensor({4}, {30.0, -30.0, 25.0, -25.0});
    const Tensor hard = deploy_mask(sat, true);
    const Tensor softsat = deploy_mask(sat, false);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(std::abs(hard.data[j] - softsat.data[j]) <= 1e-10);
        CHECK((hard.data[j] == 0.0 || hard.data[j] == 1.0));
    }
}
