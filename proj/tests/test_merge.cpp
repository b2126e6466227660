#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dam/merge.hpp"

using namespace dam;

namespace {

// Smallest possible arch: one input, one class -> d = 2 (weight + bias).
const ArchSpec kTiny{1, {}, 1};

ParamVector tiny(double w, double b) { return ParamVector(kTiny, Tensor({2}, {w, b})); }

ParamVector random_model(const ArchSpec& arch, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    ParamVector p = init_params(arch, rng);
    for (double& v : p.flat.data) v *= scale;
    return p;
}

// Independent brute-force ties oracle: full stable sort for the trim, then
// sign election and the disjoint mean accumulated in task order.
Tensor ties_oracle(const Tensor& pre, const std::vector<Tensor>& taus, double k,
                   double lambda) {
    const std::size_t d = pre.numel();
    const std::size_t keep =
        static_cast<std::size_t>(std::ceil(k * static_cast<double>(d)));
    std::vector<std::vector<double>> kept(taus.size(), std::vector<double>(d, 0.0));
    for (std::size_t m = 0; m < taus.size(); ++m) {
        std::vector<std::size_t> order(d);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return std::abs(taus[m].data[a]) > std::abs(taus[m].data[b]);
        });
        for (std::size_t i = 0; i < keep; ++i) kept[m][order[i]] = taus[m].data[order[i]];
    }
    Tensor out = pre;
    for (std::size_t j = 0; j < d; ++j) {
        double sum = 0.0;
        for (std::size_t m = 0; m < taus.size(); ++m) sum += kept[m][j];
        if (sum == 0.0) continue;
        const double sign = sum > 0.0 ? 1.0 : -1.0;
        double acc = 0.0;
        std::size_t cnt = 0;
        for (std::size_t m = 0; m < taus.size(); ++m) {
            if (kept[m][j] != 0.0 && kept[m][j] * sign > 0.0) {
                acc += kept[m][j];
                ++cnt;
            }
        }
        if (cnt) out.data[j] += lambda * acc / static_cast<double>(cnt);
    }
    return out;
}

}  // namespace

TEST_CASE("task vectors difference and reconstruction") {
    const ParamVector pre = tiny(0, 0);
    const ParamVector model = tiny(1, -2);
    const TaskVector tau = task_vector(model, pre, "t");
    CHECK(tau.flat.data == std::vector<double>{1, -2});

    const TaskVector zero = task_vector(pre, pre);
    CHECK(zero.flat.data == std::vector<double>{0, 0});

    const ParamVector rebuilt = apply_task_vector(pre, tau);
    CHECK(rebuilt.flat.data == model.flat.data);  // bit exact

    ArchSpec other{2, {}, 1};
    Rng r(1);
    CHECK_THROWS_AS(task_vector(init_params(other, r), pre), std::invalid_argument);
}

TEST_CASE("coefficient merging") {
    const ParamVector pre = tiny(0, 0);
    const TaskVector t1{kTiny, Tensor({2}, {1, 0}), "a"};
    const TaskVector t2{kTiny, Tensor({2}, {0, 2}), "b"};

    auto coeffs = MergeCoefficients::constant(Granularity::task_wise, 2, 1, 0.3);
    const ParamVector merged = merge_with_coefficients(pre, {t1, t2}, coeffs);
    CHECK(merged.flat.data[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(merged.flat.data[1] == doctest::Approx(0.6).epsilon(1e-15));

    // lambda = 0 returns theta_pre bit-exactly
    const ParamVector base = tiny(0.125, -7.5);
    auto zero = MergeCoefficients::constant(Granularity::task_wise, 2, 1, 0.0);
    CHECK(merge_with_coefficients(base, {t1, t2}, zero).flat.data == base.flat.data);

    // n = 1 with lambda = 1 reconstructs the model exactly
    auto one = MergeCoefficients::constant(Granularity::task_wise, 1, 1, 1.0);
    CHECK(merge_with_coefficients(pre, {t1}, one).flat.data ==
          std::vector<double>{1, 0});

    // values clamp to [0,1] on apply
    auto big = MergeCoefficients::constant(Granularity::task_wise, 1, 1, 5.0);
    CHECK(merge_with_coefficients(pre, {t1}, big).flat.data ==
          std::vector<double>{1, 0});
}

TEST_CASE("layer-wise merging scales per segment") {
    ArchSpec arch{2, {2}, 2};  // two layers
    const std::size_t d = arch.param_count();
    ParamVector pre(arch, Tensor({d}, 0.0));
    TaskVector tau{arch, Tensor({d}, 1.0), "a"};
    MergeCoefficients coeffs = MergeCoefficients::constant(Granularity::layer_wise, 1, 2, 0.0);
    coeffs.values = {0.5, 1.0};  // layer 0 at half strength
    const ParamVector merged = merge_with_coefficients(pre, {tau}, coeffs);
    const auto segs = arch.segments();
    for (std::size_t j = 0; j < segs[0].length; ++j) CHECK(merged.flat.data[j] == 0.5);
    for (std::size_t j = segs[1].offset; j < d; ++j) CHECK(merged.flat.data[j] == 1.0);
}

TEST_CASE("weight average") {
    const ParamVector a = tiny(1, 3), b = tiny(3, 5);
    CHECK(merge_weight_average({a, b}).flat.data == std::vector<double>{2, 4});

    ArchSpec arch{3, {4}, 2};
    const ParamVector m = random_model(arch, 7);
    const ParamVector avg = merge_weight_average({m, m, m});
    for (std::size_t j = 0; j < m.flat.numel(); ++j) {
        CHECK(std::abs(avg.flat.data[j] - m.flat.data[j]) <= 1e-12);
    }

    // equivalence with coefficients(1/n) on task vectors
    const ParamVector pre = random_model(arch, 8);
    std::vector<ParamVector> models;
    std::vector<TaskVector> taus;
    for (std::uint64_t s = 0; s < 3; ++s) {
        models.push_back(random_model(arch, 20 + s));
        taus.push_back(task_vector(models.back(), pre));
    }
    const ParamVector wa = merge_weight_average(models);
    // mean(theta_i) = pre + (1/n) sum tau_i
    auto third = MergeCoefficients::constant(Granularity::task_wise, 3, 2, 1.0 / 3.0);
    const ParamVector mc = merge_with_coefficients(pre, taus, third);
    for (std::size_t j = 0; j < wa.flat.numel(); ++j) {
        CHECK(std::abs(wa.flat.data[j] - mc.flat.data[j]) <= 1e-12);
    }
}

TEST_CASE("ties-merging matches the hand case and reduces to task arithmetic") {
    // single task, k = 1: theta_pre + lambda tau
    const ParamVector pre = tiny(1, 1);
    const TaskVector tau{kTiny, Tensor({2}, {2, -4}), "a"};
    const ParamVector single = merge_ties(pre, {tau}, 1.0, 0.5);
    CHECK(single.flat.data == std::vector<double>{2, -1});

    // coordinate values {+2, -1, +1}: elected +, merged (2+1)/2 = 1.5
    const TaskVector ta{kTiny, Tensor({2}, {2, 0}), "a"};
    const TaskVector tb{kTiny, Tensor({2}, {-1, 0}), "b"};
    const TaskVector tc{kTiny, Tensor({2}, {1, 0}), "c"};
    const ParamVector zero = tiny(0, 0);
    const ParamVector elected = merge_ties(zero, {ta, tb, tc}, 1.0, 1.0);
    CHECK(elected.flat.data[0] == 1.5);

    CHECK_THROWS_AS(merge_ties(pre, {tau}, 0.0, 1.0), std::invalid_argument);
}

TEST_CASE("ties-merging equals the brute-force oracle on random instances") {
    Rng rng(404);
    int instances = 0;
    for (int trial = 0; trial < 200; ++trial) {
        // arch with d <= 16
        const std::size_t in = 1 + rng.below(3);
        const std::size_t out = 1 + rng.below(2);
        ArchSpec arch{in, {}, out};
        const std::size_t d = arch.param_count();
        if (d > 16) continue;
        const std::size_t n = 1 + rng.below(4);
        const double ks[3] = {0.25, 0.5, 1.0};
        const double k = ks[rng.below(3)];
        ParamVector pre(arch, Tensor({d}, 0.0));
        for (double& v : pre.flat.data) v = rng.normal(0.0, 1.0);
        std::vector<TaskVector> taus;
        std::vector<Tensor> raw;
        for (std::size_t m = 0; m < n; ++m) {
            Tensor t({d}, 0.0);
            for (double& v : t.data) {
                v = rng.normal(0.0, 1.0);
                if (rng.uniform01_open() < 0.2) v = 0.0;  // exercise zero entries
            }
            raw.push_back(t);
            taus.push_back({arch, t, "m"});
        }
        const ParamVector got = merge_ties(pre, taus, k, 0.7);
        const Tensor want = ties_oracle(pre.flat, raw, k, 0.7);
        CHECK(got.flat.data == want.data);  // exact
        ++instances;
    }
    CHECK(instances >= 150);
}

TEST_CASE("fisher merging weighted-mean behavior") {
    ArchSpec arch{4, {6}, 3};
    const ParamVector m = random_model(arch, 55);
    Rng rng(56);
    Tensor probe({8, 4}, 0.0);
    for (double& v : probe.data) v = rng.uniform01_open();

    // identical models merge to themselves
    const ParamVector same = merge_fisher({m, m}, {probe, probe});
    for (std::size_t j = 0; j < m.flat.numel(); ++j) {
        CHECK(std::abs(same.flat.data[j] - m.flat.data[j]) <= 1e-9);
    }

    // saturated model: per-sample gradients vanish, the epsilon fallback
    // yields the plain average
    ParamVector sat(arch, Tensor({arch.param_count()}, 0.0));
    sat.flat.data[arch.param_count() - 3] = 900.0;  // last-layer bias, class 0
    ParamVector sat2 = sat;
    for (double& v : sat2.flat.data) v *= 2.0;
    const ParamVector fallback = merge_fisher({sat, sat2}, {probe, probe});
    for (std::size_t j = 0; j < sat.flat.numel(); ++j) {
        const double avg = 0.5 * (sat.flat.data[j] + sat2.flat.data[j]);
        CHECK(fallback.flat.data[j] == doctest::Approx(avg).epsilon(1e-9));
    }

    // merged coordinates always sit inside the models' min/max envelope
    const ParamVector other = random_model(arch, 57);
    const ParamVector merged = merge_fisher({m, other}, {probe, probe});
    for (std::size_t j = 0; j < m.flat.numel(); ++j) {
        const double lo = std::min(m.flat.data[j], other.flat.data[j]);
        const double hi = std::max(m.flat.data[j], other.flat.data[j]);
        CHECK(merged.flat.data[j] >= lo - 1e-12);
        CHECK(merged.flat.data[j] <= hi + 1e-12);
    }

    CHECK_THROWS_AS(merge_fisher({m}, {Tensor({0, 4}, 0.0)}), std::invalid_argument);
}

TEST_CASE("coefficient gradient matches finite differences") {
    ArchSpec arch{3, {5}, 3};
    const ParamVector pre = random_model(arch, 61);
    std::vector<TaskVector> taus;
    std::vector<Tensor> batches;
    Rng rng(62);
    for (int i = 0; i < 2; ++i) {
        taus.push_back(task_vector(random_model(arch, 70 + i), pre, "t"));
        Tensor b({6, 3}, 0.0);
        for (double& v : b.data) v = rng.uniform01_open();
        batches.push_back(b);
    }
    for (Granularity g : {Granularity::task_wise, Granularity::layer_wise}) {
        auto coeffs = MergeCoefficients::constant(g, 2, 2, 0.3);
        const auto grad = coefficient_gradient(pre, taus, batches, coeffs);
        const double h = 1e-5;
        for (std::size_t i = 0; i < coeffs.values.size(); ++i) {
            auto at = [&](double v) {
                auto c = coeffs;
                c.values[i] = v;
                return total_entropy(merge_with_coefficients(pre, taus, c), batches);
            };
            const double fd = (at(0.3 + h) - at(0.3 - h)) / (2 * h);
            if (std::abs(grad[i]) > 1e-8) {
                CHECK(std::abs(grad[i] - fd) / std::abs(grad[i]) <= 1e-4);
            } else {
                CHECK(std::abs(grad[i] - fd) <= 1e-7);
            }
        }
    }
}

TEST_CASE("coefficient optimization descends and respects steps=0") {
    ArchSpec arch{3, {5}, 3};
    const ParamVector pre = random_model(arch, 81);
    std::vector<TaskVector> taus;
    std::vector<Tensor> pools;
    Rng rng(82);
    for (int i = 0; i < 2; ++i) {
        taus.push_back(task_vector(random_model(arch, 90 + i), pre, "t"));
        Tensor pool({12, 3}, 0.0);
        for (double& v : pool.data) v = rng.uniform01_open();
        pools.push_back(pool);
    }

    Rng opt_rng(83);
    const auto init = optimize_coefficients(pre, taus, pools, Granularity::layer_wise, 0.01, 0,
                                            12, opt_rng);
    for (double v : init.values) CHECK(v == 0.3);

    // full-pool batches and a small lr give a guaranteed descent direction
    Rng opt_rng2(84);
    const auto opt = optimize_coefficients(pre, taus, pools, Granularity::layer_wise, 1e-3, 20,
                                           12, opt_rng2);
    const double before =
        total_entropy(merge_with_coefficients(pre, taus, init), pools);
    const double after = total_entropy(merge_with_coefficients(pre, taus, opt), pools);
    CHECK(after <= before + 1e-9);
}

TEST_CASE("lambda=0 merges predict exactly like the pre-trained model") {
    ArchSpec arch{4, {6}, 3};
    const ParamVector pre = random_model(arch, 101);
    std::vector<TaskVector> taus;
    for (int i = 0; i < 3; ++i) taus.push_back(task_vector(random_model(arch, 110 + i), pre));
    auto zero = MergeCoefficients::constant(Granularity::layer_wise, 3, 2, 0.0);
    const ParamVector merged = merge_with_coefficients(pre, taus, zero);
    Rng rng(102);
    Tensor batch({10, 4}, 0.0);
    for (double& v : batch.data) v = rng.uniform01_open();
    CHECK(predict(merged, batch) == predict(pre, batch));
}
