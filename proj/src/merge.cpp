#include "dam/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dam {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

void check_taus(const std::vector<TaskVector>& taus) {
    if (taus.empty()) throw std::invalid_argument("merge: no task vectors");
    for (const auto& t : taus) {
        if (!(t.arch == taus.front().arch)) {
            throw std::invalid_argument("merge: task vector arch mismatch");
        }
    }
}

}  // namespace

MergeCoefficients MergeCoefficients::constant(Granularity g, std::size_t n_tasks,
                                              std::size_t n_layers, double value) {
    MergeCoefficients c;
    c.granularity = g;
    c.n_tasks = n_tasks;
    c.n_layers = n_layers;
    c.values.assign(g == Granularity::task_wise ? n_tasks : n_tasks * n_layers, value);
    return c;
}

double MergeCoefficients::at(std::size_t task) const {
    if (granularity != Granularity::task_wise) {
        throw std::invalid_argument("MergeCoefficients::at(task): layer_wise coefficients");
    }
    return values[task];
}

double MergeCoefficients::at(std::size_t task, std::size_t layer) const {
    return granularity == Granularity::task_wise ? values[task]
                                                 : values[task * n_layers + layer];
}

double MergeCoefficients::applied(std::size_t task, std::size_t layer) const {
    return clamp01(at(task, layer));
}

TaskVector task_vector(const ParamVector& model, const ParamVector& pre,
                       const std::string& source_task) {
    if (!(model.arch == pre.arch)) {
        throw std::invalid_argument("task_vector: arch mismatch");
    }
    return TaskVector{model.arch, sub(model.flat, pre.flat), source_task};
}

ParamVector apply_task_vector(const ParamVector& pre, const TaskVector& tau, double lambda) {
    if (!(tau.arch == pre.arch)) {
        throw std::invalid_argument("apply_task_vector: arch mismatch");
    }
    return ParamVector(pre.arch, add(pre.flat, scale(tau.flat, lambda)));
}

ParamVector merge_with_coefficients(const ParamVector& pre, const std::vector<TaskVector>& taus,
                                    const MergeCoefficients& coeffs) {
    check_taus(taus);
    if (!(taus.front().arch == pre.arch)) {
        throw std::invalid_argument("merge_with_coefficients: arch mismatch with pre");
    }
    const auto segs = pre.arch.segments();
    if (coeffs.n_tasks != taus.size() ||
        (coeffs.granularity == Granularity::layer_wise && coeffs.n_layers != segs.size())) {
        throw std::invalid_argument("merge_with_coefficients: coefficient shape mismatch");
    }
    Tensor flat = pre.flat;
    for (std::size_t i = 0; i < taus.size(); ++i) {
        for (std::size_t l = 0; l < segs.size(); ++l) {
            const double lam = coeffs.applied(i, l);
            const std::size_t begin = segs[l].offset, end = begin + segs[l].length;
            for (std::size_t j = begin; j < end; ++j) {
                flat.data[j] += lam * taus[i].flat.data[j];
            }
        }
    }
    return ParamVector(pre.arch, std::move(flat));
}

ParamVector merge_weight_average(const std::vector<ParamVector>& models) {
    if (models.empty()) throw std::invalid_argument("merge_weight_average: no models");
    for (const auto& m : models) {
        if (!(m.arch == models.front().arch)) {
            throw std::invalid_argument("merge_weight_average: arch mismatch");
        }
    }
    Tensor flat({models.front().flat.numel()}, 0.0);
    for (std::size_t j = 0; j < flat.numel(); ++j) {
        double s = 0.0;
        for (const auto& m : models) s += m.flat.data[j];
        flat.data[j] = s / static_cast<double>(models.size());
    }
    return ParamVector(models.front().arch, std::move(flat));
}

ParamVector merge_ties(const ParamVector& pre, const std::vector<TaskVector>& taus,
                       double density_k, double lambda) {
    check_taus(taus);
    if (!(density_k > 0.0 && density_k <= 1.0)) {
        throw std::invalid_argument("merge_ties: density k must lie in (0,1]");
    }
    const std::size_t d = pre.flat.numel();
    const std::size_t keep = static_cast<std::size_t>(
        std::ceil(density_k * static_cast<double>(d)));

    // Trim: keep the top-`keep` magnitudes per task vector, ties by lower index.
    std::vector<Tensor> trimmed;
    trimmed.reserve(taus.size());
    for (const auto& tau : taus) {
        std::vector<std::size_t> idx(d);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::nth_element(idx.begin(), idx.begin() + (keep - 1), idx.end(),
                         [&](std::size_t a, std::size_t b) {
                             const double ma = std::abs(tau.flat.data[a]);
                             const double mb = std::abs(tau.flat.data[b]);
                             if (ma != mb) return ma > mb;
                             return a < b;
                         });
        Tensor t({d}, 0.0);
        for (std::size_t i = 0; i < keep; ++i) t.data[idx[i]] = tau.flat.data[idx[i]];
        trimmed.push_back(std::move(t));
    }

    // Elect sign per coordinate, then disjoint mean over agreeing kept values.
    Tensor flat = pre.flat;
    for (std::size_t j = 0; j < d; ++j) {
        double sum = 0.0;
        for (const auto& t : trimmed) sum += t.data[j];
        if (sum == 0.0) continue;
        const double sign = sum > 0.0 ? 1.0 : -1.0;
        double acc = 0.0;
        std::size_t count = 0;
        for (const auto& t : trimmed) {
            const double v = t.data[j];
            if (v != 0.0 && v * sign > 0.0) {
                acc += v;
                ++count;
            }
        }
        if (count > 0) flat.data[j] += lambda * acc / static_cast<double>(count);
    }
    return ParamVector(pre.arch, std::move(flat));
}

ParamVector merge_fisher(const std::vector<ParamVector>& models,
                         const std::vector<Tensor>& probe_batches, double epsilon) {
    if (models.empty()) throw std::invalid_argument("merge_fisher: no models");
    if (probe_batches.size() != models.size()) {
        throw std::invalid_argument("merge_fisher: one probe batch per model required");
    }
    const std::size_t d = models.front().flat.numel();
    std::vector<Tensor> fisher(models.size(), Tensor({d}, 0.0));
    for (std::size_t m = 0; m < models.size(); ++m) {
        const Tensor& probe = probe_batches[m];
        if (probe.numel() == 0 || probe.rows() == 0) {
            throw std::invalid_argument("merge_fisher: empty probe batch");
        }
        const std::size_t B = probe.rows(), din = probe.cols();
        const std::vector<int> pseudo = predict(models[m], probe);
        for (std::size_t s = 0; s < B; ++s) {
            Tensor one({1, din},
                       std::vector<double>(probe.data.begin() + s * din,
                                           probe.data.begin() + (s + 1) * din));
            const std::vector<int> label = {pseudo[s]};
            const Tensor g =
                grad_params(models[m], one, LossKind::cross_entropy, &label);
            for (std::size_t j = 0; j < d; ++j) {
                fisher[m].data[j] += g.data[j] * g.data[j];
            }
        }
        for (double& v : fisher[m].data) v /= static_cast<double>(B);
    }
    Tensor flat({d}, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double num = 0.0, den = 0.0;
        for (std::size_t m = 0; m < models.size(); ++m) {
            const double w = fisher[m].data[j] + epsilon;
            num += w * models[m].flat.data[j];
            den += w;
        }
        flat.data[j] = num / den;
    }
    return ParamVector(models.front().arch, std::move(flat));
}

double total_entropy(const ParamVector& merged, const std::vector<Tensor>& batches) {
    double total = 0.0;
    for (const auto& b : batches) total += entropy_loss(merged, b);
    return total;
}

std::vector<double> coefficient_gradient(const ParamVector& pre,
                                         const std::vector<TaskVector>& taus,
                                         const std::vector<Tensor>& batches,
                                         const MergeCoefficients& coeffs) {
    if (batches.size() != taus.size()) {
        throw std::invalid_argument("coefficient_gradient: one batch per task required");
    }
    const ParamVector merged = merge_with_coefficients(pre, taus, coeffs);
    Tensor gsum({pre.flat.numel()}, 0.0);
    for (const auto& b : batches) {
        const Tensor g = grad_params(merged, b, LossKind::entropy);
        for (std::size_t j = 0; j < gsum.numel(); ++j) gsum.data[j] += g.data[j];
    }
    const auto segs = pre.arch.segments();
    std::vector<double> grad(coeffs.values.size(), 0.0);
    for (std::size_t i = 0; i < taus.size(); ++i) {
        if (coeffs.granularity == Granularity::task_wise) {
            double acc = 0.0;
            for (std::size_t j = 0; j < gsum.numel(); ++j) {
                acc += gsum.data[j] * taus[i].flat.data[j];
            }
            // Clamp pass-through: no gradient once the applied value saturates.
            grad[i] = (coeffs.values[i] < 0.0 || coeffs.values[i] > 1.0) ? 0.0 : acc;
        } else {
            for (std::size_t l = 0; l < segs.size(); ++l) {
                double acc = 0.0;
                const std::size_t begin = segs[l].offset, end = begin + segs[l].length;
                for (std::size_t j = begin; j < end; ++j) {
                    acc += gsum.data[j] * taus[i].flat.data[j];
                }
                const double v = coeffs.values[i * segs.size() + l];
                grad[i * segs.size() + l] = (v < 0.0 || v > 1.0) ? 0.0 : acc;
            }
        }
    }
    return grad;
}

Tensor draw_batch(const Tensor& pool, std::size_t batch_size, Rng& rng) {
    const std::size_t n = pool.rows(), d = pool.cols();
    const std::size_t k = std::min(batch_size, n);
    const std::vector<std::size_t> idx = sample_without_replacement(rng, n, k);
    Tensor batch({k, d}, 0.0);
    for (std::size_t b = 0; b < k; ++b) {
        std::copy(pool.data.begin() + idx[b] * d, pool.data.begin() + (idx[b] + 1) * d,
                  batch.data.begin() + b * d);
    }
    return batch;
}

MergeCoefficients optimize_coefficients(const ParamVector& pre,
                                        const std::vector<TaskVector>& taus,
                                        const std::vector<Tensor>& unlabeled_pools,
                                        Granularity granularity, double lr, std::size_t steps,
                                        std::size_t batch_size, Rng& rng, double lambda_init) {
    check_taus(taus);
    if (unlabeled_pools.size() != taus.size()) {
        throw std::invalid_argument("optimize_coefficients: one pool per task required");
    }
    const std::size_t n_layers = pre.arch.segments().size();
    MergeCoefficients coeffs =
        MergeCoefficients::constant(granularity, taus.size(), n_layers, lambda_init);
    for (std::size_t step = 0; step < steps; ++step) {
        std::vector<Tensor> batches;
        batches.reserve(taus.size());
        for (const auto& pool : unlabeled_pools) {
            batches.push_back(draw_batch(pool, batch_size, rng));
        }
        const std::vector<double> grad = coefficient_gradient(pre, taus, batches, coeffs);
        for (std::size_t i = 0; i < coeffs.values.size(); ++i) {
            coeffs.values[i] = clamp01(coeffs.values[i] - lr * grad[i]);
        }
    }
    return coeffs;
}

}  // namespace dam
