#include "dam/damopt.hpp"

#include <cmath>
#include <stdexcept>

namespace dam {

namespace {

constexpr std::uint64_t kMaskStream = 0x6d61736bULL;
constexpr std::uint64_t kBatchStream = 0x62617463ULL;

// d(mean entropy)/d(delta): per-sample input gradients summed over the batch,
// zeroed where the clamp saturates.
Tensor perturbation_gradient(const ParamVector& model, const Tensor& batch,
                             const Tensor& delta) {
    const Tensor perturbed = add_perturbation(batch, delta);
    const Tensor gin = grad_input(model, perturbed, LossKind::entropy);
    const std::size_t B = batch.rows(), d = batch.cols();
    Tensor g({d}, 0.0);
    for (std::size_t s = 0; s < B; ++s) {
        for (std::size_t j = 0; j < d; ++j) {
            const double z = batch.data[s * d + j] + delta.data[j];
            if (z > 0.0 && z < 1.0) g.data[j] += gin.data[s * d + j];
        }
    }
    return g;
}

bool lambda_optimizable(LambdaRule rule) { return rule != LambdaRule::task_arithmetic; }

Granularity rule_granularity(LambdaRule rule) {
    return rule == LambdaRule::adamerging_layer_wise ? Granularity::layer_wise
                                                     : Granularity::task_wise;
}

}  // namespace

void DamConfig::validate() const {
    if (eta1 <= 0.0 || eta2 <= 0.0 || eta3 <= 0.0) {
        throw std::invalid_argument("dam: learning rates must be positive");
    }
    if (alpha < 0.0) throw std::invalid_argument("dam: alpha must be >= 0");
    if (xi <= 0.0) throw std::invalid_argument("dam: xi must be positive");
    if (temperature <= 0.0) throw std::invalid_argument("dam: temperature must be positive");
    if (batch_size == 0) throw std::invalid_argument("dam: batch_size must be positive");
}

Tensor clip_l1(const Tensor& delta, double xi) {
    if (xi <= 0.0) throw std::invalid_argument("clip_l1: xi must be positive");
    const double norm = delta.numel() == 0 ? 0.0 : l1_norm(delta);
    if (norm <= xi) return delta;
    return scale(delta, xi / norm);
}

Tensor add_perturbation(const Tensor& batch, const Tensor& delta) {
    const std::size_t B = batch.rows(), d = batch.cols();
    if (delta.numel() != d) {
        throw std::invalid_argument("add_perturbation: delta length mismatch");
    }
    Tensor out = batch;
    for (std::size_t s = 0; s < B; ++s) {
        for (std::size_t j = 0; j < d; ++j) {
            double z = out.data[s * d + j] + delta.data[j];
            out.data[s * d + j] = z < 0.0 ? 0.0 : (z > 1.0 ? 1.0 : z);
        }
    }
    return out;
}

Tensor synthesize_perturbation(const ParamVector& model, const Tensor& pool,
                               std::size_t steps, double eta, double xi,
                               std::size_t batch_size, Rng& rng) {
    Tensor delta({pool.cols()}, 0.0);
    for (std::size_t it = 0; it < steps; ++it) {
        const Tensor batch = draw_batch(pool, batch_size, rng);
        const Tensor g = perturbation_gradient(model, batch, delta);
        for (std::size_t j = 0; j < delta.numel(); ++j) delta.data[j] -= eta * g.data[j];
        delta = clip_l1(delta, xi);
    }
    return delta;
}

DamResult run_dam(const ParamVector& pre, const std::vector<TaskVector>& taus,
                  const std::vector<Tensor>& unlabeled_pools, const DamConfig& cfg) {
    cfg.validate();
    if (taus.empty()) throw std::invalid_argument("run_dam: no task vectors");
    if (unlabeled_pools.size() != taus.size()) {
        throw std::invalid_argument("run_dam: one unlabeled pool per task required");
    }
    const std::size_t n = taus.size();
    const std::size_t d = pre.flat.numel();
    const std::size_t d_in = pre.arch.input_dim;
    const auto segs = pre.arch.segments();
    const Granularity gran = rule_granularity(cfg.lambda_rule);
    const bool optimizable = lambda_optimizable(cfg.lambda_rule);

    MaskState mask(d, cfg.temperature, Rng(cfg.seed).derive(kMaskStream));
    Rng batch_rng = Rng(cfg.seed).derive(kBatchStream);

    MergeCoefficients lambda =
        MergeCoefficients::constant(gran, n, segs.size(), cfg.lambda_init);
    std::vector<Tensor> deltas(n, Tensor({d_in}, 0.0));
    std::vector<EpochTrace> trace;
    trace.reserve(cfg.epochs);
    double first_epoch_clean = -1.0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (!cfg.persist_delta) {
            for (auto& dl : deltas) dl = Tensor({d_in}, 0.0);
        }
        const MaskSample ms = sample(mask);
        const double denom = mean(ms.m);  // frozen for this epoch's gradients
        std::vector<TaskVector> masked;
        masked.reserve(n);
        for (const auto& tau : taus) masked.push_back(rescale(tau, ms.m));

        if (!cfg.warm_start_lambda || epoch == 0) {
            lambda = MergeCoefficients::constant(gran, n, segs.size(), cfg.lambda_init);
        }
        ParamVector merged = merge_with_coefficients(pre, masked, lambda);

        if (optimizable) {
            std::vector<Tensor> batches;
            batches.reserve(n);
            for (std::size_t i = 0; i < n; ++i) {
                batches.push_back(draw_batch(unlabeled_pools[i], cfg.batch_size, batch_rng));
                deltas[i] = clip_l1(deltas[i], cfg.xi);
            }
            const std::vector<double> glam =
                coefficient_gradient(pre, masked, batches, lambda);
            for (std::size_t i = 0; i < lambda.values.size(); ++i) {
                lambda.values[i] -= cfg.eta1 * glam[i];
            }
            merged = merge_with_coefficients(pre, masked, lambda);
            // Adversarial trigger recovery: one entropy-descent step per task
            // against the re-merged model, then clip to keep the L1 invariant.
            for (std::size_t i = 0; i < n; ++i) {
                const Tensor g = perturbation_gradient(merged, batches[i], deltas[i]);
                for (std::size_t j = 0; j < d_in; ++j) {
                    deltas[i].data[j] -= cfg.eta2 * g.data[j];
                }
                deltas[i] = clip_l1(deltas[i], cfg.xi);
                if (l1_norm(deltas[i]) > cfg.xi * (1.0 + 1e-12) + 1e-12) {
                    throw std::runtime_error("run_dam: perturbation clip invariant violated");
                }
            }
        }

        // Fresh batches for the mask update.
        EpochTrace row;
        Tensor gtheta({d}, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const Tensor batch = draw_batch(unlabeled_pools[i], cfg.batch_size, batch_rng);
            const LossGrad clean =
                loss_with_grads(merged, batch, LossKind::entropy, nullptr, true, false);
            row.clean_entropy_sum += clean.loss;
            for (std::size_t j = 0; j < d; ++j) gtheta.data[j] += clean.grad_params.data[j];
            if (cfg.alpha > 0.0) {
                const Tensor perturbed = add_perturbation(batch, deltas[i]);
                const LossGrad pert =
                    loss_with_grads(merged, perturbed, LossKind::entropy, nullptr, true, false);
                row.perturbed_entropy_sum += pert.loss;
                for (std::size_t j = 0; j < d; ++j) {
                    gtheta.data[j] += cfg.alpha * pert.grad_params.data[j];
                }
            } else {
                row.perturbed_entropy_sum +=
                    entropy_loss(merged, add_perturbation(batch, deltas[i]));
            }
        }

        if (first_epoch_clean < 0.0) first_epoch_clean = row.clean_entropy_sum;
        if (row.clean_entropy_sum > 10.0 * first_epoch_clean) {
            throw std::runtime_error(
                "run_dam: diverged at epoch " + std::to_string(epoch) + " (clean entropy " +
                std::to_string(row.clean_entropy_sum) + " exceeds 10x epoch-1 value " +
                std::to_string(first_epoch_clean) + ")");
        }

        // Chain rule into the logits: dtheta_j/dm_j = sum_i lambda_i tau_ij / mean(m),
        // with the rescale denominator held constant.
        Tensor upstream({d}, 0.0);
        for (std::size_t l = 0; l < segs.size(); ++l) {
            const std::size_t begin = segs[l].offset, end = begin + segs[l].length;
            for (std::size_t i = 0; i < n; ++i) {
                const double lam = lambda.applied(i, l);
                if (lam == 0.0) continue;
                for (std::size_t j = begin; j < end; ++j) {
                    upstream.data[j] += lam * taus[i].flat.data[j];
                }
            }
        }
        for (std::size_t j = 0; j < d; ++j) {
            upstream.data[j] = gtheta.data[j] * upstream.data[j] / denom;
        }
        const Tensor gx = grad_logits(ms, mask, upstream);
        for (std::size_t j = 0; j < d; ++j) mask.logits.data[j] -= cfg.eta3 * gx.data[j];

        row.mask_mean_prob = mean(sigmoid(mask.logits));
        trace.push_back(row);
    }

    const Tensor p = deploy_mask(mask, cfg.hard_deploy_mask);
    std::vector<TaskVector> deployed;
    deployed.reserve(n);
    for (const auto& tau : taus) deployed.push_back(rescale(tau, p));
    ParamVector merged_final = merge_with_coefficients(pre, deployed, lambda);

    return DamResult{std::move(mask), std::move(lambda), std::move(deltas), std::move(trace),
                     std::move(merged_final)};
}

void mark_non_dominated(std::vector<SweepPoint>& points) {
    for (auto& p : points) {
        bool dominated = false;
        for (const auto& q : points) {
            if (&q == &p) continue;
            const bool weakly_better = q.acc_avg >= p.acc_avg && q.asr_avg <= p.asr_avg;
            const bool strictly = q.acc_avg > p.acc_avg || q.asr_avg < p.asr_avg;
            if (weakly_better && strictly) {
                dominated = true;
                break;
            }
        }
        p.non_dominated = !dominated;
    }
}

std::vector<SweepPoint> sweep_alpha(
    const ParamVector& pre, const std::vector<TaskVector>& taus,
    const std::vector<Tensor>& unlabeled_pools, const DamConfig& base_cfg,
    const std::vector<double>& alphas,
    const std::function<std::pair<double, double>(const ParamVector&)>& evaluate) {
    if (alphas.empty()) throw std::invalid_argument("sweep_alpha: no alpha values");
    std::vector<SweepPoint> points;
    points.reserve(alphas.size());
    for (double alpha : alphas) {
        DamConfig cfg = base_cfg;
        cfg.alpha = alpha;
        const DamResult res = run_dam(pre, taus, unlabeled_pools, cfg);
        const auto [acc, asr] = evaluate(res.merged);
        points.push_back({alpha, acc, asr, false});
    }
    mark_non_dominated(points);
    return points;
}

}  // namespace dam
