#pragma once

#include <functional>
#include <vector>

#include "dam/mask.hpp"
#include "dam/merge.hpp"
#include "dam/nn.hpp"

namespace dam {

enum class LambdaRule {
    task_arithmetic,        // fixed lambda, not optimizable
    adamerging_task_wise,   // optimizable, one lambda per task
    adamerging_layer_wise,  // optimizable, one lambda per task and layer
};

struct DamConfig {
    std::size_t epochs = 300;
    double eta1 = 0.01;  // merging coefficients
    double eta2 = 10.0;  // perturbations
    double eta3 = 10.0;  // mask logits
    double alpha = 10.0;
    double xi = 2.0;  // L1 bound on each perturbation
    double temperature = 0.5;
    std::size_t batch_size = 64;
    LambdaRule lambda_rule = LambdaRule::adamerging_layer_wise;
    double lambda_init = 0.3;
    std::uint64_t seed = 0;
    bool warm_start_lambda = false;  // carry lambda across epochs instead of re-initializing
    bool persist_delta = false;      // carry perturbations across epochs instead of resetting
    bool hard_deploy_mask = false;

    void validate() const;
};

struct EpochTrace {
    double clean_entropy_sum = 0.0;      // sum_i l_i on the fresh batches
    double perturbed_entropy_sum = 0.0;  // sum_i l_i^pert on the fresh batches
    double mask_mean_prob = 0.0;         // mean sigmoid(x) after the update
};

struct DamResult {
    MaskState mask;
    MergeCoefficients coefficients;
    std::vector<Tensor> perturbations;  // one [input_dim] vector per task
    std::vector<EpochTrace> trace;
    ParamVector merged;  // deployed model: soft (or hard) mask + final lambda
};

// Uniform scaling delta * min(1, xi / ||delta||_1); direction preserved.
Tensor clip_l1(const Tensor& delta, double xi);

// clamp(x + delta, 0, 1) applied row-wise with a shared delta.
Tensor add_perturbation(const Tensor& batch, const Tensor& delta);

// Universal perturbation for one model: iterated entropy descent in input
// space under the L1 clip, batches drawn from the unlabeled pool. run_dam
// performs exactly one such step per epoch.
Tensor synthesize_perturbation(const ParamVector& model, const Tensor& pool,
                               std::size_t steps, double eta, double xi,
                               std::size_t batch_size, Rng& rng);

// The full bi-level defense-aware merging loop; pools hold unlabeled inputs
// per task.
DamResult run_dam(const ParamVector& pre, const std::vector<TaskVector>& taus,
                  const std::vector<Tensor>& unlabeled_pools, const DamConfig& cfg);

struct SweepPoint {
    double alpha = 0.0;
    double acc_avg = 0.0;
    double asr_avg = 0.0;
    bool non_dominated = false;
};

// Runs run_dam once per alpha with identical seeds and data; evaluate maps a
// merged model to (acc_avg, asr_avg). Marks the non-dominated points.
std::vector<SweepPoint> sweep_alpha(
    const ParamVector& pre, const std::vector<TaskVector>& taus,
    const std::vector<Tensor>& unlabeled_pools, const DamConfig& base_cfg,
    const std::vector<double>& alphas,
    const std::function<std::pair<double, double>(const ParamVector&)>& evaluate);

void mark_non_dominated(std::vector<SweepPoint>& points);

}  // namespace dam
