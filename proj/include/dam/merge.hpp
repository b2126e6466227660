#pragma once

#include <string>
#include <vector>

#include "dam/nn.hpp"
#include "dam/tensor.hpp"

namespace dam {

// Per-task parameter delta tau = theta_task - theta_pre, flat layout.
struct TaskVector {
    ArchSpec arch;
    Tensor flat;
    std::string source_task;
};

enum class Granularity { task_wise, layer_wise };

// Merging coefficients, one per task (task_wise) or one per task and layer
// (layer_wise). Values are clamped to [0,1] when applied.
struct MergeCoefficients {
    Granularity granularity = Granularity::task_wise;
    std::size_t n_tasks = 0;
    std::size_t n_layers = 0;
    std::vector<double> values;  // n_tasks or n_tasks * n_layers

    static MergeCoefficients constant(Granularity g, std::size_t n_tasks, std::size_t n_layers,
                                      double value);
    double at(std::size_t task) const;
    double at(std::size_t task, std::size_t layer) const;
    double applied(std::size_t task, std::size_t layer) const;  // clamped to [0,1]
};

TaskVector task_vector(const ParamVector& model, const ParamVector& pre,
                       const std::string& source_task = "");

ParamVector apply_task_vector(const ParamVector& pre, const TaskVector& tau, double lambda = 1.0);

// theta_pre + sum_i lambda_i * tau_i, layer-wise when requested. Summation
// order is task index order.
ParamVector merge_with_coefficients(const ParamVector& pre, const std::vector<TaskVector>& taus,
                                    const MergeCoefficients& coeffs);

// Elementwise mean of the full model weights.
ParamVector merge_weight_average(const std::vector<ParamVector>& models);

// Trim to the top ceil(k*d) magnitudes per task vector (ties by lower index),
// elect the per-coordinate sign of the kept sum, average the kept values that
// agree with it, and add the result scaled by lambda.
ParamVector merge_ties(const ParamVector& pre, const std::vector<TaskVector>& taus,
                       double density_k, double lambda);

// Diagonal empirical Fisher weighting using each model's own argmax
// predictions as pseudo-labels; merged = sum (F_i+eps) theta_i / sum (F_i+eps).
ParamVector merge_fisher(const std::vector<ParamVector>& models,
                         const std::vector<Tensor>& probe_batches, double epsilon = 1e-8);

// Gradient of sum_i entropy(merged, batch_i) with respect to the merging
// coefficients (inner products of the parameter gradient with each task
// vector or layer segment).
std::vector<double> coefficient_gradient(const ParamVector& pre,
                                         const std::vector<TaskVector>& taus,
                                         const std::vector<Tensor>& batches,
                                         const MergeCoefficients& coeffs);

double total_entropy(const ParamVector& merged, const std::vector<Tensor>& batches);

// AdaMerging: projected gradient descent of the summed test entropy over the
// coefficients, starting from lambda = init everywhere. Batches are drawn per
// task and step from the unlabeled pools.
MergeCoefficients optimize_coefficients(const ParamVector& pre,
                                        const std::vector<TaskVector>& taus,
                                        const std::vector<Tensor>& unlabeled_pools,
                                        Granularity granularity, double lr, std::size_t steps,
                                        std::size_t batch_size, Rng& rng,
                                        double lambda_init = 0.3);

Tensor draw_batch(const Tensor& pool, std::size_t batch_size, Rng& rng);

}  // namespace dam
