#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dam/tensor.hpp"

namespace dam {

// Fixed-architecture ReLU MLP classifier. The flat parameter layout is a
// contract shared with checkpointing, merging and mask training:
// layer 0 weights row-major [out x in], layer 0 bias, layer 1 weights, ...
struct ArchSpec {
    std::size_t input_dim = 196;
    std::vector<std::size_t> hidden = {64, 64};
    std::size_t num_classes = 8;

    std::size_t num_layers() const { return hidden.size() + 1; }
    // [input_dim, hidden..., num_classes]
    std::vector<std::size_t> layer_dims() const;
    std::size_t param_count() const;

    struct Segment {
        std::size_t offset;
        std::size_t length;  // weights + bias of one linear layer
        std::size_t in_dim;
        std::size_t out_dim;
    };
    std::vector<Segment> segments() const;

    bool operator==(const ArchSpec& other) const = default;
    std::string to_string() const;
};

struct ParamVector {
    ArchSpec arch;
    Tensor flat;  // length arch.param_count()

    ParamVector() = default;
    ParamVector(ArchSpec a, Tensor f);
};

// He-style normal init for weights, zero biases.
ParamVector init_params(const ArchSpec& arch, Rng& rng);

enum class LossKind { cross_entropy, entropy };

Tensor forward(const ParamVector& params, const Tensor& batch);

// Mean per-sample prediction entropy, in [0, log C].
double entropy_loss(const ParamVector& params, const Tensor& batch);
// Mean negative log-likelihood of the true class.
double cross_entropy_loss(const ParamVector& params, const Tensor& batch,
                          const std::vector<int>& labels);

struct LossGrad {
    double loss = 0.0;
    Tensor grad_params;          // [d], filled when wanted
    Tensor grad_input;           // [B x input_dim], filled when wanted
};

// Analytic backprop for either loss; gradients follow the canonical flat
// order. ReLU subgradient at exactly 0 is taken as 0.
LossGrad loss_with_grads(const ParamVector& params, const Tensor& batch, LossKind kind,
                         const std::vector<int>* labels, bool want_param_grad,
                         bool want_input_grad);

Tensor grad_params(const ParamVector& params, const Tensor& batch, LossKind kind,
                   const std::vector<int>* labels = nullptr);
Tensor grad_input(const ParamVector& params, const Tensor& batch, LossKind kind,
                  const std::vector<int>* labels = nullptr);

// Argmax class per sample, ties to the lowest index.
std::vector<int> predict(const ParamVector& params, const Tensor& batch);

}  // namespace dam
