#pragma once

#include "dam/merge.hpp"
#include "dam/tensor.hpp"

namespace dam {

// Concrete (logistic-noise) relaxation of a binary mask over parameter
// positions, shared across task vectors. Logits start at zero.
struct MaskState {
    Tensor logits;       // [d]
    double temperature;  // > 0
    Rng rng;

    MaskState(std::size_t d, double temperature_, Rng rng_)
        : logits({d}, 0.0), temperature(temperature_), rng(rng_) {}
};

struct MaskSample {
    Tensor m;  // in (0,1)^d
    Tensor u;  // the uniforms, kept for gradient replay
};

// m = sigmoid((logit(u) + x) / T) with fresh u ~ U(0,1); advances the state's
// generator.
MaskSample sample(MaskState& state);

// tau'' = tau (*) m / mean(m). The denominator is the sample mean of the mask.
TaskVector rescale(const TaskVector& tau, const Tensor& m);

// dm_j/dx_j = m_j (1 - m_j) / T, diagonal; the rescale denominator is treated
// as a constant. Returns upstream (*) dm/dx.
Tensor grad_logits(const MaskSample& s, const MaskState& state, const Tensor& upstream);

// Deployment-time mask: the expected relaxed mask p = sigmoid(x), or a 0/1
// threshold at p > 0.5 in hard mode.
Tensor deploy_mask(const MaskState& state, bool hard = false);

}  // namespace dam
