#include "dam/mask.hpp"

#include <stdexcept>

namespace dam {

MaskSample sample(MaskState& state) {
    const std::size_t d = state.logits.numel();
    MaskSample s;
    s.u = Tensor({d}, 0.0);
    s.m = Tensor({d}, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        const double u = state.rng.uniform01_open();
        s.u.data[j] = u;
        s.m.data[j] = sigmoid((logit(u) + state.logits.data[j]) / state.temperature);
    }
    return s;
}

TaskVector rescale(const TaskVector& tau, const Tensor& m) {
    if (m.numel() != tau.flat.numel()) {
        throw std::invalid_argument("rescale: mask length mismatch");
    }
    const double denom = mean(m);
    if (denom <= 1e-12) {
        throw std::runtime_error("rescale: degenerate mask, mean(m) ~ 0");
    }
    TaskVector out = tau;
    for (std::size_t j = 0; j < out.flat.numel(); ++j) {
        out.flat.data[j] = tau.flat.data[j] * m.data[j] / denom;
    }
    return out;
}

Tensor grad_logits(const MaskSample& s, const MaskState& state, const Tensor& upstream) {
    if (upstream.numel() != s.m.numel()) {
        throw std::invalid_argument("grad_logits: upstream length mismatch");
    }
    Tensor g = upstream;
    for (std::size_t j = 0; j < g.numel(); ++j) {
        const double m = s.m.data[j];
        g.data[j] *= m * (1.0 - m) / state.temperature;
    }
    return g;
}

Tensor deploy_mask(const MaskState& state, bool hard) {
    Tensor p = sigmoid(state.logits);
    if (hard) {
        for (double& v : p.data) v = v > 0.5 ? 1.0 : 0.0;
    }
    return p;
}

}  // namespace dam
