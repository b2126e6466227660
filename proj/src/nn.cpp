#include "dam/nn.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dam {

namespace {

constexpr double kLogFloor = 1e-300;

struct LayerView {
    const double* w;  // [out x in] row-major
    const double* b;  // [out]
    std::size_t in;
    std::size_t out;
};

std::vector<LayerView> layer_views(const ParamVector& p) {
    std::vector<LayerView> views;
    const auto segs = p.arch.segments();
    views.reserve(segs.size());
    for (const auto& s : segs) {
        const double* base = p.flat.data.data() + s.offset;
        views.push_back({base, base + s.in_dim * s.out_dim, s.in_dim, s.out_dim});
    }
    return views;
}

void check_batch(const ParamVector& p, const Tensor& batch) {
    if (batch.rank() != 2 || batch.cols() != p.arch.input_dim) {
        throw std::invalid_argument("nn: batch shape " + batch.shape_str() +
                                    " does not match input_dim " +
                                    std::to_string(p.arch.input_dim));
    }
}

// z = x W^T + b for one layer; x is [B x in], w row-major [out x in].
Tensor linear(const Tensor& x, const LayerView& l) {
    const std::size_t B = x.rows();
    Tensor z({B, l.out}, 0.0);
    for (std::size_t s = 0; s < B; ++s) {
        const double* xr = &x.data[s * l.in];
        double* zr = &z.data[s * l.out];
        for (std::size_t o = 0; o < l.out; ++o) {
            const double* wr = l.w + o * l.in;
            double acc = 0.0;
            for (std::size_t i = 0; i < l.in; ++i) acc += xr[i] * wr[i];
            zr[o] = acc + l.b[o];
        }
    }
    return z;
}

struct ForwardTrace {
    std::vector<Tensor> activations;  // activations[0] = input, .. [L] = logits
    std::vector<Tensor> preacts;      // pre-activation per layer
};

ForwardTrace forward_trace(const ParamVector& params, const Tensor& batch) {
    check_batch(params, batch);
    const auto layers = layer_views(params);
    ForwardTrace tr;
    tr.activations.push_back(batch);
    for (std::size_t li = 0; li < layers.size(); ++li) {
        Tensor z = linear(tr.activations.back(), layers[li]);
        tr.preacts.push_back(z);
        if (li + 1 < layers.size()) {
            for (double& v : z.data) v = v > 0.0 ? v : 0.0;
        }
        tr.activations.push_back(std::move(z));
    }
    return tr;
}

// Loss value plus dLoss/dlogits for a batch (already averaged over B).
double loss_and_dlogits(const Tensor& logits, LossKind kind, const std::vector<int>* labels,
                        Tensor& dz) {
    const std::size_t B = logits.rows(), C = logits.cols();
    const Tensor p = stable_softmax(logits);
    dz = Tensor({B, C}, 0.0);
    double loss = 0.0;
    if (kind == LossKind::cross_entropy) {
        if (labels == nullptr || labels->size() != B) {
            throw std::invalid_argument("cross_entropy: labels missing or wrong length");
        }
        for (std::size_t s = 0; s < B; ++s) {
            const int y = (*labels)[s];
            if (y < 0 || static_cast<std::size_t>(y) >= C) {
                throw std::invalid_argument("cross_entropy: label " + std::to_string(y) +
                                            " out of range [0," + std::to_string(C) + ")");
            }
            loss -= std::log(std::max(p.at(s, static_cast<std::size_t>(y)), kLogFloor));
            for (std::size_t c = 0; c < C; ++c) {
                dz.at(s, c) = (p.at(s, c) - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0)) /
                              static_cast<double>(B);
            }
        }
    } else {
        for (std::size_t s = 0; s < B; ++s) {
            double h = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double pc = p.at(s, c);
                h -= pc * std::log(std::max(pc, kLogFloor));
            }
            loss += h;
            // dH/dz_c = -p_c (log p_c + H)
            for (std::size_t c = 0; c < C; ++c) {
                const double pc = p.at(s, c);
                dz.at(s, c) = -pc * (std::log(std::max(pc, kLogFloor)) + h) /
                              static_cast<double>(B);
            }
        }
    }
    return loss / static_cast<double>(B);
}

}  // namespace

std::vector<std::size_t> ArchSpec::layer_dims() const {
    std::vector<std::size_t> dims;
    dims.push_back(input_dim);
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(num_classes);
    return dims;
}

std::size_t ArchSpec::param_count() const {
    const auto dims = layer_dims();
    std::size_t d = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) d += dims[l + 1] * dims[l] + dims[l + 1];
    return d;
}

std::vector<ArchSpec::Segment> ArchSpec::segments() const {
    const auto dims = layer_dims();
    std::vector<Segment> segs;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
        const std::size_t len = dims[l + 1] * dims[l] + dims[l + 1];
        segs.push_back({off, len, dims[l], dims[l + 1]});
        off += len;
    }
    return segs;
}

std::string ArchSpec::to_string() const {
    std::ostringstream os;
    os << input_dim;
    for (std::size_t h : hidden) os << "-" << h;
    os << "-" << num_classes;
    return os.str();
}

ParamVector::ParamVector(ArchSpec a, Tensor f) : arch(std::move(a)), flat(std::move(f)) {
    if (flat.numel() != arch.param_count()) {
        throw std::invalid_argument("ParamVector: flat length " + std::to_string(flat.numel()) +
                                    " != param_count " + std::to_string(arch.param_count()));
    }
}

ParamVector init_params(const ArchSpec& arch, Rng& rng) {
    Tensor flat({arch.param_count()}, 0.0);
    std::size_t off = 0;
    for (const auto& s : arch.segments()) {
        const double std_w = std::sqrt(2.0 / static_cast<double>(s.in_dim));
        for (std::size_t i = 0; i < s.in_dim * s.out_dim; ++i) {
            flat.data[off + i] = rng.normal(0.0, std_w);
        }
        off += s.length;  // biases stay zero
    }
    return ParamVector(arch, std::move(flat));
}

Tensor forward(const ParamVector& params, const Tensor& batch) {
    return forward_trace(params, batch).activations.back();
}

double entropy_loss(const ParamVector& params, const Tensor& batch) {
    if (batch.numel() == 0 || batch.rows() == 0) {
        throw std::invalid_argument("entropy_loss: empty batch");
    }
    Tensor dz;
    return loss_and_dlogits(forward(params, batch), LossKind::entropy, nullptr, dz);
}

double cross_entropy_loss(const ParamVector& params, const Tensor& batch,
                          const std::vector<int>& labels) {
    if (batch.rows() == 0) throw std::invalid_argument("cross_entropy_loss: empty batch");
    Tensor dz;
    return loss_and_dlogits(forward(params, batch), LossKind::cross_entropy, &labels, dz);
}

LossGrad loss_with_grads(const ParamVector& params, const Tensor& batch, LossKind kind,
                         const std::vector<int>* labels, bool want_param_grad,
                         bool want_input_grad) {
    if (batch.rows() == 0) throw std::invalid_argument("loss_with_grads: empty batch");
    const auto layers = layer_views(params);
    const auto segs = params.arch.segments();
    ForwardTrace tr = forward_trace(params, batch);

    LossGrad out;
    Tensor dz;
    out.loss = loss_and_dlogits(tr.activations.back(), kind, labels, dz);

    if (want_param_grad) out.grad_params = Tensor({params.arch.param_count()}, 0.0);

    const std::size_t B = batch.rows();
    for (std::size_t li = layers.size(); li-- > 0;) {
        const LayerView& l = layers[li];
        const Tensor& a_prev = tr.activations[li];
        if (want_param_grad) {
            double* gw = out.grad_params.data.data() + segs[li].offset;
            double* gb = gw + l.in * l.out;
            for (std::size_t s = 0; s < B; ++s) {
                const double* dzr = &dz.data[s * l.out];
                const double* ar = &a_prev.data[s * l.in];
                for (std::size_t o = 0; o < l.out; ++o) {
                    const double d = dzr[o];
                    double* gwr = gw + o * l.in;
                    for (std::size_t i = 0; i < l.in; ++i) gwr[i] += d * ar[i];
                    gb[o] += d;
                }
            }
        }
        const bool need_da = li > 0 || want_input_grad;
        if (!need_da) break;
        Tensor da({B, l.in}, 0.0);
        for (std::size_t s = 0; s < B; ++s) {
            const double* dzr = &dz.data[s * l.out];
            double* dar = &da.data[s * l.in];
            for (std::size_t o = 0; o < l.out; ++o) {
                const double d = dzr[o];
                const double* wr = l.w + o * l.in;
                for (std::size_t i = 0; i < l.in; ++i) dar[i] += d * wr[i];
            }
        }
        if (li > 0) {
            const Tensor& pre = tr.preacts[li - 1];
            for (std::size_t i = 0; i < da.data.size(); ++i) {
                if (!(pre.data[i] > 0.0)) da.data[i] = 0.0;
            }
        }
        dz = std::move(da);
    }
    if (want_input_grad) out.grad_input = std::move(dz);
    return out;
}

Tensor grad_params(const ParamVector& params, const Tensor& batch, LossKind kind,
                   const std::vector<int>* labels) {
    return loss_with_grads(params, batch, kind, labels, true, false).grad_params;
}

Tensor grad_input(const ParamVector& params, const Tensor& batch, LossKind kind,
                  const std::vector<int>* labels) {
    return loss_with_grads(params, batch, kind, labels, false, true).grad_input;
}

std::vector<int> predict(const ParamVector& params, const Tensor& batch) {
    const Tensor logits = forward(params, batch);
    const std::size_t B = logits.rows(), C = logits.cols();
    std::vector<int> labels(B, 0);
    for (std::size_t s = 0; s < B; ++s) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (logits.at(s, c) > logits.at(s, best)) best = c;
        }
        labels[s] = static_cast<int>(best);
    }
    return labels;
}

}  // namespace dam
