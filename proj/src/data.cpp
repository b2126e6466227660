#include "dam/data.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dam {

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

std::string corner_name(Corner c) {
    switch (c) {
        case Corner::bottom_right: return "bottom_right";
        case Corner::bottom_left: return "bottom_left";
        case Corner::top_right: return "top_right";
        case Corner::top_left: return "top_left";
    }
    throw std::invalid_argument("corner_name: bad enum");
}

Corner corner_from_name(const std::string& name) {
    if (name == "bottom_right") return Corner::bottom_right;
    if (name == "bottom_left") return Corner::bottom_left;
    if (name == "top_right") return Corner::top_right;
    if (name == "top_left") return Corner::top_left;
    throw std::invalid_argument("corner_from_name: unknown corner '" + name + "'");
}

Tensor prototypes(const TaskSpec& task) {
    Rng rng(task.prototype_seed);
    Tensor protos({task.num_classes, task.input_dim()}, 0.0);
    for (double& v : protos.data) v = rng.uniform01_open();
    return protos;
}

Dataset generate(const TaskSpec& task, std::uint64_t split_seed, Split split) {
    const Tensor protos = prototypes(task);
    const std::size_t n = split == Split::train ? task.n_train : task.n_test;
    const std::size_t d = task.input_dim();

    // Substream fixed by (split_seed, task_id, split) so tasks and splits
    // draw independent noise.
    Rng rng = Rng(split_seed)
                  .derive(fnv1a64(task.task_id))
                  .derive(split == Split::train ? 1 : 2);

    Dataset ds;
    ds.inputs = Tensor({n, d}, 0.0);
    ds.labels.resize(n);
    ds.task_id = task.task_id;
    ds.split = split == Split::train ? "train" : "test";
    ds.seed = split_seed;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % task.num_classes;
        ds.labels[i] = static_cast<int>(c);
        const double* p = &protos.data[c * d];
        double* row = &ds.inputs.data[i * d];
        for (std::size_t j = 0; j < d; ++j) {
            row[j] = clamp01(p[j] + rng.normal(0.0, task.noise_sigma));
        }
    }
    return ds;
}

PatchRect patch_rect(const TriggerSpec& trig, std::size_t side) {
    if (trig.patch_size > side) {
        throw std::invalid_argument("trigger patch " + std::to_string(trig.patch_size) +
                                    " does not fit in side " + std::to_string(side));
    }
    const std::size_t p = trig.patch_size;
    switch (trig.position) {
        case Corner::bottom_right: return {side - p, side, side - p, side};
        case Corner::bottom_left: return {side - p, side, 0, p};
        case Corner::top_right: return {0, p, side - p, side};
        case Corner::top_left: return {0, p, 0, p};
    }
    throw std::invalid_argument("patch_rect: bad corner");
}

Tensor apply_trigger(const Tensor& image, const TriggerSpec& trig, std::size_t side) {
    if (image.numel() != side * side) {
        throw std::invalid_argument("apply_trigger: image length " +
                                    std::to_string(image.numel()) + " != side^2");
    }
    const PatchRect r = patch_rect(trig, side);
    Tensor out = image;
    for (std::size_t row = r.row0; row < r.row1; ++row) {
        for (std::size_t col = r.col0; col < r.col1; ++col) {
            out.data[row * side + col] = trig.value;
        }
    }
    return out;
}

Dataset poison(const Dataset& train, const TriggerSpec& trig, double rate, std::size_t side,
               Rng& rng) {
    if (rate < 0.0 || rate > 1.0) {
        throw std::invalid_argument("poison: rate " + std::to_string(rate) + " outside [0,1]");
    }
    const std::size_t n = train.size();
    const std::size_t k = static_cast<std::size_t>(rate * static_cast<double>(n));
    std::vector<std::size_t> chosen = sample_without_replacement(rng, n, k);
    std::sort(chosen.begin(), chosen.end());

    Dataset out = train;
    const std::size_t d = side * side;
    for (std::size_t idx : chosen) {
        Tensor row({d}, std::vector<double>(train.inputs.data.begin() + idx * d,
                                            train.inputs.data.begin() + (idx + 1) * d));
        const Tensor trg = apply_trigger(row, trig, side);
        std::copy(trg.data.begin(), trg.data.end(), out.inputs.data.begin() + idx * d);
        out.labels[idx] = trig.target_class;
    }
    return out;
}

}  // namespace dam
