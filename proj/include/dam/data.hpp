#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dam/tensor.hpp"

namespace dam {

// One synthetic classification task: per-class prototype images in [0,1]
// plus Gaussian pixel noise, clamped back to [0,1].
struct TaskSpec {
    std::string task_id;
    std::size_t side = 14;  // image side length; input_dim = side^2
    std::size_t num_classes = 8;
    std::uint64_t prototype_seed = 0;
    double noise_sigma = 0.25;
    std::size_t n_train = 1000;
    std::size_t n_test = 320;

    std::size_t input_dim() const { return side * side; }
};

enum class Corner { bottom_right, bottom_left, top_right, top_left };

struct TriggerSpec {
    std::size_t patch_size = 3;
    Corner position = Corner::bottom_right;
    double value = 1.0;
    int target_class = 0;
};

std::string corner_name(Corner c);
Corner corner_from_name(const std::string& name);

enum class Split { train, test };

struct Dataset {
    Tensor inputs;            // [N x input_dim]
    std::vector<int> labels;  // values in [0, C)
    std::string task_id;
    std::string split;
    std::uint64_t seed = 0;

    std::size_t size() const { return labels.size(); }
};

// Class prototypes, one row per class, uniform over [0,1] per pixel and
// fixed entirely by prototype_seed.
Tensor prototypes(const TaskSpec& task);

// Sample i has label i mod C; pixel = clamp(prototype + N(0, sigma), 0, 1).
// Pure function of (task, split_seed, split).
Dataset generate(const TaskSpec& task, std::uint64_t split_seed, Split split);

// Overwrite the trigger patch pixels of one flattened image; other pixels
// untouched. Idempotent.
Tensor apply_trigger(const Tensor& image, const TriggerSpec& trig, std::size_t side);

// floor(rate * N) rows chosen without replacement get the trigger and the
// target label; row order preserved.
Dataset poison(const Dataset& train, const TriggerSpec& trig, double rate, std::size_t side,
               Rng& rng);

// Row/col index ranges of the patch.
struct PatchRect {
    std::size_t row0, row1, col0, col1;  // half-open
};
PatchRect patch_rect(const TriggerSpec& trig, std::size_t side);

}  // namespace dam
