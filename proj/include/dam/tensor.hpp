#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace dam {

// Dense row-major tensor of 64-bit floats. The single value type used for
// weights, images, gradients and masks throughout the library.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape_, double fill = 0.0);
    Tensor(std::vector<std::size_t> shape_, std::vector<double> data_);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
    std::string shape_str() const;
};

// Elementwise arithmetic. Shapes must match exactly; scalar overloads apply
// the scalar to every element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);

// Standard matrix product with a fixed left-to-right summation order over the
// inner dimension, so results are bit-reproducible.
Tensor matmul(const Tensor& a, const Tensor& b);

double mean(const Tensor& t);
double l1_norm(const Tensor& t);
// Lowest index wins on ties.
std::size_t argmax(const Tensor& t);

// Max-subtracted softmax. For rank-2 input the softmax is taken per row.
Tensor stable_softmax(const Tensor& logits);
Tensor sigmoid(const Tensor& x);
double sigmoid(double x);
// Inverse sigmoid; arguments must lie strictly inside (0,1).
double logit(double p);

void assert_finite(const Tensor& t, const std::string& what);

// Deterministic counter-based generator (splitmix64 applied to a seed-offset
// counter). Identical seeds produce identical streams on every platform; all
// stochastic operations in the library take one of these explicitly.
class Rng {
public:
    static constexpr const char* kAlgorithm = "splitmix64-counter";

    explicit Rng(std::uint64_t seed) : seed_(seed), counter_(0) {}

    std::uint64_t next_u64();
    // Strictly inside (0,1): (x >> 11) is placed at the center of its
    // 2^-53-wide bucket, so 0.0 and 1.0 are unreachable.
    double uniform01_open();
    // Box-Muller; consumes two uniforms per draw.
    double normal(double mean_v, double stddev);
    // Uniform integer in [0, n).
    std::size_t below(std::size_t n);

    // Independent substream for a named purpose; deterministic in (seed, tag).
    Rng derive(std::uint64_t tag) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

// First k entries of a partial Fisher-Yates shuffle of [0, n); used for
// batch sampling without replacement.
std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t k);
std::vector<std::size_t> shuffled_indices(Rng& rng, std::size_t n);

}  // namespace dam
