#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "dcnet/errors.hpp"

namespace dcnet {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& shape);

// Product of extents; throws ShapeError on a zero/negative extent.
std::int64_t shape_size(const Shape& shape);

/// Deterministic pseudo-random generator: xoshiro256++ seeded through
/// splitmix64. Fixed algorithm so a seed reproduces the same stream on
/// every platform. Single-owner; not shareable across threads.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next_u64();

    // Uniform in [0, 1) with 53-bit resolution.
    double next_double();

    double uniform(double lo, double hi);

    // Standard normal via Box-Muller; consumes exactly two draws.
    double normal();

    // Uniform integer in [0, n); rejection-sampled, bias-free.
    std::int64_t below(std::int64_t n);

private:
    std::uint64_t s_[4];
};

/// Dense N-dimensional array, row-major, double precision.
/// Operations return new tensors; a constructed tensor is treated as
/// immutable and is safe to share between threads.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape); // zero-filled
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor uniform(Rng& rng, Shape shape, double lo, double hi);

    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t extent(int axis) const;
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    const Shape& shape() const { return shape_; }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Bounds-checked multi-index access (mainly for tests and small code paths).
    double at(std::initializer_list<std::int64_t> idx) const;
    double& at(std::initializer_list<std::int64_t> idx);

    Tensor reshape(Shape new_shape) const;
    Tensor permute(const std::vector<int>& axes) const;
    Tensor slice_axis(int axis, std::int64_t start, std::int64_t len) const;
    static Tensor concat(std::span<const Tensor> parts, int axis);

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    std::int64_t offset(std::initializer_list<std::int64_t> idx) const;

    Shape shape_;
    std::vector<double> data_;
};

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor ew_add(const Tensor& a, const Tensor& b);
Tensor ew_sub(const Tensor& a, const Tensor& b);
Tensor ew_mul(const Tensor& a, const Tensor& b);
Tensor ew_scale(const Tensor& a, double s);

bool all_finite(const Tensor& t);

// Throws NumericError naming `what` if t holds a NaN or infinity.
void require_finite(const Tensor& t, const std::string& what);

} // namespace dcnet
