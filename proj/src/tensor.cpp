#include "dcnet/tensor.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>
#include <utility>

namespace dcnet {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

std::int64_t shape_size(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t e : shape) {
        if (e < 1) throw ShapeError("invalid extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

namespace {

inline std::uint64_t rotl64(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

inline std::uint64_t splitmix64(std::uint64_t& z) {
    z += 0x9e3779b97f4a7c15ULL;
    std::uint64_t t = z;
    t = (t ^ (t >> 30)) * 0xbf58476d1ce4e5b9ULL;
    t = (t ^ (t >> 27)) * 0x94d049bb133111ebULL;
    return t ^ (t >> 31);
}

std::vector<std::int64_t> row_major_strides(const Shape& shape) {
    std::vector<std::int64_t> strides(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
        strides[i] = strides[i + 1] * shape[i + 1];
    return strides;
}

} // namespace

Rng::Rng(std::uint64_t seed) {
    std::uint64_t z = seed;
    for (auto& s : s_) s = splitmix64(z);
}

std::uint64_t Rng::next_u64() {
    const std::uint64_t result = rotl64(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl64(s_[3], 45);
    return result;
}

double Rng::next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    return lo + (hi - lo) * next_double();
}

double Rng::normal() {
    // u1 in (0, 1] so the log is finite.
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::int64_t Rng::below(std::int64_t n) {
    if (n <= 0) throw UsageError("Rng::below requires n > 0");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<std::int64_t>(x % un);
}

Tensor::Tensor(Shape shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_size(shape_)), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_size(shape_) != static_cast<std::int64_t>(data_.size()))
        throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_str(shape_));
}

Tensor Tensor::zeros(Shape shape) {
    return Tensor(std::move(shape));
}

Tensor Tensor::ones(Shape shape) {
    return full(std::move(shape), 1.0);
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = value;
    return t;
}

Tensor Tensor::uniform(Rng& rng, Shape shape, double lo, double hi) {
    if (!(lo < hi)) throw UsageError("uniform requires lo < hi");
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

std::int64_t Tensor::extent(int axis) const {
    if (axis < 0 || axis >= rank())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    return shape_[axis];
}

std::int64_t Tensor::offset(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
        throw ShapeError("index rank " + std::to_string(idx.size()) + " does not match " + shape_str(shape_));
    std::int64_t flat = 0;
    int axis = 0;
    for (std::int64_t i : idx) {
        if (i < 0 || i >= shape_[axis])
            throw ShapeError("index " + std::to_string(i) + " out of range on axis " + std::to_string(axis) +
                             " of " + shape_str(shape_));
        flat = flat * shape_[axis] + i;
        ++axis;
    }
    return flat;
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    return data_[static_cast<std::size_t>(offset(idx))];
}

double& Tensor::at(std::initializer_list<std::int64_t> idx) {
    return data_[static_cast<std::size_t>(offset(idx))];
}

Tensor Tensor::reshape(Shape new_shape) const {
    if (shape_size(new_shape) != size())
        throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) +
                         " changes element count");
    Tensor out(std::move(new_shape), data_);
    return out;
}

Tensor Tensor::permute(const std::vector<int>& axes) const {
    if (static_cast<int>(axes.size()) != rank())
        throw ShapeError("permutation rank mismatch for " + shape_str(shape_));
    std::vector<bool> seen(axes.size(), false);
    for (int a : axes) {
        if (a < 0 || a >= rank() || seen[a]) throw ShapeError("invalid permutation for " + shape_str(shape_));
        seen[a] = true;
    }
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) out_shape[i] = shape_[axes[i]];
    Tensor out(out_shape);

    const auto in_strides = row_major_strides(shape_);
    std::vector<std::int64_t> idx(axes.size(), 0); // index in output coordinates
    for (std::int64_t flat = 0; flat < out.size(); ++flat) {
        std::int64_t src = 0;
        for (std::size_t i = 0; i < axes.size(); ++i) src += idx[i] * in_strides[axes[i]];
        out[flat] = data_[static_cast<std::size_t>(src)];
        for (int i = static_cast<int>(axes.size()) - 1; i >= 0; --i) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    return out;
}

Tensor Tensor::slice_axis(int axis, std::int64_t start, std::int64_t len) const {
    if (axis < 0 || axis >= rank())
        throw ShapeError("slice axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    if (len < 1 || start < 0 || start + len > shape_[axis])
        throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range on axis " + std::to_string(axis) + " of " + shape_str(shape_));
    Shape out_shape = shape_;
    out_shape[axis] = len;
    Tensor out(out_shape);

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= shape_[i];
    for (int i = axis + 1; i < rank(); ++i) inner *= shape_[i];

    const std::int64_t in_block = shape_[axis] * inner;
    const std::int64_t out_block = len * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
        const double* src = data() + o * in_block + start * inner;
        double* dst = out.data() + o * out_block;
        for (std::int64_t i = 0; i < out_block; ++i) dst[i] = src[i];
    }
    return out;
}

Tensor Tensor::concat(std::span<const Tensor> parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Tensor& first = parts[0];
    if (axis < 0 || axis >= first.rank())
        throw ShapeError("concat axis " + std::to_string(axis) + " out of range for " + shape_str(first.shape()));
    Shape out_shape = first.shape();
    std::int64_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != first.rank()) throw ShapeError("concat rank mismatch");
        for (int i = 0; i < first.rank(); ++i)
            if (i != axis && p.shape()[i] != first.shape()[i])
                throw ShapeError("concat extent mismatch on axis " + std::to_string(i) + ": " +
                                 shape_str(p.shape()) + " vs " + shape_str(first.shape()));
        total += p.shape()[axis];
    }
    out_shape[axis] = total;
    Tensor out(out_shape);

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[i];
    for (int i = axis + 1; i < first.rank(); ++i) inner *= out_shape[i];

    const std::int64_t out_block = total * inner;
    std::int64_t at = 0;
    for (const Tensor& p : parts) {
        const std::int64_t in_block = p.shape()[axis] * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = p.data() + o * in_block;
            double* dst = out.data() + o * out_block + at * inner;
            for (std::int64_t i = 0; i < in_block; ++i) dst[i] = src[i];
        }
        at += p.shape()[axis];
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0))
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor out({m, n});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            const double* brow = b.data() + p * n;
            double* orow = out.data() + i * n;
            for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

} // namespace

Tensor ew_add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ew_add");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Tensor ew_sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ew_sub");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Tensor ew_mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ew_mul");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

Tensor ew_scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
    return out;
}

bool all_finite(const Tensor& t) {
    for (std::int64_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i])) return false;
    return true;
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!all_finite(t)) throw NumericError("non-finite value in " + what);
}

} // namespace dcnet
