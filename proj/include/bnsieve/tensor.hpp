#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bnsieve/error.hpp"
#include "bnsieve/rng.hpp"

namespace bnsieve {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Dense row-major array of doubles. A plain value type: gradients and
/// requires-grad flags live in the compute graph, not here.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
        check_dims();
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_dims();
        if (shape_numel(shape_) != data_.size())
            throw DimensionError("tensor: shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " values");
    }

    static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

    static Tensor from(std::initializer_list<double> values) {
        return Tensor(Shape{values.size()}, std::vector<double>(values));
    }

    /// i.i.d. normal entries with the given standard deviation.
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = rng.normal(0.0, stddev);
        return t;
    }

    static Tensor rand(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = rng.uniform(lo, hi);
        return t;
    }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t rank() const { return shape_.size(); }
    [[nodiscard]] std::size_t dim(std::size_t i) const { return shape_.at(i); }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    [[nodiscard]] std::span<const double> values() const { return data_; }
    [[nodiscard]] std::span<double> values() { return data_; }
    [[nodiscard]] const std::vector<double>& vec() const { return data_; }
    [[nodiscard]] const double* ptr() const { return data_.data(); }
    [[nodiscard]] double* ptr() { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    [[nodiscard]] double item() const {
        if (data_.size() != 1) throw ContractError("item: tensor " + shape_str(shape_) + " is not a scalar");
        return data_[0];
    }

    /// Same values under a new shape with equal element count.
    [[nodiscard]] Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != data_.size())
            throw DimensionError("reshape: " + shape_str(shape_) + " -> " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    /// Copy of batch row `n` (first axis), keeping the remaining axes.
    [[nodiscard]] Tensor row(std::size_t n) const {
        if (rank() < 1 || n >= shape_[0]) throw DimensionError("row: index out of range for " + shape_str(shape_));
        const std::size_t stride = data_.size() / shape_[0];
        Shape s(shape_.begin() + 1, shape_.end());
        if (s.empty()) s.push_back(1);
        return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(n * stride),
                                                        data_.begin() + static_cast<std::ptrdiff_t>((n + 1) * stride)));
    }

    [[nodiscard]] bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    void check_dims() const {
        for (auto d : shape_)
            if (d == 0) throw DimensionError("tensor: zero-sized dimension in " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

/// Stack same-shaped tensors along a new leading axis.
inline Tensor stack(std::span<const Tensor> items) {
    if (items.empty()) throw DimensionError("stack: no tensors");
    const Shape& inner = items.front().shape();
    std::vector<double> data;
    data.reserve(items.size() * items.front().size());
    for (const auto& t : items) {
        if (t.shape() != inner)
            throw DimensionError("stack: shape " + shape_str(t.shape()) + " vs " + shape_str(inner));
        data.insert(data.end(), t.vec().begin(), t.vec().end());
    }
    Shape s{items.size()};
    s.insert(s.end(), inner.begin(), inner.end());
    return Tensor(std::move(s), std::move(data));
}

inline double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

/// Norm-wise relative error max|a-b| / max(max|a|, max|b|, floor).
inline double relative_error(const Tensor& a, const Tensor& b, double floor = 1e-12) {
    if (a.shape() != b.shape())
        throw DimensionError("relative_error: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    double diff = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    return diff / std::max({max_abs(a.values()), max_abs(b.values()), floor});
}

}  // namespace bnsieve
