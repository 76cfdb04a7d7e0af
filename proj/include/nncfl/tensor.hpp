#pragma once

#include "nncfl/errors.hpp"
#include "nncfl/rng.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace nncfl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape);

// Named, shaped, row-major dense array. Float is the working precision; the
// double instantiation exists for gradient verification.
template <typename T>
class BasicTensor {
public:
    using value_type = T;

    BasicTensor() = default;

    BasicTensor(std::string name, Shape shape)
        : name_(std::move(name)), shape_(std::move(shape)), data_(shape_size(shape_), T{0}) {
        check_shape();
    }

    BasicTensor(std::string name, Shape shape, std::vector<T> data)
        : name_(std::move(name)), shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_size(shape_)) {
            throw DimensionError("tensor '" + name_ + "': shape " + shape_to_string(shape_) +
                                 " does not match " + std::to_string(data_.size()) + " elements");
        }
        if (!all_finite()) {
            throw InputError("tensor '" + name_ + "' contains non-finite values");
        }
    }

    static BasicTensor filled(std::string name, Shape shape, T value) {
        BasicTensor t(std::move(name), std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    const std::string& name() const { return name_; }
    void set_name(std::string name) { name_ = std::move(name); }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    // 2-D element access; no bounds checks beyond the debug assertions in vector.
    T& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

    bool all_finite() const {
        for (const T v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return BasicTensor<U>(name_, shape_, std::move(out));
    }

    // Exact element equality (so +0 == -0); names and shapes must match too.
    friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
        return a.name_ == b.name_ && a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void check_shape() const {
        for (const std::size_t d : shape_) {
            if (d == 0) {
                throw DimensionError("tensor '" + name_ + "': zero-sized dimension");
            }
        }
    }

    std::string name_;
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// a[m x k] * b[k x n]; the k-sum runs left to right for every output element.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: cannot multiply " + shape_to_string(a.shape()) + " by " +
                             shape_to_string(b.shape()));
    }
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    std::vector<T> out(m * n, T{0});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const T s = a[i * k + p];
            const T* brow = b.data() + p * n;
            T* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += s * brow[j];
            }
        }
    }
    return BasicTensor<T>(a.name() + "*" + b.name(), {m, n}, std::move(out));
}

// Left-to-right sum over the flat data.
template <typename T>
T sum(std::span<const T> xs) {
    T acc{0};
    for (const T x : xs) {
        acc += x;
    }
    return acc;
}

template <typename T>
T max_value(std::span<const T> xs) {
    if (xs.empty()) {
        throw ArgumentError("max_value: empty input");
    }
    T best = xs[0];
    for (const T x : xs) {
        if (x > best) {
            best = x;
        }
    }
    return best;
}

// Index of the largest element; ties go to the lowest index.
template <typename T>
std::size_t argmax(std::span<const T> xs) {
    if (xs.empty()) {
        throw ArgumentError("argmax: empty input");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (xs[i] > xs[best]) {
            best = i;
        }
    }
    return best;
}

// n float draws in [lo, hi).
Tensor rng_uniform(Rng& rng, std::size_t n, float lo, float hi);
Tensor rng_normal(Rng& rng, std::size_t n, float mean, float stddev);

} // namespace nncfl
