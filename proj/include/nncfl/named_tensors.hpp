#pragma once

#include "nncfl/tensor.hpp"

#include <string_view>
#include <vector>

namespace nncfl {

// Ordered collection of named tensors. Order is significant: codec streams,
// checkpoints and aggregation all walk tensors by index, never by name lookup.
template <typename T>
class NamedTensors {
public:
    NamedTensors() = default;
    explicit NamedTensors(std::vector<BasicTensor<T>> tensors) : tensors_(std::move(tensors)) {}

    void push_back(BasicTensor<T> t) { tensors_.push_back(std::move(t)); }

    std::size_t count() const { return tensors_.size(); }
    bool empty() const { return tensors_.empty(); }

    BasicTensor<T>& operator[](std::size_t i) { return tensors_[i]; }
    const BasicTensor<T>& operator[](std::size_t i) const { return tensors_[i]; }

    auto begin() { return tensors_.begin(); }
    auto end() { return tensors_.end(); }
    auto begin() const { return tensors_.begin(); }
    auto end() const { return tensors_.end(); }

    const BasicTensor<T>* find(std::string_view name) const {
        for (const auto& t : tensors_) {
            if (t.name() == name) {
                return &t;
            }
        }
        return nullptr;
    }

    const BasicTensor<T>& get(std::string_view name) const {
        if (const auto* t = find(name)) {
            return *t;
        }
        throw LookupError("no tensor named '" + std::string(name) + "'");
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) {
            n += t.size();
        }
        return n;
    }

    // Same names, shapes and order.
    bool same_layout(const NamedTensors& other) const {
        if (count() != other.count()) {
            return false;
        }
        for (std::size_t i = 0; i < count(); ++i) {
            if (tensors_[i].name() != other[i].name() || tensors_[i].shape() != other[i].shape()) {
                return false;
            }
        }
        return true;
    }

    NamedTensors zeros_like() const {
        NamedTensors out;
        for (const auto& t : tensors_) {
            out.push_back(BasicTensor<T>(t.name(), t.shape()));
        }
        return out;
    }

    template <typename U>
    NamedTensors<U> cast() const {
        NamedTensors<U> out;
        for (const auto& t : tensors_) {
            out.push_back(t.template cast<U>());
        }
        return out;
    }

    bool all_finite() const {
        for (const auto& t : tensors_) {
            if (!t.all_finite()) {
                return false;
            }
        }
        return true;
    }

    friend bool operator==(const NamedTensors& a, const NamedTensors& b) {
        return a.tensors_ == b.tensors_;
    }

private:
    std::vector<BasicTensor<T>> tensors_;
};

using ModelWeights = NamedTensors<float>;

// Throws SchemaError naming the first tensor that differs.
template <typename T>
void require_same_layout(const NamedTensors<T>& a, const NamedTensors<T>& b, std::string_view what) {
    if (a.count() != b.count()) {
        throw SchemaError(std::string(what) + ": tensor count " + std::to_string(a.count()) +
                          " vs " + std::to_string(b.count()));
    }
    for (std::size_t i = 0; i < a.count(); ++i) {
        if (a[i].name() != b[i].name() || a[i].shape() != b[i].shape()) {
            throw SchemaError(std::string(what) + ": tensor " + std::to_string(i) + " is '" +
                              a[i].name() + "' " + shape_to_string(a[i].shape()) + ", expected '" +
                              b[i].name() + "' " + shape_to_string(b[i].shape()));
        }
    }
}

// dst += src, element by element.
template <typename T>
void add_in_place(NamedTensors<T>& dst, const NamedTensors<T>& src) {
    require_same_layout(dst, src, "add_in_place");
    for (std::size_t i = 0; i < dst.count(); ++i) {
        auto d = dst[i].values();
        const auto s = src[i].values();
        for (std::size_t j = 0; j < d.size(); ++j) {
            d[j] += s[j];
        }
    }
}

// a - b.
template <typename T>
NamedTensors<T> difference(const NamedTensors<T>& a, const NamedTensors<T>& b) {
    require_same_layout(a, b, "difference");
    NamedTensors<T> out = a;
    for (std::size_t i = 0; i < out.count(); ++i) {
        auto d = out[i].values();
        const auto s = b[i].values();
        for (std::size_t j = 0; j < d.size(); ++j) {
            d[j] -= s[j];
        }
    }
    return out;
}

} // namespace nncfl
