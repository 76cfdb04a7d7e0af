#include "nncfl/tensor.hpp"

#include <cmath>

namespace nncfl {

std::string shape_to_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            out += "x";
        }
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

Tensor rng_uniform(Rng& rng, std::size_t n, float lo, float hi) {
    if (!(lo < hi)) {
        throw ArgumentError("rng_uniform: lo must be < hi");
    }
    if (n == 0) {
        throw ArgumentError("rng_uniform: n must be positive");
    }
    std::vector<float> out(n);
    for (auto& v : out) {
        auto x = static_cast<float>(rng.uniform(lo, hi));
        // Rounding to float can land exactly on hi.
        if (!(x < hi)) {
            x = std::nextafter(hi, lo);
        }
        v = x;
    }
    return Tensor("uniform", {n}, std::move(out));
}

Tensor rng_normal(Rng& rng, std::size_t n, float mean, float stddev) {
    if (n == 0) {
        throw ArgumentError("rng_normal: n must be positive");
    }
    std::vector<float> out(n);
    for (auto& v : out) {
        v = static_cast<float>(rng.normal(mean, stddev));
    }
    return Tensor("normal", {n}, std::move(out));
}

} // namespace nncfl
