#include "nncfl/rng.hpp"

#include "nncfl/errors.hpp"

#include <cmath>
#include <numbers>

namespace nncfl {

std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

namespace {

constexpr std::uint64_t kPcgMultiplier = 6364136223846793005ull;

std::uint64_t derive_state(std::uint64_t seed) {
    std::uint64_t s = seed;
    return splitmix64(s);
}

std::uint64_t derive_sequence(std::uint64_t seed, std::uint64_t stream_id) {
    std::uint64_t s = seed ^ 0xD1B54A32D192ED03ull;
    const std::uint64_t salt = splitmix64(s);
    std::uint64_t t = stream_id + salt;
    return splitmix64(t);
}

} // namespace

Pcg32::Pcg32(std::uint64_t init_state, std::uint64_t init_seq)
    : state_(0), inc_((init_seq << 1u) | 1u) {
    next();
    state_ += init_state;
    next();
}

std::uint32_t Pcg32::next() {
    const std::uint64_t old = state_;
    state_ = old * kPcgMultiplier + inc_;
    const auto xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
    const auto rot = static_cast<std::uint32_t>(old >> 59u);
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
}

Rng::Rng(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id),
      pcg_(derive_state(seed), derive_sequence(seed, stream_id)) {}

std::uint64_t Rng::next_u64() {
    const std::uint64_t hi = next_u32();
    const std::uint64_t lo = next_u32();
    return (hi << 32u) | lo;
}

double Rng::uniform01() {
    return static_cast<double>(next_u64() >> 11u) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
    if (!(lo < hi)) {
        throw ArgumentError("Rng::uniform: lo must be < hi");
    }
    const double x = lo + (hi - lo) * uniform01();
    return x < hi ? x : std::nextafter(hi, lo);
}

std::uint32_t Rng::below(std::uint32_t bound) {
    if (bound == 0) {
        throw ArgumentError("Rng::below: bound must be positive");
    }
    // Rejection on the low end of the 32-bit range (pcg32_boundedrand_r).
    const std::uint32_t threshold = (-bound) % bound;
    for (;;) {
        const std::uint32_t r = next_u32();
        if (r >= threshold) {
            return r % bound;
        }
    }
}

double Rng::normal() {
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

} // namespace nncfl
