#pragma once

#include <cstdint>

namespace nncfl {

// One step of the SplitMix64 sequence: advances `state` and returns the mixed
// output. Used only to derive PCG seeds and stream selectors.
std::uint64_t splitmix64(std::uint64_t& state);

// PCG32 (pcg_setseq_64_xsh_rr_32): 64-bit LCG state, 32-bit XSH-RR output.
// Seeding follows pcg32_srandom_r from the reference implementation so the
// published demo vectors apply unchanged.
class Pcg32 {
public:
    Pcg32(std::uint64_t init_state, std::uint64_t init_seq);

    std::uint32_t next();

private:
    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 0;
};

// Seeded generator with independent substreams. (seed, stream_id) is mapped
// through SplitMix64 onto a PCG32 initial state and increment, so two
// generators with different stream ids never share a sequence.
//
// An Rng is single-owner; parallel users construct their own with a distinct
// stream id instead of sharing one.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream_id = 0);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    std::uint32_t next_u32() { return pcg_.next(); }
    std::uint64_t next_u64();

    // 53-bit uniform in [0, 1).
    double uniform01();
    // Uniform in [lo, hi); requires lo < hi.
    double uniform(double lo, double hi);
    // Unbiased integer in [0, bound); bound must be > 0.
    std::uint32_t below(std::uint32_t bound);
    // Standard normal via Box-Muller (no cached spare, one normal per call).
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::uint64_t seed_;
    std::uint64_t stream_id_;
    Pcg32 pcg_;
};

// Well-known stream ids so that unrelated consumers of one master seed never
// draw from the same sequence.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kSplit = 2;
inline constexpr std::uint64_t kFailures = 3;
inline constexpr std::uint64_t kClientBase = 1000;  // + client id
inline constexpr std::uint64_t kRecordBase = 1u << 20;  // + record index
} // namespace streams

} // namespace nncfl
