#pragma once

#include "nncfl/tensor.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace nncfl::nnc {

using Level = std::int32_t;

// Zeroes the floor(target_sparsity * n) smallest-magnitude elements. Among
// equal magnitudes the lower flat index is zeroed first.
Tensor sparsify(const Tensor& t, double target_sparsity);

// Step size for a quantization parameter:
//   delta = (1 + frac / 2^density) * 2^floor(qp / 2^density),
//   frac  = qp - 2^density * floor(qp / 2^density).
// With the default density of 2 the step doubles every 4 qp.
double qp_to_step_size(int qp, int qp_density = 2);

struct QuantizedTensor {
    std::string name;
    Shape shape;
    std::vector<Level> levels;
    double step_size = 1.0;
};

// level = round(x / step), halves rounded away from zero, so
// quantize(-x) == -quantize(x). Throws InputError on non-finite input or a
// level outside the int32 range.
QuantizedTensor quantize(const Tensor& t, double step_size);
// level * step_size.
Tensor dequantize(const QuantizedTensor& q);

// 12-bit probability of a zero bin; adapts by 1/32 of the distance to the
// observed bin.
inline constexpr int kProbBits = 12;
inline constexpr std::uint16_t kProbOne = 1u << kProbBits;
inline constexpr int kAdaptShift = 5;
inline constexpr std::uint16_t kProbInit = kProbOne / 2;
inline constexpr std::uint16_t kMinProb = 31;
inline constexpr std::uint16_t kMaxProb = kProbOne - kMinProb;

// Context layout:
//   significance: 6 = (nonzero count among the two previous levels: 0..2)
//                     x (position class: first in row / inside row)
//   sign:         3 = previous level negative / zero / positive
//   abs > 1:      3 = previous |level| 0 / 1 / >1
//   abs > 2:      2 = previous |level| <= 2 / > 2
inline constexpr std::size_t kSigContexts = 6;
inline constexpr std::size_t kSignContexts = 3;
inline constexpr std::size_t kGt1Contexts = 3;
inline constexpr std::size_t kGt2Contexts = 2;
inline constexpr std::size_t kContextCount =
    kSigContexts + kSignContexts + kGt1Contexts + kGt2Contexts;

struct ContextModel {
    std::array<std::uint16_t, kContextCount> probs;

    ContextModel() { reset(); }
    void reset() { probs.fill(kProbInit); }

    friend bool operator==(const ContextModel&, const ContextModel&) = default;
};

// Binary range coder, LZMA-style carry propagation: 32-bit range, 64-bit low,
// renormalises a whole byte whenever range drops below 2^24.
class BinaryEncoder {
public:
    void encode(std::uint16_t& prob, unsigned bit);
    void encode_bypass(unsigned bit);
    // Flushes pending state; the encoder must not be used afterwards.
    std::vector<std::uint8_t> finish();

private:
    void shift_low();

    std::uint64_t low_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint8_t cache_ = 0;
    std::uint64_t cache_size_ = 1;
    bool leading_ = true;
    std::vector<std::uint8_t> out_;
};

class BinaryDecoder {
public:
    explicit BinaryDecoder(std::span<const std::uint8_t> bytes);

    unsigned decode(std::uint16_t& prob);
    unsigned decode_bypass();
    // True when every input byte has been consumed.
    bool exhausted() const { return pos_ == bytes_.size(); }

private:
    std::uint8_t next_byte();
    void normalize();

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint32_t code_ = 0;
};

// Per level: significance flag, sign flag, |l|>1, |l|>2 (all context coded),
// then |l|-3 as order-0 Exp-Golomb in bypass bins. `row_length` defines the
// position class; 0 means a single row.
std::vector<std::uint8_t> cabac_encode(std::span<const Level> levels, ContextModel& ctx,
                                       std::size_t row_length = 0);

// Exact inverse of cabac_encode. Throws DecodeError when the stream ends
// early or bytes remain after `count` levels.
std::vector<Level> cabac_decode(std::span<const std::uint8_t> bytes, std::size_t count,
                                ContextModel& ctx, std::size_t row_length = 0);

} // namespace nncfl::nnc
