#include "nncfl/codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace nncfl::nnc {

Tensor sparsify(const Tensor& t, double target_sparsity) {
    if (!(target_sparsity >= 0.0 && target_sparsity < 1.0)) {
        throw ArgumentError("sparsify: target sparsity must lie in [0, 1)");
    }
    Tensor out = t;
    const auto n = t.size();
    const auto k = static_cast<std::size_t>(std::floor(target_sparsity * static_cast<double>(n)));
    if (k == 0) {
        return out;
    }
    std::vector<std::uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    const auto vals = t.values();
    const auto smaller = [&](std::uint32_t a, std::uint32_t b) {
        const float ma = std::abs(vals[a]);
        const float mb = std::abs(vals[b]);
        return ma < mb || (ma == mb && a < b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), smaller);
    for (std::size_t i = 0; i < k; ++i) {
        out[idx[i]] = 0.0f;
    }
    return out;
}

double qp_to_step_size(int qp, int qp_density) {
    if (qp_density < 1 || qp_density > 16) {
        throw ArgumentError("qp_density must lie in [1, 16]");
    }
    const int period = 1 << qp_density;
    // floor division for negative qp
    const int shift = qp >= 0 ? qp / period : -((-qp + period - 1) / period);
    const int frac = qp - period * shift;
    return (1.0 + static_cast<double>(frac) / period) * std::ldexp(1.0, shift);
}

QuantizedTensor quantize(const Tensor& t, double step_size) {
    if (!(step_size > 0.0) || !std::isfinite(step_size)) {
        throw ArgumentError("quantize: step size must be positive and finite");
    }
    QuantizedTensor q{t.name(), t.shape(), std::vector<Level>(t.size()), step_size};
    constexpr double kMaxLevel = std::numeric_limits<Level>::max();
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double x = t[i];
        if (!std::isfinite(x)) {
            throw InputError("quantize: non-finite value in '" + t.name() + "'");
        }
        const double level = std::round(x / step_size);
        if (std::abs(level) > kMaxLevel) {
            throw InputError("quantize: value in '" + t.name() + "' overflows the level range");
        }
        q.levels[i] = static_cast<Level>(level);
    }
    return q;
}

Tensor dequantize(const QuantizedTensor& q) {
    std::vector<float> data(q.levels.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = static_cast<float>(static_cast<double>(q.levels[i]) * q.step_size);
    }
    return Tensor(q.name, q.shape, std::move(data));
}

// ---------------------------------------------------------------------------
// Range coder

namespace {

constexpr std::uint32_t kTop = 1u << 24;

inline void adapt(std::uint16_t& prob, unsigned bit) {
    if (bit == 0) {
        prob = static_cast<std::uint16_t>(prob + ((kProbOne - prob) >> kAdaptShift));
    } else {
        prob = static_cast<std::uint16_t>(prob - (prob >> kAdaptShift));
    }
    prob = std::clamp(prob, kMinProb, kMaxProb);
}

} // namespace

void BinaryEncoder::encode(std::uint16_t& prob, unsigned bit) {
    const std::uint32_t bound = (range_ >> kProbBits) * prob;
    if (bit == 0) {
        range_ = bound;
    } else {
        low_ += bound;
        range_ -= bound;
    }
    adapt(prob, bit);
    while (range_ < kTop) {
        range_ <<= 8;
        shift_low();
    }
}

void BinaryEncoder::encode_bypass(unsigned bit) {
    range_ >>= 1;
    if (bit != 0) {
        low_ += range_;
    }
    while (range_ < kTop) {
        range_ <<= 8;
        shift_low();
    }
}

void BinaryEncoder::shift_low() {
    if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
        const auto carry = static_cast<std::uint8_t>(low_ >> 32);
        std::uint8_t temp = cache_;
        do {
            // The very first byte is always zero and is not transmitted.
            if (leading_) {
                leading_ = false;
            } else {
                out_.push_back(static_cast<std::uint8_t>(temp + carry));
            }
            temp = 0xFF;
        } while (--cache_size_ != 0);
        cache_ = static_cast<std::uint8_t>(low_ >> 24);
    }
    ++cache_size_;
    low_ = (low_ & 0x00FFFFFFu) << 8;
}

std::vector<std::uint8_t> BinaryEncoder::finish() {
    for (int i = 0; i < 5; ++i) {
        shift_low();
    }
    return std::move(out_);
}

BinaryDecoder::BinaryDecoder(std::span<const std::uint8_t> bytes) : bytes_(bytes) {
    for (int i = 0; i < 4; ++i) {
        code_ = (code_ << 8) | next_byte();
    }
}

std::uint8_t BinaryDecoder::next_byte() {
    if (pos_ >= bytes_.size()) {
        throw DecodeError("entropy decoder: stream truncated");
    }
    return bytes_[pos_++];
}

void BinaryDecoder::normalize() {
    while (range_ < kTop) {
        range_ <<= 8;
        code_ = (code_ << 8) | next_byte();
    }
}

unsigned BinaryDecoder::decode(std::uint16_t& prob) {
    const std::uint32_t bound = (range_ >> kProbBits) * prob;
    unsigned bit;
    if (code_ < bound) {
        range_ = bound;
        bit = 0;
    } else {
        code_ -= bound;
        range_ -= bound;
        bit = 1;
    }
    adapt(prob, bit);
    normalize();
    return bit;
}

unsigned BinaryDecoder::decode_bypass() {
    range_ >>= 1;
    unsigned bit = 0;
    if (code_ >= range_) {
        code_ -= range_;
        bit = 1;
    }
    normalize();
    return bit;
}

// ---------------------------------------------------------------------------
// Level binarization

namespace {

constexpr std::size_t kSignBase = kSigContexts;
constexpr std::size_t kGt1Base = kSignBase + kSignContexts;
constexpr std::size_t kGt2Base = kGt1Base + kGt1Contexts;

// Neighbourhood of the previous two levels within the current row.
struct Neighbourhood {
    Level prev1 = 0;
    Level prev2 = 0;
    bool row_start = true;

    std::size_t sig_ctx() const {
        const std::size_t nz = (prev1 != 0 ? 1 : 0) + (prev2 != 0 ? 1 : 0);
        return nz * 2 + (row_start ? 0 : 1);
    }
    std::size_t sign_ctx() const { return kSignBase + (prev1 < 0 ? 0 : prev1 == 0 ? 1 : 2); }
    std::size_t gt1_ctx() const {
        const std::uint32_t a = magnitude(prev1);
        return kGt1Base + (a == 0 ? 0 : a == 1 ? 1 : 2);
    }
    std::size_t gt2_ctx() const { return kGt2Base + (magnitude(prev1) > 2 ? 1 : 0); }

    void advance(Level current, std::size_t index, std::size_t row_length) {
        prev2 = prev1;
        prev1 = current;
        row_start = row_length != 0 && (index + 1) % row_length == 0;
        if (row_start) {
            prev1 = 0;
            prev2 = 0;
        }
    }

    static std::uint32_t magnitude(Level l) {
        return l < 0 ? static_cast<std::uint32_t>(-static_cast<std::int64_t>(l))
                     : static_cast<std::uint32_t>(l);
    }
};

void encode_exp_golomb(BinaryEncoder& enc, std::uint32_t value) {
    const std::uint64_t v = static_cast<std::uint64_t>(value) + 1;
    int bits = 0;
    while ((v >> (bits + 1)) != 0) {
        ++bits;
    }
    for (int i = 0; i < bits; ++i) {
        enc.encode_bypass(0);
    }
    enc.encode_bypass(1);
    for (int i = bits - 1; i >= 0; --i) {
        enc.encode_bypass(static_cast<unsigned>((v >> i) & 1u));
    }
}

std::uint32_t decode_exp_golomb(BinaryDecoder& dec) {
    int bits = 0;
    while (dec.decode_bypass() == 0) {
        if (++bits > 32) {
            throw DecodeError("entropy decoder: Exp-Golomb prefix too long");
        }
    }
    std::uint64_t v = 1;
    for (int i = 0; i < bits; ++i) {
        v = (v << 1) | dec.decode_bypass();
    }
    const std::uint64_t value = v - 1;
    if (value > std::numeric_limits<std::uint32_t>::max()) {
        throw DecodeError("entropy decoder: Exp-Golomb value overflow");
    }
    return static_cast<std::uint32_t>(value);
}

} // namespace

std::vector<std::uint8_t> cabac_encode(std::span<const Level> levels, ContextModel& ctx,
                                       std::size_t row_length) {
    BinaryEncoder enc;
    Neighbourhood nb;
    auto& p = ctx.probs;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        const Level l = levels[i];
        if (l == std::numeric_limits<Level>::min()) {
            throw InputError("cabac_encode: level magnitude exceeds 2^31-1");
        }
        enc.encode(p[nb.sig_ctx()], l != 0 ? 1 : 0);
        if (l != 0) {
            enc.encode(p[nb.sign_ctx()], l < 0 ? 1 : 0);
            const std::uint32_t a = Neighbourhood::magnitude(l);
            enc.encode(p[nb.gt1_ctx()], a > 1 ? 1 : 0);
            if (a > 1) {
                enc.encode(p[nb.gt2_ctx()], a > 2 ? 1 : 0);
                if (a > 2) {
                    encode_exp_golomb(enc, a - 3);
                }
            }
        }
        nb.advance(l, i, row_length);
    }
    return enc.finish();
}

std::vector<Level> cabac_decode(std::span<const std::uint8_t> bytes, std::size_t count,
                                ContextModel& ctx, std::size_t row_length) {
    BinaryDecoder dec(bytes);
    Neighbourhood nb;
    auto& p = ctx.probs;
    std::vector<Level> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        Level l = 0;
        if (dec.decode(p[nb.sig_ctx()]) != 0) {
            const bool negative = dec.decode(p[nb.sign_ctx()]) != 0;
            std::uint64_t a = 1;
            if (dec.decode(p[nb.gt1_ctx()]) != 0) {
                a = 2;
                if (dec.decode(p[nb.gt2_ctx()]) != 0) {
                    a = 3 + static_cast<std::uint64_t>(decode_exp_golomb(dec));
                }
            }
            if (a > static_cast<std::uint64_t>(std::numeric_limits<Level>::max())) {
                throw DecodeError("entropy decoder: level magnitude overflow");
            }
            l = negative ? -static_cast<Level>(a) : static_cast<Level>(a);
        }
        out[i] = l;
        nb.advance(l, i, row_length);
    }
    if (!dec.exhausted()) {
        throw DecodeError("entropy decoder: " + std::to_string(count) +
                          " levels decoded but bytes remain (count mismatch)");
    }
    return out;
}

} // namespace nncfl::nnc
