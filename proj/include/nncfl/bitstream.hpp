#pragma once

#include "nncfl/codec.hpp"
#include "nncfl/named_tensors.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace nncfl::nnc {

// Little-endian container layout:
//
//   "NNFL"          4 bytes magic
//   version         u8   (kFormatVersion)
//   qp              s16
//   qp_density      u8   (0 = raw float32 payloads, no quantization)
//   sparsity*10^4   u16
//   node_id         u64
//   parent_id       u64  (kNoParent when the stream has no parent)
//   tensor_count    u16
//   per tensor:
//     name_len u16, name bytes (UTF-8)
//     ndims u8, dims u32 x ndims
//     payload_len u32, payload bytes
//
// A quantized payload is the cabac_encode output of the tensor's levels with
// a fresh ContextModel and row length = last dimension. A raw payload is the
// tensor's float32 values.
inline constexpr std::uint8_t kFormatVersion = 1;
inline constexpr std::uint64_t kNoParent = ~std::uint64_t{0};

struct CodecConfig {
    int qp = -26;
    int qp_density = 2;
    double sparsity = 0.0;
    // Identity codec: payloads carry raw float32 values.
    bool bypass = false;
};

struct TensorPayload {
    std::string name;
    Shape shape;
    std::vector<std::uint8_t> payload;

    friend bool operator==(const TensorPayload&, const TensorPayload&) = default;
};

struct NncBitstream {
    std::uint8_t version = kFormatVersion;
    std::int16_t qp = 0;
    std::uint8_t qp_density = 2;
    std::uint16_t sparsity_e4 = 0;
    std::uint64_t node_id = 0;
    std::uint64_t parent_id = kNoParent;
    std::vector<TensorPayload> tensors;

    bool is_raw() const { return qp_density == 0; }
    std::size_t header_bytes() const;
    std::size_t byte_size() const;

    std::vector<std::uint8_t> serialize() const;
    // Throws FormatError for bad magic/version/header and DecodeError when
    // the declared lengths run past the end of `bytes` or bytes remain.
    static NncBitstream parse(std::span<const std::uint8_t> bytes);

    void save(const std::filesystem::path& path) const;
    static NncBitstream load(const std::filesystem::path& path);

    friend bool operator==(const NncBitstream&, const NncBitstream&) = default;
};

struct EncodeStats {
    std::size_t total_levels = 0;
    std::size_t zero_levels = 0;
    // Fraction of transmitted values that are exactly zero after
    // sparsification and quantization.
    double measured_sparsity() const {
        return total_levels == 0 ? 0.0
                                 : static_cast<double>(zero_levels) / static_cast<double>(total_levels);
    }
};

// sparsify -> quantize(qp) -> cabac, one payload per tensor, or raw float32
// payloads when config.bypass is set.
NncBitstream encode_update(const ModelWeights& update, const CodecConfig& config,
                           std::uint64_t node_id, std::uint64_t parent_id,
                           EncodeStats* stats = nullptr);

ModelWeights decode_update(const NncBitstream& stream);

// As above, plus a SchemaError unless names/shapes/order match `expected`.
ModelWeights decode_update(const NncBitstream& stream, const ModelWeights& expected);

// 100 * compressed / uncompressed. Throws ArgumentError when uncompressed <= 0.
double compression_ratio(double compressed_bytes, double uncompressed_bytes);

} // namespace nncfl::nnc
