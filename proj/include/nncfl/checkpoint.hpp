#pragma once

#include "nncfl/model.hpp"

#include <filesystem>
#include <optional>

namespace nncfl {

// Checkpoint file, little-endian:
//   "NNCK", version u8 (1), has_config u8,
//   [dim, n_layers, n_heads, vocab_size, seq_len, ffn_hidden] u32 each (if has_config),
//   tensor_count u32, per tensor: name_len u16, name, ndims u8, dims u32 x ndims,
//   float32 values (row-major).
struct Checkpoint {
    std::optional<lm::ModelConfig> config;
    ModelWeights tensors;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace nncfl
