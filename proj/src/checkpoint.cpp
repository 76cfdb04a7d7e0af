#include "nncfl/checkpoint.hpp"

#include "nncfl/byte_io.hpp"

#include <limits>

namespace nncfl {

namespace {
constexpr char kMagic[4] = {'N', 'N', 'C', 'K'};
constexpr std::uint8_t kVersion = 1;
} // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
    ByteWriter w;
    w.text(std::string_view(kMagic, 4));
    w.u8(kVersion);
    w.u8(ckpt.config ? 1 : 0);
    if (ckpt.config) {
        const auto& c = *ckpt.config;
        for (const int v : {c.dim, c.n_layers, c.n_heads, c.vocab_size, c.seq_len, c.ffn_hidden}) {
            w.u32(static_cast<std::uint32_t>(v));
        }
    }
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.count()));
    for (const auto& t : ckpt.tensors) {
        if (t.name().size() > std::numeric_limits<std::uint16_t>::max() || t.rank() > 255) {
            throw ArgumentError("checkpoint: tensor '" + t.name() + "' header does not fit");
        }
        w.u16(static_cast<std::uint16_t>(t.name().size()));
        w.text(t.name());
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (const auto d : t.shape()) {
            w.u32(static_cast<std::uint32_t>(d));
        }
        for (const float v : t.values()) {
            w.f32(v);
        }
    }
    return w.take();
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
        throw FormatError("checkpoint: bad magic");
    }
    ByteReader r(bytes.subspan(4), "checkpoint");
    if (const auto v = r.u8(); v != kVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(v));
    }
    Checkpoint ckpt;
    if (r.u8() != 0) {
        lm::ModelConfig c;
        c.dim = static_cast<int>(r.u32());
        c.n_layers = static_cast<int>(r.u32());
        c.n_heads = static_cast<int>(r.u32());
        c.vocab_size = static_cast<int>(r.u32());
        c.seq_len = static_cast<int>(r.u32());
        c.ffn_hidden = static_cast<int>(r.u32());
        c.validate();
        ckpt.config = c;
    }
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.text(r.u16());
        Shape shape(r.u8());
        for (auto& d : shape) {
            d = r.u32();
        }
        std::vector<float> data(shape_size(shape));
        for (auto& v : data) {
            v = r.f32();
        }
        ckpt.tensors.push_back(Tensor(std::move(name), std::move(shape), std::move(data)));
    }
    if (r.remaining() != 0) {
        throw DecodeError("checkpoint: trailing bytes");
    }
    if (ckpt.config) {
        const auto layout = lm::weight_layout(*ckpt.config);
        bool matches = layout.size() == ckpt.tensors.count();
        for (std::size_t i = 0; matches && i < layout.size(); ++i) {
            matches = layout[i].first == ckpt.tensors[i].name() &&
                      layout[i].second == ckpt.tensors[i].shape();
        }
        if (!matches) {
            throw SchemaError("checkpoint: tensors do not match the stored model config");
        }
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return parse_checkpoint(read_file(path));
}

} // namespace nncfl
