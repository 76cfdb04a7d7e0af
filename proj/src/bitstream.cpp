#include "nncfl/bitstream.hpp"

#include "nncfl/byte_io.hpp"

#include <cmath>
#include <limits>

namespace nncfl::nnc {

namespace {

constexpr char kMagic[4] = {'N', 'N', 'F', 'L'};

std::size_t row_length_of(const Shape& shape) { return shape.empty() ? 0 : shape.back(); }

} // namespace

std::size_t NncBitstream::header_bytes() const {
    std::size_t n = 4 + 1 + 2 + 1 + 2 + 8 + 8 + 2;
    for (const auto& t : tensors) {
        n += 2 + t.name.size() + 1 + 4 * t.shape.size() + 4;
    }
    return n;
}

std::size_t NncBitstream::byte_size() const {
    std::size_t n = header_bytes();
    for (const auto& t : tensors) {
        n += t.payload.size();
    }
    return n;
}

std::vector<std::uint8_t> NncBitstream::serialize() const {
    if (tensors.size() > std::numeric_limits<std::uint16_t>::max()) {
        throw ArgumentError("bitstream: too many tensors");
    }
    ByteWriter w;
    w.buffer().reserve(byte_size());
    w.text(std::string_view(kMagic, 4));
    w.u8(version);
    w.i16(qp);
    w.u8(qp_density);
    w.u16(sparsity_e4);
    w.u64(node_id);
    w.u64(parent_id);
    w.u16(static_cast<std::uint16_t>(tensors.size()));
    for (const auto& t : tensors) {
        if (t.name.size() > std::numeric_limits<std::uint16_t>::max() || t.shape.size() > 255) {
            throw ArgumentError("bitstream: tensor '" + t.name + "' header does not fit");
        }
        w.u16(static_cast<std::uint16_t>(t.name.size()));
        w.text(t.name);
        w.u8(static_cast<std::uint8_t>(t.shape.size()));
        for (const auto d : t.shape) {
            w.u32(static_cast<std::uint32_t>(d));
        }
        w.u32(static_cast<std::uint32_t>(t.payload.size()));
        w.bytes(t.payload);
    }
    return w.take();
}

NncBitstream NncBitstream::parse(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
        throw FormatError("bitstream: bad magic");
    }
    ByteReader r(bytes.subspan(4), "bitstream");
    NncBitstream s;
    s.version = r.u8();
    if (s.version != kFormatVersion) {
        throw FormatError("bitstream: unsupported version " + std::to_string(s.version));
    }
    s.qp = r.i16();
    s.qp_density = r.u8();
    s.sparsity_e4 = r.u16();
    if (s.sparsity_e4 >= 10000) {
        throw FormatError("bitstream: sparsity field out of range");
    }
    s.node_id = r.u64();
    s.parent_id = r.u64();
    const std::size_t count = r.u16();
    s.tensors.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        TensorPayload t;
        t.name = r.text(r.u16());
        const std::size_t ndims = r.u8();
        for (std::size_t d = 0; d < ndims; ++d) {
            const std::uint32_t dim = r.u32();
            if (dim == 0) {
                throw FormatError("bitstream: tensor '" + t.name + "' has a zero dimension");
            }
            t.shape.push_back(dim);
        }
        const auto payload = r.bytes(r.u32());
        t.payload.assign(payload.begin(), payload.end());
        s.tensors.push_back(std::move(t));
    }
    if (r.remaining() != 0) {
        throw DecodeError("bitstream: " + std::to_string(r.remaining()) + " trailing bytes");
    }
    return s;
}

void NncBitstream::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

NncBitstream NncBitstream::load(const std::filesystem::path& path) { return parse(read_file(path)); }

NncBitstream encode_update(const ModelWeights& update, const CodecConfig& config,
                           std::uint64_t node_id, std::uint64_t parent_id, EncodeStats* stats) {
    NncBitstream s;
    s.node_id = node_id;
    s.parent_id = parent_id;
    if (config.bypass) {
        s.qp = 0;
        s.qp_density = 0;
        s.sparsity_e4 = 0;
    } else {
        if (config.qp < std::numeric_limits<std::int16_t>::min() ||
            config.qp > std::numeric_limits<std::int16_t>::max() || config.qp_density < 1 ||
            config.qp_density > 255) {
            throw ArgumentError("encode_update: qp/qp_density out of range");
        }
        if (!(config.sparsity >= 0.0 && config.sparsity < 1.0)) {
            throw ArgumentError("encode_update: sparsity must lie in [0, 1)");
        }
        s.qp = static_cast<std::int16_t>(config.qp);
        s.qp_density = static_cast<std::uint8_t>(config.qp_density);
        s.sparsity_e4 = static_cast<std::uint16_t>(std::lround(config.sparsity * 1e4));
    }
    const double step = config.bypass ? 0.0 : qp_to_step_size(config.qp, config.qp_density);
    for (std::size_t i = 0; i < update.count(); ++i) {
        const Tensor& t = update[i];
        for (std::size_t j = 0; j < i; ++j) {
            if (update[j].name() == t.name()) {
                throw ArgumentError("encode_update: duplicate tensor name '" + t.name() + "'");
            }
        }
        TensorPayload p{t.name(), t.shape(), {}};
        if (config.bypass) {
            ByteWriter w;
            w.buffer().reserve(4 * t.size());
            for (const float v : t.values()) {
                w.f32(v);
            }
            p.payload = w.take();
            if (stats != nullptr) {
                for (const float v : t.values()) {
                    stats->zero_levels += v == 0.0f ? 1 : 0;
                }
            }
        } else {
            const QuantizedTensor q = quantize(sparsify(t, config.sparsity), step);
            ContextModel ctx;
            p.payload = cabac_encode(q.levels, ctx, row_length_of(t.shape()));
            if (stats != nullptr) {
                for (const Level l : q.levels) {
                    stats->zero_levels += l == 0 ? 1 : 0;
                }
            }
        }
        if (stats != nullptr) {
            stats->total_levels += t.size();
        }
        s.tensors.push_back(std::move(p));
    }
    return s;
}

ModelWeights decode_update(const NncBitstream& stream) {
    if (stream.version != kFormatVersion) {
        throw FormatError("decode_update: unsupported version " + std::to_string(stream.version));
    }
    ModelWeights out;
    const double step = stream.is_raw() ? 0.0 : qp_to_step_size(stream.qp, stream.qp_density);
    for (const auto& p : stream.tensors) {
        const std::size_t n = shape_size(p.shape);
        if (stream.is_raw()) {
            if (p.payload.size() != 4 * n) {
                throw DecodeError("decode_update: raw payload of '" + p.name + "' has " +
                                  std::to_string(p.payload.size()) + " bytes, expected " +
                                  std::to_string(4 * n));
            }
            ByteReader r(p.payload, "raw payload");
            std::vector<float> data(n);
            for (auto& v : data) {
                v = r.f32();
            }
            out.push_back(Tensor(p.name, p.shape, std::move(data)));
        } else {
            ContextModel ctx;
            QuantizedTensor q{p.name, p.shape, cabac_decode(p.payload, n, ctx, row_length_of(p.shape)),
                              step};
            out.push_back(dequantize(q));
        }
    }
    return out;
}

ModelWeights decode_update(const NncBitstream& stream, const ModelWeights& expected) {
    if (stream.tensors.size() != expected.count()) {
        throw SchemaError("decode_update: stream has " + std::to_string(stream.tensors.size()) +
                          " tensors, model expects " + std::to_string(expected.count()));
    }
    for (std::size_t i = 0; i < expected.count(); ++i) {
        const auto& p = stream.tensors[i];
        if (p.name != expected[i].name() || p.shape != expected[i].shape()) {
            throw SchemaError("decode_update: tensor " + std::to_string(i) + " is '" + p.name + "' " +
                              shape_to_string(p.shape) + ", model expects '" + expected[i].name() +
                              "' " + shape_to_string(expected[i].shape()));
        }
    }
    return decode_update(stream);
}

double compression_ratio(double compressed_bytes, double uncompressed_bytes) {
    if (!(uncompressed_bytes > 0.0)) {
        throw ArgumentError("compression_ratio: uncompressed size must be positive");
    }
    return 100.0 * compressed_bytes / uncompressed_bytes;
}

} // namespace nncfl::nnc
