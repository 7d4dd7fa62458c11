#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "ceperfed/errors.hpp"
#include "ceperfed/hsvd.hpp"
#include "ceperfed/tensor.hpp"

namespace ceperfed::wire {

// Message layout (all little-endian):
//   magic "CEPF" | version u16 | kind u8 | round u32 | client u16 |
//   payload_len u64 | crc32 u32 | payload
// The CRC covers every byte except the crc32 field itself. Payload scalars
// travel as f32; counts and coordinates as u32.

inline constexpr std::array<std::uint8_t, 4> kMagic{'C', 'E', 'P', 'F'};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 25;
inline constexpr std::uint8_t kKindUpload = 0;
inline constexpr std::uint8_t kKindDownload = 1;

// Per-layer payload variant tags.
inline constexpr std::uint8_t kVariantResidualCompensated = 0;
inline constexpr std::uint8_t kVariantFactors = 1;
inline constexpr std::uint8_t kVariantGrouped = 2;
inline constexpr std::uint8_t kVariantDense = 3;

// Decoded tensors may allocate; refuse absurd shapes outright.
inline constexpr std::uint64_t kMaxLayerScalars = 1ull << 28;

namespace detail {

inline std::uint32_t crc32_feed(const std::uint8_t* data, std::size_t len, std::uint32_t state) {
    static constexpr auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    for (std::size_t i = 0; i < len; ++i) state = table[(state ^ data[i]) & 0xFFu] ^ (state >> 8);
    return state;
}

}  // namespace detail

/// Standard CRC-32 over two byte spans (header fields, then payload).
inline std::uint32_t crc32_parts(const std::uint8_t* a, std::size_t a_len, const std::uint8_t* b,
                                 std::size_t b_len) {
    std::uint32_t state = 0xFFFFFFFFu;
    state = detail::crc32_feed(a, a_len, state);
    state = detail::crc32_feed(b, b_len, state);
    return state ^ 0xFFFFFFFFu;
}

/// Client -> server message body: both compressed updates plus the alignment
/// scalar and the client's sample count.
struct UploadPayload {
    double alignment = 0.0;
    std::uint32_t sample_count = 0;
    CompressedUpdate gradient;
    CompressedUpdate parameters;
};

/// Server -> client message body: global model, historical average gradient,
/// and the client-specific historical risk gradient, all dense.
struct DownloadPayload {
    ParameterSet global_model;
    ParameterSet average_gradient;
    ParameterSet risk_gradient;
};

struct UploadMessage {
    std::uint32_t round = 0;
    std::uint16_t client = 0;
    UploadPayload payload;
};

struct DownloadMessage {
    std::uint32_t round = 0;
    std::uint16_t client = 0;
    DownloadPayload payload;
};

namespace detail {

class Writer {
public:
    std::vector<std::uint8_t> buffer;

    void u8(std::uint8_t v) { buffer.push_back(v); }
    void u16(std::uint16_t v) { append(v); }
    void u32(std::uint32_t v) { append(v); }
    void u64(std::uint64_t v) { append(v); }
    void f32(double v) { append(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

    void f32_span(const std::vector<double>& values) {
        for (double v : values) f32(v);
    }

private:
    template <typename T>
    void append(T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i)
            buffer.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
};

class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    std::uint8_t u8() { return take<std::uint8_t>(); }
    std::uint16_t u16() { return take<std::uint16_t>(); }
    std::uint32_t u32() { return take<std::uint32_t>(); }
    std::uint64_t u64() { return take<std::uint64_t>(); }
    double f32() { return static_cast<double>(std::bit_cast<float>(take<std::uint32_t>())); }

    std::vector<double> f32_span(std::size_t count) {
        std::vector<double> out(count);
        for (auto& v : out) v = f32();
        return out;
    }

    bool exhausted() const { return pos_ == size_; }

private:
    template <typename T>
    T take() {
        if (pos_ + sizeof(T) > size_)
            throw WireError(WireErrc::Malformed, "wire: payload structure overruns its length");
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v = static_cast<T>(v | (static_cast<T>(data_[pos_ + i]) << (8 * i)));
        pos_ += sizeof(T);
        return v;
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline std::uint32_t checked_dim(std::size_t dim) {
    if (dim > 0xFFFFFFFFull)
        throw WireError(WireErrc::ShapeOverflow, "wire: dimension exceeds u32 range");
    return static_cast<std::uint32_t>(dim);
}

inline void write_shape(Writer& w, const std::array<std::size_t, 4>& shape) {
    for (std::size_t d : shape) w.u32(checked_dim(d));
}

inline std::array<std::size_t, 4> read_shape(Reader& r) {
    std::array<std::size_t, 4> shape{};
    for (auto& d : shape) d = r.u32();
    return shape;
}

inline std::uint64_t layer_scalars(LayerKind kind, const std::array<std::size_t, 4>& shape) {
    std::uint64_t n = static_cast<std::uint64_t>(shape[0]) * shape[1];
    if (kind == LayerKind::Conv) n *= static_cast<std::uint64_t>(shape[2]) * shape[3];
    return n;
}

inline void write_factors(Writer& w, const LowRankFactors& f) {
    w.u32(checked_dim(f.rank));
    w.f32_span(f.u_prime);
    w.f32_span(f.v_t);
}

inline LowRankFactors read_factors(Reader& r, std::size_t rows, std::size_t cols) {
    LowRankFactors f;
    f.rows = rows;
    f.cols = cols;
    f.rank = r.u32();
    if (f.rank == 0 || f.rank > std::min(rows, cols))
        throw WireError(WireErrc::Malformed, "wire: factor rank out of range");
    f.u_prime = r.f32_span(rows * f.rank);
    f.v_t = r.f32_span(f.rank * cols);
    return f;
}

inline void write_update(Writer& w, const CompressedUpdate& update) {
    w.u8(update.kind == UpdateKind::Gradient ? 0 : 1);
    w.u32(checked_dim(update.layers.size()));
    for (const auto& layer : update.layers) {
        w.u8(static_cast<std::uint8_t>(layer.part));
        std::uint8_t variant = kVariantDense;
        if (std::holds_alternative<ResidualCompensatedLayer>(layer.payload))
            variant = kVariantResidualCompensated;
        else if (std::holds_alternative<FactorsLayer>(layer.payload))
            variant = kVariantFactors;
        else if (std::holds_alternative<GroupedLayer>(layer.payload))
            variant = kVariantGrouped;
        w.u8(variant);
        write_shape(w, layer.shape);

        switch (variant) {
            case kVariantResidualCompensated: {
                const auto& p = std::get<ResidualCompensatedLayer>(layer.payload);
                write_factors(w, p.factors);
                w.u32(checked_dim(p.residual.entries.size()));
                for (const auto& e : p.residual.entries) {
                    w.u32(e.row);
                    w.u32(e.col);
                    w.f32(e.value);
                }
                w.f32(p.residual.gamma);
                break;
            }
            case kVariantFactors:
                write_factors(w, std::get<FactorsLayer>(layer.payload).factors);
                break;
            case kVariantGrouped: {
                const auto& p = std::get<GroupedLayer>(layer.payload);
                w.u32(checked_dim(p.groups.size()));
                for (const auto& g : p.groups) write_factors(w, g);
                break;
            }
            case kVariantDense:
                w.f32_span(std::get<DenseLayerPayload>(layer.payload).values);
                break;
        }
    }
}

inline CompressedUpdate read_update(Reader& r) {
    CompressedUpdate update;
    update.kind = r.u8() == 0 ? UpdateKind::Gradient : UpdateKind::Parameters;
    const std::uint32_t layer_count = r.u32();
    update.layers.reserve(layer_count);
    for (std::uint32_t l = 0; l < layer_count; ++l) {
        CompressedLayer layer;
        const std::uint8_t part = r.u8();
        if (part > static_cast<std::uint8_t>(Part::Head))
            throw WireError(WireErrc::Malformed, "wire: unknown part tag");
        layer.part = static_cast<Part>(part);
        const std::uint8_t variant = r.u8();
        layer.shape = read_shape(r);
        layer.kind = layer.shape[2] == 0 && layer.shape[3] == 0 ? LayerKind::Dense
                                                                : LayerKind::Conv;
        const std::uint64_t scalars = layer_scalars(layer.kind, layer.shape);
        if (scalars == 0 || scalars > kMaxLayerScalars)
            throw WireError(WireErrc::ShapeOverflow, "wire: implausible layer shape");
        const std::size_t rows = layer.shape[0];
        const std::size_t cols = layer.kind == LayerKind::Dense
                                     ? layer.shape[1]
                                     : layer.shape[1] * layer.shape[2] * layer.shape[3];

        switch (variant) {
            case kVariantResidualCompensated: {
                ResidualCompensatedLayer p;
                p.factors = read_factors(r, rows, cols);
                const std::uint32_t count = r.u32();
                if (count > scalars)
                    throw WireError(WireErrc::Malformed, "wire: residual entry count too large");
                p.residual.entries.reserve(count);
                for (std::uint32_t i = 0; i < count; ++i) {
                    SparseEntry e;
                    e.row = r.u32();
                    e.col = r.u32();
                    e.value = r.f32();
                    if (e.row >= rows || e.col >= cols)
                        throw WireError(WireErrc::Malformed,
                                        "wire: residual coordinate out of range");
                    p.residual.entries.push_back(e);
                }
                p.residual.gamma = r.f32();
                layer.payload = std::move(p);
                break;
            }
            case kVariantFactors:
                layer.payload = FactorsLayer{read_factors(r, rows, cols)};
                break;
            case kVariantGrouped: {
                const std::uint32_t groups = r.u32();
                if (groups == 0 || rows % groups != 0)
                    throw WireError(WireErrc::Malformed, "wire: group count does not divide rows");
                GroupedLayer p;
                p.groups.reserve(groups);
                for (std::uint32_t g = 0; g < groups; ++g)
                    p.groups.push_back(read_factors(r, rows / groups, cols));
                layer.payload = std::move(p);
                break;
            }
            case kVariantDense:
                layer.payload = DenseLayerPayload{r.f32_span(static_cast<std::size_t>(scalars))};
                break;
            default:
                throw WireError(WireErrc::Malformed, "wire: unknown layer variant");
        }
        update.layers.push_back(std::move(layer));
    }
    return update;
}

inline void write_dense_set(Writer& w, const ParameterSet& set) {
    w.u32(checked_dim(set.specs.size()));
    for (std::size_t l = 0; l < set.specs.size(); ++l) {
        const LayerSpec& spec = set.specs[l];
        w.u8(static_cast<std::uint8_t>(spec.part));
        w.u8(spec.kind == LayerKind::Conv ? 0 : 1);
        write_shape(w, spec.shape);
        w.f32_span(set.values[l]);
    }
}

inline ParameterSet read_dense_set(Reader& r, const std::vector<LayerSpec>& specs) {
    const std::uint32_t count = r.u32();
    if (count != specs.size())
        throw WireError(WireErrc::Malformed, "wire: dense set layer count mismatch");
    ParameterSet out;
    out.specs = specs;
    out.values.reserve(count);
    for (const LayerSpec& spec : specs) {
        const std::uint8_t part = r.u8();
        const std::uint8_t kind = r.u8();
        const auto shape = read_shape(r);
        if (part != static_cast<std::uint8_t>(spec.part) ||
            kind != (spec.kind == LayerKind::Conv ? 0 : 1) || shape != spec.shape)
            throw WireError(WireErrc::Malformed, "wire: dense set layer does not match model");
        out.values.push_back(r.f32_span(spec.size()));
    }
    return out;
}

inline std::vector<std::uint8_t> seal(std::uint8_t kind, std::uint32_t round,
                                      std::uint16_t client,
                                      const std::vector<std::uint8_t>& payload) {
    Writer w;
    w.buffer.reserve(kHeaderSize + payload.size());
    for (std::uint8_t m : kMagic) w.u8(m);
    w.u16(kVersion);
    w.u8(kind);
    w.u32(round);
    w.u16(client);
    w.u64(payload.size());
    // CRC over the 21 header bytes written so far plus the payload.
    w.u32(crc32_parts(w.buffer.data(), w.buffer.size(), payload.data(), payload.size()));
    w.buffer.insert(w.buffer.end(), payload.begin(), payload.end());
    return std::move(w.buffer);
}

struct Opened {
    std::uint8_t kind = 0;
    std::uint32_t round = 0;
    std::uint16_t client = 0;
    Reader payload{nullptr, 0};
};

inline Opened open(const std::vector<std::uint8_t>& message, std::uint8_t expected_kind) {
    if (message.size() < kHeaderSize)
        throw WireError(WireErrc::Truncated, "wire: message shorter than header");
    Reader header(message.data(), kHeaderSize);
    for (std::uint8_t m : kMagic)
        if (header.u8() != m) throw WireError(WireErrc::BadMagic, "wire: bad magic");
    const std::uint16_t version = header.u16();
    if (version != kVersion)
        throw WireError(WireErrc::BadVersion,
                        "wire: unsupported version " + std::to_string(version));
    Opened o;
    o.kind = header.u8();
    o.round = header.u32();
    o.client = header.u16();
    const std::uint64_t payload_len = header.u64();
    const std::uint32_t stated_crc = header.u32();
    if (message.size() < kHeaderSize + payload_len)
        throw WireError(WireErrc::Truncated, "wire: message shorter than stated payload");
    if (message.size() > kHeaderSize + payload_len)
        throw WireError(WireErrc::Malformed, "wire: trailing bytes after payload");
    const std::uint32_t crc =
        crc32_parts(message.data(), kHeaderSize - 4, message.data() + kHeaderSize,
                    static_cast<std::size_t>(payload_len));
    if (crc != stated_crc) throw WireError(WireErrc::BadChecksum, "wire: checksum mismatch");
    if (o.kind != expected_kind)
        throw WireError(WireErrc::Malformed, "wire: unexpected message kind");
    o.payload = Reader(message.data() + kHeaderSize, static_cast<std::size_t>(payload_len));
    return o;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_upload(const UploadPayload& payload, std::uint32_t round,
                                               std::uint16_t client) {
    detail::Writer w;
    w.f32(payload.alignment);
    w.u32(payload.sample_count);
    detail::write_update(w, payload.gradient);
    detail::write_update(w, payload.parameters);
    return detail::seal(kKindUpload, round, client, w.buffer);
}

inline UploadMessage decode_upload(const std::vector<std::uint8_t>& message) {
    detail::Opened o = detail::open(message, kKindUpload);
    UploadMessage out;
    out.round = o.round;
    out.client = o.client;
    out.payload.alignment = o.payload.f32();
    out.payload.sample_count = o.payload.u32();
    out.payload.gradient = detail::read_update(o.payload);
    out.payload.parameters = detail::read_update(o.payload);
    if (!o.payload.exhausted())
        throw WireError(WireErrc::Malformed, "wire: unparsed bytes at end of upload payload");
    return out;
}

inline std::vector<std::uint8_t> encode_download(const DownloadPayload& payload,
                                                 std::uint32_t round, std::uint16_t client) {
    detail::Writer w;
    detail::write_dense_set(w, payload.global_model);
    detail::write_dense_set(w, payload.average_gradient);
    detail::write_dense_set(w, payload.risk_gradient);
    return detail::seal(kKindDownload, round, client, w.buffer);
}

inline DownloadMessage decode_download(const std::vector<std::uint8_t>& message,
                                       const std::vector<LayerSpec>& specs) {
    detail::Opened o = detail::open(message, kKindDownload);
    DownloadMessage out;
    out.round = o.round;
    out.client = o.client;
    out.payload.global_model = detail::read_dense_set(o.payload, specs);
    out.payload.average_gradient = detail::read_dense_set(o.payload, specs);
    out.payload.risk_gradient = detail::read_dense_set(o.payload, specs);
    if (!o.payload.exhausted())
        throw WireError(WireErrc::Malformed, "wire: unparsed bytes at end of download payload");
    return out;
}

/// f32 image of a value: what survives one trip over the wire.
inline double f32_round_trip(double v) { return static_cast<double>(static_cast<float>(v)); }

inline ParameterSet f32_round_trip(const ParameterSet& set) {
    ParameterSet out = set;
    for (auto& layer : out.values)
        for (double& v : layer) v = f32_round_trip(v);
    return out;
}

}  // namespace ceperfed::wire
