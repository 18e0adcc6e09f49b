#include "pocketllm/pocket_format.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace pocketllm {

std::uint16_t fp16_encode(float x) {
    const auto bits = std::bit_cast<std::uint32_t>(x);
    const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    const std::uint32_t exp = (bits >> 23) & 0xffu;
    std::uint32_t mant = bits & 0x7fffffu;

    if (exp == 0xff) {
        return mant ? static_cast<std::uint16_t>(sign | 0x7e00u) : static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    const int e = static_cast<int>(exp) - 127 + 15;
    if (e >= 31) {
        return static_cast<std::uint16_t>(sign | 0x7c00u);
    }
    if (e <= 0) {
        // Below 2^-25 everything rounds to zero (the exact halfway point ties to even 0).
        if (e < -10) {
            return sign;
        }
        mant |= 0x800000u;
        const unsigned shift = static_cast<unsigned>(14 - e);
        std::uint32_t half = mant >> shift;
        const std::uint32_t rem = mant & ((1u << shift) - 1u);
        const std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half & 1u))) {
            ++half; // may carry into the smallest normal, which is the right answer
        }
        return static_cast<std::uint16_t>(sign | half);
    }
    std::uint32_t half = (static_cast<std::uint32_t>(e) << 10) | (mant >> 13);
    const std::uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1u))) {
        ++half; // carry out of the mantissa bumps the exponent, up to +inf
    }
    return static_cast<std::uint16_t>(sign | half);
}

float fp16_decode(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exp = (h >> 10) & 0x1fu;
    std::uint32_t mant = h & 0x3ffu;
    std::uint32_t bits = 0;
    if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant ? 0x00400000u : 0u);
    } else if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            int e = -14;
            while ((mant & 0x400u) == 0) {
                mant <<= 1;
                --e;
            }
            mant &= 0x3ffu;
            bits = sign | (static_cast<std::uint32_t>(e + 127) << 23) | (mant << 13);
        }
    } else {
        bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    return std::bit_cast<float>(bits);
}

unsigned index_bit_width(std::size_t K) {
    check(K >= 1, ErrorKind::config, "codebook size must be >= 1");
    return static_cast<unsigned>(std::bit_width(K - 1));
}

std::size_t packed_index_bytes(std::size_t N, std::size_t K) {
    const std::uint64_t bits = static_cast<std::uint64_t>(N) * index_bit_width(K);
    return static_cast<std::size_t>((bits + 7) / 8);
}

std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> indices, std::size_t K) {
    check(K >= 2, ErrorKind::config, "pack_indices: K must be >= 2");
    const unsigned b = index_bit_width(K);
    std::vector<std::uint8_t> out(packed_index_bytes(indices.size(), K), 0);
    std::uint64_t acc = 0;
    unsigned filled = 0;
    std::size_t pos = 0;
    for (std::size_t j = 0; j < indices.size(); ++j) {
        if (indices[j] >= K) {
            throw Error(ErrorKind::data, "pack_indices: index " + std::to_string(indices[j]) + " at position " +
                                             std::to_string(j) + " is >= K=" + std::to_string(K));
        }
        acc |= static_cast<std::uint64_t>(indices[j]) << filled;
        filled += b;
        while (filled >= 8) {
            out[pos++] = static_cast<std::uint8_t>(acc);
            acc >>= 8;
            filled -= 8;
        }
    }
    if (filled > 0) {
        out[pos++] = static_cast<std::uint8_t>(acc);
    }
    return out;
}

std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t N, std::size_t K) {
    check(K >= 2, ErrorKind::config, "unpack_indices: K must be >= 2");
    if (bytes.size() != packed_index_bytes(N, K)) {
        throw FormatError(FormatErrorCode::length, "index payload is " + std::to_string(bytes.size()) +
                                                       " bytes, expected " +
                                                       std::to_string(packed_index_bytes(N, K)));
    }
    const unsigned b = index_bit_width(K);
    const std::uint64_t mask = (std::uint64_t{1} << b) - 1;
    std::vector<std::uint32_t> out(N);
    std::uint64_t acc = 0;
    unsigned filled = 0;
    std::size_t pos = 0;
    for (std::size_t j = 0; j < N; ++j) {
        while (filled < b) {
            acc |= static_cast<std::uint64_t>(bytes[pos++]) << filled;
            filled += 8;
        }
        const auto v = static_cast<std::uint32_t>(acc & mask);
        acc >>= b;
        filled -= b;
        if (v >= K) {
            throw FormatError(FormatErrorCode::index, "decoded index " + std::to_string(v) + " at position " +
                                                          std::to_string(j) + " is >= K=" + std::to_string(K));
        }
        out[j] = v;
    }
    return out;
}

Ratio compression_ratio_params(std::uint64_t N, std::uint64_t d, std::uint64_t K, std::uint64_t N_fd) {
    return Ratio{N * d, K * d + N + N_fd, false};
}

Ratio compression_ratio_bits(std::uint64_t N, std::uint64_t d, std::uint64_t K, std::uint64_t N_fd) {
    const unsigned b = index_bit_width(K);
    return Ratio{32 * N * d, 16 * K * d + b * N + 32 * N_fd, !std::has_single_bit(K)};
}

AvgBits avg_bits(std::span<const LayerBudget> layers) {
    check(!layers.empty(), ErrorKind::config, "avg_bits: no layers");
    std::uint64_t total = 0;
    std::uint64_t index = 0;
    std::uint64_t weights = 0;
    for (const auto& l : layers) {
        const std::uint64_t b = index_bit_width(l.K);
        total += 16 * l.K * l.d + b * l.N + 32 * l.N_fd;
        index += b * l.N;
        weights += l.N * l.d;
    }
    check(weights > 0, ErrorKind::config, "avg_bits: zero weights");
    return AvgBits{static_cast<double>(total) / static_cast<double>(weights),
                   static_cast<double>(index) / static_cast<double>(weights)};
}

std::uint64_t FileFootprint::total_bytes() const {
    std::uint64_t t = preamble_bytes;
    for (const auto& l : layers) {
        t += l.header_bytes + l.payload_bytes();
    }
    return t;
}

std::uint64_t FileFootprint::payload_bytes() const {
    std::uint64_t t = 0;
    for (const auto& l : layers) {
        t += l.payload_bytes();
    }
    return t;
}

namespace {

constexpr char kMagic[4] = {'P', 'K', 'L', 'M'};
constexpr std::size_t kPreambleBytes = 4 + 2 + 1 + 1 + 4;
// role, block, d_in, d_out, d, K, m, h, flags, residual mask, share ref
constexpr std::size_t kLayerFixedBytes = 1 + 4 + 4 * 4 + 2 + 4 + 4 + 4 + 4;

constexpr std::uint32_t kFlagBias = 1u << 0;
constexpr unsigned kFlagNormShift = 1;
constexpr std::uint32_t kFlagNormMask = 3u << kFlagNormShift;
constexpr std::uint32_t kFlagActivationNone = 1u << 3;
constexpr std::uint32_t kKnownFlags = kFlagBias | kFlagNormMask | kFlagActivationNone;

class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put(v, 2); }
    void u32(std::uint32_t v) { put(v, 4); }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    void put(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) {
            buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> b) : buf_(b) {}

    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        if (buf_.size() - pos_ < n) {
            throw FormatError(FormatErrorCode::length, std::string("truncated file while reading ") + what);
        }
        auto s = buf_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8(const char* what) { return take(1, what)[0]; }
    std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(get(2, what)); }
    std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(get(4, what)); }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    std::uint64_t get(int n, const char* what) {
        auto s = take(static_cast<std::size_t>(n), what);
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) {
            v |= static_cast<std::uint64_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
        }
        return v;
    }
    std::span<const std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

std::uint32_t encode_flags(const MetaNetConfig& c) {
    std::uint32_t f = 0;
    if (c.use_bias) {
        f |= kFlagBias;
    }
    f |= static_cast<std::uint32_t>(c.norm) << kFlagNormShift;
    if (c.activation == Activation::none) {
        f |= kFlagActivationNone;
    }
    return f;
}

// Index of the first layer carrying each layer's codebook and decoder.
std::vector<std::uint32_t> share_refs(const CompressedModel& model) {
    std::map<const void*, std::uint32_t> owner;
    std::vector<std::uint32_t> refs(model.layers.size());
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        check(l.codebook && l.decoder, ErrorKind::data, "layer " + l.name + " has no codebook or decoder");
        auto [it, fresh] = owner.emplace(l.codebook.get(), static_cast<std::uint32_t>(i));
        if (!fresh) {
            check(model.layers[it->second].decoder == l.decoder, ErrorKind::data,
                  "layer " + l.name + " shares a codebook but not the decoder of layer " +
                      model.layers[it->second].name);
        }
        refs[i] = it->second;
    }
    return refs;
}

void validate_layer(const CompressedLayer& l) {
    check(l.d > 0 && l.d_out == l.d * l.L, ErrorKind::data, "layer " + l.name + ": d_out != d*L");
    check(l.codebook->d() == l.d && l.decoder->config.d == l.d, ErrorKind::data,
          "layer " + l.name + ": codebook/decoder width != d");
    check(l.indices.size() == l.N(), ErrorKind::data, "layer " + l.name + ": index count != N");
    check(l.name.size() <= 0xffff, ErrorKind::data, "layer name too long");
}

} // namespace

FileFootprint footprint(const CompressedModel& model) {
    const auto refs = share_refs(model);
    FileFootprint fp;
    fp.preamble_bytes = kPreambleBytes;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        LayerFootprint lf;
        lf.name = l.name;
        lf.header_bytes = 2 + l.name.size() + kLayerFixedBytes;
        const bool owner = refs[i] == i;
        lf.codebook_bytes = owner ? 2ull * l.K() * l.d : 0;
        lf.index_bytes = packed_index_bytes(l.N(), l.K());
        lf.decoder_bytes = owner ? 4ull * l.decoder->params.size() : 0;
        lf.index_bits = static_cast<std::uint64_t>(l.N()) * index_bit_width(l.K());
        fp.layers.push_back(lf);
    }
    return fp;
}

std::vector<std::uint8_t> write_pocket_file(const CompressedModel& model) {
    const auto refs = share_refs(model);
    ByteWriter w;
    for (char c : kMagic) {
        w.u8(static_cast<std::uint8_t>(c));
    }
    w.u16(kPocketVersion);
    w.u8(static_cast<std::uint8_t>(model.scope));
    w.u8(0);
    w.u32(static_cast<std::uint32_t>(model.layers.size()));

    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        validate_layer(l);
        const auto& cfg = l.decoder->config;
        w.u16(static_cast<std::uint16_t>(l.name.size()));
        w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(l.name.data()), l.name.size()));
        w.u8(static_cast<std::uint8_t>(l.role));
        w.u32(static_cast<std::uint32_t>(l.block_index));
        w.u32(static_cast<std::uint32_t>(l.d_in));
        w.u32(static_cast<std::uint32_t>(l.d_out));
        w.u32(static_cast<std::uint32_t>(l.d));
        w.u32(static_cast<std::uint32_t>(l.K()));
        w.u16(static_cast<std::uint16_t>(cfg.m));
        w.u32(static_cast<std::uint32_t>(cfg.h));
        w.u32(encode_flags(cfg));
        w.u32(cfg.residual_mask);
        w.u32(refs[i]);

        const bool owner = refs[i] == i;
        if (owner) {
            for (float v : l.codebook->C.data) {
                w.u16(fp16_encode(v));
            }
        }
        w.bytes(pack_indices(l.indices, l.K()));
        if (owner) {
            for (float p : l.decoder->params) {
                w.f32(p);
            }
        }
    }
    return w.take();
}

CompressedModel read_pocket_file(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw FormatError(FormatErrorCode::magic, "not a pocket file (bad magic)");
    }
    r.take(4, "magic");
    const auto version = r.u16("version");
    if (version != kPocketVersion) {
        throw FormatError(FormatErrorCode::version, "unsupported pocket file version " + std::to_string(version));
    }
    const auto scope = r.u8("scope");
    if (scope > 1) {
        throw FormatError(FormatErrorCode::header, "unknown scope " + std::to_string(scope));
    }
    r.u8("reserved");
    const auto count = r.u32("layer count");

    CompressedModel model;
    model.scope = static_cast<Scope>(scope);
    for (std::uint32_t i = 0; i < count; ++i) {
        CompressedLayer l;
        const auto name_len = r.u16("name length");
        auto name = r.take(name_len, "name");
        l.name.assign(name.begin(), name.end());
        const auto role = r.u8("role");
        if (role > static_cast<std::uint8_t>(LayerRole::other)) {
            throw FormatError(FormatErrorCode::header, "layer " + l.name + ": unknown role");
        }
        l.role = static_cast<LayerRole>(role);
        l.block_index = static_cast<int>(r.u32("block"));
        l.d_in = r.u32("d_in");
        l.d_out = r.u32("d_out");
        l.d = r.u32("d");
        const std::size_t K = r.u32("K");
        MetaNetConfig cfg;
        cfg.m = r.u16("m");
        cfg.h = r.u32("h");
        const auto flags = r.u32("flags");
        cfg.residual_mask = r.u32("residual mask");
        const auto ref = r.u32("share ref");

        auto bad = [&](const std::string& why) { return FormatError(FormatErrorCode::header, "layer " + l.name + ": " + why); };
        if (l.d == 0 || l.d_in == 0 || l.d_out % l.d != 0) {
            throw bad("d must divide d_out");
        }
        if (K < 2) {
            throw bad("K must be >= 2");
        }
        if ((flags & ~kKnownFlags) != 0 || ((flags & kFlagNormMask) >> kFlagNormShift) > 2) {
            throw bad("unknown flags");
        }
        if (cfg.m < 1 || cfg.m > 32 || cfg.h < 1 || (cfg.m < 32 && (cfg.residual_mask >> cfg.m) != 0)) {
            throw bad("invalid decoder shape");
        }
        if (ref > i) {
            throw bad("share reference points forward");
        }
        cfg.d = l.d;
        cfg.use_bias = (flags & kFlagBias) != 0;
        cfg.norm = static_cast<NormMode>((flags & kFlagNormMask) >> kFlagNormShift);
        cfg.activation = (flags & kFlagActivationNone) ? Activation::none : Activation::gelu;
        l.L = l.d_out / l.d;

        const bool owner = ref == i;
        if (owner) {
            auto cb = std::make_shared<Codebook<float>>();
            cb->C = Matrix<float>(K, l.d);
            auto raw = r.take(2 * K * l.d, "codebook");
            for (std::size_t k = 0; k < K * l.d; ++k) {
                cb->C.data[k] = fp16_decode(static_cast<std::uint16_t>(raw[2 * k] | (raw[2 * k + 1] << 8)));
            }
            l.codebook = std::move(cb);
        } else {
            const auto& o = model.layers[ref];
            if (o.K() != K || o.d != l.d || !(o.decoder->config == cfg)) {
                throw bad("shared codebook/decoder shape differs from its owner");
            }
            l.codebook = o.codebook;
            l.decoder = o.decoder;
        }
        l.indices = unpack_indices(r.take(packed_index_bytes(l.N(), K), "indices"), l.N(), K);
        if (owner) {
            auto dec = std::make_shared<MetaNet<float>>(cfg);
            for (auto& p : dec->params) {
                p = r.f32("decoder");
            }
            l.decoder = std::move(dec);
        }
        model.layers.push_back(std::move(l));
    }
    if (r.remaining() != 0) {
        throw FormatError(FormatErrorCode::length, std::to_string(r.remaining()) + " trailing bytes after last layer");
    }
    return model;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(static_cast<bool>(in), ErrorKind::data, "cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void save_pocket_file(const std::filesystem::path& path, const CompressedModel& model) {
    const auto bytes = write_pocket_file(model);
    std::ofstream out(path, std::ios::binary);
    check(static_cast<bool>(out), ErrorKind::data, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    check(static_cast<bool>(out), ErrorKind::data, "failed writing " + path.string());
}

CompressedModel load_pocket_file(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return read_pocket_file(bytes);
}

} // namespace pocketllm
