#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "pocketllm/compressed.hpp"
#include "pocketllm/error.hpp"

namespace pocketllm {

// IEEE-754 binary16, round-to-nearest-even. NaN encodes as canonical quiet NaN.
std::uint16_t fp16_encode(float x);
float fp16_decode(std::uint16_t h);
inline float fp16_round(float x) { return fp16_decode(fp16_encode(x)); }

/// ceil(log2 K); 0 for K == 1.
unsigned index_bit_width(std::size_t K);

std::size_t packed_index_bytes(std::size_t N, std::size_t K);

/// LSB-first bitstream: index j occupies bits [j*b, (j+1)*b), last byte zero-padded.
std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> indices, std::size_t K);
std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t N, std::size_t K);

/// Exact ratio kept as an integer fraction.
struct Ratio {
    std::uint64_t numerator = 0;
    std::uint64_t denominator = 1;
    bool index_width_rounded = false; // K was not a power of two
    double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }
};

/// N*d / (K*d + N + N_fd): parameter-count ratio.
Ratio compression_ratio_params(std::uint64_t N, std::uint64_t d, std::uint64_t K, std::uint64_t N_fd);

/// 32*N*d / (16*K*d + ceil(log2 K)*N + 32*N_fd): fp32 weights vs fp16 codebook,
/// packed indices and fp32 decoder.
Ratio compression_ratio_bits(std::uint64_t N, std::uint64_t d, std::uint64_t K, std::uint64_t N_fd);

struct LayerBudget {
    std::uint64_t N = 0;
    std::uint64_t d = 0;
    std::uint64_t K = 0;
    std::uint64_t N_fd = 0;
};

struct AvgBits {
    double total = 0;      // all stored bits per original weight
    double index_only = 0; // sum(ceil(log2 K)*N) / sum(N*d)
};

AvgBits avg_bits(std::span<const LayerBudget> layers);

inline constexpr std::uint16_t kPocketVersion = 1;

enum class FormatErrorCode { magic, version, length, header, index };

class FormatError : public Error {
public:
    FormatError(FormatErrorCode code, const std::string& what) : Error(ErrorKind::corrupt, what), code_(code) {}
    FormatErrorCode code() const noexcept { return code_; }

private:
    FormatErrorCode code_;
};

/// Per-layer byte accounting of a serialized model.
struct LayerFootprint {
    std::string name;
    std::uint64_t header_bytes = 0;
    std::uint64_t codebook_bytes = 0; // zero for layers borrowing a shared codebook
    std::uint64_t index_bytes = 0;
    std::uint64_t decoder_bytes = 0;
    std::uint64_t index_bits = 0;  // N*ceil(log2 K), unpadded
    std::uint64_t payload_bytes() const { return codebook_bytes + index_bytes + decoder_bytes; }
};

struct FileFootprint {
    std::uint64_t preamble_bytes = 0;
    std::vector<LayerFootprint> layers;
    std::uint64_t total_bytes() const;
    std::uint64_t payload_bytes() const;
    std::uint64_t overhead_bytes() const { return total_bytes() - payload_bytes(); }
};

std::vector<std::uint8_t> write_pocket_file(const CompressedModel& model);
CompressedModel read_pocket_file(std::span<const std::uint8_t> bytes);
FileFootprint footprint(const CompressedModel& model);

void save_pocket_file(const std::filesystem::path& path, const CompressedModel& model);
CompressedModel load_pocket_file(const std::filesystem::path& path);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

} // namespace pocketllm
