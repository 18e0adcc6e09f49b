#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "pocketllm/matrix.hpp"

namespace pocketllm {

template <typename T>
struct Codebook {
    Matrix<T> C; // K x d
    std::uint64_t seed = 0;

    std::size_t K() const { return C.rows; }
    std::size_t d() const { return C.cols; }
};

/// Per-dimension normal parameters for codeword sampling.
struct LatentStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

LatentStats latent_stats(const Matrix<double>& z);
LatentStats latent_stats(const Matrix<float>& z);

/// i.i.d. Normal(mean[j], stddev[j]) codewords; standard normal when no
/// statistics are given. Deterministic in `seed`.
template <typename T>
Codebook<T> init_codebook(std::size_t K, std::size_t d, std::uint64_t seed,
                          const std::optional<LatentStats>& stats = std::nullopt);

/// Uniform(-1/K, 1/K) codewords: the "no informed initialization" baseline.
template <typename T>
Codebook<T> init_codebook_uniform(std::size_t K, std::size_t d, std::uint64_t seed);

template <typename T>
struct AssignmentResult {
    Matrix<T> quantized;              // row i == C[indices[i]]
    std::vector<std::uint32_t> indices;
    std::vector<double> distances;    // squared L2 to the chosen codeword
};

/// Exhaustive nearest-codeword search, squared distances accumulated in
/// double; ties resolve to the lowest index.
template <typename T>
AssignmentResult<T> assign_nearest(const Matrix<T>& z, const Codebook<T>& cb);

/// Straight-through: the lookup's Jacobian is taken to be the identity.
template <typename T>
Matrix<T> ste_route(const Matrix<T>& upstream_grad_on_quantized);

template <typename T>
struct VqLoss {
    double loss = 0;
    Matrix<T> grad_z;        // N x d
    Matrix<T> grad_codebook; // K x d, scattered by index
};

/// sum_i ||Z_i - Z'_i||^2. Symmetric mode pulls Z toward Z' and the selected
/// codewords toward Z with equal weight. Split mode keeps the full pull on the
/// codebook and scales the encoder pull by `commitment`.
struct VqLossOptions {
    bool split = false;
    double commitment = 0.25;
};

template <typename T>
VqLoss<T> vq_loss(const Matrix<T>& z, const AssignmentResult<T>& assignment, std::size_t K,
                  const VqLossOptions& opts = {});

std::vector<std::size_t> usage_counts(std::span<const std::uint32_t> indices, std::size_t K);

/// Re-seeds every codeword with zero usage from a randomly drawn row of `z`.
/// Returns the number of refreshed codewords.
template <typename T>
std::size_t refresh_dead_codewords(Codebook<T>& cb, std::span<const std::size_t> usage, const Matrix<T>& z,
                                   std::mt19937_64& rng);

/// Moves every used codeword to the mean of its assigned vectors.
template <typename T>
void lloyd_recenter(Codebook<T>& cb, const Matrix<T>& z, std::span<const std::uint32_t> indices);

} // namespace pocketllm
