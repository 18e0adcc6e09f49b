#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "pocketllm/matrix.hpp"
#include "pocketllm/tensor_store.hpp"

namespace pocketllm {

struct LayerMetrics {
    double vq_sum = 0;
    double vq_mean = 0;
    double mse_mean = 0;   // mean over subvectors of ||S_i - S_hat_i||^2
    double mse_top100 = 0; // sum of the 100 largest per-subvector errors
    double frobenius_rel_err = 0;
};

/// Per-subvector squared errors ||A_i - B_i||^2, accumulated in double.
template <typename T>
std::vector<double> row_sq_errors(const Matrix<T>& a, const Matrix<T>& b);

/// Sum of the `k` largest values (all of them when fewer), summed in descending order.
double top_k_sum(std::span<const double> values, std::size_t k = 100);

template <typename T>
LayerMetrics layer_metrics(const Matrix<T>& s, const Matrix<T>& s_hat, const Matrix<T>& z, const Matrix<T>& z_q);

struct HistogramBin {
    double center = 0;
    std::size_t count = 0;
};

struct Histogram {
    double lo = 0;
    double hi = 0;
    double width = 0;
    std::vector<HistogramBin> bins;
};

/// Drops (1-coverage)/2 of the values from each tail (by rank), then bins
/// [lo, hi] into `bins` equal cells. A constant input lands in one bin.
Histogram weight_histogram(const Matrix<float>& w, double coverage, std::size_t bins);

struct ReconstructionRow {
    std::size_t row = 0;
    std::size_t col = 0;
    float original = 0;
    float reconstructed = 0;
};

std::vector<ReconstructionRow> export_reconstruction(const Matrix<float>& w, const Matrix<float>& w_hat,
                                                     std::size_t row0, std::size_t col0, std::size_t rows,
                                                     std::size_t cols);

inline constexpr const char* kExportHeader = "# pocketllm-export v1";

void write_histogram_csv(std::ostream& out, const Histogram& h);
void write_reconstruction_csv(std::ostream& out, std::span<const ReconstructionRow> rows, LayerRole role);

} // namespace pocketllm
