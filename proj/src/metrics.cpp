#include "pocketllm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "pocketllm/error.hpp"

namespace pocketllm {

template <typename T>
std::vector<double> row_sq_errors(const Matrix<T>& a, const Matrix<T>& b) {
    check(a.rows == b.rows && a.cols == b.cols, ErrorKind::data, "row_sq_errors: shape mismatch");
    std::vector<double> out(a.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < a.cols; ++j) {
            const double t = static_cast<double>(a(i, j)) - static_cast<double>(b(i, j));
            s += t * t;
        }
        out[i] = s;
    }
    return out;
}

double top_k_sum(std::span<const double> values, std::size_t k) {
    std::vector<double> v(values.begin(), values.end());
    const std::size_t take = std::min(k, v.size());
    std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(take), v.end(), std::greater<>());
    double s = 0;
    for (std::size_t i = 0; i < take; ++i) {
        s += v[i];
    }
    return s;
}

namespace {

// Order-independent sum: sorting first makes the result a function of the
// multiset of terms, so permuting subvectors cannot change a single bit.
double stable_sum(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0;
    double comp = 0;
    for (double x : v) {
        const double y = x - comp;
        const double t = s + y;
        comp = (t - s) - y;
        s = t;
    }
    return s;
}

} // namespace

template <typename T>
LayerMetrics layer_metrics(const Matrix<T>& s, const Matrix<T>& s_hat, const Matrix<T>& z, const Matrix<T>& z_q) {
    check(z.rows == s.rows && z_q.rows == s.rows, ErrorKind::data, "layer_metrics: subvector counts differ");
    LayerMetrics m;
    const auto err = row_sq_errors(s, s_hat);
    const auto vq = row_sq_errors(z, z_q);
    const double n = static_cast<double>(std::max<std::size_t>(s.rows, 1));
    m.vq_sum = stable_sum(vq);
    m.vq_mean = m.vq_sum / n;
    const double err_sum = stable_sum(err);
    m.mse_mean = err_sum / n;
    m.mse_top100 = top_k_sum(err, 100);

    std::vector<double> sq(s.data.size());
    for (std::size_t i = 0; i < s.data.size(); ++i) {
        sq[i] = static_cast<double>(s.data[i]) * static_cast<double>(s.data[i]);
    }
    const double norm2 = stable_sum(std::move(sq));
    m.frobenius_rel_err = norm2 > 0 ? std::sqrt(err_sum / norm2) : (err_sum > 0 ? INFINITY : 0.0);
    return m;
}

Histogram weight_histogram(const Matrix<float>& w, double coverage, std::size_t bins) {
    check(coverage > 0 && coverage <= 1, ErrorKind::config, "histogram coverage must be in (0, 1]");
    check(bins >= 1, ErrorKind::config, "histogram needs at least one bin");
    check(!w.empty(), ErrorKind::data, "histogram of an empty tensor");
    std::vector<float> v(w.data);
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    const auto drop = static_cast<std::size_t>(std::floor((1.0 - coverage) / 2.0 * static_cast<double>(n)));
    const std::size_t first = std::min(drop, n - 1);
    const std::size_t last = std::max(first, n - 1 - std::min(drop, n - 1));

    Histogram h;
    h.lo = v[first];
    h.hi = v[last];
    h.width = (h.hi - h.lo) / static_cast<double>(bins);
    if (h.width <= 0) {
        h.bins.push_back({h.lo, last - first + 1});
        h.width = 0;
        return h;
    }
    h.bins.resize(bins);
    for (std::size_t b = 0; b < bins; ++b) {
        h.bins[b].center = h.lo + (static_cast<double>(b) + 0.5) * h.width;
    }
    for (std::size_t i = first; i <= last; ++i) {
        auto b = static_cast<std::size_t>((static_cast<double>(v[i]) - h.lo) / h.width);
        ++h.bins[std::min(b, bins - 1)].count;
    }
    return h;
}

std::vector<ReconstructionRow> export_reconstruction(const Matrix<float>& w, const Matrix<float>& w_hat,
                                                     std::size_t row0, std::size_t col0, std::size_t rows,
                                                     std::size_t cols) {
    check(w.rows == w_hat.rows && w.cols == w_hat.cols, ErrorKind::data, "export_reconstruction: shape mismatch");
    check(rows > 0 && cols > 0 && row0 + rows <= w.rows && col0 + cols <= w.cols, ErrorKind::config,
          "export window [" + std::to_string(row0) + "+" + std::to_string(rows) + ", " + std::to_string(col0) + "+" +
              std::to_string(cols) + "] is outside a " + std::to_string(w.rows) + "x" + std::to_string(w.cols) +
              " matrix");
    std::vector<ReconstructionRow> out;
    out.reserve(rows * cols);
    for (std::size_t r = row0; r < row0 + rows; ++r) {
        for (std::size_t c = col0; c < col0 + cols; ++c) {
            out.push_back({r, c, w(r, c), w_hat(r, c)});
        }
    }
    return out;
}

void write_histogram_csv(std::ostream& out, const Histogram& h) {
    out << kExportHeader << '\n' << "bin_center,count\n";
    out.precision(9);
    for (const auto& b : h.bins) {
        out << b.center << ',' << b.count << '\n';
    }
}

void write_reconstruction_csv(std::ostream& out, std::span<const ReconstructionRow> rows, LayerRole role) {
    const auto tag = role_name(role);
    out << kExportHeader << '\n' << "row,col,original_" << tag << ",reconstructed_" << tag << '\n';
    out.precision(9);
    for (const auto& r : rows) {
        out << r.row << ',' << r.col << ',' << r.original << ',' << r.reconstructed << '\n';
    }
}

template std::vector<double> row_sq_errors(const Matrix<float>&, const Matrix<float>&);
template std::vector<double> row_sq_errors(const Matrix<double>&, const Matrix<double>&);
template LayerMetrics layer_metrics(const Matrix<float>&, const Matrix<float>&, const Matrix<float>&,
                                    const Matrix<float>&);
template LayerMetrics layer_metrics(const Matrix<double>&, const Matrix<double>&, const Matrix<double>&,
                                    const Matrix<double>&);

} // namespace pocketllm
