#include "pocketllm/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "pocketllm/error.hpp"

namespace pocketllm {

namespace {

template <typename T>
LatentStats latent_stats_impl(const Matrix<T>& z) {
    LatentStats s;
    s.mean.assign(z.cols, 0.0);
    s.stddev.assign(z.cols, 1.0);
    if (z.rows == 0) {
        return s;
    }
    for (std::size_t r = 0; r < z.rows; ++r) {
        for (std::size_t c = 0; c < z.cols; ++c) {
            s.mean[c] += static_cast<double>(z(r, c));
        }
    }
    for (auto& m : s.mean) {
        m /= static_cast<double>(z.rows);
    }
    std::vector<double> var(z.cols, 0.0);
    for (std::size_t r = 0; r < z.rows; ++r) {
        for (std::size_t c = 0; c < z.cols; ++c) {
            const double dlt = static_cast<double>(z(r, c)) - s.mean[c];
            var[c] += dlt * dlt;
        }
    }
    for (std::size_t c = 0; c < z.cols; ++c) {
        const double sd = std::sqrt(var[c] / static_cast<double>(z.rows));
        s.stddev[c] = sd > 0 && std::isfinite(sd) ? sd : 1.0;
    }
    return s;
}

} // namespace

LatentStats latent_stats(const Matrix<double>& z) { return latent_stats_impl(z); }
LatentStats latent_stats(const Matrix<float>& z) { return latent_stats_impl(z); }

template <typename T>
Codebook<T> init_codebook(std::size_t K, std::size_t d, std::uint64_t seed, const std::optional<LatentStats>& stats) {
    check(K >= 1 && d >= 1, ErrorKind::config, "codebook needs K >= 1 and d >= 1");
    if (stats) {
        check(stats->mean.size() == d && stats->stddev.size() == d, ErrorKind::config,
              "latent statistics width does not match d");
    }
    Codebook<T> cb;
    cb.seed = seed;
    cb.C = Matrix<T>(K, d);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t j = 0; j < d; ++j) {
            const double mu = stats ? stats->mean[j] : 0.0;
            const double sd = stats ? stats->stddev[j] : 1.0;
            cb.C(k, j) = static_cast<T>(mu + sd * normal(rng));
        }
    }
    return cb;
}

template <typename T>
Codebook<T> init_codebook_uniform(std::size_t K, std::size_t d, std::uint64_t seed) {
    check(K >= 1 && d >= 1, ErrorKind::config, "codebook needs K >= 1 and d >= 1");
    Codebook<T> cb;
    cb.seed = seed;
    cb.C = Matrix<T>(K, d);
    std::mt19937_64 rng(seed);
    const double bound = 1.0 / static_cast<double>(K);
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : cb.C.data) {
        v = static_cast<T>(u(rng));
    }
    return cb;
}

template <typename T>
AssignmentResult<T> assign_nearest(const Matrix<T>& z, const Codebook<T>& cb) {
    check(z.rows > 0, ErrorKind::data, "assign_nearest: empty latent set");
    check(z.cols == cb.d(), ErrorKind::data, "assign_nearest: latent width != codebook width");
    check(cb.K() > 0, ErrorKind::data, "assign_nearest: empty codebook");
    const std::size_t d = z.cols;
    const std::size_t K = cb.K();

    // Codewords sorted along their widest coordinate. A rounded sum of
    // non-negative terms is never below any single term, so a codeword whose
    // gap on that coordinate alone exceeds the current best cannot win, nor
    // can anything further out in sorted order. The search stays exact.
    std::size_t axis = 0;
    double widest = -1;
    for (std::size_t j = 0; j < d; ++j) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -lo;
        for (std::size_t k = 0; k < K; ++k) {
            lo = std::min(lo, static_cast<double>(cb.C(k, j)));
            hi = std::max(hi, static_cast<double>(cb.C(k, j)));
        }
        if (hi - lo > widest) {
            widest = hi - lo;
            axis = j;
        }
    }
    std::vector<std::uint32_t> order(K);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return cb.C(a, axis) < cb.C(b, axis); });
    std::vector<double> codes(K * d);
    std::vector<double> keys(K);
    for (std::size_t r = 0; r < K; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
            codes[r * d + j] = static_cast<double>(cb.C(order[r], j));
        }
        keys[r] = codes[r * d + axis];
    }

    AssignmentResult<T> out;
    out.quantized = Matrix<T>(z.rows, d);
    out.indices.resize(z.rows);
    out.distances.resize(z.rows);
    std::vector<double> zi(d);
    for (std::size_t i = 0; i < z.rows; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            zi[j] = static_cast<double>(z(i, j));
        }
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_k = 0;
        auto visit = [&](std::size_t r) {
            const double* c = codes.data() + r * d;
            double dist = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const double t = zi[j] - c[j];
                dist += t * t;
            }
            if (dist < best || (dist == best && order[r] < best_k)) {
                best = dist;
                best_k = order[r];
            }
        };
        auto gap = [&](std::size_t r) {
            const double t = zi[axis] - keys[r];
            return t * t;
        };
        const auto mid = static_cast<std::size_t>(std::lower_bound(keys.begin(), keys.end(), zi[axis]) - keys.begin());
        std::size_t up = mid;
        std::size_t down = mid;
        bool up_open = up < K;
        bool down_open = down > 0;
        while (up_open || down_open) {
            if (up_open) {
                if (gap(up) > best) {
                    up_open = false;
                } else {
                    visit(up);
                    up_open = ++up < K;
                }
            }
            if (down_open) {
                if (gap(down - 1) > best) {
                    down_open = false;
                } else {
                    visit(down - 1);
                    down_open = --down > 0;
                }
            }
        }
        out.indices[i] = static_cast<std::uint32_t>(best_k);
        out.distances[i] = best;
        const auto src = cb.C.row(best_k);
        std::copy(src.begin(), src.end(), out.quantized.row(i).begin());
    }
    return out;
}

template <typename T>
Matrix<T> ste_route(const Matrix<T>& upstream_grad_on_quantized) {
    return upstream_grad_on_quantized;
}

template <typename T>
VqLoss<T> vq_loss(const Matrix<T>& z, const AssignmentResult<T>& assignment, std::size_t K,
                  const VqLossOptions& opts) {
    const auto& zq = assignment.quantized;
    check(z.rows == zq.rows && z.cols == zq.cols && assignment.indices.size() == z.rows, ErrorKind::data,
          "vq_loss: shape mismatch");
    VqLoss<T> out;
    out.grad_z = Matrix<T>(z.rows, z.cols);
    out.grad_codebook = Matrix<T>(K, z.cols);
    const double z_scale = opts.split ? 2.0 * opts.commitment : 2.0;
    for (std::size_t i = 0; i < z.rows; ++i) {
        const std::size_t k = assignment.indices[i];
        check(k < K, ErrorKind::data, "vq_loss: index out of range");
        for (std::size_t j = 0; j < z.cols; ++j) {
            const double diff = static_cast<double>(z(i, j)) - static_cast<double>(zq(i, j));
            out.loss += diff * diff;
            out.grad_z(i, j) = static_cast<T>(z_scale * diff);
            out.grad_codebook(k, j) += static_cast<T>(-2.0 * diff);
        }
    }
    return out;
}

std::vector<std::size_t> usage_counts(std::span<const std::uint32_t> indices, std::size_t K) {
    std::vector<std::size_t> counts(K, 0);
    for (auto i : indices) {
        check(i < K, ErrorKind::data, "usage_counts: index out of range");
        ++counts[i];
    }
    return counts;
}

template <typename T>
std::size_t refresh_dead_codewords(Codebook<T>& cb, std::span<const std::size_t> usage, const Matrix<T>& z,
                                   std::mt19937_64& rng) {
    check(usage.size() == cb.K(), ErrorKind::data, "refresh: usage length != K");
    check(z.cols == cb.d(), ErrorKind::data, "refresh: latent width != codebook width");
    if (z.rows == 0) {
        return 0;
    }
    std::uniform_int_distribution<std::size_t> pick(0, z.rows - 1);
    std::size_t refreshed = 0;
    for (std::size_t k = 0; k < cb.K(); ++k) {
        if (usage[k] != 0) {
            continue;
        }
        const auto src = z.row(pick(rng));
        std::copy(src.begin(), src.end(), cb.C.row(k).begin());
        ++refreshed;
    }
    return refreshed;
}

template <typename T>
void lloyd_recenter(Codebook<T>& cb, const Matrix<T>& z, std::span<const std::uint32_t> indices) {
    check(indices.size() == z.rows && z.cols == cb.d(), ErrorKind::data, "lloyd_recenter: shape mismatch");
    Matrix<double> sums(cb.K(), cb.d());
    std::vector<std::size_t> counts(cb.K(), 0);
    for (std::size_t i = 0; i < z.rows; ++i) {
        const auto k = indices[i];
        ++counts[k];
        for (std::size_t j = 0; j < z.cols; ++j) {
            sums(k, j) += static_cast<double>(z(i, j));
        }
    }
    for (std::size_t k = 0; k < cb.K(); ++k) {
        if (counts[k] == 0) {
            continue;
        }
        for (std::size_t j = 0; j < cb.d(); ++j) {
            cb.C(k, j) = static_cast<T>(sums(k, j) / static_cast<double>(counts[k]));
        }
    }
}

#define POCKETLLM_INSTANTIATE(T)                                                                                    \
    template Codebook<T> init_codebook<T>(std::size_t, std::size_t, std::uint64_t, const std::optional<LatentStats>&); \
    template Codebook<T> init_codebook_uniform<T>(std::size_t, std::size_t, std::uint64_t);                          \
    template AssignmentResult<T> assign_nearest<T>(const Matrix<T>&, const Codebook<T>&);                            \
    template Matrix<T> ste_route<T>(const Matrix<T>&);                                                               \
    template VqLoss<T> vq_loss<T>(const Matrix<T>&, const AssignmentResult<T>&, std::size_t, const VqLossOptions&); \
    template std::size_t refresh_dead_codewords<T>(Codebook<T>&, std::span<const std::size_t>, const Matrix<T>&,    \
                                                   std::mt19937_64&);                                                \
    template void lloyd_recenter<T>(Codebook<T>&, const Matrix<T>&, std::span<const std::uint32_t>);

POCKETLLM_INSTANTIATE(float)
POCKETLLM_INSTANTIATE(double)

#undef POCKETLLM_INSTANTIATE

} // namespace pocketllm
