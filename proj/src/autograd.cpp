#include "pocketllm/autograd.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <numbers>

#include "pocketllm/error.hpp"

namespace pocketllm {

std::uint32_t MetaNetConfig::residual_bits(ResidualSchedule schedule, std::size_t m) {
    std::uint32_t mask = 0;
    for (std::size_t l = 0; l < m && l < 32; ++l) {
        bool on = false;
        switch (schedule) {
        case ResidualSchedule::skip_first: on = l != 0; break;
        case ResidualSchedule::skip_last: on = l + 1 != m; break;
        case ResidualSchedule::all: on = true; break;
        case ResidualSchedule::none: on = false; break;
        }
        if (on) {
            mask |= 1u << l;
        }
    }
    return mask;
}

std::size_t MetaNetConfig::default_hidden(std::size_t d) {
    return static_cast<std::size_t>(std::lround(2.5 * static_cast<double>(d)));
}

MetaNetConfig MetaNetConfig::encoder(std::size_t d, std::size_t h, std::size_t m) {
    MetaNetConfig c;
    c.d = d;
    c.h = h;
    c.m = m;
    c.residual_mask = residual_bits(ResidualSchedule::skip_first, m);
    return c;
}

MetaNetConfig MetaNetConfig::decoder(std::size_t d, std::size_t h, std::size_t m) {
    MetaNetConfig c;
    c.d = d;
    c.h = h;
    c.m = m;
    c.residual_mask = residual_bits(ResidualSchedule::skip_last, m);
    return c;
}

std::size_t MetaNetConfig::linear_param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < m; ++l) {
        n += in_width(l) * out_width(l) + (use_bias ? out_width(l) : 0);
    }
    return n;
}

std::size_t MetaNetConfig::norm_param_count() const {
    if (norm == NormMode::none) {
        return 0;
    }
    std::size_t n = 0;
    for (std::size_t l = 0; l < m; ++l) {
        n += 2 * in_width(l);
    }
    return n;
}

void MetaNetConfig::validate() const {
    check(m >= 1 && m <= 32, ErrorKind::config, "meta-network layer count must be in [1, 32]");
    check(d >= 1, ErrorKind::config, "meta-network width d must be >= 1");
    check(h >= 1, ErrorKind::config, "meta-network hidden width h must be >= 1");
    check(m == 32 || (residual_mask >> m) == 0, ErrorKind::config, "residual mask names layers beyond m");
}

std::vector<LayerSlots> layer_slots(const MetaNetConfig& cfg) {
    std::vector<LayerSlots> slots(cfg.m);
    std::size_t off = 0;
    const bool norm = cfg.norm != NormMode::none;
    for (std::size_t l = 0; l < cfg.m; ++l) {
        auto& s = slots[l];
        s.in = cfg.in_width(l);
        s.out = cfg.out_width(l);
        s.weight = off;
        off += s.in * s.out;
        s.bias = off;
        off += cfg.use_bias ? s.out : 0;
        s.gain = off;
        off += norm ? s.in : 0;
        s.shift = off;
        off += norm ? s.in : 0;
    }
    return slots;
}

template <typename T>
MetaNet<T>::MetaNet(const MetaNetConfig& cfg) : config(cfg), params(cfg.param_count(), T(0)), slots_(layer_slots(cfg)) {
    cfg.validate();
}

template <typename T>
std::string MetaNet<T>::param_name(std::size_t flat) const {
    for (std::size_t l = 0; l < slots_.size(); ++l) {
        const auto& s = slots_[l];
        auto label = [&](const char* what, std::size_t base) {
            return "layer" + std::to_string(l + 1) + "." + what + "[" + std::to_string(flat - base) + "]";
        };
        if (flat < s.bias) {
            return label("weight", s.weight);
        }
        if (flat < s.gain) {
            return label("bias", s.bias);
        }
        if (flat < s.shift) {
            return label("norm_gain", s.gain);
        }
        if (flat < s.shift + (has_norm() ? s.in : 0)) {
            return label("norm_shift", s.shift);
        }
    }
    return "param[" + std::to_string(flat) + "]";
}

template <typename T>
MetaNet<T> init_metanet(const MetaNetConfig& cfg, std::mt19937_64& rng) {
    MetaNet<T> net(cfg);
    for (std::size_t l = 0; l < cfg.m; ++l) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.in_width(l)));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& w : net.weight(l)) {
            w = static_cast<T>(u(rng));
        }
        for (auto& b : net.bias(l)) {
            b = static_cast<T>(u(rng));
        }
        std::ranges::fill(net.gain(l), T(1));
        std::ranges::fill(net.shift(l), T(0));
    }
    return net;
}

template <typename T>
T gelu(T x) {
    return x * T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) * std::numbers::inv_sqrtpi_v<T> / std::numbers::sqrt2_v<T>;
    return cdf + x * pdf;
}

template <typename T>
void gelu_forward(std::span<const T> in, std::span<T> out) {
    check(in.size() == out.size(), ErrorKind::data, "gelu_forward: size mismatch");
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = gelu(in[i]);
    }
}

template <typename T>
Matrix<T> norm_forward(const Matrix<T>& x, std::size_t group, std::span<const T> gain, std::span<const T> shift,
                       NormCache<T>* cache) {
    check(group >= 1 && x.rows % group == 0, ErrorKind::data, "norm: row count is not a multiple of the group size");
    check(gain.size() == x.cols && shift.size() == x.cols, ErrorKind::data, "norm: affine width mismatch");
    const std::size_t w = x.cols;
    const std::size_t n = group * w;
    const std::size_t groups = x.rows / group;
    Matrix<T> y(x.rows, w);
    if (cache) {
        cache->xhat = Matrix<T>(x.rows, w);
        cache->rstd.assign(groups, T(0));
        cache->group = group;
    }
    for (std::size_t g = 0; g < groups; ++g) {
        const T* src = x.data.data() + g * n;
        T mean = 0;
        for (std::size_t i = 0; i < n; ++i) {
            mean += src[i];
        }
        mean /= static_cast<T>(n);
        T var = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const T c = src[i] - mean;
            var += c * c;
        }
        var /= static_cast<T>(n);
        const T rstd = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
        T* dst = y.data.data() + g * n;
        for (std::size_t i = 0; i < n; ++i) {
            const T xh = (src[i] - mean) * rstd;
            const std::size_t c = i % w;
            dst[i] = gain[c] * xh + shift[c];
            if (cache) {
                cache->xhat.data[g * n + i] = xh;
            }
        }
        if (cache) {
            cache->rstd[g] = rstd;
        }
    }
    return y;
}

template <typename T>
Matrix<T> norm_backward(const Matrix<T>& dy, std::span<const T> gain, const NormCache<T>& cache, std::span<T> dgain,
                        std::span<T> dshift) {
    check(dy.rows == cache.xhat.rows && dy.cols == cache.xhat.cols, ErrorKind::data, "norm_backward: shape mismatch");
    const std::size_t w = dy.cols;
    const std::size_t n = cache.group * w;
    const std::size_t groups = dy.rows / cache.group;
    Matrix<T> dx(dy.rows, w);
    std::vector<T> dxhat(n);
    for (std::size_t g = 0; g < groups; ++g) {
        const T* gy = dy.data.data() + g * n;
        const T* xh = cache.xhat.data.data() + g * n;
        T sum_d = 0;
        T sum_dx = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = i % w;
            dgain[c] += gy[i] * xh[i];
            dshift[c] += gy[i];
            dxhat[i] = gy[i] * gain[c];
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xh[i];
        }
        const T mean_d = sum_d / static_cast<T>(n);
        const T mean_dx = sum_dx / static_cast<T>(n);
        T* out = dx.data.data() + g * n;
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = cache.rstd[g] * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    return dx;
}

template <typename T>
RowBatch<T> rln_forward(const RowBatch<T>& batch, std::span<const T> gain, std::span<const T> shift,
                        NormCache<T>* cache) {
    return RowBatch<T>{norm_forward(batch.values, batch.group, gain, shift, cache), batch.group};
}

template <typename T>
std::uint64_t param_fingerprint(const MetaNet<T>& net) {
    // FNV-1a over the raw parameter bytes.
    std::uint64_t h = 1469598103934665603ull;
    for (const T& p : net.params) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(p);
        for (unsigned char b : bytes) {
            h ^= b;
            h *= 1099511628211ull;
        }
    }
    return h ^ net.params.size();
}

template <typename T>
RowBatch<T> mlp_forward(const MetaNet<T>& net, const RowBatch<T>& batch, ForwardCache<T>* cache) {
    const auto& cfg = net.config;
    check(batch.values.cols == cfg.d, ErrorKind::data,
          "mlp_forward: batch width " + std::to_string(batch.values.cols) + " != d=" + std::to_string(cfg.d));
    check(batch.group >= 1 && batch.values.rows % batch.group == 0, ErrorKind::data,
          "mlp_forward: rows are not a whole number of row groups");
    const std::size_t norm_group = cfg.norm == NormMode::reshaped ? batch.group : 1;
    if (cache) {
        cache->layers.assign(cfg.m, LayerCache<T>{});
        cache->group = batch.group;
        cache->param_hash = param_fingerprint(net);
    }

    Matrix<T> x = batch.values;
    const std::size_t rows = x.rows;
    for (std::size_t l = 0; l < cfg.m; ++l) {
        const auto& s = net.slots()[l];
        LayerCache<T>* lc = cache ? &cache->layers[l] : nullptr;

        Matrix<T> u = net.has_norm() ? norm_forward(x, norm_group, net.gain(l), net.shift(l), lc ? &lc->norm : nullptr)
                                     : x;
        Matrix<T> a = u;
        if (cfg.activation == Activation::gelu) {
            gelu_forward<T>(u.data, a.data);
        }

        Matrix<T> y(rows, s.out);
        const auto wt = net.weight(l);
        const auto b = net.bias(l);
        for (std::size_t r = 0; r < rows; ++r) {
            T* yr = y.data.data() + r * s.out;
            if (!b.empty()) {
                std::copy(b.begin(), b.end(), yr);
            }
            const T* ar = a.data.data() + r * s.in;
            for (std::size_t i = 0; i < s.in; ++i) {
                const T ai = ar[i];
                const T* wi = wt.data() + i * s.out;
                for (std::size_t j = 0; j < s.out; ++j) {
                    yr[j] += ai * wi[j];
                }
            }
            if (cfg.residual(l)) {
                const std::size_t k = std::min(s.in, s.out);
                const T* xr = x.data.data() + r * s.in;
                for (std::size_t j = 0; j < k; ++j) {
                    yr[j] += xr[j];
                }
            }
        }
        if (lc) {
            lc->input = std::move(x);
            lc->normed = std::move(u);
            lc->activated = std::move(a);
        }
        x = std::move(y);
    }
    return RowBatch<T>{std::move(x), batch.group};
}

template <typename T>
MetaNetGrad<T> mlp_backward(const MetaNet<T>& net, const RowBatch<T>& upstream, const ForwardCache<T>& cache) {
    const auto& cfg = net.config;
    check(cache.layers.size() == cfg.m && cache.param_hash == param_fingerprint(net), ErrorKind::data,
          "mlp_backward: stale cache (parameters changed since forward)");
    check(upstream.values.cols == cfg.d && upstream.values.rows == cache.layers[0].input.rows, ErrorKind::data,
          "mlp_backward: upstream shape does not match the cached forward");

    MetaNetGrad<T> grad;
    grad.params.assign(net.params.size(), T(0));
    Matrix<T> dy = upstream.values;
    const std::size_t rows = dy.rows;

    for (std::size_t l = cfg.m; l-- > 0;) {
        const auto& s = net.slots()[l];
        const auto& lc = cache.layers[l];
        const auto wt = net.weight(l);
        T* dw = grad.params.data() + s.weight;
        T* db = grad.params.data() + s.bias;

        Matrix<T> da(rows, s.in);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* gy = dy.data.data() + r * s.out;
            const T* ar = lc.activated.data.data() + r * s.in;
            T* gar = da.data.data() + r * s.in;
            if (cfg.use_bias) {
                for (std::size_t j = 0; j < s.out; ++j) {
                    db[j] += gy[j];
                }
            }
            for (std::size_t i = 0; i < s.in; ++i) {
                const T* wi = wt.data() + i * s.out;
                T* dwi = dw + i * s.out;
                const T ai = ar[i];
                T acc = 0;
                for (std::size_t j = 0; j < s.out; ++j) {
                    dwi[j] += ai * gy[j];
                    acc += gy[j] * wi[j];
                }
                gar[i] = acc;
            }
        }

        Matrix<T> du = std::move(da);
        if (cfg.activation == Activation::gelu) {
            for (std::size_t i = 0; i < du.data.size(); ++i) {
                du.data[i] *= gelu_grad(lc.normed.data[i]);
            }
        }

        Matrix<T> dx = net.has_norm()
                           ? norm_backward<T>(du, net.gain(l), lc.norm,
                                              std::span<T>(grad.params.data() + s.gain, s.in),
                                              std::span<T>(grad.params.data() + s.shift, s.in))
                           : std::move(du);
        if (cfg.residual(l)) {
            const std::size_t k = std::min(s.in, s.out);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < k; ++j) {
                    dx.data[r * s.in + j] += dy.data[r * s.out + j];
                }
            }
        }
        dy = std::move(dx);
    }
    grad.input = std::move(dy);
    return grad;
}

template <typename T>
void adam_step(AdamState<T>& state, std::span<T> params, std::span<const T> grads,
               const std::function<std::string(std::size_t)>& name) {
    check(params.size() == grads.size() && state.m.size() == params.size() && state.v.size() == params.size(),
          ErrorKind::data, "adam_step: parameter/gradient/moment sizes disagree");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!std::isfinite(grads[i])) {
            throw Error(ErrorKind::divergence,
                        "non-finite gradient for " + (name ? name(i) : "param[" + std::to_string(i) + "]"));
        }
    }
    ++state.step;
    const T c1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
    const T c2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const T g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (T(1) - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (T(1) - state.beta2) * g * g;
        const T mhat = state.m[i] / c1;
        const T vhat = state.v[i] / c2;
        params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

#define POCKETLLM_INSTANTIATE(T)                                                                                    \
    template struct MetaNet<T>;                                                                                      \
    template MetaNet<T> init_metanet<T>(const MetaNetConfig&, std::mt19937_64&);                                     \
    template T gelu<T>(T);                                                                                           \
    template T gelu_grad<T>(T);                                                                                      \
    template void gelu_forward<T>(std::span<const T>, std::span<T>);                                                 \
    template Matrix<T> norm_forward<T>(const Matrix<T>&, std::size_t, std::span<const T>, std::span<const T>,       \
                                       NormCache<T>*);                                                               \
    template Matrix<T> norm_backward<T>(const Matrix<T>&, std::span<const T>, const NormCache<T>&, std::span<T>,    \
                                        std::span<T>);                                                               \
    template RowBatch<T> rln_forward<T>(const RowBatch<T>&, std::span<const T>, std::span<const T>, NormCache<T>*); \
    template std::uint64_t param_fingerprint<T>(const MetaNet<T>&);                                                  \
    template RowBatch<T> mlp_forward<T>(const MetaNet<T>&, const RowBatch<T>&, ForwardCache<T>*);                    \
    template MetaNetGrad<T> mlp_backward<T>(const MetaNet<T>&, const RowBatch<T>&, const ForwardCache<T>&);          \
    template void adam_step<T>(AdamState<T>&, std::span<T>, std::span<const T>,                                      \
                               const std::function<std::string(std::size_t)>&);

POCKETLLM_INSTANTIATE(float)
POCKETLLM_INSTANTIATE(double)

#undef POCKETLLM_INSTANTIATE

} // namespace pocketllm
