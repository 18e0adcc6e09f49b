#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pocketllm/matrix.hpp"

namespace pocketllm {

enum class NormMode : std::uint8_t {
    none = 0,
    layer = 1,    // standard LN over each d-wide row
    reshaped = 2, // RLN: LN over the whole weight row (L consecutive rows)
};

// `none` exists for identity test fixtures; trained nets always use gelu.
enum class Activation : std::uint8_t { gelu = 0, none = 1 };

enum class ResidualSchedule {
    skip_first, // encoder
    skip_last,  // decoder
    all,
    none,
};

/// Fixed architecture of a meta-network: m layers d -> h -> ... -> h -> d, each
/// computing y = Linear(act(norm(x))) (+ x when the layer's residual bit is set).
/// A residual between layers of different width adds the input onto the first
/// min(in, out) output columns.
struct MetaNetConfig {
    std::size_t m = 3;
    std::size_t d = 8;
    std::size_t h = 20;
    bool use_bias = true;
    NormMode norm = NormMode::reshaped;
    Activation activation = Activation::gelu;
    std::uint32_t residual_mask = 0; // bit l: layer l (0-based) adds its input

    static std::uint32_t residual_bits(ResidualSchedule schedule, std::size_t m);
    static std::size_t default_hidden(std::size_t d);
    static MetaNetConfig encoder(std::size_t d, std::size_t h, std::size_t m = 3);
    static MetaNetConfig decoder(std::size_t d, std::size_t h, std::size_t m = 3);

    std::size_t in_width(std::size_t layer) const { return layer == 0 ? d : h; }
    std::size_t out_width(std::size_t layer) const { return layer + 1 == m ? d : h; }
    bool residual(std::size_t layer) const { return (residual_mask >> layer) & 1u; }

    std::size_t linear_param_count() const;
    std::size_t norm_param_count() const;
    std::size_t param_count() const { return linear_param_count() + norm_param_count(); }

    void validate() const;
    bool operator==(const MetaNetConfig&) const = default;
};

/// Offsets of one layer's tensors inside the flat parameter vector. Canonical
/// order per layer: weight (in x out, row-major), bias, norm gain, norm shift.
struct LayerSlots {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::size_t gain = 0;
    std::size_t shift = 0;
    std::size_t in = 0;
    std::size_t out = 0;
};

std::vector<LayerSlots> layer_slots(const MetaNetConfig& cfg);

template <typename T>
struct MetaNet {
    MetaNetConfig config;
    std::vector<T> params;

    MetaNet() = default;
    explicit MetaNet(const MetaNetConfig& cfg);

    std::span<T> weight(std::size_t l) { return {params.data() + slots_[l].weight, slots_[l].in * slots_[l].out}; }
    std::span<const T> weight(std::size_t l) const { return {params.data() + slots_[l].weight, slots_[l].in * slots_[l].out}; }
    std::span<T> bias(std::size_t l) { return {params.data() + slots_[l].bias, config.use_bias ? slots_[l].out : 0}; }
    std::span<const T> bias(std::size_t l) const { return {params.data() + slots_[l].bias, config.use_bias ? slots_[l].out : 0}; }
    std::span<T> gain(std::size_t l) { return {params.data() + slots_[l].gain, has_norm() ? slots_[l].in : 0}; }
    std::span<const T> gain(std::size_t l) const { return {params.data() + slots_[l].gain, has_norm() ? slots_[l].in : 0}; }
    std::span<T> shift(std::size_t l) { return {params.data() + slots_[l].shift, has_norm() ? slots_[l].in : 0}; }
    std::span<const T> shift(std::size_t l) const { return {params.data() + slots_[l].shift, has_norm() ? slots_[l].in : 0}; }

    bool has_norm() const { return config.norm != NormMode::none; }
    const std::vector<LayerSlots>& slots() const { return slots_; }

    /// e.g. "layer1.weight[3]"
    std::string param_name(std::size_t flat_index) const;

    template <typename U>
    MetaNet<U> cast() const {
        MetaNet<U> out(config);
        for (std::size_t i = 0; i < params.size(); ++i) {
            out.params[i] = static_cast<U>(params[i]);
        }
        return out;
    }

private:
    std::vector<LayerSlots> slots_;
};

/// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases, unit gain, zero shift.
template <typename T>
MetaNet<T> init_metanet(const MetaNetConfig& cfg, std::mt19937_64& rng);

/// (R*L) x width values, grouped into R weight rows of L consecutive subvectors.
template <typename T>
struct RowBatch {
    Matrix<T> values;
    std::size_t group = 1;

    std::size_t groups() const { return group == 0 ? 0 : values.rows / group; }
};

inline constexpr double kNormEps = 1e-5;

template <typename T>
T gelu(T x);
template <typename T>
T gelu_grad(T x);
template <typename T>
void gelu_forward(std::span<const T> in, std::span<T> out);

template <typename T>
struct NormCache {
    Matrix<T> xhat;
    std::vector<T> rstd; // one per group
    std::size_t group = 1;
};

/// Normalizes each group of `group` consecutive rows as one vector, then applies
/// the per-column affine shared by every row of the group.
template <typename T>
Matrix<T> norm_forward(const Matrix<T>& x, std::size_t group, std::span<const T> gain, std::span<const T> shift,
                       NormCache<T>* cache = nullptr);

/// Accumulates into dgain/dshift and returns the input gradient.
template <typename T>
Matrix<T> norm_backward(const Matrix<T>& dy, std::span<const T> gain, const NormCache<T>& cache, std::span<T> dgain,
                        std::span<T> dshift);

template <typename T>
RowBatch<T> rln_forward(const RowBatch<T>& batch, std::span<const T> gain, std::span<const T> shift,
                        NormCache<T>* cache = nullptr);

template <typename T>
struct LayerCache {
    Matrix<T> input;
    Matrix<T> normed;
    Matrix<T> activated;
    NormCache<T> norm;
};

template <typename T>
struct ForwardCache {
    std::vector<LayerCache<T>> layers;
    std::size_t group = 0;
    std::uint64_t param_hash = 0;
};

template <typename T>
std::uint64_t param_fingerprint(const MetaNet<T>& net);

template <typename T>
RowBatch<T> mlp_forward(const MetaNet<T>& net, const RowBatch<T>& batch, ForwardCache<T>* cache = nullptr);

template <typename T>
struct MetaNetGrad {
    std::vector<T> params;
    Matrix<T> input;
};

/// Reverse pass. Throws Error{data} when the cache does not belong to `net`'s
/// current parameters or the upstream shape disagrees with the cached forward.
template <typename T>
MetaNetGrad<T> mlp_backward(const MetaNet<T>& net, const RowBatch<T>& upstream, const ForwardCache<T>& cache);

template <typename T>
struct AdamState {
    std::size_t step = 0;
    std::vector<T> m;
    std::vector<T> v;
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);

    AdamState() = default;
    explicit AdamState(std::size_t n, T learning_rate = T(1e-3)) : m(n, T(0)), v(n, T(0)), lr(learning_rate) {}
};

/// Bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter is touched; `name` labels the offending entry in the error.
template <typename T>
void adam_step(AdamState<T>& state, std::span<T> params, std::span<const T> grads,
               const std::function<std::string(std::size_t)>& name = {});

} // namespace pocketllm
