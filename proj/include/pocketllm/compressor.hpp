#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "pocketllm/autograd.hpp"
#include "pocketllm/compressed.hpp"
#include "pocketllm/metrics.hpp"
#include "pocketllm/tensor_store.hpp"

namespace pocketllm {

enum class CodebookInit { latent_normal, uniform };
enum class Precision { f64, f32 };

struct CompressConfig {
    std::size_t d = 8;
    std::size_t K = 4096;
    Scope scope = Scope::per_layer;
    std::size_t epochs = 20;
    std::size_t batch_rows = 16; // whole weight rows per optimizer step
    double lr = 1e-3;
    double codebook_lr = 1e-2;
    bool cosine_decay = true; // anneal both learning rates to 0 over the epochs
    double lambda = 1.0;
    std::uint64_t seed = 0;
    std::size_t m = 3;
    std::size_t h = 0; // 0 -> MetaNetConfig::default_hidden(d)
    NormMode norm = NormMode::reshaped;
    CodebookInit init = CodebookInit::latent_normal;
    bool vq_split = false;
    double commitment = 0.25;
    std::size_t lloyd_every = 0; // 0 disables periodic re-centering
    bool refresh_dead = true;
    Precision precision = Precision::f64;
    double divergence_factor = 10.0;
    std::size_t jobs = 1;

    std::size_t hidden() const { return h == 0 ? MetaNetConfig::default_hidden(d) : h; }
    MetaNetConfig encoder_config() const;
    MetaNetConfig decoder_config() const;
    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0; // rmse + lambda * vq_sum on the full set
    double vq_sum = 0;
    double vq_mean = 0;
    double mse_mean = 0;
    double rmse = 0;
    double mse_top100 = 0;
    std::size_t used_codewords = 0;
    std::size_t refreshed = 0;
};

struct TrainReport {
    std::vector<std::string> layers;
    CompressConfig config;
    std::vector<EpochRecord> epochs; // epochs[0] is the untrained state
    LayerMetrics final_metrics;      // of the shipped (fp16 codebook, f32 decoder) artifact
    double wall_seconds = 0;
    std::size_t used_codewords = 0;
    std::size_t dead_codewords = 0;
    std::size_t max_usage = 0;
    bool codebook_frozen = false;
    bool diverged = false;
    std::string note;
    MetaNetConfig encoder_config;
    std::vector<float> encoder_params; // debugging sidecar only; never shipped
};

void write_report_jsonl(std::ostream& out, const TrainReport& report);

struct LayerResult {
    CompressedLayer layer;
    TrainReport report;
};

struct NamedWeight {
    std::string name;
    LayerRole role = LayerRole::other;
    int block_index = 0;
    const Matrix<float>* weight = nullptr;
};

/// Jointly trains one encoder, codebook and decoder over every given weight
/// matrix. With a single weight this is the per-layer pipeline; several
/// weights share one codebook and decoder (per-block scope).
struct GroupResult {
    std::vector<CompressedLayer> layers;
    TrainReport report;
};
GroupResult compress_group(const std::vector<NamedWeight>& weights, const CompressConfig& cfg);

LayerResult compress_layer(const Matrix<float>& w, const CompressConfig& cfg, const std::string& name = "layer",
                           LayerRole role = LayerRole::other, int block_index = 0);

/// Decoder output for every subvector, evaluated in double from the stored
/// fp16 codebook and f32 decoder. Deterministic.
Matrix<double> reconstruct_subvectors(const CompressedLayer& cl);
Matrix<float> reconstruct_layer(const CompressedLayer& cl);

struct LayerFailure {
    std::string layer;
    int exit_code = 0;
    std::string message;
};

struct ModelResult {
    CompressedModel model;
    std::vector<TrainReport> reports;
    std::vector<LayerFailure> failures;
};

/// Roles compressed when no filter is given: every linear role except `other`.
std::set<LayerRole> default_layer_filter();
std::set<LayerRole> parse_layer_filter(const std::string& csv);

using ProgressFn = std::function<void(const std::string&)>;

ModelResult compress_model(const ModelManifest& manifest, const CompressConfig& cfg,
                           const std::set<LayerRole>& filter, const ProgressFn& progress = {});

} // namespace pocketllm
