#include "pocketllm/compressor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>

#include <json.hpp>

#include "pocketllm/codebook.hpp"
#include "pocketllm/error.hpp"
#include "pocketllm/pocket_format.hpp"

namespace pocketllm {

MetaNetConfig CompressConfig::encoder_config() const {
    auto c = MetaNetConfig::encoder(d, hidden(), m);
    c.norm = norm;
    return c;
}

MetaNetConfig CompressConfig::decoder_config() const {
    auto c = MetaNetConfig::decoder(d, hidden(), m);
    c.norm = norm;
    return c;
}

void CompressConfig::validate() const {
    check(d >= 1, ErrorKind::config, "d must be >= 1");
    check(K >= 2, ErrorKind::config, "K must be >= 2");
    check(K <= (std::size_t{1} << 31), ErrorKind::config, "K must be <= 2^31");
    check(batch_rows >= 1, ErrorKind::config, "batch_rows must be >= 1");
    check(std::isfinite(lr) && lr > 0, ErrorKind::config, "lr must be positive");
    check(std::isfinite(codebook_lr) && codebook_lr >= 0, ErrorKind::config, "codebook lr must be >= 0");
    check(std::isfinite(lambda) && lambda >= 0, ErrorKind::config, "lambda must be >= 0");
    check(commitment >= 0, ErrorKind::config, "commitment weight must be >= 0");
    check(divergence_factor > 1, ErrorKind::config, "divergence factor must be > 1");
    check(jobs >= 1, ErrorKind::config, "jobs must be >= 1");
    encoder_config().validate();
    decoder_config().validate();
}

void write_report_jsonl(std::ostream& out, const TrainReport& r) {
    using nlohmann::json;
    for (const auto& e : r.epochs) {
        json j = {{"epoch", e.epoch},       {"loss", e.loss},
                  {"vq_sum", e.vq_sum},     {"vq_mean", e.vq_mean},
                  {"mse_mean", e.mse_mean}, {"rmse", e.rmse},
                  {"mse_top100", e.mse_top100}, {"used_codewords", e.used_codewords},
                  {"refreshed", e.refreshed}};
        out << j.dump() << '\n';
    }
    const auto& c = r.config;
    json summary = {
        {"summary", true},
        {"layers", r.layers},
        {"config",
         {{"d", c.d}, {"K", c.K}, {"scope", c.scope == Scope::per_layer ? "per_layer" : "per_block"},
          {"epochs", c.epochs}, {"batch_rows", c.batch_rows}, {"lr", c.lr}, {"codebook_lr", c.codebook_lr},
          {"cosine_decay", c.cosine_decay},
          {"lambda", c.lambda}, {"seed", c.seed}, {"m", c.m}, {"h", c.hidden()},
          {"norm", static_cast<int>(c.norm)}, {"init", c.init == CodebookInit::latent_normal ? "normal" : "uniform"},
          {"vq_split", c.vq_split}, {"lloyd_every", c.lloyd_every}, {"refresh_dead", c.refresh_dead},
          {"precision", c.precision == Precision::f64 ? "f64" : "f32"}}},
        {"final",
         {{"vq_sum", r.final_metrics.vq_sum}, {"vq_mean", r.final_metrics.vq_mean},
          {"mse_mean", r.final_metrics.mse_mean}, {"mse_top100", r.final_metrics.mse_top100},
          {"frobenius_rel_err", r.final_metrics.frobenius_rel_err}}},
        {"wall_seconds", r.wall_seconds},
        {"usage", {{"used", r.used_codewords}, {"dead", r.dead_codewords}, {"max", r.max_usage}}},
        {"codebook_frozen", r.codebook_frozen},
        {"diverged", r.diverged},
        {"note", r.note},
        {"encoder", {{"m", r.encoder_config.m}, {"h", r.encoder_config.h}, {"params", r.encoder_params}}},
    };
    out << summary.dump() << '\n';
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Bounds the size of activation caches when a whole layer is evaluated.
constexpr std::size_t kEvalChunkRows = 1u << 14;

template <typename T>
Matrix<T> forward_chunked(const MetaNet<T>& net, const Matrix<T>& x, std::size_t group) {
    const std::size_t groups_per_chunk = std::max<std::size_t>(1, kEvalChunkRows / group);
    const std::size_t chunk = groups_per_chunk * group;
    if (x.rows <= chunk) {
        return mlp_forward(net, RowBatch<T>{x, group}).values;
    }
    Matrix<T> out(x.rows, net.config.d);
    for (std::size_t r0 = 0; r0 < x.rows; r0 += chunk) {
        const std::size_t rows = std::min(chunk, x.rows - r0);
        RowBatch<T> b{Matrix<T>(rows, x.cols), group};
        std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(r0 * x.cols), rows * x.cols, b.values.data.begin());
        auto y = mlp_forward(net, b).values;
        std::copy(y.data.begin(), y.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(r0 * out.cols));
    }
    return out;
}

template <typename T>
Matrix<T> gather_groups(const Matrix<T>& s, std::size_t L, std::span<const std::size_t> groups) {
    Matrix<T> out(groups.size() * L, s.cols);
    const std::size_t span_len = L * s.cols;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        std::copy_n(s.data.begin() + static_cast<std::ptrdiff_t>(groups[g] * span_len), span_len,
                    out.data.begin() + static_cast<std::ptrdiff_t>(g * span_len));
    }
    return out;
}

template <typename T>
struct Evaluation {
    EpochRecord record;
    std::vector<std::size_t> usage;
    Matrix<T> z_all;
    std::vector<std::uint32_t> indices_all;
};

template <typename T>
class Trainer {
public:
    Trainer(const std::vector<NamedWeight>& weights, const CompressConfig& cfg) : cfg_(cfg) {
        for (const auto& w : weights) {
            check(w.weight != nullptr, ErrorKind::data, "missing weight for " + w.name);
            parts_.push_back(split_rows(matrix_cast<T>(*w.weight), cfg.d, w.name));
            total_n_ += parts_.back().count();
        }
        std::mt19937_64 rng(mix_seed(cfg.seed, 1));
        enc_ = init_metanet<T>(cfg.encoder_config(), rng);
        dec_ = init_metanet<T>(cfg.decoder_config(), rng);
        if (cfg.init == CodebookInit::latent_normal) {
            Matrix<T> z = encode_all();
            cb_ = init_codebook<T>(cfg.K, cfg.d, mix_seed(cfg.seed, 2), latent_stats(z));
        } else {
            cb_ = init_codebook_uniform<T>(cfg.K, cfg.d, mix_seed(cfg.seed, 2));
        }
        enc_opt_ = AdamState<T>(enc_.params.size(), static_cast<T>(cfg.lr));
        dec_opt_ = AdamState<T>(dec_.params.size(), static_cast<T>(cfg.lr));
        cb_opt_ = AdamState<T>(cb_.C.data.size(), static_cast<T>(cfg.codebook_lr));
        shuffle_rng_.seed(mix_seed(cfg.seed, 3));
        refresh_rng_.seed(mix_seed(cfg.seed, 4));
    }

    Matrix<T> encode_all() const {
        Matrix<T> z(total_n_, cfg_.d);
        std::size_t off = 0;
        for (const auto& p : parts_) {
            auto zp = forward_chunked(enc_, p.data, p.L);
            std::copy(zp.data.begin(), zp.data.end(), z.data.begin() + static_cast<std::ptrdiff_t>(off));
            off += zp.data.size();
        }
        return z;
    }

    Evaluation<T> evaluate() const {
        Evaluation<T> ev;
        ev.z_all = encode_all();
        auto a = assign_nearest(ev.z_all, cb_);
        std::vector<double> err;
        err.reserve(total_n_);
        std::size_t off = 0;
        for (const auto& p : parts_) {
            Matrix<T> zq(p.count(), cfg_.d);
            std::copy_n(a.quantized.data.begin() + static_cast<std::ptrdiff_t>(off * cfg_.d), zq.data.size(),
                        zq.data.begin());
            auto s_hat = forward_chunked(dec_, zq, p.L);
            auto e = row_sq_errors(p.data, s_hat);
            err.insert(err.end(), e.begin(), e.end());
            off += p.count();
        }
        auto& r = ev.record;
        r.vq_sum = sorted_sum(a.distances);
        r.vq_mean = r.vq_sum / static_cast<double>(total_n_);
        const double err_sum = sorted_sum(err);
        r.mse_mean = err_sum / static_cast<double>(total_n_);
        r.rmse = std::sqrt(err_sum);
        r.mse_top100 = top_k_sum(err, 100);
        r.loss = r.rmse + cfg_.lambda * r.vq_sum;
        ev.usage = usage_counts(a.indices, cfg_.K);
        r.used_codewords = static_cast<std::size_t>(std::ranges::count_if(ev.usage, [](std::size_t c) { return c > 0; }));
        ev.indices_all = std::move(a.indices);
        return ev;
    }

    void run_epoch() {
        std::vector<std::pair<std::size_t, std::vector<std::size_t>>> batches;
        for (std::size_t p = 0; p < parts_.size(); ++p) {
            std::vector<std::size_t> order(parts_[p].d_in);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::shuffle(order.begin(), order.end(), shuffle_rng_);
            for (std::size_t i = 0; i < order.size(); i += cfg_.batch_rows) {
                const std::size_t e = std::min(order.size(), i + cfg_.batch_rows);
                batches.emplace_back(p, std::vector<std::size_t>(order.begin() + static_cast<std::ptrdiff_t>(i),
                                                                 order.begin() + static_cast<std::ptrdiff_t>(e)));
            }
        }
        std::shuffle(batches.begin(), batches.end(), shuffle_rng_);
        for (const auto& [p, groups] : batches) {
            step(parts_[p], groups);
        }
    }

    void step(const SubvectorSet<T>& part, std::span<const std::size_t> groups) {
        RowBatch<T> s{gather_groups(part.data, part.L, groups), part.L};
        const std::size_t n = s.values.rows;
        const double scale = static_cast<double>(total_n_) / static_cast<double>(n);

        ForwardCache<T> enc_cache;
        auto z = mlp_forward(enc_, s, &enc_cache);
        auto a = assign_nearest(z.values, cb_);
        ForwardCache<T> dec_cache;
        auto s_hat = mlp_forward(dec_, RowBatch<T>{a.quantized, part.L}, &dec_cache);

        double err = 0;
        for (std::size_t i = 0; i < s_hat.values.data.size(); ++i) {
            const double t = static_cast<double>(s_hat.values.data[i]) - static_cast<double>(s.values.data[i]);
            err += t * t;
        }
        // d/dS_hat sqrt(scale * err) = scale * (S_hat - S) / sqrt(scale * err)
        const double rmse = std::sqrt(scale * err);
        RowBatch<T> upstream{Matrix<T>(n, cfg_.d), part.L};
        if (rmse > 0) {
            const double f = scale / rmse;
            for (std::size_t i = 0; i < upstream.values.data.size(); ++i) {
                upstream.values.data[i] = static_cast<T>(
                    f * (static_cast<double>(s_hat.values.data[i]) - static_cast<double>(s.values.data[i])));
            }
        }
        auto dec_grad = mlp_backward(dec_, upstream, dec_cache);

        auto vq = vq_loss(z.values, a, cfg_.K, VqLossOptions{cfg_.vq_split, cfg_.commitment});
        const T w = static_cast<T>(cfg_.lambda * scale);
        auto dz = ste_route(dec_grad.input);
        for (std::size_t i = 0; i < dz.data.size(); ++i) {
            dz.data[i] += w * vq.grad_z.data[i];
        }
        for (auto& g : vq.grad_codebook.data) {
            g *= w;
        }
        auto enc_grad = mlp_backward(enc_, RowBatch<T>{std::move(dz), part.L}, enc_cache);

        adam_step<T>(enc_opt_, enc_.params, enc_grad.params,
                     [this](std::size_t i) { return "encoder." + enc_.param_name(i); });
        adam_step<T>(dec_opt_, dec_.params, dec_grad.params,
                     [this](std::size_t i) { return "decoder." + dec_.param_name(i); });
        adam_step<T>(cb_opt_, cb_.C.data, vq.grad_codebook.data,
                     [](std::size_t i) { return "codebook[" + std::to_string(i) + "]"; });
    }

    void set_lr_scale(double f) {
        enc_opt_.lr = static_cast<T>(cfg_.lr * f);
        dec_opt_.lr = static_cast<T>(cfg_.lr * f);
        cb_opt_.lr = static_cast<T>(cfg_.codebook_lr * f);
    }

    std::size_t maintain_codebook(const Evaluation<T>& ev, std::size_t epoch) {
        std::size_t refreshed = 0;
        if (cfg_.lloyd_every > 0 && epoch % cfg_.lloyd_every == 0) {
            lloyd_recenter(cb_, ev.z_all, ev.indices_all);
        }
        if (cfg_.refresh_dead) {
            refreshed = refresh_dead_codewords(cb_, ev.usage, ev.z_all, refresh_rng_);
        }
        return refreshed;
    }

    struct Snapshot {
        MetaNet<T> enc, dec;
        Codebook<T> cb;
    };
    Snapshot snapshot() const { return {enc_, dec_, cb_}; }
    void restore(const Snapshot& s) {
        enc_ = s.enc;
        dec_ = s.dec;
        cb_ = s.cb;
    }

    const MetaNet<T>& encoder() const { return enc_; }
    const MetaNet<T>& decoder() const { return dec_; }
    const Codebook<T>& codebook() const { return cb_; }
    const std::vector<SubvectorSet<T>>& parts() const { return parts_; }

private:
    static double sorted_sum(std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return std::accumulate(v.begin(), v.end(), 0.0);
    }

    CompressConfig cfg_;
    std::vector<SubvectorSet<T>> parts_;
    std::size_t total_n_ = 0;
    MetaNet<T> enc_;
    MetaNet<T> dec_;
    Codebook<T> cb_;
    AdamState<T> enc_opt_;
    AdamState<T> dec_opt_;
    AdamState<T> cb_opt_;
    std::mt19937_64 shuffle_rng_;
    std::mt19937_64 refresh_rng_;
};

template <typename T>
GroupResult run_group(const std::vector<NamedWeight>& weights, const CompressConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    Trainer<T> trainer(weights, cfg);
    TrainReport report;
    report.config = cfg;
    for (const auto& w : weights) {
        report.layers.push_back(w.name);
    }
    report.codebook_frozen = cfg.lambda == 0 && cfg.lloyd_every == 0;
    if (report.codebook_frozen) {
        report.note = "codebook frozen: lambda=0 leaves the codebook without a gradient";
    }

    auto ev = trainer.evaluate();
    ev.record.epoch = 0;
    const double initial_loss = ev.record.loss;
    report.epochs.push_back(ev.record);
    auto best = trainer.snapshot();
    double best_loss = initial_loss;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        bool failed = false;
        if (cfg.cosine_decay) {
            const double t = static_cast<double>(epoch - 1) / static_cast<double>(cfg.epochs);
            trainer.set_lr_scale(0.5 * (1.0 + std::cos(std::numbers::pi * t)));
        }
        try {
            trainer.run_epoch();
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::divergence) {
                throw;
            }
            report.note = e.what();
            failed = true;
        }
        if (!failed) {
            ev = trainer.evaluate();
            ev.record.epoch = epoch;
            failed = !std::isfinite(ev.record.loss) || ev.record.loss > cfg.divergence_factor * initial_loss;
            if (failed) {
                report.note = "loss " + std::to_string(ev.record.loss) + " exceeded " +
                              std::to_string(cfg.divergence_factor) + "x the initial " + std::to_string(initial_loss);
            }
        }
        if (failed) {
            report.diverged = true;
            trainer.restore(best);
            break;
        }
        ev.record.refreshed = trainer.maintain_codebook(ev, epoch);
        report.epochs.push_back(ev.record);
        if (ev.record.loss <= best_loss) {
            best_loss = ev.record.loss;
            best = trainer.snapshot();
        }
    }

    // Ship what the file can hold: fp16 codebook, f32 decoder. Indices are
    // chosen against the rounded codebook so the stored triple is consistent.
    auto cb16 = std::make_shared<Codebook<float>>();
    cb16->seed = trainer.codebook().seed;
    cb16->C = Matrix<float>(cfg.K, cfg.d);
    for (std::size_t i = 0; i < cb16->C.data.size(); ++i) {
        cb16->C.data[i] = fp16_round(static_cast<float>(trainer.codebook().C.data[i]));
    }
    auto dec32 = std::make_shared<const MetaNet<float>>(trainer.decoder().template cast<float>());
    Codebook<T> cb_t;
    cb_t.C = matrix_cast<T>(cb16->C);

    GroupResult out;
    std::size_t total_n = 0;
    for (const auto& part : trainer.parts()) {
        total_n += part.count();
    }
    Matrix<double> s_all(total_n, cfg.d), s_hat_all(total_n, cfg.d), z_all(total_n, cfg.d), zq_all(total_n, cfg.d);
    std::size_t off = 0;
    for (std::size_t p = 0; p < weights.size(); ++p) {
        const auto& part = trainer.parts()[p];
        auto z = forward_chunked(trainer.encoder(), part.data, part.L);
        auto a = assign_nearest(z, cb_t);
        CompressedLayer cl;
        cl.name = weights[p].name;
        cl.role = weights[p].role;
        cl.block_index = weights[p].block_index;
        cl.d_in = part.d_in;
        cl.d_out = part.L * part.d;
        cl.d = part.d;
        cl.L = part.L;
        cl.codebook = cb16;
        cl.decoder = dec32;
        cl.indices = std::move(a.indices);

        // Same float matrices a later verify pass sees, widened exactly.
        const auto s = split_rows(*weights[p].weight, cfg.d).data;
        const auto s_hat = split_rows(reconstruct_layer(cl), cfg.d).data;
        const std::size_t at = off * cfg.d;
        std::copy(s.data.begin(), s.data.end(), s_all.data.begin() + static_cast<std::ptrdiff_t>(at));
        std::copy(s_hat.data.begin(), s_hat.data.end(), s_hat_all.data.begin() + static_cast<std::ptrdiff_t>(at));
        std::copy(z.data.begin(), z.data.end(), z_all.data.begin() + static_cast<std::ptrdiff_t>(at));
        std::copy(a.quantized.data.begin(), a.quantized.data.end(), zq_all.data.begin() + static_cast<std::ptrdiff_t>(at));
        off += part.count();
        out.layers.push_back(std::move(cl));
    }
    report.final_metrics = layer_metrics(s_all, s_hat_all, z_all, zq_all);

    std::vector<std::size_t> usage(cfg.K, 0);
    for (const auto& cl : out.layers) {
        for (auto i : cl.indices) {
            ++usage[i];
        }
    }
    report.used_codewords = static_cast<std::size_t>(std::ranges::count_if(usage, [](std::size_t c) { return c > 0; }));
    report.dead_codewords = cfg.K - report.used_codewords;
    report.max_usage = *std::ranges::max_element(usage);
    report.encoder_config = trainer.encoder().config;
    report.encoder_params.assign(trainer.encoder().params.begin(), trainer.encoder().params.end());
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.report = std::move(report);
    return out;
}

} // namespace

GroupResult compress_group(const std::vector<NamedWeight>& weights, const CompressConfig& cfg) {
    cfg.validate();
    check(!weights.empty(), ErrorKind::config, "nothing to compress");
    for (const auto& w : weights) {
        check(w.weight != nullptr, ErrorKind::data, "missing weight for " + w.name);
        check(w.weight->cols % cfg.d == 0, ErrorKind::config,
              "layer " + w.name + ": d=" + std::to_string(cfg.d) + " does not divide d_out=" +
                  std::to_string(w.weight->cols));
        for (float v : w.weight->data) {
            check(std::isfinite(v), ErrorKind::data, "layer " + w.name + " contains non-finite weights");
        }
    }
    return cfg.precision == Precision::f64 ? run_group<double>(weights, cfg) : run_group<float>(weights, cfg);
}

LayerResult compress_layer(const Matrix<float>& w, const CompressConfig& cfg, const std::string& name,
                           LayerRole role, int block_index) {
    auto g = compress_group({NamedWeight{name, role, block_index, &w}}, cfg);
    return LayerResult{std::move(g.layers.front()), std::move(g.report)};
}

Matrix<double> reconstruct_subvectors(const CompressedLayer& cl) {
    check(cl.codebook && cl.decoder, ErrorKind::data, "layer " + cl.name + " has no codebook or decoder");
    check(cl.indices.size() == cl.N(), ErrorKind::data, "layer " + cl.name + ": index count != N");
    const std::size_t K = cl.K();
    Matrix<double> zq(cl.N(), cl.d);
    for (std::size_t i = 0; i < cl.indices.size(); ++i) {
        const auto k = cl.indices[i];
        check(k < K, ErrorKind::data, "layer " + cl.name + ": index " + std::to_string(k) + " out of range");
        const auto src = cl.codebook->C.row(k);
        for (std::size_t j = 0; j < cl.d; ++j) {
            zq(i, j) = static_cast<double>(src[j]);
        }
    }
    const auto dec = cl.decoder->cast<double>();
    return forward_chunked(dec, zq, cl.L);
}

Matrix<float> reconstruct_layer(const CompressedLayer& cl) {
    SubvectorSet<float> s;
    s.data = matrix_cast<float>(reconstruct_subvectors(cl));
    s.d = cl.d;
    s.L = cl.L;
    s.d_in = cl.d_in;
    s.origin = cl.name;
    return merge(s, cl.d);
}

std::set<LayerRole> default_layer_filter() {
    return {LayerRole::q, LayerRole::k, LayerRole::v, LayerRole::o, LayerRole::gate, LayerRole::up, LayerRole::down};
}

std::set<LayerRole> parse_layer_filter(const std::string& csv) {
    if (csv.empty() || csv == "all") {
        return default_layer_filter();
    }
    std::set<LayerRole> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item == "attn") {
            out.insert({LayerRole::q, LayerRole::k, LayerRole::v, LayerRole::o});
        } else if (item == "ffn") {
            out.insert({LayerRole::gate, LayerRole::up, LayerRole::down});
        } else {
            try {
                out.insert(parse_role(item));
            } catch (const Error& e) {
                throw Error(ErrorKind::config, e.what());
            }
        }
    }
    return out;
}

ModelResult compress_model(const ModelManifest& manifest, const CompressConfig& cfg,
                           const std::set<LayerRole>& filter, const ProgressFn& progress) {
    cfg.validate();
    ModelResult result;
    result.model.scope = cfg.scope;

    std::vector<std::size_t> selected;
    for (std::size_t i = 0; i < manifest.layers.size(); ++i) {
        if (filter.contains(manifest.layers[i].role)) {
            selected.push_back(i);
        }
    }

    // Work units: one layer each, or every selected layer of a block.
    std::vector<std::vector<std::size_t>> units;
    if (cfg.scope == Scope::per_layer) {
        for (auto i : selected) {
            units.push_back({i});
        }
    } else {
        std::map<int, std::size_t> slot;
        for (auto i : selected) {
            auto [it, fresh] = slot.emplace(manifest.layers[i].block_index, units.size());
            if (fresh) {
                units.emplace_back();
            }
            units[it->second].push_back(i);
        }
    }

    struct UnitOutcome {
        std::optional<GroupResult> result;
        std::optional<LayerFailure> failure;
    };
    auto run_unit = [&](std::size_t u) {
        UnitOutcome out;
        std::string label;
        for (auto i : units[u]) {
            label += (label.empty() ? "" : "+") + manifest.layers[i].name;
        }
        try {
            std::vector<Matrix<float>> weights;
            weights.reserve(units[u].size());
            std::vector<NamedWeight> named;
            for (auto i : units[u]) {
                const auto& e = manifest.layers[i];
                weights.push_back(load_layer(manifest, e));
            }
            for (std::size_t j = 0; j < units[u].size(); ++j) {
                const auto& e = manifest.layers[units[u][j]];
                named.push_back({e.name, e.role, e.block_index, &weights[j]});
            }
            CompressConfig unit_cfg = cfg;
            unit_cfg.seed = mix_seed(cfg.seed, 1000 + units[u].front());
            out.result = compress_group(named, unit_cfg);
            if (out.result->report.diverged) {
                out.failure = LayerFailure{label, static_cast<int>(ErrorKind::divergence), out.result->report.note};
            }
        } catch (const Error& e) {
            out.failure = LayerFailure{label, e.exit_code(), e.what()};
        } catch (const std::exception& e) {
            out.failure = LayerFailure{label, static_cast<int>(ErrorKind::data), e.what()};
        }
        if (progress) {
            progress(label + (out.failure ? " failed: " + out.failure->message : " done"));
        }
        return out;
    };

    std::vector<UnitOutcome> outcomes(units.size());
    if (cfg.jobs <= 1) {
        for (std::size_t u = 0; u < units.size(); ++u) {
            outcomes[u] = run_unit(u);
        }
    } else {
        for (std::size_t start = 0; start < units.size(); start += cfg.jobs) {
            std::vector<std::future<UnitOutcome>> wave;
            for (std::size_t u = start; u < std::min(units.size(), start + cfg.jobs); ++u) {
                wave.push_back(std::async(std::launch::async, run_unit, u));
            }
            for (std::size_t k = 0; k < wave.size(); ++k) {
                outcomes[start + k] = wave[k].get();
            }
        }
    }

    for (auto& o : outcomes) {
        if (o.failure) {
            result.failures.push_back(*o.failure);
        }
        if (o.result) {
            for (auto& l : o.result->layers) {
                result.model.layers.push_back(std::move(l));
            }
            result.reports.push_back(std::move(o.result->report));
        }
    }
    return result;
}

} // namespace pocketllm
