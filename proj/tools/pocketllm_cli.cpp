// pocketllm: compress weight matrices into codebook + indices + decoder files.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "pocketllm/compressor.hpp"
#include "pocketllm/error.hpp"
#include "pocketllm/metrics.hpp"
#include "pocketllm/pocket_format.hpp"
#include "pocketllm/tensor_store.hpp"

namespace fs = std::filesystem;
using namespace pocketllm;

namespace {

const char* kSchemas = R"(Output schemas (stdout, comma separated, '#' lines are comments):
  stats         layer,role,block,N,d,K,decoder_params,stored_bits,r_params,r_bits,avg_bits,avg_bits_index,payload_bytes
                last row: TOTAL with the same columns (role/block empty)
  verify        layer,N,mse_mean,mse_top100,frobenius_rel_err
  histogram     # pocketllm-export v1 / bin_center,count (resolved config goes to stderr)
  export-recon  # pocketllm-export v1 / row,col,original_<role>,reconstructed_<role>
  compress      per-unit reports <out>.reports/<layers>.jsonl: one JSON object per epoch, then a summary object
                failures (if any) <out>.failures.csv: layer,exit_code,message
Exit codes: 0 ok, 2 config, 3 data, 4 divergence, 5 corrupt file.)";

std::string file_safe(const std::string& s) {
    std::string out;
    for (char c : s) {
        const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_' || c == '+';
        out += keep ? c : '_';
    }
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string q = "\"";
    for (char c : s) {
        q += c == '"' ? std::string("\"\"") : std::string(1, c);
    }
    return q + "\"";
}

void print_config(std::ostream& out, const CompressConfig& c, const std::string& layers) {
    out << "# config d=" << c.d << " K=" << c.K << " scope=" << (c.scope == Scope::per_layer ? "per_layer" : "per_block")
        << " layers=" << layers << " epochs=" << c.epochs << " batch_rows=" << c.batch_rows << " lr=" << c.lr
        << " codebook_lr=" << c.codebook_lr << " cosine_decay=" << c.cosine_decay << " lambda=" << c.lambda
        << " seed=" << c.seed << " m=" << c.m << " h=" << c.hidden() << " norm="
        << (c.norm == NormMode::reshaped ? "rln" : c.norm == NormMode::layer ? "ln" : "none")
        << " init=" << (c.init == CodebookInit::latent_normal ? "normal" : "uniform") << " vq_split=" << c.vq_split
        << " commitment=" << c.commitment << " lloyd_every=" << c.lloyd_every << " refresh_dead=" << c.refresh_dead
        << " precision=" << (c.precision == Precision::f64 ? "f64" : "f32") << " jobs=" << c.jobs << '\n';
}

struct StatsRow {
    std::string layer;
    std::string role;
    std::string block;
    std::uint64_t N = 0;
    std::uint64_t d = 0;
    std::uint64_t K = 0;
    std::uint64_t n_fd = 0;
    std::uint64_t weights = 0;      // N*d
    std::uint64_t stored_bits = 0;  // codebook/decoder counted once per owner
    std::uint64_t index_bits = 0;
    std::uint64_t param_slots = 0;  // K*d + N + N_fd, same ownership rule
    std::uint64_t payload_bytes = 0;
};

void print_stats(std::ostream& out, const std::vector<StatsRow>& rows) {
    out << "layer,role,block,N,d,K,decoder_params,stored_bits,r_params,r_bits,avg_bits,avg_bits_index,payload_bytes\n";
    out << std::setprecision(10);
    StatsRow total;
    total.layer = "TOTAL";
    auto emit = [&](const StatsRow& r, bool is_total) {
        const double w = static_cast<double>(r.weights);
        out << csv_field(r.layer) << ',' << r.role << ',' << r.block << ',' << r.N << ',';
        if (is_total) {
            out << ",,,";
        } else {
            out << r.d << ',' << r.K << ',' << r.n_fd << ',';
        }
        out << r.stored_bits << ',' << w / static_cast<double>(r.param_slots) << ','
            << 32.0 * w / static_cast<double>(r.stored_bits) << ',' << static_cast<double>(r.stored_bits) / w << ','
            << static_cast<double>(r.index_bits) / w << ',' << r.payload_bytes << '\n';
    };
    for (const auto& r : rows) {
        emit(r, false);
        total.N += r.N;
        total.weights += r.weights;
        total.stored_bits += r.stored_bits;
        total.index_bits += r.index_bits;
        total.param_slots += r.param_slots;
        total.payload_bytes += r.payload_bytes;
    }
    if (!rows.empty()) {
        emit(total, true);
    }
}

std::vector<StatsRow> stats_rows(const CompressedModel& model, bool exclude_norm) {
    const auto fp = footprint(model);
    std::vector<StatsRow> rows;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const auto& l = model.layers[i];
        const bool owner = fp.layers[i].codebook_bytes > 0;
        StatsRow r;
        r.layer = l.name;
        r.role = std::string(role_name(l.role));
        r.block = std::to_string(l.block_index);
        r.N = l.N();
        r.d = l.d;
        r.K = l.K();
        r.n_fd = l.decoder->params.size() - (exclude_norm ? l.decoder->config.norm_param_count() : 0);
        r.weights = r.N * r.d;
        r.index_bits = fp.layers[i].index_bits;
        r.stored_bits = r.index_bits + (owner ? 16 * r.K * r.d + 32 * r.n_fd : 0);
        r.param_slots = r.N + (owner ? r.K * r.d + r.n_fd : 0);
        r.payload_bytes = fp.layers[i].payload_bytes();
        rows.push_back(r);
    }
    return rows;
}

int run_compress(const std::string& manifest_path, CompressConfig cfg, const std::string& layers, std::string out_path,
                 std::string report_dir) {
    const auto filter = parse_layer_filter(layers);
    cfg.validate();
    print_config(std::cout, cfg, layers);
    const auto manifest = load_manifest(manifest_path);
    for (const auto& e : manifest.layers) {
        check(!filter.contains(e.role) || e.d_out % cfg.d == 0, ErrorKind::config,
              "layer " + e.name + ": d=" + std::to_string(cfg.d) + " does not divide d_out=" + std::to_string(e.d_out));
    }
    if (report_dir.empty()) {
        report_dir = out_path + ".reports";
    }

    auto result = compress_model(manifest, cfg, filter, [](const std::string& msg) { std::cerr << msg << '\n'; });
    check(!result.model.layers.empty() || !result.failures.empty(), ErrorKind::config,
          "no layer in " + manifest_path + " matches --layers " + layers);

    fs::create_directories(report_dir);
    for (const auto& r : result.reports) {
        std::string label;
        for (const auto& n : r.layers) {
            label += (label.empty() ? "" : "+") + n;
        }
        std::ofstream f(fs::path(report_dir) / (file_safe(label) + ".jsonl"));
        write_report_jsonl(f, r);
    }
    if (!result.model.layers.empty()) {
        save_pocket_file(out_path, result.model);
        std::cout << "# wrote " << out_path << " (" << fs::file_size(out_path) << " bytes, "
                  << result.model.layers.size() << " layers)\n";
        print_stats(std::cout, stats_rows(result.model, false));
    }
    if (result.failures.empty()) {
        return 0;
    }
    const auto ledger = out_path + ".failures.csv";
    std::ofstream f(ledger);
    f << "layer,exit_code,message\n";
    for (const auto& fl : result.failures) {
        f << csv_field(fl.layer) << ',' << fl.exit_code << ',' << csv_field(fl.message) << '\n';
        std::cerr << "failed: " << fl.layer << ": " << fl.message << '\n';
    }
    std::cerr << result.failures.size() << " unit(s) failed; ledger at " << ledger << '\n';
    return result.failures.front().exit_code;
}

int run_decompress(const std::string& file, const std::string& out_manifest) {
    std::cout << "# config file=" << file << " out_manifest=" << out_manifest << '\n';
    const auto model = load_pocket_file(file);
    const fs::path manifest_path(out_manifest);
    ModelManifest m;
    m.base_dir = manifest_path.parent_path().empty() ? fs::path(".") : manifest_path.parent_path();
    fs::create_directories(m.base_dir);
    for (const auto& l : model.layers) {
        LayerEntry e;
        e.name = l.name;
        e.role = l.role;
        e.block_index = l.block_index;
        e.d_in = l.d_in;
        e.d_out = l.d_out;
        e.data_path = file_safe(l.name) + ".f32";
        save_tensor(m.base_dir / e.data_path, reconstruct_layer(l));
        m.layers.push_back(e);
    }
    write_manifest(manifest_path, m);
    std::cout << "# wrote " << out_manifest << " (" << m.layers.size() << " layers)\n";
    return 0;
}

const LayerEntry& matching_entry(const ModelManifest& manifest, const CompressedLayer& l) {
    const auto& e = manifest.find(l.name);
    check(e.d_in == l.d_in && e.d_out == l.d_out, ErrorKind::data,
          "layer " + l.name + ": manifest shape " + std::to_string(e.d_in) + "x" + std::to_string(e.d_out) +
              " != compressed shape " + std::to_string(l.d_in) + "x" + std::to_string(l.d_out));
    return e;
}

int run_verify(const std::string& manifest_path, const std::string& file) {
    std::cout << "# config manifest=" << manifest_path << " file=" << file << '\n';
    const auto manifest = load_manifest(manifest_path);
    const auto model = load_pocket_file(file);
    std::cout << "layer,N,mse_mean,mse_top100,frobenius_rel_err\n" << std::setprecision(10);
    for (const auto& l : model.layers) {
        const auto w = load_layer(manifest, matching_entry(manifest, l));
        const auto s = split_rows(w, l.d).data;
        const auto s_hat = split_rows(reconstruct_layer(l), l.d).data;
        const auto m = layer_metrics(s, s_hat, s, s);
        std::cout << csv_field(l.name) << ',' << l.N() << ',' << m.mse_mean << ',' << m.mse_top100 << ','
                  << m.frobenius_rel_err << '\n';
    }
    return 0;
}

std::ostream& open_out(const std::string& path, std::ofstream& file) {
    if (path.empty() || path == "-") {
        return std::cout;
    }
    file.open(path);
    check(file.good(), ErrorKind::config, "cannot write " + path);
    return file;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Compress weight matrices into a codebook, packed indices and a small decoder."};
    app.footer(kSchemas);
    app.require_subcommand(1);

    // compress
    CompressConfig cfg;
    std::string manifest_path, out_path, report_dir, layers = "all", scope = "per_layer", norm = "rln",
                                                     init = "normal", precision = "f64";
    bool no_refresh = false, no_cosine = false;
    auto* compress = app.add_subcommand("compress", "Train and write a .pklm file from a manifest");
    compress->add_option("manifest", manifest_path, "Model manifest")->required()->check(CLI::ExistingFile);
    compress->add_option("--d", cfg.d, "Subvector length")->capture_default_str();
    compress->add_option("--k", cfg.K, "Codebook size")->capture_default_str();
    compress->add_option("--layers", layers, "Roles: all, attn, ffn or a list of q,k,v,o,gate,up,down,other")
        ->capture_default_str();
    compress->add_option("--scope", scope, "per_layer or per_block")
        ->check(CLI::IsMember({"per_layer", "per_block"}))
        ->capture_default_str();
    compress->add_option("--epochs", cfg.epochs)->capture_default_str();
    compress->add_option("--batch-rows", cfg.batch_rows, "Weight rows per optimizer step")->capture_default_str();
    compress->add_option("--lr", cfg.lr, "Encoder/decoder learning rate")->capture_default_str();
    compress->add_option("--codebook-lr", cfg.codebook_lr)->capture_default_str();
    compress->add_flag("--no-cosine", no_cosine, "Keep learning rates constant");
    compress->add_option("--lambda", cfg.lambda, "Weight of the VQ term")->capture_default_str();
    compress->add_option("--seed", cfg.seed, "Falls back to $POCKET_SEED, then 0")->envname("POCKET_SEED");
    compress->add_option("--m", cfg.m, "MLP layers in encoder and decoder")->capture_default_str();
    compress->add_option("--hidden", cfg.h, "Hidden width (0: round(2.5 d))")->capture_default_str();
    compress->add_option("--norm", norm)->check(CLI::IsMember({"rln", "ln", "none"}))->capture_default_str();
    compress->add_option("--init", init, "Codebook init")->check(CLI::IsMember({"normal", "uniform"}))
        ->capture_default_str();
    compress->add_flag("--vq-split", cfg.vq_split, "Codebook loss plus weighted commitment loss");
    compress->add_option("--commitment", cfg.commitment)->capture_default_str();
    compress->add_option("--lloyd-every", cfg.lloyd_every, "Re-center codewords every E epochs (0: never)")
        ->capture_default_str();
    compress->add_flag("--no-refresh", no_refresh, "Keep dead codewords in place");
    compress->add_option("--precision", precision)->check(CLI::IsMember({"f64", "f32"}))->capture_default_str();
    compress->add_option("--jobs", cfg.jobs, "Units compressed concurrently")->capture_default_str();
    compress->add_option("--out", out_path, "Output .pklm file")->required();
    compress->add_option("--report-dir", report_dir, "Default: <out>.reports");

    // decompress
    std::string in_file, out_manifest;
    auto* decompress = app.add_subcommand("decompress", "Reconstruct weights into a new manifest");
    decompress->add_option("file", in_file)->required()->check(CLI::ExistingFile);
    decompress->add_option("--out-manifest", out_manifest)->required();

    // stats
    std::string stats_file;
    std::uint64_t sn = 0, sd = 0, sk = 0, snfd = 0;
    bool exclude_norm = false;
    auto* stats = app.add_subcommand("stats", "Compression ratios and bit budgets");
    stats->add_option("file", stats_file, "A .pklm file; omit to use --n/--d/--k/--nfd")->check(CLI::ExistingFile);
    auto* o_n = stats->add_option("--n", sn, "Subvector count");
    auto* o_d = stats->add_option("--d", sd);
    auto* o_k = stats->add_option("--k", sk);
    stats->add_option("--nfd", snfd, "Decoder parameter count");
    stats->add_flag("--exclude-norm-params", exclude_norm, "Leave normalization gain/shift out of decoder params");

    // verify
    std::string verify_manifest, verify_file;
    auto* verify = app.add_subcommand("verify", "Reconstruction error against the original weights");
    verify->add_option("manifest", verify_manifest)->required()->check(CLI::ExistingFile);
    verify->add_option("file", verify_file)->required()->check(CLI::ExistingFile);

    // histogram
    std::string hist_manifest, hist_layer, hist_file, hist_out;
    double coverage = 0.999;
    std::size_t bins = 100;
    auto* histogram = app.add_subcommand("histogram", "Value histogram of one layer");
    histogram->add_option("manifest", hist_manifest)->required()->check(CLI::ExistingFile);
    histogram->add_option("--layer", hist_layer)->required();
    histogram->add_option("--file", hist_file, "Use the reconstruction from this .pklm instead")
        ->check(CLI::ExistingFile);
    histogram->add_option("--coverage", coverage, "Central fraction kept")->capture_default_str();
    histogram->add_option("--bins", bins)->capture_default_str();
    histogram->add_option("--out", hist_out, "CSV path (default stdout)");

    // export-recon
    std::string ex_manifest, ex_file, ex_layer, ex_out;
    std::size_t row0 = 0, col0 = 0, rows = 16, cols = 4;
    auto* export_recon = app.add_subcommand("export-recon", "Original vs reconstructed values for a window");
    export_recon->add_option("manifest", ex_manifest)->required()->check(CLI::ExistingFile);
    export_recon->add_option("file", ex_file)->required()->check(CLI::ExistingFile);
    export_recon->add_option("--layer", ex_layer)->required();
    export_recon->add_option("--row0", row0)->capture_default_str();
    export_recon->add_option("--col0", col0)->capture_default_str();
    export_recon->add_option("--rows", rows)->capture_default_str();
    export_recon->add_option("--cols", cols)->capture_default_str();
    export_recon->add_option("--out", ex_out, "CSV path (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ErrorKind::config);
    }

    try {
        if (*compress) {
            cfg.scope = scope == "per_layer" ? Scope::per_layer : Scope::per_block;
            cfg.norm = norm == "rln" ? NormMode::reshaped : norm == "ln" ? NormMode::layer : NormMode::none;
            cfg.init = init == "normal" ? CodebookInit::latent_normal : CodebookInit::uniform;
            cfg.precision = precision == "f64" ? Precision::f64 : Precision::f32;
            cfg.refresh_dead = !no_refresh;
            cfg.cosine_decay = !no_cosine;
            return run_compress(manifest_path, cfg, layers, out_path, report_dir);
        }
        if (*decompress) {
            return run_decompress(in_file, out_manifest);
        }
        if (*stats) {
            std::cout << "# config file=" << (stats_file.empty() ? "-" : stats_file)
                      << " exclude_norm_params=" << exclude_norm << '\n';
            if (stats_file.empty()) {
                check(o_n->count() && o_d->count() && o_k->count(), ErrorKind::config,
                      "stats needs a file or --n, --d and --k");
                check(sn > 0 && sd > 0 && sk >= 2, ErrorKind::config, "stats needs N, d > 0 and K >= 2");
                StatsRow r;
                r.layer = "synthetic";
                r.N = sn;
                r.d = sd;
                r.K = sk;
                r.n_fd = snfd;
                r.weights = sn * sd;
                r.index_bits = index_bit_width(sk) * sn;
                r.stored_bits = compression_ratio_bits(sn, sd, sk, snfd).denominator;
                r.param_slots = compression_ratio_params(sn, sd, sk, snfd).denominator;
                print_stats(std::cout, {r});
                if ((sk & (sk - 1)) != 0) {
                    std::cout << "# K is not a power of two; index width rounded up to " << index_bit_width(sk)
                              << " bits\n";
                }
                return 0;
            }
            print_stats(std::cout, stats_rows(load_pocket_file(stats_file), exclude_norm));
            return 0;
        }
        if (*verify) {
            return run_verify(verify_manifest, verify_file);
        }
        if (*histogram) {
            const auto manifest = load_manifest(hist_manifest);
            Matrix<float> w;
            if (hist_file.empty()) {
                w = load_layer(manifest, manifest.find(hist_layer));
            } else {
                const auto model = load_pocket_file(hist_file);
                const CompressedLayer* hit = nullptr;
                for (const auto& l : model.layers) {
                    if (l.name == hist_layer) {
                        hit = &l;
                    }
                }
                check(hit != nullptr, ErrorKind::data, "layer " + hist_layer + " not in " + hist_file);
                w = reconstruct_layer(*hit);
            }
            std::ofstream f;
            auto& out = open_out(hist_out, f);
            const auto h = weight_histogram(w, coverage, bins);
            std::cerr << "# config layer=" << hist_layer << " source=" << (hist_file.empty() ? "original" : hist_file)
                << " coverage=" << coverage << " bins=" << bins << " lo=" << h.lo << " hi=" << h.hi << '\n';
            write_histogram_csv(out, h);
            return 0;
        }
        if (*export_recon) {
            const auto manifest = load_manifest(ex_manifest);
            const auto model = load_pocket_file(ex_file);
            const CompressedLayer* hit = nullptr;
            for (const auto& l : model.layers) {
                if (l.name == ex_layer) {
                    hit = &l;
                }
            }
            check(hit != nullptr, ErrorKind::data, "layer " + ex_layer + " not in " + ex_file);
            const auto w = load_layer(manifest, matching_entry(manifest, *hit));
            const auto table = export_reconstruction(w, reconstruct_layer(*hit), row0, col0, rows, cols);
            std::ofstream f;
            auto& out = open_out(ex_out, f);
            std::cerr << "# config layer=" << ex_layer << " row0=" << row0 << " col0=" << col0 << " rows=" << rows
                << " cols=" << cols << '\n';
            write_reconstruction_csv(out, table, hit->role);
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::data);
    }
    return 0;
}
