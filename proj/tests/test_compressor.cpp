#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include <json.hpp>

#include "pocketllm/compressor.hpp"
#include "pocketllm/error.hpp"
#include "pocketllm/pocket_format.hpp"
#include "test_util.hpp"

using namespace pocketllm;

namespace {

// Every row holds each of 4 fixed subvectors equally often in shuffled
// order, so row statistics are identical and a perfect codebook exists.
Matrix<float> realizable_layer(std::size_t rows, std::size_t L, std::size_t d, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> n(0.0f, 1.0f);
    Matrix<float> codes(4, d);
    for (auto& v : codes.data) v = n(rng);
    Matrix<float> w(rows, L * d);
    std::vector<std::size_t> slots(L);
    for (std::size_t i = 0; i < L; ++i) slots[i] = i % 4;
    for (std::size_t r = 0; r < rows; ++r) {
        std::shuffle(slots.begin(), slots.end(), rng);
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t j = 0; j < d; ++j) w(r, l * d + j) = codes(slots[l], j);
    }
    return w;
}

CompressConfig small_config() {
    CompressConfig c;
    c.d = 4;
    c.K = 32;
    c.epochs = 6;
    c.batch_rows = 4;
    c.h = 8;
    return c;
}

double mse_against(const Matrix<float>& w, const CompressedLayer& cl) {
    const auto s = split_rows(w, cl.d).data;
    const auto s_hat = split_rows(reconstruct_layer(cl), cl.d).data;
    return layer_metrics(s, s_hat, s, s).mse_mean;
}

} // namespace

TEST_CASE("realizable layer is recovered with K=4") {
    const auto w = realizable_layer(64, 8, 2, 7);
    CompressConfig c;
    c.d = 2;
    c.K = 4;
    c.epochs = 400;
    c.batch_rows = 4;
    const auto r = compress_layer(w, c);
    CHECK(r.report.final_metrics.mse_mean < 1e-4);
    CHECK(r.report.used_codewords == 4);
}

TEST_CASE("epochs=0 reports the untrained state") {
    const auto w = testutil::random_matrix<float>(16, 16, 1, 0.02);
    auto c = small_config();
    c.epochs = 0;
    const auto r = compress_layer(w, c);
    REQUIRE(r.report.epochs.size() == 1);
    CHECK(r.report.epochs[0].epoch == 0);
    CHECK(std::isfinite(r.report.final_metrics.mse_mean));
    CHECK(r.layer.indices.size() == 16 * 4);
    CHECK_FALSE(r.report.diverged);
}

TEST_CASE("lambda=0 freezes the codebook and says so") {
    const auto w = testutil::random_matrix<float>(16, 16, 2, 0.02);
    auto c = small_config();
    c.refresh_dead = false;
    c.epochs = 0;
    const auto untrained = compress_layer(w, c);
    c.epochs = 4;
    c.lambda = 0;
    const auto r = compress_layer(w, c);
    CHECK(r.report.codebook_frozen);
    CHECK_FALSE(r.report.note.empty());
    CHECK(r.layer.codebook->C == untrained.layer.codebook->C);
    CHECK(r.layer.decoder->params != untrained.layer.decoder->params);

    c.lambda = 1;
    CHECK_FALSE(compress_layer(w, c).report.codebook_frozen);
}

TEST_CASE("reconstruction reproduces the reported mse") {
    const auto w = testutil::random_matrix<float>(32, 24, 3, 0.02);
    const auto r = compress_layer(w, small_config());
    CHECK(mse_against(w, r.layer) == r.report.final_metrics.mse_mean);
    CHECK(reconstruct_layer(r.layer) == reconstruct_layer(r.layer));
}

TEST_CASE("identity decoder returns codewords verbatim") {
    CompressedLayer cl;
    cl.name = "id";
    cl.d_in = 3;
    cl.d_out = 4;
    cl.d = 2;
    cl.L = 2;
    auto cb = std::make_shared<Codebook<float>>();
    cb->C = Matrix<float>(3, 2);
    cb->C.data = {0.5f, -1.0f, 2.0f, 0.25f, -3.0f, 4.0f};
    cl.codebook = cb;
    auto cfg = MetaNetConfig::decoder(2, 2, 1);
    cfg.norm = NormMode::none;
    cfg.activation = Activation::none;
    auto dec = std::make_shared<MetaNet<float>>(cfg);
    auto wt = dec->weight(0);
    std::fill(wt.begin(), wt.end(), 0.0f);
    wt[0] = 1.0f;
    wt[3] = 1.0f;
    cl.decoder = dec;
    cl.indices = {2, 0, 1, 1, 0, 2};
    const auto w_hat = reconstruct_layer(cl);
    for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t j = 0; j < 2; ++j) CHECK(w_hat(r, l * 2 + j) == cb->C(cl.indices[r * 2 + l], j));
}

TEST_CASE("reconstruction after a file round-trip is bit-identical") {
    const auto w = testutil::random_matrix<float>(16, 32, 4, 0.02);
    const auto r = compress_layer(w, small_config(), "blk0.up", LayerRole::up, 0);
    CompressedModel m;
    m.layers = {r.layer};
    const auto back = read_pocket_file(write_pocket_file(m));
    CHECK(reconstruct_layer(back.layers[0]) == reconstruct_layer(r.layer));
}

TEST_CASE("training is deterministic for a fixed seed") {
    const auto w = testutil::random_matrix<float>(16, 16, 5, 0.02);
    auto c = small_config();
    c.seed = 11;
    const auto a = compress_layer(w, c);
    const auto b = compress_layer(w, c);
    CHECK(a.layer.indices == b.layer.indices);
    CHECK(a.layer.codebook->C == b.layer.codebook->C);
    CHECK(a.layer.decoder->params == b.layer.decoder->params);
    c.seed = 12;
    CHECK(compress_layer(w, c).layer.decoder->params != a.layer.decoder->params);
}

TEST_CASE("float and double training agree loosely") {
    const auto w = testutil::random_matrix<float>(16, 16, 6, 0.02);
    auto c = small_config();
    c.epochs = 0;
    const auto a = compress_layer(w, c);
    c.precision = Precision::f32;
    const auto b = compress_layer(w, c);
    CHECK(b.report.final_metrics.mse_mean == doctest::Approx(a.report.final_metrics.mse_mean).epsilon(1e-3));
}

TEST_CASE("divergence restores the best snapshot") {
    const auto w = testutil::random_matrix<float>(16, 16, 7, 0.02);
    auto c = small_config();
    c.lr = 1e6;
    c.codebook_lr = 1e6;
    c.cosine_decay = false;
    const auto r = compress_layer(w, c);
    CHECK(r.report.diverged);
    CHECK_FALSE(r.report.note.empty());
    CHECK(r.report.epochs.size() < c.epochs + 1);
    CHECK(std::isfinite(r.report.final_metrics.mse_mean));
    for (const auto& e : r.report.epochs) CHECK(std::isfinite(e.loss));
}

TEST_CASE("invalid inputs are rejected") {
    const auto w = testutil::random_matrix<float>(4, 10, 8);
    auto c = small_config();
    try {
        compress_layer(w, c);
        FAIL("expected a config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
    }
    auto bad = testutil::random_matrix<float>(4, 8, 9);
    bad(1, 1) = NAN;
    try {
        compress_layer(bad, c);
        FAIL("expected a data error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::data);
    }
    c.K = 1;
    CHECK_THROWS_AS(compress_layer(testutil::random_matrix<float>(4, 8, 9), c), Error);
}

TEST_CASE("training loss mostly decreases on small instances") {
    std::size_t transitions = 0;
    std::size_t increases = 0;
    struct Case {
        std::size_t rows, cols, d, K;
        std::uint64_t seed;
    };
    for (const auto& k : {Case{32, 32, 4, 16, 1}, Case{64, 16, 2, 8, 2}, Case{16, 64, 8, 64, 3}, Case{48, 24, 4, 32, 4}}) {
        const auto w = testutil::random_matrix<float>(k.rows, k.cols, k.seed, 0.02);
        auto c = small_config();
        c.d = k.d;
        c.K = k.K;
        c.epochs = 10;
        c.seed = k.seed;
        const auto r = compress_layer(w, c);
        const auto& ep = r.report.epochs;
        for (std::size_t i = 1; i < ep.size(); ++i) {
            ++transitions;
            if (ep[i].loss > ep[i - 1].loss) ++increases;
        }
        CHECK(ep.back().mse_mean < ep.front().mse_mean);
        CHECK(r.report.final_metrics.mse_mean < ep.front().mse_mean);
    }
    CHECK(10 * increases <= transitions);
}

TEST_CASE("report serializes as one JSON object per line") {
    const auto w = testutil::random_matrix<float>(8, 8, 10, 0.02);
    auto c = small_config();
    c.epochs = 2;
    const auto r = compress_layer(w, c, "x");
    std::ostringstream out;
    write_report_jsonl(out, r.report);
    std::istringstream in(out.str());
    std::string line;
    std::vector<nlohmann::json> rows;
    while (std::getline(in, line)) rows.push_back(nlohmann::json::parse(line));
    REQUIRE(rows.size() == 4);
    CHECK(rows[0]["epoch"] == 0);
    CHECK(rows[2]["epoch"] == 2);
    CHECK(rows[3]["summary"] == true);
    CHECK(rows[3]["layers"][0] == "x");
    CHECK(rows[3]["config"]["K"] == 32);
}

TEST_CASE("layer filter parsing") {
    CHECK(parse_layer_filter("all") == default_layer_filter());
    CHECK(parse_layer_filter("v") == std::set<LayerRole>{LayerRole::v});
    CHECK(parse_layer_filter("attn,down").size() == 5);
    CHECK(parse_layer_filter("ffn").contains(LayerRole::gate));
    CHECK_FALSE(default_layer_filter().contains(LayerRole::other));
    CHECK_THROWS_AS(parse_layer_filter("q,bogus"), Error);
}

namespace {

std::filesystem::path toy_model(std::size_t blocks, std::uint64_t seed) {
    const auto dir = testutil::temp_dir("model");
    std::vector<std::pair<LayerEntry, Matrix<float>>> layers;
    const std::pair<LayerRole, std::pair<std::size_t, std::size_t>> shapes[] = {
        {LayerRole::q, {16, 16}},   {LayerRole::k, {16, 16}},  {LayerRole::v, {16, 16}},
        {LayerRole::o, {16, 16}},   {LayerRole::gate, {16, 24}}, {LayerRole::up, {16, 24}},
        {LayerRole::down, {24, 16}}};
    for (std::size_t b = 0; b < blocks; ++b) {
        for (const auto& [role, shape] : shapes) {
            const auto name = "blk" + std::to_string(b) + "." + std::string(role_name(role));
            layers.push_back({testutil::entry(name, role, static_cast<int>(b), shape.first, shape.second),
                              testutil::random_matrix<float>(shape.first, shape.second, seed++, 0.02)});
        }
    }
    layers.push_back({testutil::entry("embed", LayerRole::other, 0, 32, 16),
                      testutil::random_matrix<float>(32, 16, seed, 0.02)});
    return testutil::write_model(dir, layers);
}

} // namespace

TEST_CASE("compress_model honours the role filter") {
    const auto manifest = load_manifest(toy_model(2, 100));
    auto c = small_config();
    c.epochs = 1;
    const auto res = compress_model(manifest, c, {LayerRole::v});
    REQUIRE(res.model.layers.size() == 2);
    CHECK(res.model.layers[0].name == "blk0.v");
    CHECK(res.model.layers[1].name == "blk1.v");
    CHECK(res.failures.empty());
    CHECK(res.reports.size() == 2);
}

TEST_CASE("per-block scope shares one codebook across the block") {
    const auto manifest = load_manifest(toy_model(1, 200));
    auto c = small_config();
    c.epochs = 1;
    c.scope = Scope::per_block;
    const auto res = compress_model(manifest, c, default_layer_filter());
    REQUIRE(res.model.layers.size() == 7);
    CHECK(res.reports.size() == 1);
    for (const auto& l : res.model.layers) {
        CHECK(l.codebook == res.model.layers[0].codebook);
        CHECK(l.decoder == res.model.layers[0].decoder);
    }
    const auto bytes = write_pocket_file(res.model);
    const auto fp = footprint(res.model);
    CHECK(fp.total_bytes() == bytes.size());
    std::size_t owners = 0;
    for (const auto& l : fp.layers) owners += l.codebook_bytes > 0;
    CHECK(owners == 1);
}

TEST_CASE("model bits are the sum of per-layer bits") {
    const auto manifest = load_manifest(toy_model(1, 300));
    auto c = small_config();
    c.epochs = 1;
    const auto res = compress_model(manifest, c, default_layer_filter());
    REQUIRE(res.model.layers.size() == 7);
    const auto fp = footprint(res.model);
    std::uint64_t sum_layer_bits = 0;
    std::uint64_t sum_formula_bits = 0;
    for (std::size_t i = 0; i < res.model.layers.size(); ++i) {
        const auto& l = res.model.layers[i];
        sum_layer_bits += 8 * fp.layers[i].payload_bytes();
        sum_formula_bits += compression_ratio_bits(l.N(), l.d, l.K(), l.decoder->params.size()).denominator;
    }
    CHECK(8 * fp.payload_bytes() == sum_layer_bits);
    CHECK(sum_layer_bits >= sum_formula_bits);
    CHECK(sum_layer_bits < sum_formula_bits + 8 * res.model.layers.size());
}

TEST_CASE("parallel jobs give the same file as a serial run") {
    const auto manifest = load_manifest(toy_model(1, 400));
    auto c = small_config();
    c.epochs = 1;
    const auto serial = write_pocket_file(compress_model(manifest, c, parse_layer_filter("attn")).model);
    c.jobs = 3;
    CHECK(write_pocket_file(compress_model(manifest, c, parse_layer_filter("attn")).model) == serial);
}

TEST_CASE("failing layers are recorded and the rest is kept") {
    const auto manifest = load_manifest(toy_model(1, 500));
    auto c = small_config();
    c.epochs = 1;
    c.d = 16;
    const auto res = compress_model(manifest, c, default_layer_filter());
    // gate/up have d_out=24, which 16 does not divide.
    CHECK(res.failures.size() == 2);
    CHECK(res.model.layers.size() == 5);
    for (const auto& f : res.failures) CHECK(f.exit_code == 2);
}
