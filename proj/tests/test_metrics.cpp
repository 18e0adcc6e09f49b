#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "pocketllm/error.hpp"
#include "pocketllm/metrics.hpp"
#include "test_util.hpp"

using namespace pocketllm;

TEST_CASE("identical inputs give zero metrics") {
    auto s = testutil::random_matrix<double>(50, 4, 1);
    auto z = testutil::random_matrix<double>(50, 3, 2);
    auto m = layer_metrics(s, s, z, z);
    CHECK(m.vq_sum == 0);
    CHECK(m.vq_mean == 0);
    CHECK(m.mse_mean == 0);
    CHECK(m.mse_top100 == 0);
    CHECK(m.frobenius_rel_err == 0);
}

TEST_CASE("three subvectors with errors 1, 4, 9") {
    Matrix<double> s(3, 2), s_hat(3, 2);
    s_hat(0, 0) = 1;
    s_hat(1, 1) = 2;
    s_hat(2, 0) = 3;
    auto m = layer_metrics(s, s_hat, s, s);
    CHECK(m.mse_top100 == 14);
    CHECK(m.mse_mean == doctest::Approx(14.0 / 3.0));
}

TEST_CASE("top-100 matches a full-sort oracle") {
    std::mt19937_64 rng(3);
    std::exponential_distribution<double> e(1.0);
    for (std::size_t n : {5, 99, 100, 101, 5000}) {
        std::vector<double> v(n);
        for (auto& x : v) x = e(rng);
        auto sorted = v;
        std::sort(sorted.begin(), sorted.end(), std::greater<>());
        double oracle = 0;
        for (std::size_t i = 0; i < std::min<std::size_t>(100, n); ++i) oracle += sorted[i];
        CHECK(top_k_sum(v, 100) == oracle);
    }
}

TEST_CASE("metrics are permutation-invariant over subvectors") {
    auto s = testutil::random_matrix<double>(400, 4, 4);
    auto s_hat = testutil::random_matrix<double>(400, 4, 5);
    auto z = testutil::random_matrix<double>(400, 2, 6);
    auto zq = testutil::random_matrix<double>(400, 2, 7);
    const auto base = layer_metrics(s, s_hat, z, zq);
    std::vector<std::size_t> perm(400);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::mt19937_64 rng(8);
    for (int t = 0; t < 5; ++t) {
        std::shuffle(perm.begin(), perm.end(), rng);
        auto permute = [&](const Matrix<double>& a) {
            Matrix<double> b(a.rows, a.cols);
            for (std::size_t i = 0; i < a.rows; ++i)
                for (std::size_t j = 0; j < a.cols; ++j) b(i, j) = a(perm[i], j);
            return b;
        };
        const auto m = layer_metrics(permute(s), permute(s_hat), permute(z), permute(zq));
        CHECK(m.vq_sum == base.vq_sum);
        CHECK(m.mse_mean == base.mse_mean);
        CHECK(m.mse_top100 == base.mse_top100);
        CHECK(m.frobenius_rel_err == base.frobenius_rel_err);
    }
}

TEST_CASE("top-100 is monotone and bounded") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<double> v(300);
    for (auto& x : v) x = u(rng);
    double prev = top_k_sum(v);
    const double mx = *std::max_element(v.begin(), v.end());
    CHECK(prev <= v.size() * mx);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    CHECK(prev >= 100 * sorted[99]);
    for (int t = 0; t < 50; ++t) {
        sorted = v;
        std::nth_element(sorted.begin(), sorted.begin() + 99, sorted.end(), std::greater<>());
        v.push_back(sorted[99] + u(rng));
        const double now = top_k_sum(v);
        CHECK(now >= prev);
        prev = now;
    }
}

TEST_CASE("Frobenius decomposition identity") {
    auto s = testutil::random_matrix<double>(256, 8, 10);
    auto s_hat = testutil::random_matrix<double>(256, 8, 11, 0.1);
    for (std::size_t i = 0; i < s.data.size(); ++i) s_hat.data[i] += s.data[i];
    const auto m = layer_metrics(s, s_hat, s, s);
    long double err = 0, norm = 0;
    for (std::size_t i = 0; i < s.data.size(); ++i) {
        const long double d = static_cast<long double>(s.data[i]) - s_hat.data[i];
        err += d * d;
        norm += static_cast<long double>(s.data[i]) * s.data[i];
    }
    CHECK(m.frobenius_rel_err * m.frobenius_rel_err == doctest::Approx(double(err / norm)).epsilon(1e-12));
    CHECK(m.mse_mean * 256 == doctest::Approx(double(err)).epsilon(1e-12));
}

TEST_CASE("histogram of a constant matrix is a single bin") {
    Matrix<float> w(10, 10);
    std::fill(w.data.begin(), w.data.end(), 0.25f);
    auto h = weight_histogram(w, 0.999, 50);
    REQUIRE(h.bins.size() == 1);
    CHECK(h.bins[0].center == doctest::Approx(0.25));
    CHECK(h.bins[0].count == 100);
}

TEST_CASE("full-coverage histogram conserves counts") {
    auto w = testutil::random_matrix<float>(37, 53, 12);
    auto h = weight_histogram(w, 1.0, 17);
    std::size_t total = 0;
    for (const auto& b : h.bins) total += b.count;
    CHECK(total == 37 * 53);
    auto trimmed = weight_histogram(w, 0.9, 17);
    total = 0;
    for (const auto& b : trimmed.bins) total += b.count;
    CHECK(total == 37 * 53 - 2 * static_cast<std::size_t>(std::floor(0.05 * 37 * 53)));
}

TEST_CASE("histogram recovers Normal(0, 0.02) moments") {
    const std::size_t n = 512 * 512;
    Matrix<float> w(512, 512);
    std::mt19937_64 rng(13);
    std::normal_distribution<float> g(0.0f, 0.02f);
    for (auto& x : w.data) x = g(rng);
    auto h = weight_histogram(w, 1.0, 4000);
    double mean = 0;
    for (const auto& b : h.bins) mean += b.center * static_cast<double>(b.count);
    mean /= n;
    double var = 0;
    for (const auto& b : h.bins) var += (b.center - mean) * (b.center - mean) * static_cast<double>(b.count);
    const double sd = std::sqrt(var / (n - 1));
    CHECK(std::abs(mean) < 3 * 0.02 / std::sqrt(double(n)));
    CHECK(std::abs(sd - 0.02) < 3 * 0.02 / std::sqrt(2.0 * n));
}

TEST_CASE("histogram rejects bad arguments") {
    Matrix<float> w(2, 2);
    CHECK_THROWS_AS(weight_histogram(w, 0.0, 10), Error);
    CHECK_THROWS_AS(weight_histogram(w, 1.5, 10), Error);
    CHECK_THROWS_AS(weight_histogram(w, 0.5, 0), Error);
}

TEST_CASE("reconstruction export window") {
    auto w = testutil::random_matrix<float>(64, 32, 14);
    auto rows = export_reconstruction(w, w, 0, 0, 16, 4);
    CHECK(rows.size() == 64);
    for (const auto& r : rows) CHECK(r.original == r.reconstructed);
    CHECK(rows[5].row == 1);
    CHECK(rows[5].col == 1);

    std::ostringstream out;
    write_reconstruction_csv(out, rows, LayerRole::q);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == kExportHeader);
    std::getline(in, line);
    CHECK(line == "row,col,original_q,reconstructed_q");
    std::size_t data_lines = 0;
    while (std::getline(in, line)) {
        CHECK(std::count(line.begin(), line.end(), ',') == 3);
        ++data_lines;
    }
    CHECK(data_lines == 64);

    CHECK_THROWS_AS(export_reconstruction(w, w, 60, 0, 16, 4), Error);
    CHECK_THROWS_AS(export_reconstruction(w, w, 0, 30, 1, 4), Error);
    CHECK_THROWS_AS(export_reconstruction(w, w, 0, 0, 0, 4), Error);
}

TEST_CASE("histogram CSV schema") {
    auto w = testutil::random_matrix<float>(8, 8, 15);
    std::ostringstream out;
    write_histogram_csv(out, weight_histogram(w, 1.0, 4));
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == kExportHeader);
    std::getline(in, line);
    CHECK(line == "bin_center,count");
    int n = 0;
    while (std::getline(in, line)) ++n;
    CHECK(n == 4);
}
