#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "permweave/activations.hpp"
#include "permweave/align.hpp"

using namespace permweave;

namespace {

const CapturePoint kPoint{CaptureKind::ff_hidden, 0};

// Textbook two-pass Pearson correlation with population moments.
std::vector<double> two_pass(const Matrix& xa, const Matrix& xb) {
    const std::size_t n = xa.rows();
    auto moments = [n](const Matrix& x, std::size_t j, double& mean, double& sd) {
        mean = 0;
        for (std::size_t t = 0; t < n; ++t) mean += x(t, j);
        mean /= n;
        double var = 0;
        for (std::size_t t = 0; t < n; ++t) var += (x(t, j) - mean) * (x(t, j) - mean);
        sd = std::sqrt(var / n);
    };
    std::vector<double> c(xa.cols() * xb.cols());
    for (std::size_t i = 0; i < xa.cols(); ++i)
        for (std::size_t j = 0; j < xb.cols(); ++j) {
            double ma, sa, mb, sb;
            moments(xa, i, ma, sa);
            moments(xb, j, mb, sb);
            double cov = 0;
            for (std::size_t t = 0; t < n; ++t) cov += (xa(t, i) - ma) * (xb(t, j) - mb);
            c[i * xb.cols() + j] = cov / n / (sa * sb);
        }
    return c;
}

Matrix random_features(std::size_t n, std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<float> z(0.0f, 1.0f);
    std::uniform_real_distribution<float> shift(-3.0f, 3.0f), scale(0.1f, 5.0f);
    Matrix x(n, d);
    for (std::size_t j = 0; j < d; ++j) {
        const float s = scale(rng), m = shift(rng);
        for (std::size_t t = 0; t < n; ++t) x(t, j) = m + s * z(rng);
    }
    return x;
}

CorrelationMatrix corr_of(const Matrix& xa, const Matrix& xb) {
    auto s = JointFeatureStats::empty(kPoint, xa.cols(), xb.cols());
    s.add_all(xa, xb);
    return finalize_correlation(s);
}

TransformerConfig small_config() {
    TransformerConfig c;
    c.num_layers = 2;
    c.d_model = 8;
    c.num_heads = 2;
    c.d_ff = 16;
    c.vocab_size = 20;
    c.max_positions = 16;
    return c;
}

std::vector<std::vector<TokenId>> random_inputs(std::size_t count, std::size_t len, std::size_t vocab,
                                                std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<TokenId> w(4, static_cast<TokenId>(vocab - 1));
    std::vector<std::vector<TokenId>> out;
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<TokenId> s{special::cls};
        for (std::size_t t = 0; t < len; ++t) s.push_back(w(rng));
        s.push_back(special::sep);
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST_CASE("identical features give the identity correlation") {
    Matrix x = Matrix::from_rows({{1, 5}, {2, 3}, {4, 4}, {0, 1}});
    auto c = corr_of(x, x);
    CHECK(c.n_tokens == 4);
    CHECK(c.values(0, 0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(c.values(1, 1) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(c.values(0, 1) == doctest::Approx(c.values(1, 0)).epsilon(1e-6));
}

TEST_CASE("negated features are anti-correlated") {
    std::mt19937_64 rng(3);
    Matrix x = random_features(50, 4, rng);
    Matrix y = x;
    for (float& v : y.values()) v = -v;
    auto c = corr_of(x, y);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(c.values(i, i) + 1.0) <= 1e-6);
}

TEST_CASE("hand-written features match the two-pass oracle") {
    Matrix a = Matrix::from_rows({{1, 0, 2}, {2, 1, 2.5}, {3, 0, 1}, {4, 1, 0}, {5, 0, 3}});
    Matrix b = Matrix::from_rows({{0.5, 9, 1}, {0.1, 7, 2}, {0.3, 8, 2}, {0.9, 1, 4}, {0.2, 3, 5}});
    auto c = corr_of(a, b);
    auto oracle = two_pass(a, b);
    for (std::size_t k = 0; k < oracle.size(); ++k) CHECK(std::abs(c.values.values()[k] - oracle[k]) <= 1e-6);
}

TEST_CASE("streaming statistics match the two-pass oracle on random data") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> dim(1, 12), count(2, 300);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = count(rng);
        Matrix a = random_features(n, dim(rng), rng);
        Matrix b = random_features(n, dim(rng), rng);
        auto c = corr_of(a, b);
        auto oracle = two_pass(a, b);
        for (std::size_t k = 0; k < oracle.size(); ++k) worst = std::max(worst, std::abs(c.values.values()[k] - oracle[k]));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("merged batches equal single-pass accumulation") {
    std::mt19937_64 rng(5);
    Matrix a = random_features(200, 6, rng), b = random_features(200, 5, rng);
    auto whole = JointFeatureStats::empty(kPoint, 6, 5);
    whole.add_all(a, b);
    std::vector<std::size_t> first(100), second(100);
    for (std::size_t i = 0; i < 100; ++i) {
        first[i] = i;
        second[i] = 100 + i;
    }
    auto s1 = JointFeatureStats::empty(kPoint, 6, 5), s2 = s1;
    s1.add_rows(a, b, first);
    s2.add_rows(a, b, second);
    s1.merge(s2);
    CHECK(s1.n == 200);
    auto c1 = finalize_correlation(whole), c2 = finalize_correlation(s1);
    for (std::size_t k = 0; k < c1.values.size(); ++k)
        CHECK(std::abs(c1.values.values()[k] - c2.values.values()[k]) <= 1e-6);
}

TEST_CASE("constant features produce exact zeros") {
    Matrix a = Matrix::from_rows({{1, 7}, {2, 7}, {3, 7}});
    Matrix b = Matrix::from_rows({{3, 0}, {1, 0}, {2, 0}});
    auto c = corr_of(a, b);
    CHECK(c.values(1, 0) == 0.0f);
    CHECK(c.values(1, 1) == 0.0f);
    CHECK(c.values(0, 1) == 0.0f);
    CHECK(c.values(0, 0) != 0.0f);
}

TEST_CASE("permuting B's features permutes the correlation columns") {
    std::mt19937_64 rng(8);
    Matrix a = random_features(64, 5, rng), b = random_features(64, 5, rng);
    const Permutation p({3, 0, 4, 1, 2});
    Matrix bp(64, 5);
    for (std::size_t t = 0; t < 64; ++t)
        for (std::size_t j = 0; j < 5; ++j) bp(t, j) = b(t, p[j]);
    auto c = corr_of(a, b), cp = corr_of(a, bp);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) CHECK(cp.values(i, j) == c.values(i, p[j]));
}

TEST_CASE("finalize needs at least two tokens") {
    auto s = JointFeatureStats::empty(kPoint, 2, 2);
    CHECK_THROWS_AS(finalize_correlation(s), ConfigError);
    s.add_all(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{3, 4}}));
    CHECK_THROWS_AS(finalize_correlation(s), ConfigError);
}

TEST_CASE("accumulators reject mismatched and non-finite input") {
    auto s = JointFeatureStats::empty(kPoint, 2, 2);
    CHECK_THROWS(s.add_all(Matrix(3, 2), Matrix(2, 2)));
    CHECK_THROWS(s.add_all(Matrix(2, 3), Matrix(2, 2)));
    Matrix bad(1, 2);
    bad(0, 1) = NAN;
    CHECK_THROWS(s.add_all(bad, Matrix(1, 2)));
}

TEST_CASE("self-capture gives unit diagonals") {
    const auto cfg = small_config();
    const auto ck = init_model(cfg, 4);
    auto stats = capture_joint(ck, ck, random_inputs(20, 10, cfg.vocab_size, 1), all_capture_points(cfg));
    CHECK(stats.size() == all_capture_points(cfg).size());
    for (const auto& [point, s] : stats) {
        CHECK(s.n == 20 * 12);
        auto c = finalize_correlation(s);
        for (std::size_t i = 0; i < c.values.rows(); ++i) CHECK(c.values(i, i) == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("capture of a permuted copy shows the permutation pattern") {
    const auto cfg = small_config();
    const auto ck = init_model(cfg, 4);
    std::mt19937_64 rng(2);
    auto plan = random_plan(cfg, MhaMode::head_perm, ResidualMode::all, rng);
    const auto permuted = apply_plan(ck, plan);
    auto stats = capture_joint(ck, permuted, random_inputs(40, 10, cfg.vocab_size, 3), {kPoint});
    auto c = finalize_correlation(stats.at(kPoint));
    const auto inv = plan.ff[0].inverse();
    double off = -1;
    for (std::size_t i = 0; i < cfg.d_ff; ++i)
        for (std::size_t j = 0; j < cfg.d_ff; ++j) {
            if (j == inv[i]) CHECK(c.values(i, j) == doctest::Approx(1.0).epsilon(1e-5));
            else off = std::max(off, static_cast<double>(c.values(i, j)));
        }
    CHECK(off < 0.99);
}

TEST_CASE("PAD tokens do not change the statistics") {
    const auto cfg = small_config();
    const auto a = init_model(cfg, 1), b = init_model(cfg, 2);
    auto inputs = random_inputs(10, 6, cfg.vocab_size, 9);
    auto padded = inputs;
    for (auto& s : padded) s.insert(s.end(), 4, special::pad);
    const CaptureSpec spec{{CaptureKind::res_after_ff, 1}, {CaptureKind::mha_preproj, 0}};
    auto s1 = capture_joint(a, b, inputs, spec), s2 = capture_joint(a, b, padded, spec);
    for (const auto& p : spec) {
        CHECK(s1.at(p).n == s2.at(p).n);
        auto c1 = finalize_correlation(s1.at(p)), c2 = finalize_correlation(s2.at(p));
        for (std::size_t k = 0; k < c1.values.size(); ++k)
            CHECK(std::abs(c1.values.values()[k] - c2.values.values()[k]) <= 1e-6);
    }
}

TEST_CASE("token budget caps the count exactly") {
    const auto cfg = small_config();
    const auto a = init_model(cfg, 1), b = init_model(cfg, 2);
    auto inputs = random_inputs(50, 10, cfg.vocab_size, 9);
    const CaptureSpec spec{{CaptureKind::post_embedding, 0}};
    CHECK(capture_joint(a, b, inputs, spec, 100).at(*spec.begin()).n == 100);
    CHECK(capture_joint(a, b, inputs, spec, 200).at(*spec.begin()).n == 200);
    CHECK(capture_joint(a, b, inputs, spec, 100000).at(*spec.begin()).n == 600);
    CHECK_THROWS_WITH_AS(capture_joint(a, b, {}, spec), "no tokens captured", ConfigError);
}

TEST_CASE("capture is deterministic and rejects mismatched configs") {
    const auto cfg = small_config();
    const auto a = init_model(cfg, 1), b = init_model(cfg, 2);
    auto inputs = random_inputs(30, 10, cfg.vocab_size, 9);
    auto spec = all_capture_points(cfg);
    CHECK(serialize_stats(capture_joint(a, b, inputs, spec), cfg) ==
          serialize_stats(capture_joint(a, b, inputs, spec), cfg));
    auto other = cfg;
    other.d_ff = 8;
    CHECK_THROWS_AS(capture_joint(a, init_model(other, 2), inputs, spec), ConfigError);
}

TEST_CASE("PWS1 round trip is exact") {
    const auto cfg = small_config();
    auto stats = capture_joint(init_model(cfg, 1), init_model(cfg, 2), random_inputs(8, 10, cfg.vocab_size, 9),
                               all_capture_points(cfg));
    auto bytes = serialize_stats(stats, cfg);
    auto [back, back_cfg] = deserialize_stats(bytes);
    CHECK(back == stats);
    CHECK(back_cfg == cfg);
    bytes[0] = 'X';
    CHECK_THROWS_AS(deserialize_stats(bytes), FormatError);
    auto good = serialize_stats(stats, cfg);
    good.resize(good.size() - 8);
    CHECK_THROWS_AS(deserialize_stats(good), FormatError);
}
