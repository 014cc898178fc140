#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <numeric>
#include <random>

#include "permweave/assignment.hpp"

using namespace permweave;

namespace {

Matrix random_matrix(std::size_t n, std::mt19937& rng) {
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    Matrix m(n, n);
    for (float& v : m.values()) v = dist(rng);
    return m;
}

std::vector<std::size_t> to_vec(const Permutation& p) { return {p.map().begin(), p.map().end()}; }

}  // namespace

TEST_CASE("permutation basics") {
    const Permutation p({2, 0, 1});
    CHECK(compose(p, p.inverse()).is_identity());
    CHECK(compose(p.inverse(), p).is_identity());
    const Matrix m = p.as_matrix();
    CHECK(matmul_bt(m, m) == Matrix::identity(3));
    CHECK_THROWS(Permutation({0, 0, 1}));
    CHECK_THROWS(Permutation({0, 3, 1}));
}

TEST_CASE("solve_lap small cases") {
    const auto eye = solve_lap(Matrix::identity(3));
    CHECK(eye.perm.is_identity());
    CHECK(eye.total == 3.0);

    const auto a = solve_lap(Matrix::from_rows({{0.9f, 0.1f}, {0.2f, 0.8f}}));
    CHECK(to_vec(a.perm) == std::vector<std::size_t>{0, 1});
    CHECK(a.total == doctest::Approx(1.7).epsilon(1e-7));

    const auto b = solve_lap(Matrix::from_rows({{0.1f, 0.9f}, {0.8f, 0.2f}}));
    CHECK(to_vec(b.perm) == std::vector<std::size_t>{1, 0});
    CHECK(b.total == doctest::Approx(1.7).epsilon(1e-7));
}

TEST_CASE("ties resolve to the lexicographically smallest map") {
    CHECK(solve_lap(Matrix(4, 4)).perm.is_identity());
    CHECK(brute_force_lap(Matrix(4, 4)).perm.is_identity());
    CHECK(brute_force_lap(Matrix(4, 4)).total == 0.0);
    // Rows 0 and 1 are interchangeable; the cheaper lexicographic choice keeps 0 -> 1.
    const Matrix tied = Matrix::from_rows({{0, 1, 1}, {0, 1, 1}, {1, 0, 0}});
    const auto s = solve_lap(tied);
    CHECK(to_vec(s.perm) == to_vec(brute_force_lap(tied).perm));
    CHECK(to_vec(s.perm) == std::vector<std::size_t>{1, 2, 0});
}

TEST_CASE("solve_lap agrees with brute force on random matrices") {
    std::mt19937 rng(1234);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + trial % 7;
        const Matrix c = random_matrix(n, rng);
        const auto fast = solve_lap(c);
        const auto slow = brute_force_lap(c);
        CHECK(fast.total == slow.total);
        CHECK(fast.perm == slow.perm);
    }
}

TEST_CASE("ties on quantized matrices still match brute force") {
    std::mt19937 rng(99);
    std::uniform_int_distribution<int> dist(0, 2);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + trial % 6;
        Matrix c(n, n);
        for (float& v : c.values()) v = static_cast<float>(dist(rng));
        const auto fast = solve_lap(c);
        const auto slow = brute_force_lap(c);
        CHECK(fast.total == slow.total);
        CHECK(fast.perm == slow.perm);
    }
}

TEST_CASE("planted dominant entries are recovered") {
    std::mt19937 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 3 + trial % 6;
        std::vector<std::size_t> planted(n);
        std::iota(planted.begin(), planted.end(), std::size_t{0});
        std::shuffle(planted.begin(), planted.end(), rng);
        Matrix c = random_matrix(n, rng);
        for (std::size_t i = 0; i < n; ++i) c(i, planted[i]) = 10.0f;
        CHECK(to_vec(solve_lap(c).perm) == planted);
        if (n <= 8) CHECK(to_vec(brute_force_lap(c).perm) == planted);
    }
}

TEST_CASE("row and column offsets do not change the argmax") {
    std::mt19937 rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + trial % 10;
        Matrix c = random_matrix(n, rng);
        const auto base = solve_lap(c).perm;
        Matrix shifted = c;
        const std::size_t r = trial % n;
        for (std::size_t j = 0; j < n; ++j) shifted(r, j) += 3.0f;
        for (std::size_t i = 0; i < n; ++i) shifted(i, (trial + 1) % n) -= 2.0f;
        CHECK(solve_lap(shifted).perm == base);
    }
}

TEST_CASE("transposed input yields the inverse permutation") {
    std::mt19937 rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 2 + trial % 12;
        const Matrix c = random_matrix(n, rng);
        const auto a = solve_lap(c);
        const auto b = solve_lap(c.transposed());
        CHECK(b.perm == a.perm.inverse());
        CHECK(b.total == doctest::Approx(a.total).epsilon(1e-12));
    }
}

TEST_CASE("larger instances are optimal against a pairwise swap check") {
    std::mt19937 rng(77);
    const Matrix c = random_matrix(64, rng);
    const auto res = solve_lap(c);
    for (std::size_t i = 0; i < 64; ++i)
        for (std::size_t j = i + 1; j < 64; ++j) {
            const double now = c(i, res.perm[i]) + c(j, res.perm[j]);
            const double swapped = c(i, res.perm[j]) + c(j, res.perm[i]);
            CHECK(swapped <= now + 1e-9);
        }
}

TEST_CASE("error paths") {
    CHECK_THROWS_AS(solve_lap(Matrix(2, 3)), NumericError);
    CHECK_THROWS_AS(solve_lap(Matrix::from_rows({{1, NAN}, {0, 1}})), NumericError);
    CHECK_THROWS(brute_force_lap(Matrix(10, 10)));
}
