#include "permweave/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace permweave {

Permutation::Permutation(std::vector<std::size_t> map) : map_(std::move(map)) {
    std::vector<bool> seen(map_.size(), false);
    for (std::size_t v : map_) {
        if (v >= map_.size() || seen[v]) throw std::invalid_argument("map is not a permutation");
        seen[v] = true;
    }
}

Permutation Permutation::identity(std::size_t n) {
    std::vector<std::size_t> m(n);
    std::iota(m.begin(), m.end(), std::size_t{0});
    return Permutation(std::move(m));
}

Permutation Permutation::inverse() const {
    std::vector<std::size_t> inv(map_.size());
    for (std::size_t i = 0; i < map_.size(); ++i) inv[map_[i]] = i;
    return Permutation(std::move(inv));
}

bool Permutation::is_identity() const {
    for (std::size_t i = 0; i < map_.size(); ++i)
        if (map_[i] != i) return false;
    return true;
}

Matrix Permutation::as_matrix() const {
    Matrix m(size(), size());
    for (std::size_t i = 0; i < size(); ++i) m(i, map_[i]) = 1.0f;
    return m;
}

Permutation compose(const Permutation& outer, const Permutation& inner) {
    if (outer.size() != inner.size()) throw std::invalid_argument("compose: size mismatch");
    std::vector<std::size_t> m(inner.size());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = outer[inner[i]];
    return Permutation(std::move(m));
}

double assignment_total(const Matrix& c, const Permutation& p) {
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) total += c(i, p[i]);
    return total;
}

namespace {

double total_of(std::span<const double> c, std::size_t n, std::span<const std::size_t> map) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += c[i * n + map[i]];
    return total;
}

// Given a perfect matching on tight edges, rewrites it into the lexicographically smallest
// perfect matching of the same tight graph.
void lexicographic_tight_matching(const std::vector<std::vector<bool>>& tight, std::vector<std::size_t>& row_to_col) {
    const std::size_t n = row_to_col.size();
    std::vector<std::size_t> owner(n);
    for (std::size_t i = 0; i < n; ++i) owner[row_to_col[i]] = i;
    std::vector<bool> fixed(n, false);
    std::vector<std::size_t> prev_row(n), queue;
    std::vector<bool> visited(n);

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (!tight[i][j]) continue;
            if (row_to_col[i] == j) break;
            const std::size_t r = owner[j];
            if (fixed[r]) continue;
            // Row r must move to some other column; search an alternating path from r to
            // the column i gives up, through unfixed rows other than i.
            const std::size_t target = row_to_col[i];
            std::fill(visited.begin(), visited.end(), false);
            queue.assign(1, r);
            bool found = false;
            std::size_t end_row = n;
            for (std::size_t qi = 0; qi < queue.size() && !found; ++qi) {
                const std::size_t row = queue[qi];
                for (std::size_t c = 0; c < n; ++c) {
                    if (!tight[row][c] || visited[c] || c == j) continue;
                    if (c == target) {
                        end_row = row;
                        found = true;
                        break;
                    }
                    const std::size_t next = owner[c];
                    if (fixed[next] || next == i) continue;
                    visited[c] = true;
                    prev_row[next] = row;
                    queue.push_back(next);
                }
            }
            if (!found) continue;
            // end_row takes target; every earlier row on the path takes its successor's column.
            std::size_t row = end_row, col = target;
            while (true) {
                const std::size_t old = row_to_col[row];
                row_to_col[row] = col;
                owner[col] = row;
                if (row == r) break;
                col = old;
                row = prev_row[row];
            }
            row_to_col[i] = j;
            owner[j] = i;
            break;
        }
        fixed[i] = true;
    }
}

}  // namespace

Assignment solve_lap(std::span<const double> c, std::size_t n) {
    if (c.size() != n * n) throw NumericError("solve_lap expects a square matrix");
    for (double v : c)
        if (!std::isfinite(v)) throw NumericError("solve_lap input is not finite");
    if (n == 0) return {Permutation(), 0.0};

    const double cmax = *std::max_element(c.begin(), c.end());
    auto cost = [&](std::size_t i, std::size_t j) { return cmax - c[i * n + j]; };

    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    std::vector<bool> used(n + 1);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), inf);
        std::fill(used.begin(), used.end(), false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<std::size_t> row_to_col(n);
    for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
    const double solver_total = total_of(c, n, row_to_col);

    double scale = 1.0;
    for (double x : c) scale = std::max(scale, std::abs(x));
    const double tol = 1e-12 * scale * static_cast<double>(n);
    std::vector<std::vector<bool>> tight(n, std::vector<bool>(n));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) tight[i][j] = cost(i, j) - u[i + 1] - v[j + 1] <= tol;
    for (std::size_t i = 0; i < n; ++i) tight[i][row_to_col[i]] = true;

    std::vector<std::size_t> lex = row_to_col;
    lexicographic_tight_matching(tight, lex);
    const double lex_total = total_of(c, n, lex);
    if (lex_total >= solver_total) return {Permutation(std::move(lex)), lex_total};
    return {Permutation(std::move(row_to_col)), solver_total};
}

Assignment solve_lap(const Matrix& c) {
    if (c.rows() != c.cols()) throw NumericError("solve_lap expects a square matrix");
    std::vector<double> values(c.values().begin(), c.values().end());
    return solve_lap(values, c.rows());
}

Assignment brute_force_lap(const Matrix& c) {
    if (c.rows() != c.cols()) throw NumericError("brute_force_lap expects a square matrix");
    const std::size_t n = c.rows();
    if (n > 9) throw std::invalid_argument("brute_force_lap supports at most 9x9");
    require_finite(c, "brute_force_lap input");
    std::vector<double> values(c.values().begin(), c.values().end());
    std::vector<std::size_t> map(n), best;
    std::iota(map.begin(), map.end(), std::size_t{0});
    double best_total = -std::numeric_limits<double>::infinity();
    do {
        const double t = total_of(values, n, map);
        if (t > best_total) {
            best_total = t;
            best = map;
        }
    } while (std::next_permutation(map.begin(), map.end()));
    return {Permutation(std::move(best)), n == 0 ? 0.0 : best_total};
}

}  // namespace permweave
