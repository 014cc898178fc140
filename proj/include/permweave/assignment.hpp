#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "permweave/numerics.hpp"

namespace permweave {

/// Bijection on {0..n-1}. Acting on features, P x has entry i equal to x[map[i]], so the
/// matrix has P(i, map[i]) = 1.
class Permutation {
public:
    Permutation() = default;
    /// Throws std::invalid_argument if `map` is not a bijection.
    explicit Permutation(std::vector<std::size_t> map);
    static Permutation identity(std::size_t n);

    std::size_t size() const { return map_.size(); }
    std::size_t operator[](std::size_t i) const { return map_[i]; }
    std::span<const std::size_t> map() const { return map_; }

    Permutation inverse() const;
    bool is_identity() const;
    Matrix as_matrix() const;

    bool operator==(const Permutation&) const = default;

private:
    std::vector<std::size_t> map_;
};

/// (outer o inner)[i] = outer[inner[i]]
Permutation compose(const Permutation& outer, const Permutation& inner);

struct Assignment {
    Permutation perm;
    double total = 0.0;  // sum over i of C(i, perm[i]), accumulated in ascending i
};

/// Exact maximum-weight assignment. Among optimal maps the lexicographically smallest is
/// returned. Internally minimizes max(C) - C with a shortest-augmenting-path (Hungarian / JV)
/// solver, then walks the tight-edge graph to pick the smallest optimal map.
Assignment solve_lap(const Matrix& c);
Assignment solve_lap(std::span<const double> c, std::size_t n);

/// Enumerates all n! maps in lexicographic order; n <= 9.
Assignment brute_force_lap(const Matrix& c);

double assignment_total(const Matrix& c, const Permutation& p);

}  // namespace permweave
