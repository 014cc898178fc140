#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "permweave/model.hpp"

namespace permweave {

/// Streaming sufficient statistics for features of model A (dim_a) and model B (dim_b)
/// observed on the same tokens. Accumulators are double precision and merge by addition.
struct JointFeatureStats {
    CapturePoint point;
    std::uint64_t n = 0;
    std::size_t dim_a = 0;
    std::size_t dim_b = 0;
    std::vector<double> sum_a, sum_b;
    std::vector<double> sumsq_a, sumsq_b;
    std::vector<double> cross;  // dim_a x dim_b, row-major: sum over tokens of a_i * b_j

    static JointFeatureStats empty(const CapturePoint& point, std::size_t dim_a, std::size_t dim_b);

    /// Adds the token rows of xa / xb listed in `rows`.
    void add_rows(const Matrix& xa, const Matrix& xb, std::span<const std::size_t> rows);
    void add_all(const Matrix& xa, const Matrix& xb);
    void merge(const JointFeatureStats& other);

    bool operator==(const JointFeatureStats&) const = default;
};

using StatsMap = std::map<CapturePoint, JointFeatureStats>;

/// Sums the accumulators of several points with equal widths, as if their tokens had been
/// concatenated along the token axis.
JointFeatureStats concat_tokens(std::span<const JointFeatureStats* const> parts, const CapturePoint& label);

struct CorrelationMatrix {
    Matrix values;  // dim_a x dim_b
    CapturePoint point;
    std::uint64_t n_tokens = 0;
};

/// Features whose population variance is at most this fraction of (1 + mean^2) are constant.
inline constexpr double kDeadFeatureTolerance = 1e-12;
/// Lower bound on each variance before the square root.
inline constexpr double kStdFloor = 1e-8;

/// Pearson correlation with population moments; rows/columns of constant features are 0.
CorrelationMatrix finalize_correlation(const JointFeatureStats& stats);

/// Returns true for tokens whose features are accumulated. The default keeps everything
/// except PAD, so CLS / SEP / MASK always count.
using TokenFilter = std::function<bool(TokenId)>;
bool default_token_filter(TokenId t);

/// Runs both checkpoints over the same model inputs and accumulates stats for every point
/// in `capture` until `token_budget` filtered tokens have been seen (0 = no cap).
StatsMap capture_joint(const Checkpoint& a, const Checkpoint& b, std::span<const std::vector<TokenId>> inputs,
                       const CaptureSpec& capture, std::uint64_t token_budget = 0,
                       const TokenFilter& filter = default_token_filter);

/// PWS1 sidecar: same framing as PWC1 with little-endian float64 payload.
std::vector<std::uint8_t> serialize_stats(const StatsMap& stats, const TransformerConfig& config);
std::pair<StatsMap, TransformerConfig> deserialize_stats(std::span<const std::uint8_t> bytes);
void save_stats(const StatsMap& stats, const TransformerConfig& config, const std::filesystem::path& path);
std::pair<StatsMap, TransformerConfig> load_stats(const std::filesystem::path& path);

}  // namespace permweave
