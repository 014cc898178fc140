#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "permweave/model.hpp"
#include "permweave/trainer.hpp"

namespace permweave {

/// Every tensor becomes lambda * a + (1 - lambda) * b, computed in double and rounded once.
Checkpoint interpolate(const Checkpoint& a, const Checkpoint& b, double lambda);

/// One model input with some positions replaced by MASK.
struct MaskedBlock {
    std::vector<TokenId> input;
    std::vector<TokenId> target;
    std::vector<std::size_t> positions;
};

/// Fixed-mask MLM evaluation set: each sequence framed on its own, masks drawn like training.
std::vector<MaskedBlock> make_mlm_eval(std::span<const std::vector<TokenId>> sequences, double mask_prob,
                                       std::uint64_t mask_seed);

/// Pseudo-perplexity blocks: the sequences are concatenated, cut into blocks of `block_size`
/// tokens (clipped to what fits between CLS and SEP), and each token is masked with
/// probability p. Blocks where nothing was masked are dropped.
std::vector<MaskedBlock> make_pppl_blocks(std::span<const std::vector<TokenId>> sequences, double p,
                                          std::size_t block_size, std::size_t max_positions,
                                          std::uint64_t mask_seed);

using LogitsFn = std::function<Matrix(const MaskedBlock&)>;

/// Mean natural-log cross-entropy over every masked position of every block.
double masked_loss(const LogitsFn& logits, std::span<const MaskedBlock> blocks);
double masked_loss(const Checkpoint& ckpt, std::span<const MaskedBlock> blocks);

/// exp of the mean masked cross-entropy (equal to the base-2 form). Throws ConfigError when
/// no position is masked.
double pseudo_perplexity(const LogitsFn& logits, std::span<const MaskedBlock> blocks);
double pseudo_perplexity(const Checkpoint& ckpt, std::span<const MaskedBlock> blocks);

enum class LossKind { mlm, pppl, classification };
std::string to_string(LossKind k);
LossKind parse_loss_kind(const std::string& s);

/// Evenly spaced grid over [0, 1] with both endpoints; `points` >= 2.
std::vector<double> lambda_grid(std::size_t points);

struct MergeSpec {
    std::vector<double> lambdas = lambda_grid(21);
    LossKind loss = LossKind::mlm;

    /// Sorted, inside [0, 1], containing 0 and 1.
    void validate() const;
};

using LossFn = std::function<double(const Checkpoint&)>;

struct BarrierReport {
    std::vector<double> lambdas;
    std::vector<double> losses;
    double endpoint_mean = 0.0;
    double barrier = 0.0;
    nlohmann::json metadata = nlohmann::json::object();
};

/// max(losses) minus the mean of the losses at lambda = 0 and lambda = 1.
double loss_barrier(const BarrierReport& report);

/// Fills endpoint_mean and barrier from lambdas / losses. Throws on non-finite losses.
BarrierReport make_report(std::vector<double> lambdas, std::vector<double> losses, nlohmann::json metadata = {});

/// Evaluates `loss` on interpolate(a, b, lambda) for every lambda in the spec.
BarrierReport barrier_scan(const Checkpoint& a, const Checkpoint& b, const MergeSpec& spec, const LossFn& loss,
                           nlohmann::json metadata = {});

/// `# metadata {...}` comment line, `lambda,loss` header, one row per lambda.
std::string report_csv(const BarrierReport& report);
void to_json(nlohmann::json& j, const BarrierReport& r);
void from_json(const nlohmann::json& j, BarrierReport& r);

/// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

}  // namespace permweave
