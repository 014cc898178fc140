#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "permweave/activations.hpp"
#include "permweave/align.hpp"
#include "permweave/merge.hpp"
#include "permweave/model.hpp"
#include "permweave/trainer.hpp"

namespace permweave {

struct CorpusSpec {
    std::size_t num_sequences = 4000;
    std::size_t seq_len = 30;
    std::uint64_t seed = 0;
};

struct EvalSpec {
    std::size_t num_sequences = 200;
    double mask_prob = 0.15;
    std::uint64_t mask_seed = 0;
    std::size_t block_size = 128;
    LossKind loss = LossKind::mlm;
};

/// Everything a pipeline command needs. Read from JSON; missing fields keep these defaults.
struct ExperimentConfig {
    TransformerConfig model;
    std::vector<std::uint64_t> seeds{1, 2};
    CorpusSpec corpus;
    TrainSpec train;
    std::uint64_t capture_budget = 100000;
    MhaMode mha_mode = MhaMode::head_perm;
    ResidualMode residual_mode = ResidualMode::identity;
    std::set<Component> components{Component::ff, Component::mha};
    CaptureKind ff_features = CaptureKind::ff_hidden;
    std::size_t grid_points = 21;
    EvalSpec eval;
    bool allow_invalid = false;
    std::filesystem::path output_dir = "runs";

    void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Reads a config file. `model` may be an inline object or a path (relative to the file)
/// to a JSON model config. Throws ConfigError for missing or malformed files.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// Training split (stream 0) of the shared synthetic corpus.
SyntheticCorpus training_corpus(const ExperimentConfig& cfg);
/// Held-out split (stream 1) used for every loss evaluation.
SyntheticCorpus eval_corpus(const ExperimentConfig& cfg);
/// Framed inputs for activation capture (stream 2), just enough to cover `budget` tokens.
std::vector<std::vector<TokenId>> capture_inputs(const ExperimentConfig& cfg, std::uint64_t budget);

TrainResult run_train(const ExperimentConfig& cfg, std::uint64_t seed);

StatsMap run_capture(const ExperimentConfig& cfg, const Checkpoint& a, const Checkpoint& b,
                     const CaptureSpec& points, std::uint64_t budget);

/// Capture points needed by the configured alignment settings.
CaptureSpec alignment_points(const ExperimentConfig& cfg);

PermutationPlan run_align(const ExperimentConfig& cfg, const StatsMap& stats);

/// Loss function for the configured eval kind. Masks are fixed once here and shared by all
/// checkpoints evaluated through the returned function.
LossFn make_loss(const ExperimentConfig& cfg);

struct BarrierPair {
    BarrierReport aligned;
    BarrierReport vanilla;
};

/// Aligned scan (plan applied to b) plus the vanilla baseline on the same grid and masks.
BarrierPair run_barrier(const ExperimentConfig& cfg, const Checkpoint& a, const Checkpoint& b,
                        const PermutationPlan& plan, const nlohmann::json& metadata = {});

/// Plan strategy fields copied into report metadata.
nlohmann::json plan_metadata(const PermutationPlan& plan);

struct AblationRow {
    std::uint64_t budget = 0;
    std::uint64_t tokens = 0;
    double barrier = 0.0;
};

std::vector<AblationRow> run_ablate_data(const ExperimentConfig& cfg, const Checkpoint& a, const Checkpoint& b,
                                         const std::vector<std::uint64_t>& budgets);
std::string ablation_csv(const std::vector<AblationRow>& rows, const nlohmann::json& metadata);

struct CorrRow {
    std::string point;
    std::size_t layer = 0;
    Component component = Component::ff;
    double before = 0.0;
    double after = 0.0;
};

/// Mean diagonal correlation per captured point, before and after permuting the columns by
/// the plan. Points without a counterpart in the plan are skipped.
std::vector<CorrRow> corr_report(const StatsMap& stats, const PermutationPlan& plan);
std::string corr_report_csv(const std::vector<CorrRow>& rows, const nlohmann::json& metadata);

struct PairResult {
    std::uint64_t seed_a = 0;
    std::uint64_t seed_b = 0;
    BarrierPair reports;
};

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;  // sample standard deviation / sqrt(n); 0 for a single value
};

MeanSe mean_se(const std::vector<double>& xs);

/// All C(n, 2) seed pairs. Checkpoints come from `model_path(seed)` when present, otherwise
/// they are trained and saved there.
std::vector<PairResult> run_pairs(const ExperimentConfig& cfg,
                                  const std::function<std::filesystem::path(std::uint64_t)>& model_path);
std::string pairs_csv(const std::vector<PairResult>& pairs, const nlohmann::json& metadata);

}  // namespace permweave
