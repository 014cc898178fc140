#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "json.hpp"
#include "permweave/model.hpp"

namespace permweave {

/// Loss became NaN/Inf during training.
class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(std::size_t step, const std::string& what);
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

/// Order-2 Markov source over word ids [4, V). The successor set of state (a, b) is drawn
/// from hashing (seed, b); its Dirichlet(1) weights come from hashing (seed, a, b).
class MarkovSource {
public:
    static constexpr std::size_t kSuccessors = 4;

    MarkovSource(std::size_t vocab_size, std::uint64_t seed);

    /// Successor distribution for the state whose last two tokens are (a, b).
    std::vector<std::pair<TokenId, double>> transitions(TokenId a, TokenId b) const;
    TokenId sample(TokenId a, TokenId b, std::mt19937_64& rng) const;

    std::size_t vocab_size() const { return vocab_size_; }

private:
    std::size_t vocab_size_;
    std::uint64_t seed_;
};

struct SyntheticCorpus {
    std::vector<std::vector<TokenId>> sequences;
    std::size_t vocab_size = 0;
    std::uint64_t seed = 0;
    /// Independent sample streams from the same transition table (0 = train, 1 = held out, ...).
    std::uint64_t stream = 0;

    std::size_t token_count() const;
    bool operator==(const SyntheticCorpus&) const = default;
};

SyntheticCorpus gen_corpus(std::size_t vocab_size, std::size_t num_sequences, std::size_t seq_len,
                           std::uint64_t seed, std::uint64_t stream = 0);

/// One-line JSON header followed by one space-separated sequence per line.
void save_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& path);
SyntheticCorpus load_corpus(const std::filesystem::path& path);

/// [CLS] body [SEP]
std::vector<TokenId> frame_sequence(std::span<const TokenId> body);

struct TrainSpec {
    std::size_t steps = 5000;
    std::size_t batch_size = 16;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t warmup_steps = 100;
    double clip_norm = 1.0;
    double mask_prob = 0.15;
    std::uint64_t data_seed = 0;
    std::uint64_t init_seed = 1;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainSpec& s);
/// Fields absent from `j` keep their defaults.
void from_json(const nlohmann::json& j, TrainSpec& s);

/// Masked body positions (in framed coordinates) for one sequence; never empty.
std::vector<std::size_t> sample_mask_positions(std::size_t body_len, double mask_prob, std::mt19937_64& rng);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<double> losses;  // per-step mean masked cross-entropy

    /// Mean loss over the last 10% of steps is below the mean over the first 10%.
    bool improved() const;
};

using ProgressFn = std::function<void(std::size_t step, double loss)>;

/// Adam with linear warmup and global-norm clipping. Deterministic in
/// (spec.init_seed, spec.data_seed); batch order and masks depend on data_seed only.
TrainResult train_mlm(const TransformerConfig& config, const SyntheticCorpus& corpus, const TrainSpec& spec,
                      const ProgressFn& progress = {});

struct LabeledCorpus {
    std::vector<std::vector<TokenId>> sequences;
    std::vector<std::size_t> labels;
    std::size_t num_labels = 2;
};

/// Binary task: label 1 when more body tokens fall in the lower half of the word range.
/// Odd lengths avoid ties; the label is a linear function of the bag of words.
LabeledCorpus gen_classification_task(std::size_t vocab_size, std::size_t num_sequences, std::size_t seq_len,
                                      std::uint64_t seed, std::uint64_t stream = 7);

/// Adds a classification head initialized only from head_seed, then trains all weights on
/// the labeled data with the given spec (init_seed is ignored).
TrainResult finetune_classifier(const Checkpoint& base, const LabeledCorpus& data, std::uint64_t head_seed,
                                const TrainSpec& spec, const ProgressFn& progress = {});

double classification_loss(const Checkpoint& ckpt, const LabeledCorpus& data);
double classification_accuracy(const Checkpoint& ckpt, const LabeledCorpus& data);
double majority_baseline(const LabeledCorpus& data);

}  // namespace permweave
