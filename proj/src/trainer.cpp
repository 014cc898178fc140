#include "permweave/trainer.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "permweave/gradients.hpp"
#include "permweave/parallel.hpp"

namespace permweave {

TrainingDiverged::TrainingDiverged(std::size_t step, const std::string& what)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": " + what), step_(step) {}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double unit_interval(std::uint64_t h) { return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53; }

}  // namespace

MarkovSource::MarkovSource(std::size_t vocab_size, std::uint64_t seed) : vocab_size_(vocab_size), seed_(seed) {
    if (vocab_size <= 8) throw ConfigError("synthetic corpora need vocab_size > 8");
}

std::vector<std::pair<TokenId, double>> MarkovSource::transitions(TokenId a, TokenId b) const {
    const std::size_t words = vocab_size_ - static_cast<std::size_t>(special::first_word);
    const std::size_t k = std::min(kSuccessors, words);
    // Support comes from b alone so the table stays learnable at large V; weights use (a, b).
    std::uint64_t h = splitmix64(seed_ ^ splitmix64(static_cast<std::uint64_t>(b) + 0x632be59bd9b4e019ULL));
    std::uint64_t g = splitmix64(seed_ ^ splitmix64(static_cast<std::uint64_t>(a) * 0x100000001b3ULL +
                                                      static_cast<std::uint64_t>(b)));
    std::vector<std::pair<TokenId, double>> row;
    row.reserve(k);
    double total = 0.0;
    while (row.size() < k) {
        h = splitmix64(h);
        const auto tok = static_cast<TokenId>(special::first_word + static_cast<TokenId>(h % words));
        if (std::any_of(row.begin(), row.end(), [tok](const auto& e) { return e.first == tok; })) continue;
        g = splitmix64(g);
        const double w = -std::log(unit_interval(g));
        row.emplace_back(tok, w);
        total += w;
    }
    for (auto& e : row) e.second /= total;
    return row;
}

TokenId MarkovSource::sample(TokenId a, TokenId b, std::mt19937_64& rng) const {
    const auto row = transitions(a, b);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double acc = 0.0;
    for (const auto& [tok, p] : row) {
        acc += p;
        if (u < acc) return tok;
    }
    return row.back().first;
}

std::size_t SyntheticCorpus::token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
}

SyntheticCorpus gen_corpus(std::size_t vocab_size, std::size_t num_sequences, std::size_t seq_len,
                           std::uint64_t seed, std::uint64_t stream) {
    const MarkovSource source(vocab_size, seed);
    if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
    SyntheticCorpus corpus{{}, vocab_size, seed, stream};
    std::mt19937_64 rng(splitmix64(seed) ^ splitmix64(stream + 0x5bd1e995ULL));
    std::uniform_int_distribution<TokenId> word(special::first_word, static_cast<TokenId>(vocab_size - 1));
    corpus.sequences.reserve(num_sequences);
    for (std::size_t s = 0; s < num_sequences; ++s) {
        std::vector<TokenId> seq;
        seq.reserve(seq_len);
        for (std::size_t i = 0; i < seq_len; ++i) {
            seq.push_back(i < 2 ? word(rng) : source.sample(seq[i - 2], seq[i - 1], rng));
        }
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

void save_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << nlohmann::json{{"vocab_size", corpus.vocab_size}, {"seed", corpus.seed}, {"stream", corpus.stream}}.dump()
        << '\n';
    for (const auto& seq : corpus.sequences) {
        for (std::size_t i = 0; i < seq.size(); ++i) out << (i ? " " : "") << seq[i];
        out << '\n';
    }
}

SyntheticCorpus load_corpus(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open corpus " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError("corpus " + path.string() + " is empty");
    SyntheticCorpus corpus;
    try {
        const auto header = nlohmann::json::parse(line);
        corpus.vocab_size = header.at("vocab_size").get<std::size_t>();
        corpus.seed = header.at("seed").get<std::uint64_t>();
        corpus.stream = header.value("stream", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("corpus header is invalid: " + std::string(e.what()));
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::vector<TokenId> seq;
        long long v;
        while (ss >> v) {
            if (v < 0 || static_cast<std::size_t>(v) >= corpus.vocab_size)
                throw FormatError("corpus token " + std::to_string(v) + " outside vocabulary");
            seq.push_back(static_cast<TokenId>(v));
        }
        if (!ss.eof()) throw FormatError("corpus line is not a list of integers");
        corpus.sequences.push_back(std::move(seq));
    }
    return corpus;
}

std::vector<TokenId> frame_sequence(std::span<const TokenId> body) {
    std::vector<TokenId> out;
    out.reserve(body.size() + 2);
    out.push_back(special::cls);
    out.insert(out.end(), body.begin(), body.end());
    out.push_back(special::sep);
    return out;
}

void TrainSpec::validate() const {
    if (steps < 1) throw ConfigError("steps must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(mask_prob > 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must lie in (0, 1)");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
}

void to_json(nlohmann::json& j, const TrainSpec& s) {
    j = {{"steps", s.steps},         {"batch_size", s.batch_size}, {"learning_rate", s.learning_rate},
         {"beta1", s.beta1},         {"beta2", s.beta2},           {"adam_eps", s.adam_eps},
         {"warmup_steps", s.warmup_steps}, {"clip_norm", s.clip_norm}, {"mask_prob", s.mask_prob},
         {"data_seed", s.data_seed}, {"init_seed", s.init_seed}};
}

void from_json(const nlohmann::json& j, TrainSpec& s) {
    try {
        s.steps = j.value("steps", s.steps);
        s.batch_size = j.value("batch_size", s.batch_size);
        s.learning_rate = j.value("learning_rate", s.learning_rate);
        s.beta1 = j.value("beta1", s.beta1);
        s.beta2 = j.value("beta2", s.beta2);
        s.adam_eps = j.value("adam_eps", s.adam_eps);
        s.warmup_steps = j.value("warmup_steps", s.warmup_steps);
        s.clip_norm = j.value("clip_norm", s.clip_norm);
        s.mask_prob = j.value("mask_prob", s.mask_prob);
        s.data_seed = j.value("data_seed", s.data_seed);
        s.init_seed = j.value("init_seed", s.init_seed);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid train spec: ") + e.what());
    }
}

std::vector<std::size_t> sample_mask_positions(std::size_t body_len, double mask_prob, std::mt19937_64& rng) {
    std::bernoulli_distribution coin(mask_prob);
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < body_len; ++i)
        if (coin(rng)) pos.push_back(i + 1);
    if (pos.empty()) pos.push_back(1 + std::uniform_int_distribution<std::size_t>(0, body_len - 1)(rng));
    return pos;
}

bool TrainResult::improved() const {
    if (losses.size() < 2) return false;
    const std::size_t w = std::max<std::size_t>(1, losses.size() / 10);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < w; ++i) {
        first += losses[i];
        last += losses[losses.size() - 1 - i];
    }
    return last < first;
}

namespace {

class Adam {
public:
    Adam(const Checkpoint& ckpt, const TrainSpec& spec)
        : spec_(spec), m_(zero_gradients(ckpt)), v_(zero_gradients(ckpt)) {}

    void step(Checkpoint& ckpt, Gradients& grads) {
        ++t_;
        double norm2 = 0.0;
        for (const auto& [_, g] : grads)
            for (float x : g.values()) norm2 += static_cast<double>(x) * x;
        const double norm = std::sqrt(norm2);
        const double clip = (spec_.clip_norm > 0.0 && norm > spec_.clip_norm) ? spec_.clip_norm / norm : 1.0;
        const double warm = spec_.warmup_steps == 0
                                ? 1.0
                                : std::min(1.0, static_cast<double>(t_) / static_cast<double>(spec_.warmup_steps));
        const double lr = spec_.learning_rate * warm;
        const double bc1 = 1.0 - std::pow(spec_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(spec_.beta2, static_cast<double>(t_));
        for (auto& [name, g] : grads) {
            auto w = ckpt.tensor(name).values();
            auto m = m_.at(name).values();
            auto v = v_.at(name).values();
            const auto gv = g.values();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = gv[i] * clip;
                m[i] = static_cast<float>(spec_.beta1 * m[i] + (1.0 - spec_.beta1) * gi);
                v[i] = static_cast<float>(spec_.beta2 * v[i] + (1.0 - spec_.beta2) * gi * gi);
                const double mhat = m[i] / bc1, vhat = v[i] / bc2;
                w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + spec_.adam_eps));
            }
        }
    }

private:
    const TrainSpec& spec_;
    Gradients m_, v_;
    std::size_t t_ = 0;
};

void scale(Gradients& grads, double factor) {
    for (auto& [_, g] : grads)
        for (float& x : g.values()) x = static_cast<float>(x * factor);
}

}  // namespace

TrainResult train_mlm(const TransformerConfig& config, const SyntheticCorpus& corpus, const TrainSpec& spec,
                      const ProgressFn& progress) {
    spec.validate();
    config.validate();
    if (corpus.sequences.empty()) throw ConfigError("training corpus is empty");
    if (corpus.vocab_size > config.vocab_size) throw ConfigError("corpus vocabulary exceeds model vocabulary");
    for (const auto& s : corpus.sequences) {
        if (s.empty()) throw ConfigError("training corpus contains an empty sequence");
        if (s.size() + 2 > config.max_positions) throw ConfigError("corpus sequence longer than max_positions - 2");
    }

    TrainResult result{init_model(config, spec.init_seed), {}};
    Checkpoint& ckpt = result.checkpoint;
    Adam adam(ckpt, spec);
    std::mt19937_64 data_rng(spec.data_seed);
    std::uniform_int_distribution<std::size_t> pick(0, corpus.sequences.size() - 1);

    struct Item {
        std::vector<TokenId> input, target;
        std::vector<std::size_t> positions;
    };
    std::vector<Item> batch(spec.batch_size);
    std::vector<Gradients> slot_grads(spec.batch_size);
    std::vector<double> slot_loss(spec.batch_size);
    result.losses.reserve(spec.steps);

    for (std::size_t step = 0; step < spec.steps; ++step) {
        std::size_t masked = 0;
        for (auto& item : batch) {
            const auto& body = corpus.sequences[pick(data_rng)];
            item.target = frame_sequence(body);
            item.positions = sample_mask_positions(body.size(), spec.mask_prob, data_rng);
            item.input = item.target;
            for (auto p : item.positions) item.input[p] = special::mask;
            masked += item.positions.size();
        }
        parallel_for(batch.size(), [&](std::size_t b) {
            slot_grads[b] = zero_gradients(ckpt);
            slot_loss[b] = mlm_loss_sum_and_grad(ckpt, batch[b].input, batch[b].target, batch[b].positions,
                                                 slot_grads[b]);
        });
        Gradients total = std::move(slot_grads[0]);
        double loss = slot_loss[0];
        for (std::size_t b = 1; b < batch.size(); ++b) {
            accumulate(total, slot_grads[b]);
            loss += slot_loss[b];
        }
        loss /= static_cast<double>(masked);
        if (!std::isfinite(loss)) throw TrainingDiverged(step, "masked LM loss is not finite");
        scale(total, 1.0 / static_cast<double>(masked));
        adam.step(ckpt, total);
        result.losses.push_back(loss);
        if (progress) progress(step, loss);
    }
    return result;
}

LabeledCorpus gen_classification_task(std::size_t vocab_size, std::size_t num_sequences, std::size_t seq_len,
                                      std::uint64_t seed, std::uint64_t stream) {
    if (seq_len % 2 == 0) ++seq_len;
    const SyntheticCorpus base = gen_corpus(vocab_size, num_sequences, seq_len, seed, stream);
    const auto mid = static_cast<TokenId>(special::first_word + (vocab_size - special::first_word) / 2);
    LabeledCorpus data;
    data.num_labels = 2;
    for (const auto& seq : base.sequences) {
        const auto lower = std::count_if(seq.begin(), seq.end(), [mid](TokenId t) { return t < mid; });
        data.labels.push_back(2 * static_cast<std::size_t>(lower) > seq.size() ? 1 : 0);
        data.sequences.push_back(seq);
    }
    return data;
}

TrainResult finetune_classifier(const Checkpoint& base, const LabeledCorpus& data, std::uint64_t head_seed,
                                const TrainSpec& spec, const ProgressFn& progress) {
    spec.validate();
    if (data.num_labels < 2) throw ConfigError("classification needs at least 2 labels");
    if (data.sequences.empty() || data.sequences.size() != data.labels.size())
        throw ConfigError("labeled corpus is empty or has mismatched labels");
    for (std::size_t label : data.labels)
        if (label >= data.num_labels)
            throw ConfigError("label " + std::to_string(label) + " out of range for " +
                              std::to_string(data.num_labels) + " classes");

    TrainResult result{base, {}};
    Checkpoint& ckpt = result.checkpoint;
    init_classifier_head(ckpt, data.num_labels, head_seed);
    Adam adam(ckpt, spec);
    std::mt19937_64 data_rng(spec.data_seed);
    std::uniform_int_distribution<std::size_t> pick(0, data.sequences.size() - 1);
    std::vector<std::size_t> chosen(spec.batch_size);
    std::vector<Gradients> slot_grads(spec.batch_size);
    std::vector<double> slot_loss(spec.batch_size);

    for (std::size_t step = 0; step < spec.steps; ++step) {
        for (auto& c : chosen) c = pick(data_rng);
        parallel_for(chosen.size(), [&](std::size_t b) {
            slot_grads[b] = zero_gradients(ckpt);
            slot_loss[b] = classification_loss_and_grad(ckpt, frame_sequence(data.sequences[chosen[b]]),
                                                        data.labels[chosen[b]], slot_grads[b]);
        });
        Gradients total = std::move(slot_grads[0]);
        double loss = slot_loss[0];
        for (std::size_t b = 1; b < chosen.size(); ++b) {
            accumulate(total, slot_grads[b]);
            loss += slot_loss[b];
        }
        loss /= static_cast<double>(chosen.size());
        if (!std::isfinite(loss)) throw TrainingDiverged(step, "classification loss is not finite");
        scale(total, 1.0 / static_cast<double>(chosen.size()));
        adam.step(ckpt, total);
        result.losses.push_back(loss);
        if (progress) progress(step, loss);
    }
    return result;
}

double classification_loss(const Checkpoint& ckpt, const LabeledCorpus& data) {
    std::vector<double> losses(data.sequences.size());
    parallel_for(losses.size(), [&](std::size_t i) {
        const auto framed = frame_sequence(data.sequences[i]);
        const auto logits = classifier_head(ckpt, encode(ckpt, framed));
        const Matrix row(1, logits.size(), logits);
        const std::vector<TokenId> target = {static_cast<TokenId>(data.labels[i])};
        const std::vector<std::size_t> pos = {0};
        losses[i] = masked_cross_entropy(row, target, pos);
    });
    double total = 0.0;
    for (double l : losses) total += l;
    return total / static_cast<double>(losses.size());
}

double classification_accuracy(const Checkpoint& ckpt, const LabeledCorpus& data) {
    std::vector<int> correct(data.sequences.size());
    parallel_for(correct.size(), [&](std::size_t i) {
        const auto logits = classifier_head(ckpt, encode(ckpt, frame_sequence(data.sequences[i])));
        const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
        correct[i] = best == data.labels[i];
    });
    double hits = 0.0;
    for (int c : correct) hits += c;
    return hits / static_cast<double>(correct.size());
}

double majority_baseline(const LabeledCorpus& data) {
    std::vector<std::size_t> counts(data.num_labels, 0);
    for (auto l : data.labels) ++counts[l];
    return static_cast<double>(*std::max_element(counts.begin(), counts.end())) /
           static_cast<double>(data.labels.size());
}

}  // namespace permweave
