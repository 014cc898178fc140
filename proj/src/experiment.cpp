#include "permweave/experiment.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace permweave {

void ExperimentConfig::validate() const {
    model.validate();
    train.validate();
    if (seeds.size() < 2) throw ConfigError("at least 2 seeds are required");
    if (std::set(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("seeds must be distinct");
    if (corpus.num_sequences == 0 || corpus.seq_len == 0) throw ConfigError("corpus must be non-empty");
    if (corpus.seq_len + 2 > model.max_positions)
        throw ConfigError("corpus sequences of length " + std::to_string(corpus.seq_len) + " do not fit in " +
                          std::to_string(model.max_positions) + " positions with CLS and SEP");
    if (eval.num_sequences == 0) throw ConfigError("eval set must be non-empty");
    if (!(eval.mask_prob > 0.0 && eval.mask_prob < 1.0)) throw ConfigError("eval mask probability must lie in (0, 1)");
    if (eval.block_size == 0) throw ConfigError("eval block size must be positive");
    if (eval.loss == LossKind::classification && model.num_labels < 2)
        throw ConfigError("classification loss needs a model config with num_labels >= 2");
    if (grid_points < 2) throw ConfigError("grid_points must be at least 2");
    if (ff_features != CaptureKind::ff_hidden && ff_features != CaptureKind::ff_preact)
        throw ConfigError("ff_features must be ff_hidden or ff_preact");
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
    nlohmann::json comps = nlohmann::json::array();
    for (auto comp : c.components) comps.push_back(to_string(comp));
    j = {{"model", c.model},
         {"seeds", c.seeds},
         {"corpus", {{"num_sequences", c.corpus.num_sequences}, {"seq_len", c.corpus.seq_len}, {"seed", c.corpus.seed}}},
         {"train", c.train},
         {"capture_budget", c.capture_budget},
         {"mha_mode", to_string(c.mha_mode)},
         {"residual_mode", to_string(c.residual_mode)},
         {"components", comps},
         {"ff_features", c.ff_features == CaptureKind::ff_preact ? "ff_preact" : "ff_hidden"},
         {"grid_points", c.grid_points},
         {"eval",
          {{"num_sequences", c.eval.num_sequences},
           {"mask_prob", c.eval.mask_prob},
           {"mask_seed", c.eval.mask_seed},
           {"block_size", c.eval.block_size},
           {"loss", to_string(c.eval.loss)}}},
         {"allow_invalid", c.allow_invalid},
         {"output_dir", c.output_dir.string()}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    try {
        if (j.contains("model")) c.model = j["model"].get<TransformerConfig>();
        if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
        if (j.contains("corpus")) {
            const auto& k = j["corpus"];
            c.corpus.num_sequences = k.value("num_sequences", c.corpus.num_sequences);
            c.corpus.seq_len = k.value("seq_len", c.corpus.seq_len);
            c.corpus.seed = k.value("seed", c.corpus.seed);
        }
        if (j.contains("train")) from_json(j["train"], c.train);
        c.capture_budget = j.value("capture_budget", c.capture_budget);
        if (j.contains("mha_mode")) c.mha_mode = parse_mha_mode(j["mha_mode"].get<std::string>());
        if (j.contains("residual_mode")) c.residual_mode = parse_residual_mode(j["residual_mode"].get<std::string>());
        if (j.contains("components")) {
            c.components.clear();
            for (const auto& s : j["components"]) c.components.insert(parse_component(s.get<std::string>()));
        }
        if (j.contains("ff_features")) c.ff_features = CapturePoint::parse(j["ff_features"].get<std::string>() + ".0").kind;
        c.grid_points = j.value("grid_points", c.grid_points);
        if (j.contains("eval")) {
            const auto& e = j["eval"];
            c.eval.num_sequences = e.value("num_sequences", c.eval.num_sequences);
            c.eval.mask_prob = e.value("mask_prob", c.eval.mask_prob);
            c.eval.mask_seed = e.value("mask_seed", c.eval.mask_seed);
            c.eval.block_size = e.value("block_size", c.eval.block_size);
            if (e.contains("loss")) c.eval.loss = parse_loss_kind(e["loss"].get<std::string>());
        }
        c.allow_invalid = j.value("allow_invalid", c.allow_invalid);
        if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("invalid experiment config: ") + e.what());
    }
}

namespace {

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
    }
}

}  // namespace

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    nlohmann::json j = read_json_file(path);
    if (j.is_object() && j.contains("model") && j["model"].is_string())
        j["model"] = read_json_file(path.parent_path() / j["model"].get<std::string>());
    ExperimentConfig cfg;
    from_json(j, cfg);
    return cfg;
}

SyntheticCorpus training_corpus(const ExperimentConfig& cfg) {
    return gen_corpus(cfg.model.vocab_size, cfg.corpus.num_sequences, cfg.corpus.seq_len, cfg.corpus.seed, 0);
}

SyntheticCorpus eval_corpus(const ExperimentConfig& cfg) {
    return gen_corpus(cfg.model.vocab_size, cfg.eval.num_sequences, cfg.corpus.seq_len, cfg.corpus.seed, 1);
}

std::vector<std::vector<TokenId>> capture_inputs(const ExperimentConfig& cfg, std::uint64_t budget) {
    const std::size_t per_seq = cfg.corpus.seq_len + 2;
    const std::size_t count = static_cast<std::size_t>((budget + per_seq - 1) / per_seq);
    std::vector<std::vector<TokenId>> out;
    if (count == 0) return out;
    for (const auto& s : gen_corpus(cfg.model.vocab_size, count, cfg.corpus.seq_len, cfg.corpus.seed, 2).sequences)
        out.push_back(frame_sequence(s));
    return out;
}

namespace {

std::size_t odd(std::size_t n) { return n % 2 ? n : n - 1; }

// Stream 7 trains the classifier, stream 8 is its held-out split.
LabeledCorpus classification_split(const ExperimentConfig& cfg, std::size_t count, std::uint64_t stream) {
    return gen_classification_task(cfg.model.vocab_size, count, std::max<std::size_t>(1, odd(cfg.corpus.seq_len)),
                                   cfg.corpus.seed, stream);
}

}  // namespace

TrainResult run_train(const ExperimentConfig& cfg, std::uint64_t seed) {
    TransformerConfig base = cfg.model;
    base.num_labels = 0;
    TrainSpec spec = cfg.train;
    spec.init_seed = seed;
    spec.data_seed = seed;
    TrainResult mlm = train_mlm(base, training_corpus(cfg), spec);
    if (cfg.model.num_labels < 2) return mlm;
    auto labeled = classification_split(cfg, cfg.corpus.num_sequences, 7);
    labeled.num_labels = cfg.model.num_labels;
    TrainResult tuned = finetune_classifier(mlm.checkpoint, labeled, seed, spec);
    tuned.losses.insert(tuned.losses.begin(), mlm.losses.begin(), mlm.losses.end());
    return tuned;
}

StatsMap run_capture(const ExperimentConfig& cfg, const Checkpoint& a, const Checkpoint& b,
                     const CaptureSpec& points, std::uint64_t budget) {
    return capture_joint(a, b, capture_inputs(cfg, budget), points, budget);
}

CaptureSpec alignment_points(const ExperimentConfig& cfg) {
    return required_capture_points(cfg.model, cfg.residual_mode, cfg.components, cfg.ff_features);
}

PermutationPlan run_align(const ExperimentConfig& cfg, const StatsMap& stats) {
    return build_plan(stats, cfg.model, cfg.mha_mode, cfg.residual_mode, cfg.components, cfg.ff_features);
}

LossFn make_loss(const ExperimentConfig& cfg) {
    switch (cfg.eval.loss) {
        case LossKind::mlm: {
            auto blocks = std::make_shared<std::vector<MaskedBlock>>(
                make_mlm_eval(eval_corpus(cfg).sequences, cfg.eval.mask_prob, cfg.eval.mask_seed));
            return [blocks](const Checkpoint& ck) { return masked_loss(ck, *blocks); };
        }
        case LossKind::pppl: {
            auto blocks = std::make_shared<std::vector<MaskedBlock>>(
                make_pppl_blocks(eval_corpus(cfg).sequences, cfg.eval.mask_prob, cfg.eval.block_size,
                                 cfg.model.max_positions, cfg.eval.mask_seed));
            return [blocks](const Checkpoint& ck) { return pseudo_perplexity(ck, *blocks); };
        }
        case LossKind::classification: {
            auto data = std::make_shared<LabeledCorpus>(classification_split(cfg, cfg.eval.num_sequences, 8));
            data->num_labels = cfg.model.num_labels;
            return [data](const Checkpoint& ck) { return classification_loss(ck, *data); };
        }
    }
    throw ConfigError("unknown loss kind");
}

nlohmann::json plan_metadata(const PermutationPlan& plan) {
    nlohmann::json comps = nlohmann::json::array();
    for (auto c : plan.components) comps.push_back(to_string(c));
    return {{"mha_mode", to_string(plan.mha_mode)},
            {"residual_mode", to_string(plan.residual_mode)},
            {"components", comps},
            {"valid", plan.valid()}};
}

BarrierPair run_barrier(const ExperimentConfig& cfg, const Checkpoint& a, const Checkpoint& b,
                        const PermutationPlan& plan, const nlohmann::json& metadata) {
    MergeSpec spec;
    spec.lambdas = lambda_grid(cfg.grid_points);
    spec.loss = cfg.eval.loss;
    const LossFn loss = make_loss(cfg);
    nlohmann::json base = metadata.is_null() ? nlohmann::json::object() : metadata;

    nlohmann::json aligned_meta = base;
    aligned_meta["plan"] = plan_metadata(plan);
    const Checkpoint permuted = apply_plan(b, plan, cfg.allow_invalid);
    BarrierPair out;
    out.aligned = barrier_scan(a, permuted, spec, loss, aligned_meta);

    nlohmann::json vanilla_meta = base;
    vanilla_meta["plan"] = "vanilla";
    out.vanilla = barrier_scan(a, b, spec, loss, vanilla_meta);
    return out;
}

std::vector<AblationRow> run_ablate_data(const ExperimentConfig& cfg, const Checkpoint& a, const Checkpoint& b,
                                         const std::vector<std::uint64_t>& budgets) {
    if (budgets.empty()) throw ConfigError("at least one capture budget is required");
    for (auto s : budgets)
        if (s == 0) throw ConfigError("capture budgets must be positive");
    MergeSpec spec;
    spec.lambdas = lambda_grid(cfg.grid_points);
    spec.loss = cfg.eval.loss;
    const LossFn loss = make_loss(cfg);
    const CaptureSpec points = alignment_points(cfg);
    std::vector<AblationRow> rows;
    for (auto budget : budgets) {
        const StatsMap stats = run_capture(cfg, a, b, points, budget);
        const PermutationPlan plan = run_align(cfg, stats);
        const auto report = barrier_scan(a, apply_plan(b, plan, cfg.allow_invalid), spec, loss);
        rows.push_back({budget, stats.begin()->second.n, report.barrier});
    }
    return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows, const nlohmann::json& metadata) {
    std::ostringstream out;
    out << "# metadata " << metadata.dump() << "\n";
    out << "budget,tokens,barrier\n";
    for (const auto& r : rows) out << r.budget << "," << r.tokens << "," << format_double(r.barrier) << "\n";
    return out.str();
}

namespace {

double mean_diag(const CorrelationMatrix& c, const Permutation& p) {
    return captured_correlation(c, p) / static_cast<double>(c.values.rows());
}

}  // namespace

std::vector<CorrRow> corr_report(const StatsMap& stats, const PermutationPlan& plan) {
    if (stats.empty()) throw ConfigError("stats are empty");
    const std::size_t L = plan.ff.size();
    const bool separate = plan.residual_mode == ResidualMode::separate;
    std::optional<std::size_t> d_model;
    for (const auto& m : plan.mha) d_model = m.full.size();
    if (!d_model) throw ConfigError("plan has no layers");
    const Permutation id = Permutation::identity(*d_model);
    const Permutation& shared = plan.residual ? *plan.residual : id;
    if (separate && plan.residual_per_layer.size() != L) throw ConfigError("plan residual pairs do not match layers");

    auto layer_ok = [&](const CapturePoint& p) {
        if (p.layer >= L)
            throw ConfigError("stats point " + p.name() + " has no layer in a " + std::to_string(L) + "-layer plan");
    };
    std::vector<CorrRow> rows;
    for (const auto& [point, s] : stats) {
        const Permutation* perm = nullptr;
        Component comp = Component::residual;
        switch (point.kind) {
            case CaptureKind::ff_hidden:
            case CaptureKind::ff_preact:
                layer_ok(point);
                perm = &plan.ff[point.layer];
                comp = Component::ff;
                break;
            case CaptureKind::mha_preproj:
                layer_ok(point);
                perm = &plan.mha[point.layer].full;
                comp = Component::mha;
                break;
            case CaptureKind::post_embedding: perm = separate ? &id : &shared; break;
            case CaptureKind::final_ln: perm = separate ? &plan.residual_per_layer.back().second : &shared; break;
            case CaptureKind::res_after_attn:
                layer_ok(point);
                perm = separate ? &plan.residual_per_layer[point.layer].first : &shared;
                break;
            case CaptureKind::res_after_ff:
                layer_ok(point);
                perm = separate ? &plan.residual_per_layer[point.layer].second : &shared;
                break;
        }
        const auto c = finalize_correlation(s);
        if (c.values.rows() != perm->size() || c.values.cols() != perm->size())
            throw ConfigError("stats point " + point.name() + " does not match the plan's width");
        rows.push_back({point.name(), point.layer, comp, mean_diag(c, Permutation::identity(perm->size())),
                        mean_diag(c, *perm)});
    }
    return rows;
}

std::string corr_report_csv(const std::vector<CorrRow>& rows, const nlohmann::json& metadata) {
    std::ostringstream out;
    out << "# metadata " << metadata.dump() << "\n";
    out << "point,component,layer,before,after\n";
    for (const auto& r : rows) {
        const bool layered = CapturePoint::parse(r.point).is_layered();
        out << r.point << "," << to_string(r.component) << "," << (layered ? std::to_string(r.layer) : "") << ","
            << format_double(r.before) << "," << format_double(r.after) << "\n";
    }
    return out.str();
}

MeanSe mean_se(const std::vector<double>& xs) {
    if (xs.empty()) throw ConfigError("mean of an empty set");
    double sum = 0.0;
    for (double x : xs) sum += x;
    const double mean = sum / static_cast<double>(xs.size());
    if (xs.size() == 1) return {mean, 0.0};
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    return {mean, sd / std::sqrt(static_cast<double>(xs.size()))};
}

std::vector<PairResult> run_pairs(const ExperimentConfig& cfg,
                                  const std::function<std::filesystem::path(std::uint64_t)>& model_path) {
    cfg.validate();
    std::map<std::uint64_t, Checkpoint> models;
    for (auto seed : cfg.seeds) {
        const auto path = model_path(seed);
        if (std::filesystem::exists(path)) {
            models.emplace(seed, load_checkpoint(path));
            if (!(models.at(seed).config == cfg.model))
                throw ConfigError("checkpoint " + path.string() + " does not match the configured model");
        } else {
            auto result = run_train(cfg, seed);
            save_checkpoint(result.checkpoint, path);
            models.emplace(seed, std::move(result.checkpoint));
        }
    }
    const CaptureSpec points = alignment_points(cfg);
    std::vector<PairResult> out;
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        for (std::size_t j = i + 1; j < cfg.seeds.size(); ++j) {
            const auto& a = models.at(cfg.seeds[i]);
            const auto& b = models.at(cfg.seeds[j]);
            const auto plan = run_align(cfg, run_capture(cfg, a, b, points, cfg.capture_budget));
            nlohmann::json meta = {{"seed_a", cfg.seeds[i]}, {"seed_b", cfg.seeds[j]}};
            out.push_back({cfg.seeds[i], cfg.seeds[j], run_barrier(cfg, a, b, plan, meta)});
        }
    return out;
}

std::string pairs_csv(const std::vector<PairResult>& pairs, const nlohmann::json& metadata) {
    std::ostringstream out;
    out << "# metadata " << metadata.dump() << "\n";
    out << "seed_a,seed_b,barrier_aligned,barrier_vanilla\n";
    std::vector<double> al, va;
    for (const auto& p : pairs) {
        out << p.seed_a << "," << p.seed_b << "," << format_double(p.reports.aligned.barrier) << ","
            << format_double(p.reports.vanilla.barrier) << "\n";
        al.push_back(p.reports.aligned.barrier);
        va.push_back(p.reports.vanilla.barrier);
    }
    if (!pairs.empty()) {
        const auto a = mean_se(al), v = mean_se(va);
        out << "# mean_aligned " << format_double(a.mean) << " se " << format_double(a.se) << "\n";
        out << "# mean_vanilla " << format_double(v.mean) << " se " << format_double(v.se) << "\n";
    }
    return out.str();
}

}  // namespace permweave
