// permweave: train, align and merge small Transformer encoders.
//
// Exit codes: 0 success, 1 runtime failure (including unreadable or corrupt data files),
// 2 usage or configuration error.

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "permweave/container.hpp"
#include "permweave/experiment.hpp"

using namespace permweave;
namespace fs = std::filesystem;

namespace {

constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

/// Flags shared by every subcommand; unset flags leave the config file's values alone.
struct Overrides {
    std::string config_path;
    std::optional<std::string> output_dir;
    std::optional<std::string> mha_mode;
    std::optional<std::string> residual_mode;
    std::vector<std::string> components;
    std::optional<std::string> ff_features;
    std::optional<std::uint64_t> budget;
    std::optional<std::size_t> grid_points;
    std::optional<std::string> loss;
    std::optional<std::size_t> steps;
    std::optional<std::size_t> batch_size;
    std::vector<std::uint64_t> seeds;
    bool allow_invalid = false;

    void attach(CLI::App* app) {
        app->add_option("-c,--config", config_path, "JSON experiment config");
        app->add_option("--output-dir", output_dir);
        app->add_option("--mha-mode", mha_mode, "head_perm | monotonic | ignore_heads");
        app->add_option("--residual-mode", residual_mode, "identity | first | last | all | separate");
        app->add_option("--components", components, "subset of ff, mha, residual")->delimiter(',');
        app->add_option("--ff-features", ff_features, "ff_hidden | ff_preact");
        app->add_option("--budget", budget, "capture token budget");
        app->add_option("--grid-points", grid_points);
        app->add_option("--loss", loss, "mlm | pppl | classification");
        app->add_option("--steps", steps);
        app->add_option("--batch-size", batch_size);
        app->add_option("--seeds", seeds)->delimiter(',');
        app->add_flag("--allow-invalid", allow_invalid, "apply plans that do not preserve the function");
    }

    ExperimentConfig resolve() const {
        ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_experiment_config(config_path);
        nlohmann::json j = cfg;
        if (output_dir) j["output_dir"] = *output_dir;
        if (mha_mode) j["mha_mode"] = *mha_mode;
        if (residual_mode) j["residual_mode"] = *residual_mode;
        if (!components.empty()) j["components"] = components;
        if (ff_features) j["ff_features"] = *ff_features;
        if (budget) j["capture_budget"] = *budget;
        if (grid_points) j["grid_points"] = *grid_points;
        if (loss) j["eval"]["loss"] = *loss;
        if (steps) j["train"]["steps"] = *steps;
        if (batch_size) j["train"]["batch_size"] = *batch_size;
        if (!seeds.empty()) j["seeds"] = seeds;
        if (allow_invalid) j["allow_invalid"] = true;
        ExperimentConfig out;
        from_json(j, out);
        return out;
    }
};

void write_text(const fs::path& path, const std::string& text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Adopts the checkpoint's architecture and validates the rest of the config against it.
ExperimentConfig bind_model(ExperimentConfig cfg, const TransformerConfig& model) {
    cfg.model = model;
    cfg.validate();
    return cfg;
}

PermutationPlan load_plan(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open plan file " + path.string());
    try {
        return nlohmann::json::parse(in).get<PermutationPlan>();
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("plan file " + path.string() + " is not valid JSON: " + e.what());
    }
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    for (std::string item; std::getline(in, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Permutation alignment and merging of small Transformer encoders"};
    app.require_subcommand(1);
    Overrides ov;
    std::uint64_t seed = 0;
    std::string model_a, model_b, stats_path, plan_path, out_path, points = "alignment";
    double lambda = 0.5;
    std::vector<std::uint64_t> sizes;

    auto* train = app.add_subcommand("train", "train one MLM model");
    ov.attach(train);
    train->add_option("--seed", seed, "init and data-order seed")->required();
    train->add_option("-o,--out", out_path, "checkpoint path (default <output_dir>/model_seed<seed>.pwc)");

    auto* capture = app.add_subcommand("capture", "accumulate joint feature statistics");
    ov.attach(capture);
    capture->add_option("--model-a", model_a)->required();
    capture->add_option("--model-b", model_b)->required();
    capture->add_option("--points", points, "'alignment', 'all', or a comma list of capture points");
    capture->add_option("-o,--out", out_path, "stats path (default <output_dir>/stats.pws)");

    auto* align = app.add_subcommand("align", "build a permutation plan from statistics");
    ov.attach(align);
    align->add_option("--stats", stats_path)->required();
    align->add_option("-o,--out", out_path, "plan path (default <output_dir>/plan.json)");

    auto* merge = app.add_subcommand("merge", "write lambda * A + (1 - lambda) * plan(B)");
    ov.attach(merge);
    merge->add_option("--model-a", model_a)->required();
    merge->add_option("--model-b", model_b)->required();
    merge->add_option("--plan", plan_path, "plan JSON (default: no permutation)");
    merge->add_option("--lambda", lambda)->check(CLI::Range(0.0, 1.0));
    merge->add_option("-o,--out", out_path)->required();

    auto* barrier = app.add_subcommand("barrier", "loss barrier of the aligned and vanilla interpolations");
    ov.attach(barrier);
    barrier->add_option("--model-a", model_a)->required();
    barrier->add_option("--model-b", model_b)->required();
    barrier->add_option("--plan", plan_path, "plan JSON (default: identity plan)");
    barrier->add_option("-o,--out", out_path, "output prefix (default <output_dir>/barrier)");

    auto* ablate = app.add_subcommand("ablate-data", "barrier as a function of capture budget");
    ov.attach(ablate);
    ablate->add_option("--model-a", model_a)->required();
    ablate->add_option("--model-b", model_b)->required();
    ablate->add_option("--sizes", sizes, "capture budgets in tokens")->delimiter(',')->required();
    ablate->add_option("-o,--out", out_path, "CSV path (default <output_dir>/ablate_data.csv)");

    auto* corr = app.add_subcommand("corr-report", "mean diagonal correlation before and after a plan");
    ov.attach(corr);
    corr->add_option("--stats", stats_path)->required();
    corr->add_option("--plan", plan_path)->required();
    corr->add_option("-o,--out", out_path, "CSV path (default <output_dir>/corr_report.csv)");

    auto* pairs = app.add_subcommand("pairs", "train, align and scan every pair of seeds");
    ov.attach(pairs);
    pairs->add_option("-o,--out", out_path, "output prefix (default <output_dir>/pairs)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsageError;
    }

    try {
        ExperimentConfig cfg = ov.resolve();
        const auto dir = cfg.output_dir;
        auto or_default = [&](const std::string& name) { return out_path.empty() ? dir / name : fs::path(out_path); };

        if (*train) {
            cfg.validate();
            const auto result = run_train(cfg, seed);
            const auto path = or_default("model_seed" + std::to_string(seed) + ".pwc");
            save_checkpoint(result.checkpoint, path);
            std::cout << "trained seed " << seed << ": loss " << format_double(result.losses.front()) << " -> "
                      << format_double(result.losses.back()) << ", wrote " << path.string() << "\n";
        } else if (*capture) {
            const auto a = load_checkpoint(model_a), b = load_checkpoint(model_b);
            if (!(a.config == b.config)) throw ConfigError("models have different configs");
            cfg = bind_model(cfg, a.config);
            CaptureSpec spec;
            if (points == "alignment") spec = alignment_points(cfg);
            else if (points == "all") spec = all_capture_points(cfg.model);
            else
                for (const auto& p : split_list(points)) spec.insert(CapturePoint::parse(p));
            const auto stats = run_capture(cfg, a, b, spec, cfg.capture_budget);
            const auto path = or_default("stats.pws");
            save_stats(stats, cfg.model, path);
            std::cout << "captured " << stats.begin()->second.n << " tokens at " << stats.size() << " points, wrote "
                      << path.string() << "\n";
        } else if (*align) {
            if (cfg.components.empty()) throw ConfigError("at least one component must be selected for alignment");
            const auto [stats, model] = load_stats(stats_path);
            cfg = bind_model(cfg, model);
            const auto plan = run_align(cfg, stats);
            nlohmann::json j = plan;
            j["experiment"] = cfg;
            const auto path = or_default("plan.json");
            write_text(path, j.dump(1) + "\n");
            std::cout << "wrote " << path.string() << (plan.valid() ? "" : " (invalid plan)") << "\n";
        } else if (*merge) {
            const auto a = load_checkpoint(model_a), b = load_checkpoint(model_b);
            cfg = bind_model(cfg, a.config);
            const auto plan = plan_path.empty() ? PermutationPlan::identity(a.config) : load_plan(plan_path);
            save_checkpoint(interpolate(a, apply_plan(b, plan, cfg.allow_invalid), lambda), out_path);
            std::cout << "wrote " << out_path << "\n";
        } else if (*barrier) {
            const auto a = load_checkpoint(model_a), b = load_checkpoint(model_b);
            cfg = bind_model(cfg, a.config);
            const auto plan = plan_path.empty() ? PermutationPlan::identity(a.config) : load_plan(plan_path);
            const nlohmann::json meta = {{"experiment", cfg}, {"model_a", model_a}, {"model_b", model_b}};
            const auto res = run_barrier(cfg, a, b, plan, meta);
            const auto prefix = or_default("barrier").string();
            write_text(prefix + ".csv", report_csv(res.aligned));
            write_text(prefix + "_vanilla.csv", report_csv(res.vanilla));
            const nlohmann::json j = {{"aligned", res.aligned}, {"vanilla", res.vanilla}};
            write_text(prefix + ".json", j.dump(1) + "\n");
            std::cout << "barrier " << format_double(res.aligned.barrier) << " (vanilla "
                      << format_double(res.vanilla.barrier) << "), wrote " << prefix << ".{csv,json}\n";
        } else if (*ablate) {
            const auto a = load_checkpoint(model_a), b = load_checkpoint(model_b);
            cfg = bind_model(cfg, a.config);
            const auto rows = run_ablate_data(cfg, a, b, sizes);
            const auto path = or_default("ablate_data.csv");
            write_text(path, ablation_csv(rows, {{"experiment", cfg}, {"model_a", model_a}, {"model_b", model_b}}));
            std::cout << "wrote " << path.string() << "\n";
        } else if (*corr) {
            const auto [stats, model] = load_stats(stats_path);
            const auto plan = load_plan(plan_path);
            const auto rows = corr_report(stats, plan);
            const auto path = or_default("corr_report.csv");
            write_text(path, corr_report_csv(rows, {{"plan", plan_metadata(plan)}, {"stats", stats_path}}));
            std::cout << "wrote " << path.string() << "\n";
        } else if (*pairs) {
            const auto models_dir = dir / "models";
            const auto results = run_pairs(cfg, [&](std::uint64_t s) {
                return models_dir / ("model_seed" + std::to_string(s) + ".pwc");
            });
            const auto prefix = or_default("pairs").string();
            nlohmann::json all = nlohmann::json::array();
            for (const auto& r : results)
                all.push_back({{"seed_a", r.seed_a}, {"seed_b", r.seed_b}, {"aligned", r.reports.aligned},
                               {"vanilla", r.reports.vanilla}});
            write_text(prefix + ".json", nlohmann::json{{"experiment", cfg}, {"pairs", all}}.dump(1) + "\n");
            write_text(prefix + ".csv", pairs_csv(results, {{"experiment", cfg}}));
            std::cout << "wrote " << prefix << ".{csv,json}\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntimeError;
    }
    return 0;
}
