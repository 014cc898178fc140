#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "permweave/experiment.hpp"

using namespace permweave;

namespace {

ExperimentConfig tiny() {
    ExperimentConfig c;
    c.model.num_layers = 2;
    c.model.d_model = 8;
    c.model.num_heads = 2;
    c.model.d_ff = 16;
    c.model.vocab_size = 24;
    c.model.max_positions = 16;
    c.corpus = {200, 10, 3};
    c.train.steps = 30;
    c.train.batch_size = 4;
    c.eval.num_sequences = 20;
    c.capture_budget = 600;
    c.grid_points = 5;
    return c;
}

}  // namespace

TEST_CASE("config JSON round trip and defaults") {
    const auto c = tiny();
    nlohmann::json j = c;
    ExperimentConfig back;
    from_json(j, back);
    CHECK(nlohmann::json(back) == j);
    ExperimentConfig d;
    from_json(nlohmann::json::object(), d);
    CHECK(d.grid_points == 21);
    CHECK(d.capture_budget == 100000);
    CHECK(d.components == std::set{Component::ff, Component::mha});
    CHECK_THROWS_AS(from_json(nlohmann::json{{"mha_mode", "heads"}}, d), ConfigError);
    CHECK_THROWS_AS(from_json(nlohmann::json{{"seeds", "x"}}, d), ConfigError);
    CHECK_THROWS_AS(from_json(nlohmann::json::array(), d), ConfigError);
}

TEST_CASE("config validation") {
    auto c = tiny();
    c.validate();
    c.seeds = {1};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.seeds = {2, 2};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.corpus.seq_len = 15;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.eval.loss = LossKind::classification;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.grid_points = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(load_experiment_config("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("data splits are disjoint streams of one source") {
    const auto c = tiny();
    const auto train = training_corpus(c), eval = eval_corpus(c);
    CHECK(train.sequences.size() == 200);
    CHECK(eval.sequences.size() == 20);
    CHECK(train.sequences[0] != eval.sequences[0]);
    CHECK(capture_inputs(c, 0).empty());
    CHECK(capture_inputs(c, 12).size() == 1);
    CHECK(capture_inputs(c, 13).size() == 2);
    CHECK(capture_inputs(c, 13)[0].front() == special::cls);
}

TEST_CASE("capture budget is honored and zero is rejected") {
    const auto c = tiny();
    const auto a = init_model(c.model, 1), b = init_model(c.model, 2);
    const CaptureSpec pts{{CaptureKind::ff_hidden, 0}};
    CHECK(run_capture(c, a, b, pts, 500).at(*pts.begin()).n == 500);
    CHECK(run_capture(c, a, b, pts, 1000).at(*pts.begin()).n == 1000);
    CHECK_THROWS_WITH_AS(run_capture(c, a, b, pts, 0), "no tokens captured", ConfigError);
}

TEST_CASE("alignment points follow the settings") {
    auto c = tiny();
    CHECK(alignment_points(c).size() == 4);
    c.components = {Component::residual};
    c.residual_mode = ResidualMode::first;
    CHECK(alignment_points(c) == CaptureSpec{{CaptureKind::post_embedding, 0}});
    c.ff_features = CaptureKind::ff_preact;
    c.components = {Component::ff};
    CHECK(alignment_points(c).begin()->kind == CaptureKind::ff_preact);
}

TEST_CASE("align rejects missing residual stats") {
    auto c = tiny();
    const auto a = init_model(c.model, 1), b = init_model(c.model, 2);
    const auto stats = run_capture(c, a, b, alignment_points(c), 300);
    c.components = {Component::ff, Component::residual};
    c.residual_mode = ResidualMode::first;
    CHECK_THROWS_WITH_AS(run_align(c, stats), "stats are missing capture point post_embedding", ConfigError);
    c.components.clear();
    CHECK_THROWS_AS(run_align(c, stats), ConfigError);
}

TEST_CASE("barrier of a model with itself under the identity plan is zero") {
    const auto c = tiny();
    const auto a = init_model(c.model, 4);
    const auto res = run_barrier(c, a, a, PermutationPlan::identity(c.model), {{"tag", "self"}});
    CHECK(std::abs(res.aligned.barrier) <= 1e-5);
    CHECK(std::abs(res.vanilla.barrier) <= 1e-5);
    CHECK(res.aligned.lambdas.size() == 5);
    CHECK(res.aligned.metadata["tag"] == "self");
    CHECK(res.aligned.metadata["plan"]["mha_mode"] == "head_perm");
    CHECK(res.vanilla.metadata["plan"] == "vanilla");
}

TEST_CASE("pppl and classification losses") {
    auto c = tiny();
    c.eval.loss = LossKind::pppl;
    const auto a = init_model(c.model, 4);
    const double pppl = make_loss(c)(a);
    CHECK(pppl == doctest::Approx(24.0).epsilon(0.05));
    c.model.num_labels = 2;
    c.eval.loss = LossKind::classification;
    auto with_head = a;
    init_classifier_head(with_head, 2, 1);
    with_head.config.num_labels = 2;
    const double ce = make_loss(c)(with_head);
    CHECK(ce == doctest::Approx(std::log(2.0)).epsilon(0.05));
}

TEST_CASE("training with a classifier config fine-tunes a head") {
    auto c = tiny();
    c.model.num_labels = 2;
    const auto r = run_train(c, 1);
    CHECK(r.checkpoint.config.num_labels == 2);
    CHECK(r.checkpoint.tensors.contains(names::cls_out));
    CHECK(r.losses.size() == 2 * c.train.steps);
}

TEST_CASE("training is deterministic per seed") {
    const auto c = tiny();
    const auto a = run_train(c, 1), b = run_train(c, 1), d = run_train(c, 2);
    CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));
    CHECK(serialize_checkpoint(a.checkpoint) != serialize_checkpoint(d.checkpoint));
}

TEST_CASE("correlation report") {
    auto c = tiny();
    c.components = {Component::ff, Component::mha, Component::residual};
    c.residual_mode = ResidualMode::last;
    const auto a = init_model(c.model, 1), b = init_model(c.model, 2);
    const auto stats = run_capture(c, a, b, alignment_points(c), 600);
    const auto plan = run_align(c, stats);
    const auto rows = corr_report(stats, plan);
    CHECK(rows.size() == stats.size());
    for (const auto& r : rows) CHECK(r.after >= r.before - 1e-9);

    for (const auto& r : corr_report(stats, PermutationPlan::identity(c.model))) CHECK(r.after == r.before);

    const auto self = run_capture(c, a, a, alignment_points(c), 600);
    for (const auto& r : corr_report(self, PermutationPlan::identity(c.model)))
        CHECK(r.before == doctest::Approx(1.0).epsilon(1e-5));

    const auto csv = corr_report_csv(rows, {});
    CHECK(csv.find("point,component,layer,before,after\n") != std::string::npos);
    CHECK(csv.find("final_ln,residual,,") != std::string::npos);
    CHECK(csv.find("ff_hidden.1,ff,1,") != std::string::npos);

    auto wrong = tiny();
    wrong.model.num_layers = 1;
    CHECK_THROWS_AS(corr_report(stats, PermutationPlan::identity(wrong.model)), ConfigError);
}

TEST_CASE("data ablation") {
    const auto c = tiny();
    const auto a = init_model(c.model, 1), b = init_model(c.model, 2);
    const auto rows = run_ablate_data(c, a, b, {100});
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].tokens == 100);
    const auto csv = ablation_csv(rows, {});
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
    CHECK(ablation_csv(run_ablate_data(c, a, b, {100}), {}) == csv);
    CHECK_THROWS_AS(run_ablate_data(c, a, b, {100, 0}), ConfigError);
    CHECK_THROWS_AS(run_ablate_data(c, a, b, {}), ConfigError);
}

TEST_CASE("mean and standard error") {
    auto m = mean_se({1.0, 2.0, 3.0, 4.0});
    CHECK(m.mean == 2.5);
    CHECK(m.se == doctest::Approx(std::sqrt(5.0 / 3.0) / 2.0));
    CHECK(mean_se({7.0}).se == 0.0);
    CHECK_THROWS_AS(mean_se({}), ConfigError);
}

TEST_CASE("pairs enumerate every seed pair and reuse saved models") {
    auto c = tiny();
    c.seeds = {1, 2, 3};
    c.train.steps = 5;
    const auto dir = std::filesystem::temp_directory_path() / "permweave_pairs_test";
    std::filesystem::remove_all(dir);
    auto path = [&](std::uint64_t s) { return dir / ("m" + std::to_string(s) + ".pwc"); };
    const auto first = run_pairs(c, path);
    REQUIRE(first.size() == 3);
    CHECK(first[0].seed_a == 1);
    CHECK(first[2].seed_b == 3);
    CHECK(std::filesystem::exists(path(3)));
    const auto second = run_pairs(c, path);
    CHECK(pairs_csv(first, {}) == pairs_csv(second, {}));
    CHECK(pairs_csv(first, {}).find("# mean_aligned") != std::string::npos);
    std::filesystem::remove_all(dir);
}
