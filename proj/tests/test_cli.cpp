#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "permweave_cli_test";

struct Run {
    int code;
    std::string err;
};

Run cli(const std::string& args) {
    const auto err_path = kDir / "stderr.txt";
    const std::string cmd = std::string(PERMWEAVE_CLI) + " " + args + " > " + (kDir / "stdout.txt").string() +
                            " 2> " + err_path.string();
    const int status = std::system(cmd.c_str());
    std::ifstream in(err_path);
    std::stringstream ss;
    ss << in.rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream in(text);
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
}

std::string p(const std::string& name) { return (kDir / name).string(); }

// One shared fixture: two tiny trained models and their statistics.
struct Fixture {
    Fixture() {
        fs::remove_all(kDir);
        fs::create_directories(kDir);
        std::ofstream(kDir / "model.json") << R"({"num_layers": 2, "d_model": 8, "num_heads": 2, "d_ff": 16,
            "vocab_size": 24, "max_positions": 16})";
        std::ofstream(kDir / "cfg.json") << R"({"model": "model.json", "seeds": [1, 2, 3],
            "corpus": {"num_sequences": 200, "seq_len": 10, "seed": 3}, "train": {"steps": 20, "batch_size": 4},
            "eval": {"num_sequences": 20}, "capture_budget": 600, "grid_points": 5, "output_dir": ")" +
                                                kDir.string() + R"("})";
        REQUIRE(cli("train -c " + p("cfg.json") + " --seed 1").code == 0);
        REQUIRE(cli("train -c " + p("cfg.json") + " --seed 2").code == 0);
    }
    std::string cfg = "-c " + p("cfg.json");
    std::string models = " --model-a " + p("model_seed1.pwc") + " --model-b " + p("model_seed2.pwc");
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("train is deterministic per seed") {
    auto& f = fixture();
    REQUIRE(cli("train " + f.cfg + " --seed 1 -o " + p("again.pwc")).code == 0);
    CHECK(slurp(p("again.pwc")) == slurp(p("model_seed1.pwc")));
    CHECK(slurp(p("model_seed2.pwc")) != slurp(p("model_seed1.pwc")));
}

TEST_CASE("usage and config errors exit with 2") {
    auto r = cli("train -c " + p("missing.json") + " --seed 1");
    CHECK(r.code == 2);
    CHECK(r.err.find("missing.json") != std::string::npos);
    CHECK(cli("").code == 2);
    CHECK(cli("train").code == 2);
    CHECK(cli("frobnicate").code == 2);
    std::ofstream(kDir / "broken.json") << "{ not json";
    CHECK(cli("train -c " + p("broken.json") + " --seed 1").code == 2);
    CHECK(cli("train " + fixture().cfg + " --seed 1 --mha-mode sideways").code == 2);
    CHECK(cli("--help").code == 0);
}

TEST_CASE("corrupt checkpoints exit with 1") {
    auto& f = fixture();
    const auto good = slurp(p("model_seed1.pwc"));
    std::ofstream(kDir / "truncated.pwc", std::ios::binary) << good.substr(0, 40);
    auto bad_magic = good;
    bad_magic[1] = 'X';
    std::ofstream(kDir / "magic.pwc", std::ios::binary) << bad_magic;
    for (const char* name : {"truncated.pwc", "magic.pwc", "absent.pwc"}) {
        auto r = cli("barrier " + f.cfg + " --model-a " + p(name) + " --model-b " + p("model_seed2.pwc"));
        CHECK(r.code == 1);
        CHECK(!r.err.empty());
    }
}

TEST_CASE("capture budgets") {
    auto& f = fixture();
    auto r = cli("capture " + f.cfg + f.models + " --budget 0 -o " + p("zero.pws"));
    CHECK(r.code == 2);
    CHECK(r.err.find("no tokens captured") != std::string::npos);
    REQUIRE(cli("capture " + f.cfg + f.models + " --budget 300 -o " + p("s300.pws")).code == 0);
    REQUIRE(cli("capture " + f.cfg + f.models + " --budget 600 -o " + p("s600.pws")).code == 0);
    REQUIRE(cli("capture " + f.cfg + f.models + " --budget 600 -o " + p("s600b.pws")).code == 0);
    CHECK(slurp(p("s600.pws")) == slurp(p("s600b.pws")));
    auto n_of = [](const std::string& file) {
        const auto bytes = slurp(file);
        std::uint64_t len = 0;
        for (int i = 7; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(bytes[4 + i]);
        return nlohmann::json::parse(bytes.substr(12, len))["points"]["ff_hidden.0"]["n"].get<std::uint64_t>();
    };
    CHECK(n_of(p("s300.pws")) == 300);
    CHECK(n_of(p("s600.pws")) == 600);
}

TEST_CASE("align") {
    auto& f = fixture();
    REQUIRE(cli("capture " + f.cfg + f.models + " -o " + p("ffmha.pws")).code == 0);
    std::ofstream(kDir / "nocomp.json") << R"({"components": []})";
    CHECK(cli("align -c " + p("nocomp.json") + " --stats " + p("ffmha.pws")).code == 2);

    REQUIRE(cli("align " + f.cfg + " --stats " + p("ffmha.pws") + " --components ff -o " + p("ff.json")).code == 0);
    const auto plan = nlohmann::json::parse(slurp(p("ff.json")));
    CHECK(plan["residual"].is_null());
    CHECK(plan["valid"] == true);
    for (const auto& m : plan["mha"]) CHECK(m["map"] == nlohmann::json::array({0, 1, 2, 3, 4, 5, 6, 7}));
    CHECK(plan["experiment"]["capture_budget"] == 600);

    auto r = cli("align " + f.cfg + " --stats " + p("ffmha.pws") + " --components ff,residual --residual-mode first");
    CHECK(r.code == 2);
    CHECK(r.err.find("post_embedding") != std::string::npos);
}

TEST_CASE("barrier reports") {
    auto& f = fixture();
    REQUIRE(cli("barrier " + f.cfg + " --model-a " + p("model_seed1.pwc") + " --model-b " + p("model_seed1.pwc") +
                " -o " + p("self"))
                .code == 0);
    const auto csv = lines(slurp(p("self.csv")));
    REQUIRE(csv.size() == 5 + 2);
    CHECK(csv[0].rfind("# metadata ", 0) == 0);
    CHECK(csv[1] == "lambda,loss");
    const auto report = nlohmann::json::parse(slurp(p("self.json")));
    CHECK(std::abs(report["aligned"]["barrier"].get<double>()) <= 1e-5);
    CHECK(report["vanilla"]["metadata"]["plan"] == "vanilla");

    REQUIRE(cli("capture " + f.cfg + f.models + " --points all -o " + p("all.pws")).code == 0);
    REQUIRE(cli("align " + f.cfg + " --stats " + p("all.pws") +
                " --components ff,mha,residual --residual-mode all --mha-mode monotonic -o " + p("plan.json"))
                .code == 0);
    REQUIRE(cli("barrier " + f.cfg + f.models + " --plan " + p("plan.json") + " -o " + p("b")).code == 0);
    const auto b = nlohmann::json::parse(slurp(p("b.json")));
    const auto plan = nlohmann::json::parse(slurp(p("plan.json")));
    CHECK(b["aligned"]["metadata"]["plan"]["mha_mode"] == plan["mha_mode"]);
    CHECK(b["aligned"]["metadata"]["plan"]["residual_mode"] == plan["residual_mode"]);
    CHECK(b["aligned"]["metadata"]["plan"]["valid"] == plan["valid"]);
    CHECK(b["aligned"]["metadata"]["experiment"]["grid_points"] == 5);

    REQUIRE(cli("merge " + f.cfg + f.models + " --plan " + p("plan.json") + " --lambda 1 -o " + p("m1.pwc")).code == 0);
    CHECK(slurp(p("m1.pwc")) == slurp(p("model_seed1.pwc")));
}

TEST_CASE("invalid plans need the override") {
    auto& f = fixture();
    REQUIRE(cli("capture " + f.cfg + f.models + " --points all -o " + p("all2.pws")).code == 0);
    REQUIRE(cli("align " + f.cfg + " --stats " + p("all2.pws") + " --mha-mode ignore_heads -o " + p("inv.json")).code == 0);
    CHECK(nlohmann::json::parse(slurp(p("inv.json")))["valid"] == false);
    CHECK(cli("barrier " + f.cfg + f.models + " --plan " + p("inv.json") + " -o " + p("inv")).code == 2);
    CHECK(cli("barrier " + f.cfg + f.models + " --plan " + p("inv.json") + " --allow-invalid -o " + p("inv")).code == 0);
}

TEST_CASE("data ablation") {
    auto& f = fixture();
    REQUIRE(cli("ablate-data " + f.cfg + f.models + " --sizes 1000 -o " + p("ab1.csv")).code == 0);
    const auto csv = lines(slurp(p("ab1.csv")));
    REQUIRE(csv.size() == 3);
    CHECK(csv[1] == "budget,tokens,barrier");
    CHECK(csv[2].rfind("1000,1000,", 0) == 0);
    REQUIRE(cli("ablate-data " + f.cfg + f.models + " --sizes 1000 -o " + p("ab2.csv")).code == 0);
    CHECK(slurp(p("ab1.csv")) == slurp(p("ab2.csv")));
    CHECK(cli("ablate-data " + f.cfg + f.models + " --sizes 100,0").code == 2);
}

TEST_CASE("correlation report") {
    auto& f = fixture();
    REQUIRE(cli("capture " + f.cfg + f.models + " --points all -o " + p("c.pws")).code == 0);
    REQUIRE(cli("align " + f.cfg + " --stats " + p("c.pws") + " --components ff -o " + p("ffonly.json")).code == 0);
    REQUIRE(cli("corr-report " + f.cfg + " --stats " + p("c.pws") + " --plan " + p("ffonly.json") + " -o " +
                p("corr.csv"))
                .code == 0);
    const auto rows = lines(slurp(p("corr.csv")));
    CHECK(rows[1] == "point,component,layer,before,after");
    int ff_rows = 0;
    for (std::size_t i = 2; i < rows.size(); ++i) {
        std::vector<std::string> cells;
        std::stringstream in(rows[i]);
        for (std::string c; std::getline(in, c, ',');) cells.push_back(c);
        REQUIRE(cells.size() == 5);
        const double before = std::stod(cells[3]), after = std::stod(cells[4]);
        if (cells[1] == "ff") {
            ++ff_rows;
            CHECK(after >= before);
        } else {
            CHECK(after == before);  // identity outside the selected component
        }
    }
    CHECK(ff_rows == 4);
}

TEST_CASE("pipeline output is byte-identical across runs") {
    auto& f = fixture();
    for (const char* tag : {"r1", "r2"}) {
        const std::string dir = p(tag);
        REQUIRE(cli("pairs " + f.cfg + " --seeds 1,2,3 --output-dir " + dir + " -o " + dir + "/pairs").code == 0);
    }
    const auto a = slurp(p("r1/pairs.csv"));
    CHECK(lines(a).size() == 2 + 3 + 2);
    // The resolved config embeds output_dir, so compare everything after the metadata line.
    CHECK(a.substr(a.find('\n')) == slurp(p("r2/pairs.csv")).substr(a.find('\n')));
    CHECK(slurp(p("r1/models/model_seed3.pwc")) == slurp(p("r2/models/model_seed3.pwc")));
}
