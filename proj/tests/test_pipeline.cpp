#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include <json.hpp>

#include "regent/pipeline.hpp"
#include "regent/serialize.hpp"

using namespace regent;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name)
        : path(fs::temp_directory_path() / ("regent-test-" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json base_config() {
    return json{
        {"family", "gridworld"},
        {"metric", "ssim"},
        {"train_level_seeds", {1, 2}},
        {"heldout_level_seeds", {3}},
        {"demos_per_level", 6},
        {"heldout_demos", 4},
        {"context_len", 3},
        {"eval_episodes", 4},
        {"eval_seeds", {0, 1}},
        {"demo_counts", {2, 4}},
        {"eval_policies", {"rnp", "regent", "regent_finetuned"}},
        {"bound_episodes", 8},
        {"model", {{"n_layers", 1}, {"n_heads", 2}, {"hidden", 16}, {"seed", 1}}},
        {"train", {{"batch_size", 8}, {"lr_start", 1e-3}, {"epochs", 2}, {"seed", 2}}},
    };
}

} // namespace

TEST_CASE("config parsing is strict about keys, types, and semantics") {
    const ExperimentConfig cfg = parse_config(base_config());
    REQUIRE(cfg.family == Family::gridworld);
    REQUIRE(cfg.metric == Metric::ssim);
    REQUIRE(cfg.demo_counts == std::vector<int>{2, 4});
    REQUIRE(cfg.train.batch_size == 8);
    REQUIRE(cfg.model.hidden == 16);
    REQUIRE(cfg.interp.lambda == 10.0);

    // defaults fill in what's absent
    const ExperimentConfig tiny =
        parse_config(json{{"train_level_seeds", {1}}, {"heldout_level_seeds", {2}}});
    REQUIRE(tiny.demos_per_level == 20);
    REQUIRE(tiny.context_len == 19);
    REQUIRE(tiny.demo_counts == std::vector<int>{5});  // heldout_demos
    REQUIRE(tiny.eval_policies == std::vector<std::string>{"rnp", "regent"});

    const auto reject = [](json j, const std::string& needle) {
        try {
            parse_config(j);
            FAIL("expected ConfigError containing \"" << needle << "\"");
        } catch (const ConfigError& e) {
            REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring(needle));
        }
    };

    json j = base_config();
    j["demos_per_lvl"] = 3;
    reject(j, "demos_per_lvl");

    j = base_config();
    j["model"]["n_layer"] = 2;
    reject(j, "n_layer");

    j = base_config();
    j["train"]["learning_rate"] = 0.1;
    reject(j, "learning_rate");

    j = base_config();
    j["interp"] = {{"lambda", 10.0}, {"gamma", 1.0}};
    reject(j, "gamma");

    j = base_config();
    j["overrides"] = {{"grid", 6}};
    reject(j, "grid");

    j = base_config();
    j["demos_per_level"] = "many";
    reject(j, "demos_per_level");

    j = base_config();
    j["train_level_seeds"] = {1, -2};
    reject(j, "train_level_seeds");

    j = base_config();
    j["heldout_level_seeds"] = {2, 7};
    reject(j, "appears in both");

    j = base_config();
    j["train_level_seeds"] = {1, 1};
    reject(j, "duplicates");

    j = base_config();
    j["eval_policies"] = {"rnp", "oracle"};
    reject(j, "oracle");

    j = base_config();
    j["family"] = "pointmass";  // image metric on a vector family
    reject(j, "image");

    j = base_config();
    j["sticky_p"] = 1.0;
    reject(j, "sticky_p");

    j = base_config();
    j["demo_counts"] = {4, 2};
    reject(j, "strictly increasing");

    j = base_config();
    j["train"]["ctx_dist"] = "nearest";
    reject(j, "ctx_dist");

    j = base_config();
    j["model"]["hidden"] = 6;  // not divisible by n_heads = 2? it is; use 7
    j["model"]["hidden"] = 7;
    reject(j, "model");

    json ok = base_config();
    ok["train"]["ctx_dist"] = "own_nearest";
    REQUIRE(parse_config(ok).train.ctx_dist == CtxDistMode::own_nearest);
}

TEST_CASE("config hashes ignore key order but track content") {
    const ExperimentConfig a = parse_config(
        json::parse(R"({"train_level_seeds": [1], "heldout_level_seeds": [2], "context_len": 4})"));
    const ExperimentConfig b = parse_config(
        json::parse(R"({"context_len": 4, "heldout_level_seeds": [2], "train_level_seeds": [1]})"));
    REQUIRE(config_hash(a) == config_hash(b));
    REQUIRE(config_hash(a).size() == 16);

    const ExperimentConfig c = parse_config(
        json::parse(R"({"train_level_seeds": [1], "heldout_level_seeds": [2], "context_len": 5})"));
    REQUIRE(config_hash(a) != config_hash(c));
}

TEST_CASE("load_config reports unreadable and malformed files") {
    TempDir dir("cfg");
    REQUIRE_THROWS_AS(load_config((dir.path / "absent.json").string()), IoError);
    const fs::path bad = dir.path / "bad.json";
    detail::write_text(bad, "{ not json");
    REQUIRE_THROWS_AS(load_config(bad.string()), ConfigError);
    const fs::path good = dir.path / "good.json";
    detail::write_text(good, base_config().dump());
    REQUIRE(load_config(good.string()).demos_per_level == 6);
}

TEST_CASE("seed mixing is deterministic and spreads inputs") {
    REQUIRE(detail::mix_seed(1, 2) == detail::mix_seed(1, 2));
    REQUIRE(detail::mix_seed(1, 2) != detail::mix_seed(2, 1));
    REQUIRE(detail::mix_seed(1, 2) != detail::mix_seed(1, 3));
    REQUIRE(detail::mix_seed(1, 2, 3) == detail::mix_seed(detail::mix_seed(1, 2), 3));
}

TEST_CASE("demo prefixes and the calibration fallback") {
    const DemoSet set = generate_demos(Family::gridworld, 9, 4, 1);
    const DemoSet two = detail::demo_prefix(set, 2);
    REQUIRE(two.demos.size() == 2);
    REQUIRE(two.demos[0] == set.demos[0]);
    REQUIRE(two.retrieval_ids == std::vector<std::uint32_t>{0, 1});
    REQUIRE_THROWS_AS(detail::demo_prefix(set, 0), ParameterError);
    REQUIRE_THROWS_AS(detail::demo_prefix(set, 5), ParameterError);

    const Normalizer full = detail::calibrate_or_unit(set, Metric::ssim);
    REQUIRE(full == calibrate(set, Metric::ssim));
    const DemoSet one = detail::demo_prefix(set, 1);
    const Normalizer unit = detail::calibrate_or_unit(one, Metric::ssim);
    REQUIRE(unit.scale == 1.0);
    REQUIRE(unit.env_id == set.spec.env_id);
}

TEST_CASE("stages refuse to run before their inputs exist") {
    TempDir dir("deps");
    const ExperimentConfig cfg = parse_config(base_config());

    const auto expect_dep = [](auto&& fn, const std::string& producer) {
        try {
            fn();
            FAIL("expected DependencyError");
        } catch (const DependencyError& e) {
            REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring("missing artifact"));
            REQUIRE_THAT(e.what(),
                         Catch::Matchers::ContainsSubstring("`" + producer + "`"));
        }
    };
    expect_dep([&] { cmd_preprocess(cfg, dir.str()); }, "gen");
    expect_dep([&] { cmd_pretrain(cfg, dir.str(), 1); }, "preprocess");
    expect_dep([&] { cmd_finetune(cfg, dir.str(), 1); }, "pretrain");
    expect_dep([&] { cmd_eval(cfg, dir.str(), 1); }, "pretrain");
    expect_dep([&] { cmd_report(cfg, dir.str()); }, "eval");

    // eval without the regent policy only needs demos
    ExperimentConfig rnp_only = cfg;
    rnp_only.eval_policies = {"rnp"};
    expect_dep([&] { cmd_eval(rnp_only, dir.str(), 1); }, "gen");

    ExperimentConfig no_held = cfg;
    no_held.heldout_level_seeds.clear();
    REQUIRE_THROWS_AS(cmd_eval(no_held, dir.str(), 1), ConfigError);
    REQUIRE_THROWS_AS(cmd_finetune(no_held, dir.str(), 1), ConfigError);
    REQUIRE_THROWS_AS(cmd_bound(no_held, dir.str(), 1), ConfigError);

    ExperimentConfig no_demos = cfg;
    no_demos.heldout_demos = 0;
    REQUIRE_THROWS_AS(cmd_eval(no_demos, dir.str(), 1), ConfigError);

    ExperimentConfig too_many = cfg;
    too_many.demo_counts = {2, 5};  // exceeds heldout_demos = 4
    REQUIRE_THROWS_AS(cmd_eval(too_many, dir.str(), 1), ConfigError);
}

TEST_CASE("the staged pipeline chains into consistent artifacts") {
    TempDir dir("chain");
    const ExperimentConfig cfg = parse_config(base_config());
    const std::uint64_t run_seed = 7;

    // gen: three demosets plus a manifest
    const auto gen_files = cmd_gen(cfg, dir.str(), run_seed);
    REQUIRE(gen_files.size() == 4);
    for (const std::string& env :
         {std::string("gridworld-L00001"), std::string("gridworld-L00002"),
          std::string("gridworld-L00003")})
        REQUIRE(fs::exists(detail::demos_path(dir.path, env)));
    const json manifest = json::parse(slurp(dir.path / "manifest.json"));
    REQUIRE(manifest.at("config_hash").get<std::string>() == config_hash(cfg));
    REQUIRE(manifest.at("run_seed").get<std::uint64_t>() == run_seed);
    REQUIRE(manifest.at("files").size() == 3);
    for (const auto& [k, v] : manifest.at("files").items())
        REQUIRE(v.get<std::string>().size() == 16);

    // the same config and seed produce an identical manifest elsewhere
    {
        TempDir other("chain-repeat");
        cmd_gen(cfg, other.str(), run_seed);
        REQUIRE(slurp(other.path / "manifest.json") == slurp(dir.path / "manifest.json"));
        TempDir reseeded("chain-reseed");
        cmd_gen(cfg, reseeded.str(), run_seed + 1);
        REQUIRE(slurp(reseeded.path / "manifest.json") != slurp(dir.path / "manifest.json"));
    }

    const DemoSet train1 = load_demoset(detail::demos_path(dir.path, "gridworld-L00001").string());
    REQUIRE(train1.demos.size() == 6);
    const DemoSet held = load_demoset(detail::demos_path(dir.path, "gridworld-L00003").string());
    REQUIRE(held.demos.size() == 4);

    // preprocess: one ctxset per train level, one point per source step
    const auto ctx_files = cmd_preprocess(cfg, dir.str());
    REQUIRE(ctx_files.size() == 2);
    const CtxDataset ds1 = load_ctxset(detail::ctx_path(dir.path, "gridworld-L00001").string());
    std::size_t steps = 0;
    for (const auto& d : train1.demos) steps += d.steps.size();
    REQUIRE(ds1.points.size() == steps);
    REQUIRE(ds1.n == 3);

    // pretrain: checkpoint plus loss log
    const auto pre_files = cmd_pretrain(cfg, dir.str(), run_seed);
    REQUIRE(pre_files.size() == 2);
    const SeqModel model = load_checkpoint(detail::pretrained_path(dir.path).string());
    REQUIRE(model.cfg.max_positions == 2 * (cfg.context_len + 1));
    REQUIRE(model.cfg.max_cont_input == 8 * 8 * 3 + 1);
    REQUIRE(model.cfg.hidden == 16);
    {
        const auto rows = detail::read_csv(dir.path / "model" / "pretrain_loss.csv");
        REQUIRE(rows.front() ==
                std::vector<std::string>{"step", "env_id", "loss", "lr"});
        REQUIRE(rows.size() > 1);
        const CtxDataset ds2 =
            load_ctxset(detail::ctx_path(dir.path, "gridworld-L00002").string());
        const std::size_t want = (ds1.points.size() + 7) / 8 + (ds2.points.size() + 7) / 8;
        REQUIRE(rows.size() - 1 == want);
        double loss_sum = 0.0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            REQUIRE(rows[i].size() == 4);
            const double loss = std::stod(rows[i][2]);
            REQUIRE(std::isfinite(loss));
            REQUIRE(loss >= 0.0);  // exactly 0 is possible when a whole batch
            loss_sum += loss;      // sits at zero retrieval distance
        }
        REQUIRE(loss_sum > 0.0);
    }

    // finetune: per-level checkpoint, distinct from the base
    const auto fin_files = cmd_finetune(cfg, dir.str(), run_seed);
    REQUIRE(fin_files.size() == 1);
    const SeqModel tuned =
        load_checkpoint(detail::finetuned_path(dir.path, "gridworld-L00003").string());
    REQUIRE(tuned.cfg == model.cfg);
    REQUIRE(tuned.params != model.params);
    REQUIRE(fs::exists(dir.path / "model" / "finetune_loss-gridworld-L00003.csv"));

    // eval: one row per level x count x policy x seed, all tagged with the hash
    cmd_eval(cfg, dir.str(), run_seed);
    const auto eval_rows = detail::read_csv(dir.path / "eval" / "results.csv");
    REQUIRE(eval_rows.front().front() == "config_hash");
    REQUIRE(eval_rows.front().size() == 12);
    REQUIRE(eval_rows.size() == 1 + 1 * 2 * 3 * 2);
    int regent_rows = 0;
    for (std::size_t i = 1; i < eval_rows.size(); ++i) {
        const auto& r = eval_rows[i];
        REQUIRE(r[0] == config_hash(cfg));
        REQUIRE(r[1] == "7");
        REQUIRE(r[2] == "gridworld");
        REQUIRE(r[3] == "gridworld-L00003");
        REQUIRE((r[4] == "rnp" || r[4] == "regent" || r[4] == "regent_finetuned"));
        REQUIRE((r[5] == "2" || r[5] == "4"));
        REQUIRE(r[7] == "4");
        REQUIRE(std::isfinite(std::stod(r[8])));
        REQUIRE(std::isfinite(std::stod(r[10])));
        regent_rows += r[4] == "regent" ? 1 : 0;
    }
    REQUIRE(regent_rows == 4);

    // bound: per count rows with the recomputable ceiling
    cmd_bound(cfg, dir.str(), run_seed);
    const auto bound_rows = detail::read_csv(dir.path / "bound" / "bounds.csv");
    REQUIRE(bound_rows.size() == 1 + 2);
    REQUIRE(bound_rows.front().size() == 10);
    double prev_d = 2.0;
    for (std::size_t i = 1; i < bound_rows.size(); ++i) {
        const auto& r = bound_rows[i];
        REQUIRE(r[2] == "gridworld-L00003");
        const double d = std::stod(r[4]);
        const double lambda = std::stod(r[5]);
        const int horizon = std::stoi(r[6]);
        const double bound = std::stod(r[7]);
        REQUIRE(d <= prev_d);
        prev_d = d;
        REQUIRE(bound ==
                Catch::Approx(suboptimality_bound(horizon, lambda, d)).epsilon(1e-8));
    }

    // report: digest referencing both tables
    cmd_report(cfg, dir.str());
    const std::string report = slurp(dir.path / "report.md");
    REQUIRE_THAT(report, Catch::Matchers::ContainsSubstring(config_hash(cfg)));
    REQUIRE_THAT(report, Catch::Matchers::ContainsSubstring("| rnp | 2 |"));
    REQUIRE_THAT(report, Catch::Matchers::ContainsSubstring("| regent_finetuned | 4 |"));
    REQUIRE_THAT(report, Catch::Matchers::ContainsSubstring("Performance bound sweep"));
}

TEST_CASE("the vector family flows through the same stages") {
    TempDir dir("pointmass");
    json j{
        {"family", "pointmass"},
        {"metric", "l2"},
        {"train_level_seeds", {4}},
        {"heldout_level_seeds", {5}},
        {"demos_per_level", 4},
        {"heldout_demos", 3},
        {"context_len", 2},
        {"eval_episodes", 3},
        {"demo_counts", {3}},
        {"eval_policies", {"rnp", "regent"}},
        {"model", {{"n_layers", 1}, {"n_heads", 1}, {"hidden", 8}}},
        {"train", {{"batch_size", 16}, {"lr_start", 1e-3}, {"epochs", 1}}},
    };
    const ExperimentConfig cfg = parse_config(j);
    cmd_gen(cfg, dir.str(), 3);
    cmd_preprocess(cfg, dir.str());
    cmd_pretrain(cfg, dir.str(), 3);
    const SeqModel model = load_checkpoint(detail::pretrained_path(dir.path).string());
    REQUIRE(model.cfg.max_cont_input == 5);  // 4 observation entries + reward

    cmd_eval(cfg, dir.str(), 3);
    const auto rows = detail::read_csv(dir.path / "eval" / "results.csv");
    REQUIRE(rows.size() == 1 + 1 * 1 * 2 * 1);
    for (std::size_t i = 1; i < rows.size(); ++i) {
        REQUIRE(rows[i][2] == "pointmass");
        REQUIRE(std::isfinite(std::stod(rows[i][8])));
    }

    cmd_bound(cfg, dir.str(), 3);
    const auto brows = detail::read_csv(dir.path / "bound" / "bounds.csv");
    REQUIRE(brows.size() == 2);
    REQUIRE(std::stoi(brows[1][6]) == 60);  // pointmass horizon
}

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(REGENT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    REQUIRE(WIFEXITED(rc));
    return WEXITSTATUS(rc);
}

} // namespace

TEST_CASE("the command line maps outcomes to exit codes") {
    TempDir dir("cli");
    const fs::path cfg_path = dir.path / "exp.json";
    json j{
        {"family", "gridworld"},
        {"metric", "ssim"},
        {"train_level_seeds", {6}},
        {"demos_per_level", 2},
        {"heldout_demos", 0},
        {"demo_counts", {1}},
        {"context_len", 2},
    };
    detail::write_text(cfg_path, j.dump());
    const std::string out = (dir.path / "out").string();

    // argument errors
    REQUIRE(run_cli("gen") == 2);                        // missing --config
    REQUIRE(run_cli("--config " + cfg_path.string()) == 2);  // missing subcommand
    REQUIRE(run_cli("warp --config " + cfg_path.string()) == 2);
    REQUIRE(run_cli("--help") == 0);
    REQUIRE(run_cli("gen --help") == 0);

    // config errors
    const fs::path bad_cfg = dir.path / "bad.json";
    detail::write_text(bad_cfg, R"({"train_level_seeds": [1], "mystery": 3})");
    REQUIRE(run_cli("gen --config " + bad_cfg.string() + " --out " + out) == 2);

    // missing upstream artifacts are runtime failures, not usage errors
    REQUIRE(run_cli("preprocess --config " + cfg_path.string() + " --out " + out) == 1);
    REQUIRE(run_cli("gen --config " + (dir.path / "absent.json").string()) == 1);

    // a working stage chain
    REQUIRE(run_cli("gen --config " + cfg_path.string() + " --seed 5 --out " + out) == 0);
    REQUIRE(fs::exists(fs::path(out) / "demos" / "gridworld-L00006.demoset"));
    REQUIRE(run_cli("preprocess --config " + cfg_path.string() + " --seed 5 --out " + out +
                    " --threads 2") == 0);
    REQUIRE(fs::exists(fs::path(out) / "ctx" / "gridworld-L00006.ctxset"));
    REQUIRE(run_cli("report --config " + cfg_path.string() + " --out " + out) == 1);
}
