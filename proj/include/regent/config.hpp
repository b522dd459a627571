#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "regent/agents.hpp"
#include "regent/distance.hpp"
#include "regent/envs.hpp"
#include "regent/error.hpp"
#include "regent/io.hpp"
#include "regent/seqmodel.hpp"

namespace regent {

// Experiment description loaded from JSON. Parsing is strict: unknown keys
// anywhere raise ConfigError so typos fail loudly instead of silently
// running defaults.
struct ExperimentConfig {
    Family family = Family::gridworld;
    Metric metric = Metric::ssim;
    std::vector<std::uint64_t> train_level_seeds;
    std::vector<std::uint64_t> heldout_level_seeds;
    int demos_per_level = 20;
    int heldout_demos = 5;
    int context_len = 19;
    double sticky_p = 0.0;
    int eval_episodes = 50;
    std::vector<std::uint64_t> eval_seeds = {0};
    std::vector<int> demo_counts;  // defaults to {heldout_demos}
    std::vector<std::string> eval_policies = {"rnp", "regent"};
    int bound_episodes = 500;
    int state_samples = 100000;
    EnvOverrides overrides{};
    ModelConfig model{};  // max_positions / max_cont_input derived at train time
    TrainConfig train{};
    InterpConfig interp{};
    std::string canonical;  // sorted-key dump of the parsed JSON, hashed into reports
};

inline std::string config_hash(const ExperimentConfig& cfg) {
    return hex64(fnv1a(cfg.canonical));
}

namespace detail {

inline void expect_keys(const nlohmann::json& obj, const char* where,
                        const std::set<std::string>& allowed) {
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.count(key))
            throw ConfigError(std::string("config: unknown key \"") + key + "\" in " + where);
    }
}

template <typename T>
inline void read_field(const nlohmann::json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config: field \"") + key + "\" has the wrong type");
    }
}

inline void read_seeds(const nlohmann::json& obj, const char* key,
                       std::vector<std::uint64_t>& out) {
    if (!obj.contains(key)) return;
    const nlohmann::json& arr = obj.at(key);
    if (!arr.is_array())
        throw ConfigError(std::string("config: field \"") + key + "\" must be an array");
    out.clear();
    for (const auto& v : arr) {
        if (!v.is_number_unsigned() && !v.is_number_integer())
            throw ConfigError(std::string("config: field \"") + key +
                              "\" must hold non-negative integers");
        const std::int64_t s = v.get<std::int64_t>();
        if (s < 0)
            throw ConfigError(std::string("config: field \"") + key +
                              "\" must hold non-negative integers");
        out.push_back(static_cast<std::uint64_t>(s));
    }
}

} // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    detail::expect_keys(j, "the top level",
                        {"family", "metric", "train_level_seeds", "heldout_level_seeds",
                         "demos_per_level", "heldout_demos", "context_len", "sticky_p",
                         "eval_episodes", "eval_seeds", "demo_counts", "eval_policies",
                         "bound_episodes", "state_samples", "overrides", "model", "train",
                         "interp"});

    ExperimentConfig cfg;
    std::string family_s = "gridworld", metric_s = "ssim";
    detail::read_field(j, "family", family_s);
    detail::read_field(j, "metric", metric_s);
    cfg.family = family_from_name(family_s);
    cfg.metric = metric_from_name(metric_s);

    detail::read_seeds(j, "train_level_seeds", cfg.train_level_seeds);
    detail::read_seeds(j, "heldout_level_seeds", cfg.heldout_level_seeds);
    detail::read_field(j, "demos_per_level", cfg.demos_per_level);
    detail::read_field(j, "heldout_demos", cfg.heldout_demos);
    detail::read_field(j, "context_len", cfg.context_len);
    detail::read_field(j, "sticky_p", cfg.sticky_p);
    detail::read_field(j, "eval_episodes", cfg.eval_episodes);
    detail::read_seeds(j, "eval_seeds", cfg.eval_seeds);
    detail::read_field(j, "demo_counts", cfg.demo_counts);
    detail::read_field(j, "eval_policies", cfg.eval_policies);
    detail::read_field(j, "bound_episodes", cfg.bound_episodes);
    detail::read_field(j, "state_samples", cfg.state_samples);

    if (j.contains("overrides")) {
        const nlohmann::json& o = j.at("overrides");
        detail::expect_keys(o, "\"overrides\"",
                            {"variant", "grid_size", "wall_density", "action_remap",
                             "obstacle_radius", "horizon"});
        detail::read_field(o, "variant", cfg.overrides.variant);
        if (o.contains("grid_size")) cfg.overrides.grid_size = o.at("grid_size").get<int>();
        if (o.contains("wall_density"))
            cfg.overrides.wall_density = o.at("wall_density").get<double>();
        if (o.contains("action_remap"))
            cfg.overrides.action_remap = o.at("action_remap").get<std::vector<int>>();
        if (o.contains("obstacle_radius"))
            cfg.overrides.obstacle_radius = o.at("obstacle_radius").get<double>();
        if (o.contains("horizon")) cfg.overrides.horizon = o.at("horizon").get<int>();
    }
    if (j.contains("model")) {
        const nlohmann::json& m = j.at("model");
        detail::expect_keys(m, "\"model\"", {"n_layers", "n_heads", "hidden", "n_act_max", "seed"});
        detail::read_field(m, "n_layers", cfg.model.n_layers);
        detail::read_field(m, "n_heads", cfg.model.n_heads);
        detail::read_field(m, "hidden", cfg.model.hidden);
        detail::read_field(m, "n_act_max", cfg.model.n_act_max);
        detail::read_field(m, "seed", cfg.model.seed);
    }
    if (j.contains("train")) {
        const nlohmann::json& t = j.at("train");
        detail::expect_keys(t, "\"train\"",
                            {"batch_size", "lr_start", "epochs", "beta1", "beta2",
                             "weight_decay", "single_env_batches", "through_interpolation",
                             "ctx_dist", "clip_norm", "seed"});
        detail::read_field(t, "batch_size", cfg.train.batch_size);
        detail::read_field(t, "lr_start", cfg.train.lr_start);
        detail::read_field(t, "epochs", cfg.train.epochs);
        detail::read_field(t, "beta1", cfg.train.beta1);
        detail::read_field(t, "beta2", cfg.train.beta2);
        detail::read_field(t, "weight_decay", cfg.train.weight_decay);
        detail::read_field(t, "clip_norm", cfg.train.clip_norm);
        detail::read_field(t, "single_env_batches", cfg.train.single_env_batches);
        detail::read_field(t, "through_interpolation", cfg.train.through_interpolation);
        if (t.contains("ctx_dist")) {
            const std::string mode = t.at("ctx_dist").get<std::string>();
            if (mode == "to_first") cfg.train.ctx_dist = CtxDistMode::to_first;
            else if (mode == "own_nearest") cfg.train.ctx_dist = CtxDistMode::own_nearest;
            else throw ConfigError("config: train.ctx_dist must be to_first or own_nearest");
        }
        detail::read_field(t, "seed", cfg.train.seed);
    }
    if (j.contains("interp")) {
        const nlohmann::json& i = j.at("interp");
        detail::expect_keys(i, "\"interp\"", {"lambda", "l_scale"});
        detail::read_field(i, "lambda", cfg.interp.lambda);
        detail::read_field(i, "l_scale", cfg.interp.l_scale);
    }

    // semantic checks
    if (cfg.metric == Metric::ssim && cfg.family != Family::gridworld)
        throw ConfigError("config: the image metric needs an image observation family");
    if (cfg.demos_per_level < 1)
        throw ConfigError("config: demos_per_level must be positive");
    if (cfg.heldout_demos < 0) throw ConfigError("config: heldout_demos must be non-negative");
    if (cfg.context_len < 1) throw ConfigError("config: context_len must be positive");
    if (!(cfg.sticky_p >= 0.0 && cfg.sticky_p < 1.0))
        throw ConfigError("config: sticky_p must lie in [0, 1)");
    if (cfg.eval_episodes < 1) throw ConfigError("config: eval_episodes must be positive");
    if (cfg.eval_seeds.empty()) throw ConfigError("config: eval_seeds must be non-empty");
    if (cfg.bound_episodes < 2)
        throw ConfigError("config: bound_episodes must be at least 2");
    if (cfg.state_samples < 1) throw ConfigError("config: state_samples must be positive");
    if (cfg.demo_counts.empty()) cfg.demo_counts = {cfg.heldout_demos};
    for (std::size_t i = 0; i < cfg.demo_counts.size(); ++i) {
        if (cfg.demo_counts[i] < 1)
            throw ConfigError("config: demo_counts must be positive");
        if (i > 0 && cfg.demo_counts[i] <= cfg.demo_counts[i - 1])
            throw ConfigError("config: demo_counts must be strictly increasing");
    }
    for (const std::string& p : cfg.eval_policies)
        if (p != "rnp" && p != "regent" && p != "regent_finetuned")
            throw ConfigError("config: unknown policy \"" + p + "\" in eval_policies");
    if (cfg.eval_policies.empty()) throw ConfigError("config: eval_policies must be non-empty");

    {
        std::set<std::uint64_t> train(cfg.train_level_seeds.begin(),
                                      cfg.train_level_seeds.end());
        for (std::uint64_t s : cfg.heldout_level_seeds)
            if (train.count(s))
                throw ConfigError("config: level seed " + std::to_string(s) +
                                  " appears in both train_level_seeds and heldout_level_seeds");
    }
    {
        std::set<std::uint64_t> sorted_train(cfg.train_level_seeds.begin(),
                                             cfg.train_level_seeds.end());
        if (sorted_train.size() != cfg.train_level_seeds.size())
            throw ConfigError("config: train_level_seeds contains duplicates");
        std::set<std::uint64_t> sorted_held(cfg.heldout_level_seeds.begin(),
                                            cfg.heldout_level_seeds.end());
        if (sorted_held.size() != cfg.heldout_level_seeds.size())
            throw ConfigError("config: heldout_level_seeds contains duplicates");
    }
    validate(cfg.interp);
    validate(cfg.train);
    // model width fields are derived from data later; validate the rest here
    if (cfg.model.n_layers < 1 || cfg.model.n_heads < 1 || cfg.model.hidden < 1 ||
        cfg.model.hidden % cfg.model.n_heads != 0 || cfg.model.n_act_max < 2)
        throw ConfigError("config: model block is inconsistent");

    cfg.canonical = j.dump();
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    const std::vector<std::uint8_t> bytes = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + path + " is not valid JSON: " + e.what());
    }
    try {
        return parse_config(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + path + ": " + e.what());
    }
}

} // namespace regent
