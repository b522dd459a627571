#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "regent/config.hpp"
#include "regent/envs.hpp"
#include "regent/policies.hpp"
#include "regent/retrieval.hpp"
#include "regent/seqmodel.hpp"
#include "regent/serialize.hpp"
#include "regent/theory.hpp"

namespace regent {

// Driver stages behind the CLI subcommands. Every stage reads and writes a
// fixed layout under one output directory:
//   demos/<env_id>.demoset    ctx/<env_id>.ctxset
//   model/pretrained.ckpt     model/finetuned-<env_id>.ckpt
//   eval/results.csv          bound/bounds.csv
//   manifest.json             report.md
// Stages are deterministic in (config, --seed), so manifests and reports can
// be diffed across runs.

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    Rng r = Rng(a).derive(b);
    return r.next_u64();
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

inline std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline std::filesystem::path demos_path(const std::filesystem::path& out,
                                        const std::string& env_id) {
    return out / "demos" / (env_id + ".demoset");
}

inline std::filesystem::path ctx_path(const std::filesystem::path& out,
                                      const std::string& env_id) {
    return out / "ctx" / (env_id + ".ctxset");
}

inline std::filesystem::path pretrained_path(const std::filesystem::path& out) {
    return out / "model" / "pretrained.ckpt";
}

inline std::filesystem::path finetuned_path(const std::filesystem::path& out,
                                            const std::string& env_id) {
    return out / "model" / ("finetuned-" + env_id + ".ckpt");
}

inline void need_file(const std::filesystem::path& p, const std::string& producer) {
    if (!std::filesystem::exists(p))
        throw DependencyError("missing artifact " + p.string() + " (run `" + producer +
                              "` first)");
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + p.string() + " for writing");
    f << text;
    if (!f) throw IoError("short write to " + p.string());
}

inline Normalizer calibrate_or_unit(const DemoSet& set, Metric metric) {
    // A one-demo retrieval set has no cross-demo pairs to calibrate on;
    // fall back to the raw scale (nearest-action replay ignores distances).
    try {
        return calibrate(set, metric);
    } catch (const CalibrationError&) {
        return Normalizer{set.spec.env_id, 1.0, metric};
    }
}

inline DemoSet demo_prefix(const DemoSet& full, int count) {
    if (count < 1 || count > static_cast<int>(full.demos.size()))
        throw ParameterError("demo_prefix: count " + std::to_string(count) +
                             " outside 1.." + std::to_string(full.demos.size()));
    DemoSet prefix;
    prefix.spec = full.spec;
    prefix.demos.assign(full.demos.begin(), full.demos.begin() + count);
    prefix.retrieval_ids.resize(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) prefix.retrieval_ids[static_cast<std::size_t>(i)] = i;
    validate(prefix);
    return prefix;
}

inline std::string loss_csv(const std::vector<LossLogRow>& rows) {
    std::ostringstream out;
    out << "step,env_id,loss,lr\n";
    for (const LossLogRow& r : rows)
        out << r.step << ',' << r.env_id << ',' << num(r.loss) << ',' << num(r.lr) << '\n';
    return out.str();
}

// Widths the checkpoint needs are properties of the data, not the config.
inline ModelConfig derive_model_config(const ExperimentConfig& cfg,
                                       const std::map<std::string, CtxDataset>& datasets) {
    ModelConfig mc = cfg.model;
    mc.max_positions = 2 * (cfg.context_len + 1);
    int widest = 0;
    for (const auto& [env_id, ds] : datasets)
        widest = std::max(widest, ds.spec.obs_len() + 1);
    mc.max_cont_input = widest;
    return mc;
}

} // namespace detail

// Generates demonstration sets for every train and held-out level and a
// manifest of content hashes.
inline std::vector<std::string> cmd_gen(const ExperimentConfig& cfg, const std::string& out_dir,
                                        std::uint64_t run_seed) {
    if (cfg.train_level_seeds.empty() && cfg.heldout_level_seeds.empty())
        throw ConfigError("gen: no level seeds configured");
    const std::filesystem::path out(out_dir);
    std::vector<std::string> written;
    std::map<std::string, std::string> hashes;

    const auto emit = [&](std::uint64_t level_seed, int count) {
        const DemoSet set = generate_demos(cfg.family, level_seed, count,
                                           detail::mix_seed(run_seed, level_seed),
                                           cfg.overrides);
        const std::filesystem::path path = detail::demos_path(out, set.spec.env_id);
        std::filesystem::create_directories(path.parent_path());
        const std::vector<std::uint8_t> bytes = encode_demoset(set);
        write_file(path.string(), bytes);
        hashes[std::filesystem::relative(path, out).generic_string()] = hex64(fnv1a(bytes));
        written.push_back(path.string());
    };
    for (std::uint64_t s : cfg.train_level_seeds) emit(s, cfg.demos_per_level);
    if (cfg.heldout_demos > 0)
        for (std::uint64_t s : cfg.heldout_level_seeds) emit(s, cfg.heldout_demos);

    nlohmann::json manifest;
    manifest["config_hash"] = config_hash(cfg);
    manifest["run_seed"] = run_seed;
    manifest["files"] = hashes;
    const std::filesystem::path mpath = out / "manifest.json";
    detail::write_text(mpath, manifest.dump(2) + "\n");
    written.push_back(mpath.string());
    return written;
}

// Builds retrieval-context datasets for every train level.
inline std::vector<std::string> cmd_preprocess(const ExperimentConfig& cfg,
                                               const std::string& out_dir) {
    if (cfg.train_level_seeds.empty())
        throw ConfigError("preprocess: no train levels configured");
    const std::filesystem::path out(out_dir);
    std::vector<std::string> written;
    for (std::uint64_t s : cfg.train_level_seeds) {
        const std::string env_id = detail::level_id(cfg.family, cfg.overrides.variant, s);
        const std::filesystem::path in = detail::demos_path(out, env_id);
        detail::need_file(in, "gen");
        const DemoSet set = load_demoset(in.string());
        const CtxDataset ds = preprocess(set, cfg.metric, cfg.context_len);
        const std::filesystem::path path = detail::ctx_path(out, env_id);
        std::filesystem::create_directories(path.parent_path());
        save_ctxset(path.string(), ds);
        written.push_back(path.string());
    }
    return written;
}

// Pretrains the sequence model across all train levels and writes the
// checkpoint plus a per-step loss log.
inline std::vector<std::string> cmd_pretrain(const ExperimentConfig& cfg,
                                             const std::string& out_dir,
                                             std::uint64_t run_seed) {
    if (cfg.train_level_seeds.empty())
        throw ConfigError("pretrain: no train levels configured");
    const std::filesystem::path out(out_dir);
    std::map<std::string, CtxDataset> datasets;
    for (std::uint64_t s : cfg.train_level_seeds) {
        const std::string env_id = detail::level_id(cfg.family, cfg.overrides.variant, s);
        const std::filesystem::path in = detail::ctx_path(out, env_id);
        detail::need_file(in, "preprocess");
        datasets.emplace(env_id, load_ctxset(in.string()));
    }
    ModelConfig mc = detail::derive_model_config(cfg, datasets);
    mc.seed = detail::mix_seed(cfg.model.seed, run_seed);
    TrainConfig tc = cfg.train;
    tc.seed = detail::mix_seed(cfg.train.seed, run_seed);

    std::vector<LossLogRow> log;
    const SeqModel model = pretrain(datasets, mc, tc, cfg.interp, &log);

    const std::filesystem::path ckpt = detail::pretrained_path(out);
    std::filesystem::create_directories(ckpt.parent_path());
    save_checkpoint(ckpt.string(), model);
    const std::filesystem::path lpath = out / "model" / "pretrain_loss.csv";
    detail::write_text(lpath, detail::loss_csv(log));
    return {ckpt.string(), lpath.string()};
}

// Finetunes the pretrained checkpoint separately on each held-out level's
// demonstrations.
inline std::vector<std::string> cmd_finetune(const ExperimentConfig& cfg,
                                             const std::string& out_dir,
                                             std::uint64_t run_seed) {
    if (cfg.heldout_level_seeds.empty())
        throw ConfigError("finetune: no held-out levels configured");
    if (cfg.heldout_demos < 2)
        throw ConfigError("finetune: needs at least 2 held-out demos per level");
    const std::filesystem::path out(out_dir);
    const std::filesystem::path ckpt = detail::pretrained_path(out);
    detail::need_file(ckpt, "pretrain");
    const SeqModel base = load_checkpoint(ckpt.string());

    std::vector<std::string> written;
    for (std::uint64_t s : cfg.heldout_level_seeds) {
        const std::string env_id = detail::level_id(cfg.family, cfg.overrides.variant, s);
        const std::filesystem::path in = detail::demos_path(out, env_id);
        detail::need_file(in, "gen");
        const DemoSet set = load_demoset(in.string());
        const CtxDataset ds = preprocess(set, cfg.metric, cfg.context_len);
        TrainConfig tc = cfg.train;
        tc.seed = detail::mix_seed(cfg.train.seed, run_seed, s);
        std::vector<LossLogRow> log;
        const SeqModel tuned = finetune(base, ds, tc, cfg.interp, &log);
        const std::filesystem::path fp = detail::finetuned_path(out, env_id);
        std::filesystem::create_directories(fp.parent_path());
        save_checkpoint(fp.string(), tuned);
        detail::write_text(out / "model" / ("finetune_loss-" + env_id + ".csv"),
                           detail::loss_csv(log));
        written.push_back(fp.string());
    }
    return written;
}

// Rolls out the configured policies on every held-out level across retrieval
// sizes and evaluation seeds. Rollout seeds depend only on (run seed, level,
// eval seed), so different policies and retrieval sizes face identical
// episode draws.
inline std::vector<std::string> cmd_eval(const ExperimentConfig& cfg, const std::string& out_dir,
                                         std::uint64_t run_seed) {
    if (cfg.heldout_level_seeds.empty())
        throw ConfigError("eval: no held-out levels configured");
    if (cfg.heldout_demos < 1)
        throw ConfigError("eval: heldout_demos is 0, nothing to retrieve from");
    for (int c : cfg.demo_counts)
        if (c > cfg.heldout_demos)
            throw ConfigError("eval: demo count " + std::to_string(c) +
                              " exceeds heldout_demos " + std::to_string(cfg.heldout_demos));

    const std::filesystem::path out(out_dir);
    const bool wants_regent =
        std::count(cfg.eval_policies.begin(), cfg.eval_policies.end(), "regent") > 0;
    const bool wants_finetuned = std::count(cfg.eval_policies.begin(), cfg.eval_policies.end(),
                                            "regent_finetuned") > 0;
    std::shared_ptr<const SeqModel> pretrained;
    if (wants_regent) {
        const std::filesystem::path ckpt = detail::pretrained_path(out);
        detail::need_file(ckpt, "pretrain");
        pretrained = std::make_shared<const SeqModel>(load_checkpoint(ckpt.string()));
    }

    std::ostringstream csv;
    csv << "config_hash,run_seed,family,env_id,policy,n_demos,eval_seed,episodes,"
           "mean_return,std_return,mean_normalized,std_normalized\n";
    const std::string chash = config_hash(cfg);

    for (std::uint64_t level_seed : cfg.heldout_level_seeds) {
        const std::string env_id = detail::level_id(cfg.family, cfg.overrides.variant, level_seed);
        const std::filesystem::path in = detail::demos_path(out, env_id);
        detail::need_file(in, "gen");
        const DemoSet full = load_demoset(in.string());

        std::shared_ptr<const SeqModel> finetuned;
        if (wants_finetuned) {
            const std::filesystem::path fp = detail::finetuned_path(out, env_id);
            detail::need_file(fp, "finetune");
            finetuned = std::make_shared<const SeqModel>(load_checkpoint(fp.string()));
        }

        EnvInstance env = make_env(cfg.family, level_seed, cfg.sticky_p, cfg.overrides);
        env.spec.random_return = full.spec.random_return;
        env.spec.expert_return = full.spec.expert_return;
        const double span = env.spec.expert_return - env.spec.random_return;

        for (int count : cfg.demo_counts) {
            const DemoSet prefix = detail::demo_prefix(full, count);
            const Normalizer norm = detail::calibrate_or_unit(prefix, cfg.metric);
            auto index =
                std::make_shared<const StateIndex>(build_index(prefix, cfg.metric, norm));

            for (const std::string& pname : cfg.eval_policies) {
                Policy policy;
                if (pname == "rnp") {
                    policy = make_rnp_policy(index);
                } else {
                    PolicyOptions po;
                    po.context_len = cfg.context_len;
                    po.interp = cfg.interp;
                    po.sample = true;  // play the interpolated distribution, not its mode
                    policy = make_regent_policy(
                        index, pname == "regent" ? pretrained : finetuned, po);
                }
                for (std::uint64_t es : cfg.eval_seeds) {
                    const RolloutStats stats =
                        rollout(env, policy, cfg.eval_episodes,
                                detail::mix_seed(run_seed, level_seed, es));
                    double var = 0.0;
                    for (double r : stats.returns) {
                        const double c = r - stats.mean_return;
                        var += c * c;
                    }
                    const std::size_t n = stats.returns.size();
                    const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
                    csv << chash << ',' << run_seed << ',' << family_name(cfg.family) << ','
                        << env_id << ',' << pname << ',' << count << ',' << es << ','
                        << cfg.eval_episodes << ',' << detail::num(stats.mean_return) << ','
                        << detail::num(sd) << ','
                        << detail::num(normalized_return(stats.mean_return, env.spec)) << ','
                        << detail::num(sd / span) << '\n';
                }
            }
        }
    }
    const std::filesystem::path path = out / "eval" / "results.csv";
    detail::write_text(path, csv.str());
    return {path.string()};
}

// Sweeps retrieval-set sizes per held-out level and records the worst-case
// isolation distance, the resulting performance bound, and the measured gap
// of the interpolated policy around an untrained model.
inline std::vector<std::string> cmd_bound(const ExperimentConfig& cfg, const std::string& out_dir,
                                          std::uint64_t run_seed) {
    if (cfg.heldout_level_seeds.empty())
        throw ConfigError("bound: no held-out levels configured");

    std::ostringstream csv;
    csv << "config_hash,run_seed,env_id,n_demos,d_isolated,lambda,horizon,bound,"
           "empirical_gap,gap_se\n";
    const std::string chash = config_hash(cfg);

    for (std::uint64_t level_seed : cfg.heldout_level_seeds) {
        BoundOptions opt;
        opt.level_seed = level_seed;
        opt.demo_seed = detail::mix_seed(run_seed, level_seed);
        opt.episodes = cfg.bound_episodes;
        opt.sticky_p = cfg.sticky_p;
        opt.lambda = cfg.interp.lambda;
        opt.metric = cfg.metric;
        opt.state_samples = cfg.state_samples;
        opt.overrides = cfg.overrides;
        const PolicyBuilder builder = [&](std::shared_ptr<const StateIndex> index) {
            ModelConfig mc = cfg.model;
            mc.max_positions = 2 * (cfg.context_len + 1);
            mc.max_cont_input = index->spec.obs_len() + 1;
            mc.seed = detail::mix_seed(cfg.model.seed, run_seed);
            auto model = std::make_shared<const SeqModel>(init_model(mc));
            PolicyOptions po;
            po.context_len = cfg.context_len;
            po.interp = cfg.interp;
            po.sample = true;
            return make_regent_policy(index, model, po);
        };
        const std::vector<BoundReport> reports = bound_experiment(
            cfg.family, cfg.demo_counts, builder, detail::mix_seed(run_seed, level_seed), opt);
        for (const BoundReport& r : reports)
            csv << chash << ',' << run_seed << ',' << r.env_id << ',' << r.n_demos << ','
                << detail::num(r.d_isolated) << ',' << detail::num(r.lambda) << ','
                << r.horizon << ',' << detail::num(r.bound) << ','
                << detail::num(r.empirical_gap) << ',' << detail::num(r.gap_se) << '\n';
    }
    const std::filesystem::path path = std::filesystem::path(out_dir) / "bound" / "bounds.csv";
    detail::write_text(path, csv.str());
    return {path.string()};
}

namespace detail {

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open " + p.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> row;
        std::size_t at = 0;
        while (true) {
            const std::size_t comma = line.find(',', at);
            if (comma == std::string::npos) {
                row.push_back(line.substr(at));
                break;
            }
            row.push_back(line.substr(at, comma - at));
            at = comma + 1;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace detail

// Aggregates the eval and bound CSVs into a human-readable summary.
inline std::vector<std::string> cmd_report(const ExperimentConfig& cfg,
                                           const std::string& out_dir) {
    const std::filesystem::path out(out_dir);
    const std::filesystem::path epath = out / "eval" / "results.csv";
    const std::filesystem::path bpath = out / "bound" / "bounds.csv";
    const bool has_eval = std::filesystem::exists(epath);
    const bool has_bound = std::filesystem::exists(bpath);
    if (!has_eval && !has_bound)
        throw DependencyError("missing artifact " + epath.string() + " and " + bpath.string() +
                              " (run `eval` or `bound` first)");

    std::ostringstream md;
    md << "# Experiment report\n\nconfig hash: `" << config_hash(cfg) << "`\n";

    if (has_eval) {
        const auto rows = detail::read_csv(epath);
        // header: ...,policy(4),n_demos(5),...,mean_normalized(10),...
        std::map<std::pair<std::string, int>, std::vector<double>> groups;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto& r = rows[i];
            if (r.size() < 12) throw FormatError("report: malformed row in " + epath.string());
            groups[{r[4], std::stoi(r[5])}].push_back(std::stod(r[10]));
        }
        md << "\n## Evaluation (mean normalized return across levels and seeds)\n\n"
           << "| policy | demos | mean | min | max | rows |\n"
           << "|---|---|---|---|---|---|\n";
        for (const auto& [key, vals] : groups) {
            double sum = 0.0, mn = vals.front(), mx = vals.front();
            for (double v : vals) {
                sum += v;
                mn = std::min(mn, v);
                mx = std::max(mx, v);
            }
            md << "| " << key.first << " | " << key.second << " | "
               << detail::num(sum / static_cast<double>(vals.size())) << " | "
               << detail::num(mn) << " | " << detail::num(mx) << " | " << vals.size()
               << " |\n";
        }
    }
    if (has_bound) {
        const auto rows = detail::read_csv(bpath);
        md << "\n## Performance bound sweep\n\n"
           << "| env | demos | d_isolated | bound | empirical gap | gap se |\n"
           << "|---|---|---|---|---|---|\n";
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto& r = rows[i];
            if (r.size() < 10) throw FormatError("report: malformed row in " + bpath.string());
            md << "| " << r[2] << " | " << r[3] << " | " << r[4] << " | " << r[7] << " | "
               << r[8] << " | " << r[9] << " |\n";
        }
    }
    const std::filesystem::path rpath = out / "report.md";
    detail::write_text(rpath, md.str());
    return {rpath.string()};
}

} // namespace regent
