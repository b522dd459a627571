#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "regent/agents.hpp"
#include "regent/envs.hpp"
#include "regent/retrieval.hpp"
#include "regent/seqmodel.hpp"

namespace regent {

// Verification harness for the interpolated policy's guarantees: the
// worst-case performance gap as a function of how isolated a state can be
// from the retrieval set, and the per-step distribution-shift ceiling.

struct BoundReport {
    std::string env_id;
    int n_demos = 0;
    double d_isolated = 0.0;  // max over states of min normalized distance
    double lambda = 0.0;
    int horizon = 0;
    double bound = 0.0;
    double empirical_gap = 0.0;  // expert mean return minus policy mean return
    double gap_se = 0.0;         // standard error of the policy mean return
};

// min(H, H^2 * (1 - e^{-lambda d})) with per-step rewards in [0, 1].
inline double suboptimality_bound(int horizon, double lambda, double d) {
    if (horizon < 1) throw ParameterError("suboptimality_bound: horizon must be positive");
    if (!(lambda > 0.0) || !std::isfinite(lambda))
        throw ParameterError("suboptimality_bound: lambda must be positive and finite");
    if (!(d >= 0.0 && d <= 1.0))
        throw ParameterError("suboptimality_bound: d must lie in [0, 1]");
    const double H = static_cast<double>(horizon);
    return std::min(H, H * H * (1.0 - std::exp(-lambda * d)));
}

// Largest normalized distance any probed state has to its closest retrieval
// entry. States are probed without same-demo exclusion: deployment retrieval
// sees the whole set.
inline double most_isolated_distance(const StateIndex& index,
                                     const std::vector<ObsValue>& states) {
    if (states.empty()) throw ParameterError("most_isolated_distance: no states to probe");
    std::vector<double> nearest(states.size(), 0.0);
    parallel_for(states.size(), [&](std::size_t i) {
        const std::vector<NeighborHit> hit = knn(index, states[i], 1);
        nearest[i] = normalize(index.normalizer, hit.front().raw_dist);
    });
    return *std::max_element(nearest.begin(), nearest.end());
}

// State probes for the isolation measurement. Gridworlds enumerate every
// free non-goal cell exactly; continuous families draw uniform resets.
inline std::vector<ObsValue> probe_states(const EnvInstance& env, int samples,
                                          std::uint64_t seed) {
    std::vector<ObsValue> out;
    if (env.family == Family::gridworld) {
        const int cells = env.grid * env.grid;
        for (int cell = 0; cell < cells; ++cell) {
            if (env.walls[static_cast<std::size_t>(cell)] || cell == env.goal_cell) continue;
            EnvInstance probe = env;
            probe.in_episode = true;
            probe.episode_done = false;
            probe.agent_cell = cell;
            out.push_back(probe.observe());
        }
        return out;
    }
    if (samples < 1) throw ParameterError("probe_states: samples must be positive");
    Rng rng(seed ^ 0x70726f6265ULL);
    out.reserve(static_cast<std::size_t>(samples));
    for (int i = 0; i < samples; ++i) {
        EnvInstance probe = env;
        probe.reset(rng);
        out.push_back(probe.observe());
    }
    return out;
}

// Interpolating two different sequence models against the same retrieval
// context moves total variation by at most 1 - e^{-lambda * dist_first}.
// Returns the worst excess of measured TV over that ceiling across contexts
// (negative when the ceiling holds everywhere with room to spare).
inline double tv_bound_check(const SeqModel& model_a, const SeqModel& model_b,
                             const std::vector<ContextDatapoint>& contexts,
                             const EnvSpec& spec, const InterpConfig& interp = {}) {
    validate(interp);
    if (spec.act_kind != ActKind::discrete)
        throw ParameterError("tv_bound_check: total variation needs a discrete action space");
    if (contexts.empty()) throw ParameterError("tv_bound_check: no contexts");
    double worst = -1.0;
    for (const ContextDatapoint& ctx : contexts) {
        const auto head = [&](const SeqModel& m) {
            const std::vector<std::vector<double>> preds = predict(m, ctx, spec);
            const std::vector<double>& row = preds.back();
            return std::vector<double>(row.begin(), row.begin() + spec.act_dims);
        };
        const std::vector<double> pa = regent_discrete(head(model_a), ctx, spec.act_dims, interp);
        const std::vector<double> pb = regent_discrete(head(model_b), ctx, spec.act_dims, interp);
        double tv = 0.0;
        for (int j = 0; j < spec.act_dims; ++j)
            tv += std::abs(pa[static_cast<std::size_t>(j)] - pb[static_cast<std::size_t>(j)]);
        tv *= 0.5;
        const double ceiling = 1.0 - std::exp(-interp.lambda * ctx.dist_first);
        worst = std::max(worst, tv - ceiling);
    }
    return worst;
}

struct BoundOptions {
    std::uint64_t level_seed = 0;
    std::uint64_t demo_seed = 0;
    int episodes = 500;
    double sticky_p = 0.0;
    double lambda = 10.0;
    Metric metric = Metric::ssim;
    int state_samples = 100000;  // continuous families only
    EnvOverrides overrides{};
};

// Builds a rollout policy from the retrieval index over a demo prefix.
using PolicyBuilder = std::function<Policy(std::shared_ptr<const StateIndex>)>;

// Sweeps retrieval-set sizes on one level. Demos are generated once at the
// largest count and prefixes reused, so the isolation distance is exactly
// non-increasing in the count; the normalizer is calibrated once on the full
// set and shared, keeping every row on the same distance scale.
inline std::vector<BoundReport> bound_experiment(Family family,
                                                 const std::vector<int>& demo_counts,
                                                 const PolicyBuilder& builder,
                                                 std::uint64_t seed,
                                                 const BoundOptions& opt = {}) {
    if (demo_counts.empty()) throw ParameterError("bound_experiment: no demo counts");
    for (std::size_t i = 0; i < demo_counts.size(); ++i) {
        if (demo_counts[i] < 1)
            throw ParameterError("bound_experiment: demo counts must be positive");
        if (i > 0 && demo_counts[i] <= demo_counts[i - 1])
            throw ParameterError("bound_experiment: demo counts must be strictly increasing");
    }
    if (opt.episodes < 2) throw ParameterError("bound_experiment: need at least 2 episodes");

    const int max_count = demo_counts.back();
    const DemoSet full =
        generate_demos(family, opt.level_seed, max_count, opt.demo_seed, opt.overrides);
    const Normalizer norm = calibrate(full, opt.metric);

    EnvInstance env = make_env(family, opt.level_seed, opt.sticky_p, opt.overrides);
    env.spec.random_return = full.spec.random_return;
    env.spec.expert_return = full.spec.expert_return;
    const std::vector<ObsValue> probes = probe_states(env, opt.state_samples, seed);

    std::vector<BoundReport> reports;
    reports.reserve(demo_counts.size());
    for (std::size_t ci = 0; ci < demo_counts.size(); ++ci) {
        const int count = demo_counts[ci];
        DemoSet prefix;
        prefix.spec = full.spec;
        prefix.demos.assign(full.demos.begin(), full.demos.begin() + count);
        prefix.retrieval_ids.resize(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) prefix.retrieval_ids[static_cast<std::size_t>(i)] = i;
        validate(prefix);

        auto index = std::make_shared<StateIndex>(build_index(prefix, opt.metric, norm));
        BoundReport rep;
        rep.env_id = full.spec.env_id;
        rep.n_demos = count;
        rep.lambda = opt.lambda;
        rep.horizon = full.spec.horizon;
        rep.d_isolated = most_isolated_distance(*index, probes);
        rep.bound = suboptimality_bound(rep.horizon, rep.lambda, rep.d_isolated);

        const Policy policy = builder(index);
        const RolloutStats stats =
            rollout(env, policy, opt.episodes, seed ^ (0x626f756e64ULL + ci));
        double var = 0.0;
        for (double r : stats.returns) {
            const double c = r - stats.mean_return;
            var += c * c;
        }
        var /= static_cast<double>(stats.returns.size() - 1);
        rep.empirical_gap = full.spec.expert_return - stats.mean_return;
        rep.gap_se = std::sqrt(var / static_cast<double>(stats.returns.size()));
        reports.push_back(rep);
    }
    return reports;
}

} // namespace regent
