#pragma once

#include <algorithm>
#include <memory>
#include <vector>

#include "regent/agents.hpp"
#include "regent/envs.hpp"
#include "regent/retrieval.hpp"
#include "regent/seqmodel.hpp"

namespace regent {

// Deployment adapters that close over a retrieval index (and optionally a
// sequence model) to produce per-step Policy callables for rollouts.

struct PolicyOptions {
    int context_len = 19;
    InterpConfig interp{};
    bool sample = false;           // discrete: sample the mixture vs argmax
    bool clamp_continuous = true;  // keep emitted actions inside [-1, 1]
};

// Plays the action of the single nearest retrieved state.
inline Policy make_rnp_policy(std::shared_ptr<const StateIndex> index) {
    if (!index) throw ParameterError("make_rnp_policy: null index");
    return [index](const EnvInstance&, const ObsValue& obs, double prev_reward, Rng&) {
        const ContextDatapoint ctx = build_context(*index, obs, prev_reward, 1);
        return rnp_action(ctx);
    };
}

namespace detail {

inline int sample_discrete(const std::vector<double>& probs, Rng& rng) {
    const double u = rng.real01();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

} // namespace detail

// Interpolates the retrieve-and-play action with the sequence model's output
// for the query position. Continuous outputs are clamped back into the
// action box when requested, since the scaled squash can leave it.
inline Policy make_regent_policy(std::shared_ptr<const StateIndex> index,
                                 std::shared_ptr<const SeqModel> model,
                                 PolicyOptions opt = {}) {
    if (!index) throw ParameterError("make_regent_policy: null index");
    if (!model) throw ParameterError("make_regent_policy: null model");
    if (opt.context_len < 1) throw ParameterError("make_regent_policy: context_len must be positive");
    validate(opt.interp);
    return [index, model, opt](const EnvInstance&, const ObsValue& obs, double prev_reward,
                               Rng& rng) {
        const ContextDatapoint ctx = build_context(*index, obs, prev_reward, opt.context_len);
        const EnvSpec& spec = index->spec;
        const std::vector<std::vector<double>> preds = predict(*model, ctx, spec);
        const std::vector<double>& query_row = preds.back();
        if (spec.act_kind == ActKind::discrete) {
            const std::vector<double> head(query_row.begin(),
                                           query_row.begin() + spec.act_dims);
            const std::vector<double> mixture =
                regent_discrete(head, ctx, spec.act_dims, opt.interp);
            const int a = opt.sample ? detail::sample_discrete(mixture, rng)
                                     : static_cast<int>(argmax_index(mixture));
            return ActValue::discrete(a);
        }
        const std::vector<double> head(query_row.begin(), query_row.begin() + spec.act_dims);
        std::vector<double> act = regent_continuous(head, ctx, opt.interp);
        if (opt.clamp_continuous)
            for (double& v : act) v = std::clamp(v, -1.0, 1.0);
        return ActValue::continuous(std::move(act));
    };
}

} // namespace regent
