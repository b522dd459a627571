#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "regent/error.hpp"

namespace regent {

enum class ObsKind : std::uint8_t { vector = 0, image = 1 };
enum class ActKind : std::uint8_t { discrete = 0, continuous = 1 };

// Observations are flat row-major doubles; images are H x W x C with the
// channel index fastest. EnvSpec carries the shape.
using ObsValue = std::vector<double>;

struct ActValue {
    ActKind kind = ActKind::discrete;
    int index = 0;               // discrete case
    std::vector<double> vec;     // continuous case

    static ActValue discrete(int a) { return ActValue{ActKind::discrete, a, {}}; }
    static ActValue continuous(std::vector<double> v) {
        return ActValue{ActKind::continuous, 0, std::move(v)};
    }

    bool operator==(const ActValue&) const = default;
};

struct EnvSpec {
    std::string env_id;
    ObsKind obs_kind = ObsKind::vector;
    std::vector<int> obs_dims;   // {len} for vectors, {H, W, C} for images
    ActKind act_kind = ActKind::discrete;
    int act_dims = 2;            // N_act for discrete, vector length otherwise
    int horizon = 1;
    double random_return = 0.0;
    double expert_return = 1.0;

    int obs_len() const {
        return std::accumulate(obs_dims.begin(), obs_dims.end(), 1, std::multiplies<int>());
    }

    bool operator==(const EnvSpec&) const = default;
};

// One (state, previous-reward, action) tuple. prev_reward is the reward
// received on entering this state, so the first step of an episode has 0.
struct Step {
    ObsValue state;
    double prev_reward = 0.0;
    ActValue action;

    bool operator==(const Step&) const = default;
};

struct Demonstration {
    std::uint32_t demo_id = 0;
    std::vector<Step> steps;
    double total_return = 0.0;   // sum of rewards the recorded actions earned

    bool operator==(const Demonstration&) const = default;
};

struct DemoSet {
    EnvSpec spec;
    std::vector<Demonstration> demos;
    std::vector<std::uint32_t> retrieval_ids;   // subset designated for retrieval

    bool operator==(const DemoSet&) const = default;
};

// The unit of training and inference: n retrieved steps ordered closest-first,
// plus the query. query_action is the training target and absent at inference.
struct ContextDatapoint {
    std::string env_id;
    std::vector<Step> neighbors;
    ObsValue query_state;
    double query_prev_reward = 0.0;
    std::optional<ActValue> query_action;
    double dist_first = 0.0;     // normalized distance to neighbors[0], in [0, 1]

    bool operator==(const ContextDatapoint&) const = default;
};

// ---- invariant checks ----

inline void validate(const EnvSpec& spec) {
    if (spec.env_id.empty()) throw ValidationError("EnvSpec.env_id: must be non-empty");
    if (spec.obs_dims.empty()) throw ValidationError("EnvSpec.obs_dims: must be non-empty");
    for (int d : spec.obs_dims)
        if (d <= 0) throw ValidationError("EnvSpec.obs_dims: entries must be positive");
    if (spec.obs_kind == ObsKind::image && spec.obs_dims.size() != 3)
        throw ValidationError("EnvSpec.obs_dims: image observations need H, W, C");
    if (spec.obs_kind == ObsKind::vector && spec.obs_dims.size() != 1)
        throw ValidationError("EnvSpec.obs_dims: vector observations need a single length");
    if (spec.act_kind == ActKind::discrete && spec.act_dims < 2)
        throw ValidationError("EnvSpec.act_dims: discrete action spaces need at least 2 actions");
    if (spec.act_dims <= 0) throw ValidationError("EnvSpec.act_dims: must be positive");
    if (spec.horizon < 1) throw ValidationError("EnvSpec.horizon: must be at least 1");
    if (!(spec.expert_return > spec.random_return))
        throw ValidationError(
            "EnvSpec.expert_return: must exceed random_return for a well-defined "
            "normalized return");
}

inline void validate_action(const ActValue& a, const EnvSpec& spec, const char* where) {
    if (spec.act_kind == ActKind::discrete) {
        if (a.kind != ActKind::discrete)
            throw ValidationError(std::string(where) + ": expected a discrete action");
        if (a.index < 0 || a.index >= spec.act_dims)
            throw ValidationError(std::string(where) + ": action index out of range");
    } else {
        if (a.kind != ActKind::continuous)
            throw ValidationError(std::string(where) + ": expected a continuous action");
        if (static_cast<int>(a.vec.size()) != spec.act_dims)
            throw ValidationError(std::string(where) + ": action vector length mismatch");
    }
}

inline void validate(const Demonstration& demo, const EnvSpec& spec) {
    if (demo.steps.empty())
        throw ValidationError("Demonstration.steps: demo " + std::to_string(demo.demo_id) +
                              " is empty");
    if (static_cast<int>(demo.steps.size()) > spec.horizon)
        throw ValidationError("Demonstration.steps: demo " + std::to_string(demo.demo_id) +
                              " has " + std::to_string(demo.steps.size()) +
                              " steps, exceeding horizon " + std::to_string(spec.horizon));
    for (std::size_t t = 0; t < demo.steps.size(); ++t) {
        const Step& s = demo.steps[t];
        if (static_cast<int>(s.state.size()) != spec.obs_len())
            throw ValidationError("Step.state: wrong length in demo " +
                                  std::to_string(demo.demo_id) + " step " + std::to_string(t));
        if (t == 0 && s.prev_reward != 0.0)
            throw ValidationError("Step.prev_reward: first step of demo " +
                                  std::to_string(demo.demo_id) + " must be 0");
        validate_action(s.action, spec, "Step.action");
    }
}

inline void validate(const DemoSet& set) {
    validate(set.spec);
    std::vector<bool> seen;
    for (const auto& d : set.demos) {
        validate(d, set.spec);
        if (d.demo_id >= set.demos.size())
            throw ValidationError("Demonstration.demo_id: ids must be dense from 0");
        if (seen.size() < set.demos.size()) seen.resize(set.demos.size(), false);
        if (seen[d.demo_id])
            throw ValidationError("Demonstration.demo_id: duplicate id " +
                                  std::to_string(d.demo_id));
        seen[d.demo_id] = true;
    }
    std::vector<bool> designated(set.demos.size(), false);
    for (std::uint32_t id : set.retrieval_ids) {
        if (id >= set.demos.size())
            throw ValidationError("DemoSet.retrieval_ids: id " + std::to_string(id) +
                                  " not present in demos");
        if (designated[id])
            throw ValidationError("DemoSet.retrieval_ids: duplicate id " + std::to_string(id));
        designated[id] = true;
    }
}

inline std::size_t total_steps(const DemoSet& set) {
    std::size_t n = 0;
    for (const auto& d : set.demos) n += d.steps.size();
    return n;
}

} // namespace regent
