#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "regent/core.hpp"
#include "regent/error.hpp"
#include "regent/rng.hpp"
#include "regent/threads.hpp"

namespace regent {

enum class Family : std::uint8_t { gridworld = 0, pointmass = 1 };

inline const char* family_name(Family f) {
    return f == Family::gridworld ? "gridworld" : "pointmass";
}

inline Family family_from_name(const std::string& s) {
    if (s == "gridworld") return Family::gridworld;
    if (s == "pointmass") return Family::pointmass;
    throw ParameterError("unknown environment family: " + s);
}

// Level-generation knobs. The defaults define the training family; a variant
// tag plus different knobs defines a held-out family (new visuals via wall
// density, new dynamics via action remapping).
struct EnvOverrides {
    std::string variant;                          // appended to env_id when non-empty
    std::optional<int> grid_size;                 // gridworld, default 8
    std::optional<double> wall_density;           // gridworld, default 0.1
    std::optional<std::vector<int>> action_remap; // gridworld, permutation of 0..4
    std::optional<double> obstacle_radius;        // pointmass, default sampled
    std::optional<int> horizon;
};

struct StepResult {
    ObsValue obs;
    double reward = 0.0;
    bool done = false;
    ActValue executed;    // the action that actually drove the dynamics
    bool sticky = false;  // true when the previous executed action replaced the command
};

// One procedurally generated level. Layout is a pure function of
// (family, level_seed, overrides); episode randomness (start cell, sticky
// coin flips) comes from the rollout's rng streams. Copyable so rollouts can
// run episodes on independent instances.
class EnvInstance {
public:
    static constexpr int kGridActions = 5;  // up, down, left, right, stay
    static constexpr double kGoalRadius = 0.1;
    static constexpr double kDt = 0.1;
    static constexpr double kGain = 4.0;

    EnvSpec spec;
    Family family = Family::gridworld;
    std::uint64_t level_seed = 0;
    double sticky_p = 0.0;

    // gridworld layout
    int grid = 8;
    std::vector<std::uint8_t> walls;  // grid*grid, 1 = wall
    int goal_cell = -1;
    std::array<int, kGridActions> remap{0, 1, 2, 3, 4};  // commanded index -> move

    // pointmass layout
    double goal_x = 0.0, goal_y = 0.0;
    double obs_x = 0.0, obs_y = 0.0, obs_r = 0.0;

    // episode state
    bool in_episode = false;
    bool episode_done = true;
    int t = 0;
    int agent_cell = -1;
    double px = 0.0, py = 0.0;
    std::optional<ActValue> prev_executed;

    bool done() const { return episode_done; }

    ObsValue observe() const {
        require_episode("observe");
        if (family == Family::gridworld) {
            ObsValue o(static_cast<std::size_t>(grid * grid * 3), 0.0);
            for (int cell = 0; cell < grid * grid; ++cell) {
                if (walls[static_cast<std::size_t>(cell)]) o[obs_index(cell, 1)] = 1.0;
            }
            o[obs_index(agent_cell, 0)] = 1.0;
            o[obs_index(goal_cell, 2)] = 1.0;
            return o;
        }
        return ObsValue{px, py, goal_x - px, goal_y - py};
    }

    ObsValue reset(Rng& rng) {
        t = 0;
        prev_executed.reset();
        episode_done = false;
        in_episode = true;
        if (family == Family::gridworld) {
            std::vector<int> candidates;
            for (int cell = 0; cell < grid * grid; ++cell)
                if (!walls[static_cast<std::size_t>(cell)] && cell != goal_cell)
                    candidates.push_back(cell);
            agent_cell = candidates[static_cast<std::size_t>(rng.below(candidates.size()))];
        } else {
            do {
                px = rng.real01() * 2.0 - 1.0;
                py = rng.real01() * 2.0 - 1.0;
            } while (inside_obstacle(px, py) || goal_dist(px, py) < kGoalRadius);
        }
        return observe();
    }

    // Replay support: adopt the agent position recorded in an observation of
    // this level. The static channels must match the level exactly.
    ObsValue reset_to(const ObsValue& recorded) {
        if (static_cast<int>(recorded.size()) != spec.obs_len())
            throw DimensionError("reset_to: observation length mismatch");
        t = 0;
        prev_executed.reset();
        episode_done = false;
        in_episode = true;
        if (family == Family::gridworld) {
            int agent = -1;
            for (int cell = 0; cell < grid * grid; ++cell) {
                const bool wall_bit = recorded[obs_index(cell, 1)] != 0.0;
                const bool goal_bit = recorded[obs_index(cell, 2)] != 0.0;
                if (wall_bit != (walls[static_cast<std::size_t>(cell)] != 0) ||
                    goal_bit != (cell == goal_cell))
                    throw ContractViolation("reset_to: observation is not from this level");
                if (recorded[obs_index(cell, 0)] != 0.0) {
                    if (agent != -1)
                        throw ContractViolation("reset_to: multiple agent cells set");
                    agent = cell;
                }
            }
            if (agent == -1 || walls[static_cast<std::size_t>(agent)] || agent == goal_cell)
                throw ContractViolation("reset_to: invalid agent cell");
            agent_cell = agent;
        } else {
            px = recorded[0];
            py = recorded[1];
            if (recorded[2] != goal_x - px || recorded[3] != goal_y - py)
                throw ContractViolation("reset_to: observation is not from this level");
        }
        return observe();
    }

    // Start an episode at a chosen free, non-goal cell. Demo collection uses
    // this to stratify start states; gridworld only.
    ObsValue reset_at(int cell) {
        if (family != Family::gridworld)
            throw ContractViolation("reset_at: only gridworld supports cell starts");
        if (cell < 0 || cell >= grid * grid || walls[static_cast<std::size_t>(cell)] ||
            cell == goal_cell)
            throw ParameterError("reset_at: cell is not a free start");
        t = 0;
        prev_executed.reset();
        episode_done = false;
        in_episode = true;
        agent_cell = cell;
        return observe();
    }

    StepResult step(const ActValue& commanded, Rng& rng) {
        require_episode("step");
        if (episode_done) throw ContractViolation("step: episode already done");
        validate_action(commanded, spec, "step.action");

        StepResult res;
        res.executed = commanded;
        if (prev_executed && sticky_p > 0.0 && rng.real01() < sticky_p) {
            res.executed = *prev_executed;
            res.sticky = true;
        }

        if (family == Family::gridworld) {
            const int move = remap[static_cast<std::size_t>(res.executed.index)];
            const int next = move_cell(agent_cell, move);
            agent_cell = next;
            res.reward = (agent_cell == goal_cell) ? 1.0 : 0.0;
        } else {
            double vx = std::clamp(res.executed.vec[0], -1.0, 1.0);
            double vy = std::clamp(res.executed.vec[1], -1.0, 1.0);
            const double before = goal_dist(px, py);
            double nx = std::clamp(px + kDt * vx, -1.0, 1.0);
            double ny = std::clamp(py + kDt * vy, -1.0, 1.0);
            if (!inside_obstacle(nx, ny)) {
                px = nx;
                py = ny;
            }
            res.reward = before - goal_dist(px, py);
        }

        prev_executed = res.executed;
        t += 1;
        const bool reached = (family == Family::gridworld)
                                 ? agent_cell == goal_cell
                                 : goal_dist(px, py) < kGoalRadius;
        episode_done = reached || t >= spec.horizon;
        res.done = episode_done;
        res.obs = observe();
        return res;
    }

    // Scripted expert at the current internal state: shortest-path move via
    // breadth-first distances (ties by fixed move order), or a proportional
    // controller that slides around the obstacle.
    ActValue expert_action() const {
        require_episode("expert_action");
        if (family == Family::gridworld) {
            const std::vector<int> dist = bfs_from_goal();
            const int here = dist[static_cast<std::size_t>(agent_cell)];
            if (here < 0) throw ContractViolation("expert_action: goal unreachable");
            int best_move = 4;  // stay
            for (int move = 0; move < 4; ++move) {
                const int next = move_cell(agent_cell, move);
                if (next != agent_cell && dist[static_cast<std::size_t>(next)] == here - 1) {
                    best_move = move;
                    break;
                }
            }
            for (int cmd = 0; cmd < kGridActions; ++cmd)
                if (remap[static_cast<std::size_t>(cmd)] == best_move)
                    return ActValue::discrete(cmd);
            throw ContractViolation("expert_action: remap is not a permutation");
        }
        return pointmass_expert(px, py);
    }

    ActValue sample_random_action(Rng& rng) const {
        if (spec.act_kind == ActKind::discrete)
            return ActValue::discrete(static_cast<int>(rng.below(
                static_cast<std::uint64_t>(spec.act_dims))));
        std::vector<double> v(static_cast<std::size_t>(spec.act_dims));
        for (double& x : v) x = rng.real01() * 2.0 - 1.0;
        return ActValue::continuous(std::move(v));
    }

    // ---- layout internals, public for tests and the theory harness ----

    std::size_t obs_index(int cell, int channel) const {
        return static_cast<std::size_t>(cell * 3 + channel);
    }

    int move_cell(int cell, int move) const {
        const int i = cell / grid, j = cell % grid;
        int ni = i, nj = j;
        switch (move) {
            case 0: ni = i - 1; break;  // up
            case 1: ni = i + 1; break;  // down
            case 2: nj = j - 1; break;  // left
            case 3: nj = j + 1; break;  // right
            default: break;             // stay
        }
        if (ni < 0 || ni >= grid || nj < 0 || nj >= grid) return cell;
        const int next = ni * grid + nj;
        if (walls[static_cast<std::size_t>(next)]) return cell;
        return next;
    }

    std::vector<int> bfs_from_goal() const {
        std::vector<int> dist(static_cast<std::size_t>(grid * grid), -1);
        std::deque<int> queue;
        dist[static_cast<std::size_t>(goal_cell)] = 0;
        queue.push_back(goal_cell);
        while (!queue.empty()) {
            const int cell = queue.front();
            queue.pop_front();
            for (int move = 0; move < 4; ++move) {
                const int next = move_cell(cell, move);
                if (next != cell && dist[static_cast<std::size_t>(next)] < 0) {
                    dist[static_cast<std::size_t>(next)] =
                        dist[static_cast<std::size_t>(cell)] + 1;
                    queue.push_back(next);
                }
            }
        }
        return dist;
    }

    bool inside_obstacle(double x, double y) const {
        const double dx = x - obs_x, dy = y - obs_y;
        return dx * dx + dy * dy < obs_r * obs_r;
    }

    double goal_dist(double x, double y) const {
        return std::hypot(goal_x - x, goal_y - y);
    }

    ActValue pointmass_expert(double x, double y) const {
        const double tgx = goal_x - x, tgy = goal_y - y;
        double ax = std::clamp(kGain * tgx, -1.0, 1.0);
        double ay = std::clamp(kGain * tgy, -1.0, 1.0);
        const double nx = std::clamp(x + kDt * std::clamp(ax, -1.0, 1.0), -1.0, 1.0);
        const double ny = std::clamp(y + kDt * std::clamp(ay, -1.0, 1.0), -1.0, 1.0);
        if (inside_obstacle(nx, ny)) {
            // Slide along the obstacle: tangent direction pointing goalward,
            // plus a gentle outward push.
            double rx = x - obs_x, ry = y - obs_y;
            const double rn = std::hypot(rx, ry);
            if (rn > 0.0) {
                rx /= rn;
                ry /= rn;
            } else {
                rx = 1.0;
                ry = 0.0;
            }
            double tx = -ry, ty = rx;
            if (tx * tgx + ty * tgy < 0.0) {
                tx = -tx;
                ty = -ty;
            }
            ax = std::clamp(kGain * (tx + 0.3 * rx), -1.0, 1.0);
            ay = std::clamp(kGain * (ty + 0.3 * ry), -1.0, 1.0);
        }
        return ActValue::continuous({ax, ay});
    }

private:
    void require_episode(const char* op) const {
        if (!in_episode)
            throw ContractViolation(std::string(op) + ": no episode in progress (call reset)");
    }
};

namespace detail {

inline std::string level_id(Family family, const std::string& variant,
                            std::uint64_t level_seed) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "L%05llu", static_cast<unsigned long long>(level_seed));
    std::string id = family_name(family);
    if (!variant.empty()) id += "-" + variant;
    id += "-";
    id += buf;
    return id;
}

inline bool gridworld_connected(const std::vector<std::uint8_t>& walls, int grid, int goal) {
    std::vector<int> dist(walls.size(), -1);
    std::deque<int> queue;
    dist[static_cast<std::size_t>(goal)] = 0;
    queue.push_back(goal);
    int seen = 1;
    while (!queue.empty()) {
        const int cell = queue.front();
        queue.pop_front();
        const int i = cell / grid, j = cell % grid;
        const int di[4] = {-1, 1, 0, 0};
        const int dj[4] = {0, 0, -1, 1};
        for (int m = 0; m < 4; ++m) {
            const int ni = i + di[m], nj = j + dj[m];
            if (ni < 0 || ni >= grid || nj < 0 || nj >= grid) continue;
            const int next = ni * grid + nj;
            if (walls[static_cast<std::size_t>(next)]) continue;
            if (dist[static_cast<std::size_t>(next)] >= 0) continue;
            dist[static_cast<std::size_t>(next)] = 1;
            queue.push_back(next);
            seen += 1;
        }
    }
    int free_cells = 0;
    for (std::uint8_t w : walls) free_cells += w ? 0 : 1;
    return seen == free_cells && free_cells >= 2;
}

} // namespace detail

// Build a level. The layout (and the expert's solvability from every start)
// is fully determined by (family, level_seed, overrides).
inline EnvInstance make_env(Family family, std::uint64_t level_seed, double sticky_p,
                            const EnvOverrides& ov = {}) {
    if (!(sticky_p >= 0.0 && sticky_p < 1.0))
        throw ParameterError("make_env: sticky_p must lie in [0, 1)");

    EnvInstance env;
    env.family = family;
    env.level_seed = level_seed;
    env.sticky_p = sticky_p;
    env.spec.env_id = detail::level_id(family, ov.variant, level_seed);

    Rng rng(level_seed * 0x9e3779b97f4a7c15ULL + 0x1234567ULL);
    if (family == Family::gridworld) {
        env.grid = ov.grid_size.value_or(8);
        if (env.grid < 3) throw ParameterError("make_env: grid_size must be at least 3");
        const double density = ov.wall_density.value_or(0.1);
        if (!(density >= 0.0 && density < 0.9))
            throw ParameterError("make_env: wall_density must lie in [0, 0.9)");
        if (ov.action_remap) {
            const auto& m = *ov.action_remap;
            std::array<bool, EnvInstance::kGridActions> hit{};
            if (m.size() != EnvInstance::kGridActions)
                throw ParameterError("make_env: action_remap must list 5 moves");
            for (int v : m) {
                if (v < 0 || v >= EnvInstance::kGridActions || hit[static_cast<std::size_t>(v)])
                    throw ParameterError("make_env: action_remap must be a permutation of 0..4");
                hit[static_cast<std::size_t>(v)] = true;
            }
            std::copy(m.begin(), m.end(), env.remap.begin());
        }
        const int cells = env.grid * env.grid;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            env.walls.assign(static_cast<std::size_t>(cells), 0);
            for (auto& w : env.walls) w = rng.real01() < density ? 1 : 0;
            std::vector<int> free_cells;
            for (int c = 0; c < cells; ++c)
                if (!env.walls[static_cast<std::size_t>(c)]) free_cells.push_back(c);
            if (free_cells.size() < 2) continue;
            env.goal_cell =
                free_cells[static_cast<std::size_t>(rng.below(free_cells.size()))];
            if (detail::gridworld_connected(env.walls, env.grid, env.goal_cell)) break;
            env.goal_cell = -1;
        }
        if (env.goal_cell < 0)
            throw ParameterError("make_env: could not generate a connected gridworld level");
        env.spec.obs_kind = ObsKind::image;
        env.spec.obs_dims = {env.grid, env.grid, 3};
        env.spec.act_kind = ActKind::discrete;
        env.spec.act_dims = EnvInstance::kGridActions;
        env.spec.horizon = ov.horizon.value_or(env.grid * env.grid);
        env.spec.random_return = 0.0;  // placeholders until calibrate_returns
        env.spec.expert_return = 1.0;
    } else {
        env.spec.obs_kind = ObsKind::vector;
        env.spec.obs_dims = {4};
        env.spec.act_kind = ActKind::continuous;
        env.spec.act_dims = 2;
        env.spec.horizon = ov.horizon.value_or(60);
        env.spec.random_return = 0.0;
        env.spec.expert_return = 1.0;
        // Resample the layout until the expert solves a deterministic probe
        // grid of starts within the horizon.
        bool solvable = false;
        for (int attempt = 0; attempt < 1000 && !solvable; ++attempt) {
            env.goal_x = rng.real01() * 1.6 - 0.8;
            env.goal_y = rng.real01() * 1.6 - 0.8;
            env.obs_r = ov.obstacle_radius.value_or(0.15 + 0.15 * rng.real01());
            env.obs_x = rng.real01() * 1.2 - 0.6;
            env.obs_y = rng.real01() * 1.2 - 0.6;
            const double sep = std::hypot(env.goal_x - env.obs_x, env.goal_y - env.obs_y);
            if (sep <= env.obs_r + 2.5 * EnvInstance::kGoalRadius) continue;

            solvable = true;
            EnvInstance probe = env;
            probe.sticky_p = 0.0;
            Rng dummy(0);
            for (int gi = 0; gi < 8 && solvable; ++gi) {
                for (int gj = 0; gj < 8 && solvable; ++gj) {
                    const double sx = -0.90625 + 0.25 * gi;
                    const double sy = -0.90625 + 0.25 * gj;
                    if (probe.inside_obstacle(sx, sy)) continue;
                    if (probe.goal_dist(sx, sy) < EnvInstance::kGoalRadius) continue;
                    probe.in_episode = true;
                    probe.episode_done = false;
                    probe.t = 0;
                    probe.prev_executed.reset();
                    probe.px = sx;
                    probe.py = sy;
                    while (!probe.done()) probe.step(probe.expert_action(), dummy);
                    if (probe.goal_dist(probe.px, probe.py) >= EnvInstance::kGoalRadius)
                        solvable = false;
                }
            }
        }
        if (!solvable)
            throw ParameterError(
                "make_env: could not generate a solvable pointmass level from seed " +
                std::to_string(level_seed));
    }
    validate(env.spec);
    return env;
}

// ---- rollouts ----

// Policies see the live environment (for scripted experts), the current
// observation, the previous reward, and the episode's rng stream.
using Policy =
    std::function<ActValue(const EnvInstance&, const ObsValue&, double, Rng&)>;

inline Policy expert_as_policy() {
    return [](const EnvInstance& env, const ObsValue&, double, Rng&) {
        return env.expert_action();
    };
}

inline Policy random_policy() {
    return [](const EnvInstance& env, const ObsValue&, double, Rng& rng) {
        return env.sample_random_action(rng);
    };
}

struct RolloutStats {
    double mean_return = 0.0;
    std::vector<double> returns;   // per episode, in episode order
    std::size_t steps = 0;
    std::size_t sticky_steps = 0;  // steps where the sticky override fired
};

// Runs n_episodes with independent derived rng streams. Episode i's result
// never depends on the worker count.
inline RolloutStats rollout(const EnvInstance& env, const Policy& policy,
                            std::size_t n_episodes, std::uint64_t seed) {
    if (n_episodes == 0) throw ParameterError("rollout: n_episodes must be positive");
    RolloutStats stats;
    stats.returns.resize(n_episodes);
    std::vector<std::size_t> steps(n_episodes, 0), sticky(n_episodes, 0);
    const Rng base(seed);
    parallel_for(n_episodes, [&](std::size_t ep) {
        EnvInstance e = env;
        Rng rng = base.derive(ep);
        ObsValue obs = e.reset(rng);
        double prev_reward = 0.0;
        double total = 0.0;
        while (!e.done()) {
            const ActValue a = policy(e, obs, prev_reward, rng);
            StepResult r = e.step(a, rng);
            total += r.reward;
            prev_reward = r.reward;
            obs = std::move(r.obs);
            steps[ep] += 1;
            sticky[ep] += r.sticky ? 1 : 0;
        }
        stats.returns[ep] = total;
    });
    double sum = 0.0;
    for (double r : stats.returns) sum += r;
    stats.mean_return = sum / static_cast<double>(n_episodes);
    for (std::size_t ep = 0; ep < n_episodes; ++ep) {
        stats.steps += steps[ep];
        stats.sticky_steps += sticky[ep];
    }
    return stats;
}

inline double normalized_return(double raw, const EnvSpec& spec) {
    if (!(spec.expert_return > spec.random_return))
        throw ParameterError("normalized_return: spec has no return gap");
    return (raw - spec.random_return) / (spec.expert_return - spec.random_return);
}

// Fill in the spec's reference returns: gridworld experts always reach the
// goal (return exactly 1); pointmass expert return and both random returns
// are Monte Carlo estimates over 1000 episodes.
inline void calibrate_returns(EnvInstance& env, std::uint64_t seed) {
    EnvInstance clean = env;
    clean.sticky_p = 0.0;
    const RolloutStats rnd = rollout(clean, random_policy(), 1000, seed ^ 0xabcdefULL);
    double expert = 1.0;
    if (env.family == Family::pointmass)
        expert = rollout(clean, expert_as_policy(), 1000, seed ^ 0xfedcbaULL).mean_return;
    env.spec.random_return = rnd.mean_return;
    env.spec.expert_return = expert;
    if (!(env.spec.expert_return > env.spec.random_return))
        throw CalibrationError("calibrate_returns: expert does not beat random on " +
                               env.spec.env_id);
}

// ---- demonstration generation ----

// Expert demonstrations for one level, sticky-free, recorded per the
// (state, previous reward, action) convention: prev_reward of step t+1 is
// the reward earned by action t, and the terminal state is not recorded.
inline DemoSet generate_demos(Family family, std::uint64_t level_seed, std::size_t count,
                              std::uint64_t demo_seed, const EnvOverrides& ov = {}) {
    if (count == 0) throw ParameterError("generate_demos: count must be positive");
    EnvInstance env = make_env(family, level_seed, 0.0, ov);
    calibrate_returns(env, demo_seed ^ level_seed);

    DemoSet set;
    set.spec = env.spec;
    const Rng base(demo_seed);

    // Gridworld starts are sampled without replacement (cycling once every
    // free cell has been used) so a fixed demo budget covers as many distinct
    // start states as possible; iid resets waste budget on repeats.
    std::vector<int> starts;
    if (family == Family::gridworld) {
        for (int cell = 0; cell < env.grid * env.grid; ++cell)
            if (!env.walls[static_cast<std::size_t>(cell)] && cell != env.goal_cell)
                starts.push_back(cell);
        Rng shuffler = base.derive(~std::uint64_t{0});
        shuffler.shuffle(starts);
    }

    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = base.derive(i);
        EnvInstance e = env;
        ObsValue obs = family == Family::gridworld ? e.reset_at(starts[i % starts.size()])
                                                   : e.reset(rng);
        Demonstration demo;
        demo.demo_id = static_cast<std::uint32_t>(i);
        double prev_reward = 0.0;
        while (!e.done()) {
            const ActValue a = e.expert_action();
            Step s;
            s.state = obs;
            s.prev_reward = prev_reward;
            s.action = a;
            demo.steps.push_back(std::move(s));
            StepResult r = e.step(a, rng);
            demo.total_return += r.reward;
            prev_reward = r.reward;
            obs = std::move(r.obs);
        }
        set.demos.push_back(std::move(demo));
    }
    set.retrieval_ids.resize(set.demos.size());
    for (std::size_t i = 0; i < set.retrieval_ids.size(); ++i)
        set.retrieval_ids[i] = static_cast<std::uint32_t>(i);
    validate(set);
    return set;
}

} // namespace regent
