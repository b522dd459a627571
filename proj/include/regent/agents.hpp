#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "regent/core.hpp"
#include "regent/error.hpp"

namespace regent {

// Interpolation weights: the retrieved action gets weight exp(-lambda * d),
// the network the rest. l_scale multiplies the squashed continuous output.
struct InterpConfig {
    double lambda = 10.0;
    double l_scale = 10.0;
};

inline void validate(const InterpConfig& cfg) {
    if (!(cfg.lambda > 0.0)) throw ParameterError("InterpConfig.lambda: must be positive");
    if (!(cfg.l_scale > 0.0)) throw ParameterError("InterpConfig.l_scale: must be positive");
}

// Identity clipped to [-1, 1]; algebraically equal to
// 2 * (relu((x+1)/2) - relu((x-1)/2)) - 1. NaN propagates.
inline double mixed_relu(double x) {
    if (x < -1.0) return -1.0;
    if (x > 1.0) return 1.0;
    return x;
}

// Subgradient used in training; 0 at the kinks.
inline double mixed_relu_grad(double x) { return (x > -1.0 && x < 1.0) ? 1.0 : 0.0; }

inline std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) throw DimensionError("softmax: empty logit vector");
    double mx = logits[0];
    for (double v : logits) {
        if (std::isnan(v)) throw DomainError("softmax: NaN logit");
        mx = std::max(mx, v);
    }
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

// Greedy selection; ties go to the lowest action index.
inline int argmax_index(const std::vector<double>& v) {
    if (v.empty()) throw DimensionError("argmax_index: empty vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return static_cast<int>(best);
}

// Retrieve-and-play: the closest retrieved state's action, verbatim.
inline const ActValue& rnp_action(const ContextDatapoint& ctx) {
    if (ctx.neighbors.empty()) throw ContractViolation("rnp_action: context has no neighbors");
    return ctx.neighbors.front().action;
}

// Softened discrete retrieve-and-play distribution: all mass on a_prime at
// d=0, uniform at d=1, linear in between.
inline std::vector<double> rnp_distribution(int a_prime, double d, int n_act) {
    if (n_act < 2) throw ParameterError("rnp_distribution: n_act must be at least 2");
    if (a_prime < 0 || a_prime >= n_act)
        throw ParameterError("rnp_distribution: a_prime out of range");
    if (!(d >= 0.0 && d <= 1.0))
        throw DomainError("rnp_distribution: d must lie in [0, 1], got " + std::to_string(d));
    std::vector<double> p(static_cast<std::size_t>(n_act), d / n_act);
    p[static_cast<std::size_t>(a_prime)] = (1.0 + (n_act - 1) * (1.0 - d)) / n_act;
    return p;
}

inline double interp_weight(double dist_first, const InterpConfig& cfg) {
    if (!(dist_first >= 0.0 && dist_first <= 1.0))
        throw DomainError("interpolation: dist_first must lie in [0, 1]");
    return std::exp(-cfg.lambda * dist_first);
}

// Discrete interpolated policy: w * softened-R&P + (1-w) * softmax(logits),
// w = exp(-lambda * dist_first). At dist_first = 0 this is exactly the
// R&P one-hot regardless of the logits.
inline std::vector<double> regent_discrete(const std::vector<double>& logits,
                                           const ContextDatapoint& ctx, int n_act,
                                           const InterpConfig& cfg = {}) {
    if (static_cast<int>(logits.size()) != n_act)
        throw DimensionError("regent_discrete: expected " + std::to_string(n_act) +
                             " logits, got " + std::to_string(logits.size()));
    const ActValue& a = rnp_action(ctx);
    if (a.kind != ActKind::discrete)
        throw ContractViolation("regent_discrete: first-neighbor action is not discrete");
    const double w = interp_weight(ctx.dist_first, cfg);
    const std::vector<double> rnp = rnp_distribution(a.index, ctx.dist_first, n_act);
    const std::vector<double> sm = softmax(logits);
    std::vector<double> out(static_cast<std::size_t>(n_act));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * rnp[i] + (1.0 - w) * sm[i];
    return out;
}

// Continuous interpolated policy: w * a' + (1-w) * l_scale * mixed_relu(x),
// elementwise. At dist_first = 0 this returns a' exactly.
inline std::vector<double> regent_continuous(const std::vector<double>& raw_out,
                                             const ContextDatapoint& ctx,
                                             const InterpConfig& cfg = {}) {
    const ActValue& a = rnp_action(ctx);
    if (a.kind != ActKind::continuous)
        throw ContractViolation("regent_continuous: first-neighbor action is not continuous");
    if (a.vec.size() != raw_out.size())
        throw DimensionError("regent_continuous: action length " + std::to_string(a.vec.size()) +
                             " vs network output length " + std::to_string(raw_out.size()));
    for (double v : raw_out)
        if (std::isnan(v)) throw DomainError("regent_continuous: NaN network output");
    const double w = interp_weight(ctx.dist_first, cfg);
    std::vector<double> out(raw_out.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = w * a.vec[i] + (1.0 - w) * cfg.l_scale * mixed_relu(raw_out[i]);
    return out;
}

} // namespace regent
