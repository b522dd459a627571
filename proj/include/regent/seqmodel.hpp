#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "regent/agents.hpp"
#include "regent/core.hpp"
#include "regent/distance.hpp"
#include "regent/error.hpp"
#include "regent/io.hpp"
#include "regent/retrieval.hpp"
#include "regent/rng.hpp"

namespace regent {

// Causal sequence policy: a continuous-input encoder shared by observations
// and continuous actions, a discrete-action lookup table, learned positional
// embeddings, a pre-norm transformer trunk, and zero-initialized action
// heads. All math is double precision on flat parameter arrays with manual
// backprop, so training is deterministic to the bit for a fixed seed.

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 2;
    int hidden = 64;
    int max_positions = 40;    // 2 * (context_len + 1)
    int max_cont_input = 0;    // longest observation + 1 for the reward
    int n_act_max = 5;         // discrete head width
    std::uint64_t seed = 0;

    bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& cfg) {
    if (cfg.n_layers < 1) throw ParameterError("ModelConfig.n_layers: must be positive");
    if (cfg.n_heads < 1) throw ParameterError("ModelConfig.n_heads: must be positive");
    if (cfg.hidden < 1) throw ParameterError("ModelConfig.hidden: must be positive");
    if (cfg.hidden % cfg.n_heads != 0)
        throw ParameterError("ModelConfig.hidden: must be divisible by n_heads");
    if (cfg.max_positions < 4 || cfg.max_positions % 2 != 0)
        throw ParameterError("ModelConfig.max_positions: must be an even count of at least 4");
    if (cfg.max_cont_input < 2)
        throw ParameterError("ModelConfig.max_cont_input: must be at least 2");
    if (cfg.n_act_max < 2)
        throw ParameterError("ModelConfig.n_act_max: must be at least 2");
}

// Offsets of every parameter block inside the flat array. Matrices are
// row-major with shape (out x in).
struct ParamLayout {
    struct Layer {
        std::size_t ln1_g, ln1_b;
        std::size_t qkv_w, qkv_b;    // (3h x h), (3h)
        std::size_t ao_w, ao_b;      // (h x h), (h)
        std::size_t ln2_g, ln2_b;
        std::size_t m1_w, m1_b;      // (4h x h), (4h)
        std::size_t m2_w, m2_b;      // (h x 4h), (h)
    };
    std::size_t enc_w = 0, enc_b = 0;   // (h x mci), (h)
    std::size_t act_table = 0;          // (n_act_max x h)
    std::size_t wpe = 0;                // (max_positions x h)
    std::vector<Layer> layers;
    std::size_t lnf_g = 0, lnf_b = 0;
    std::size_t head_d_w = 0, head_d_b = 0;  // (n_act_max x h), (n_act_max)
    std::size_t head_c_w = 0, head_c_b = 0;  // (mci x h), (mci)
    std::size_t total = 0;
};

inline ParamLayout build_layout(const ModelConfig& cfg) {
    validate(cfg);
    const std::size_t h = static_cast<std::size_t>(cfg.hidden);
    const std::size_t mci = static_cast<std::size_t>(cfg.max_cont_input);
    const std::size_t na = static_cast<std::size_t>(cfg.n_act_max);
    ParamLayout lay;
    std::size_t at = 0;
    const auto take = [&](std::size_t n) {
        const std::size_t ofs = at;
        at += n;
        return ofs;
    };
    lay.enc_w = take(h * mci);
    lay.enc_b = take(h);
    lay.act_table = take(na * h);
    lay.wpe = take(static_cast<std::size_t>(cfg.max_positions) * h);
    lay.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : lay.layers) {
        l.ln1_g = take(h);
        l.ln1_b = take(h);
        l.qkv_w = take(3 * h * h);
        l.qkv_b = take(3 * h);
        l.ao_w = take(h * h);
        l.ao_b = take(h);
        l.ln2_g = take(h);
        l.ln2_b = take(h);
        l.m1_w = take(4 * h * h);
        l.m1_b = take(4 * h);
        l.m2_w = take(h * 4 * h);
        l.m2_b = take(h);
    }
    lay.lnf_g = take(h);
    lay.lnf_b = take(h);
    lay.head_d_w = take(na * h);
    lay.head_d_b = take(na);
    lay.head_c_w = take(mci * h);
    lay.head_c_b = take(mci);
    lay.total = at;
    return lay;
}

// Closed form of the layout size, asserted against construction in tests:
// h*(mci+1) + na*h + P*h + L*(12h^2 + 13h) + 2h + (na+mci)*(h+1).
inline std::size_t param_count(const ModelConfig& cfg) {
    const std::size_t h = static_cast<std::size_t>(cfg.hidden);
    const std::size_t mci = static_cast<std::size_t>(cfg.max_cont_input);
    const std::size_t na = static_cast<std::size_t>(cfg.n_act_max);
    const std::size_t P = static_cast<std::size_t>(cfg.max_positions);
    const std::size_t L = static_cast<std::size_t>(cfg.n_layers);
    return h * (mci + 1) + na * h + P * h + L * (12 * h * h + 13 * h) + 2 * h +
           (na + mci) * (h + 1);
}

struct SeqModel {
    ModelConfig cfg;
    std::vector<double> params;
};

// Trunk and embeddings start from a zero-mean normal with std 1/sqrt(hidden),
// layernorm gains at 1, and both heads at exactly zero, so an untrained
// policy adds nothing to the retrieved action.
inline SeqModel init_model(const ModelConfig& cfg) {
    const ParamLayout lay = build_layout(cfg);
    SeqModel m;
    m.cfg = cfg;
    m.params.assign(lay.total, 0.0);
    Rng rng(cfg.seed ^ 0x6d6f64656cULL);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    const auto fill_normal = [&](std::size_t ofs, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) m.params[ofs + i] = scale * rng.normal();
    };
    const auto fill_ones = [&](std::size_t ofs, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) m.params[ofs + i] = 1.0;
    };
    const std::size_t h = static_cast<std::size_t>(cfg.hidden);
    fill_normal(lay.enc_w, h * static_cast<std::size_t>(cfg.max_cont_input));
    fill_normal(lay.act_table, static_cast<std::size_t>(cfg.n_act_max) * h);
    fill_normal(lay.wpe, static_cast<std::size_t>(cfg.max_positions) * h);
    for (const auto& l : lay.layers) {
        fill_ones(l.ln1_g, h);
        fill_normal(l.qkv_w, 3 * h * h);
        fill_normal(l.ao_w, h * h);
        fill_ones(l.ln2_g, h);
        fill_normal(l.m1_w, 4 * h * h);
        fill_normal(l.m2_w, h * 4 * h);
    }
    fill_ones(lay.lnf_g, h);
    return m;
}

// ---- checkpoint container, version 1 ----

inline constexpr char kCheckpointMagic[9] = "RGNTCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const SeqModel& m) {
    if (m.params.size() != build_layout(m.cfg).total)
        throw ValidationError("checkpoint: parameter array does not match config");
    ByteWriter w;
    write_magic(w, kCheckpointMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(m.cfg.n_layers));
    w.u32(static_cast<std::uint32_t>(m.cfg.n_heads));
    w.u32(static_cast<std::uint32_t>(m.cfg.hidden));
    w.u32(static_cast<std::uint32_t>(m.cfg.max_positions));
    w.u32(static_cast<std::uint32_t>(m.cfg.max_cont_input));
    w.u32(static_cast<std::uint32_t>(m.cfg.n_act_max));
    w.u64(m.cfg.seed);
    w.u64(m.params.size());
    for (double p : m.params) w.f64(p);
    return w.bytes();
}

inline SeqModel decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    expect_magic(r, kCheckpointMagic, "checkpoint");
    expect_version(r, kCheckpointVersion, "checkpoint");
    SeqModel m;
    m.cfg.n_layers = static_cast<int>(r.u32());
    m.cfg.n_heads = static_cast<int>(r.u32());
    m.cfg.hidden = static_cast<int>(r.u32());
    m.cfg.max_positions = static_cast<int>(r.u32());
    m.cfg.max_cont_input = static_cast<int>(r.u32());
    m.cfg.n_act_max = static_cast<int>(r.u32());
    m.cfg.seed = r.u64();
    const std::uint64_t n = r.u64();
    if (n != build_layout(m.cfg).total)
        throw FormatError("checkpoint: parameter count does not match config");
    m.params.resize(static_cast<std::size_t>(n));
    for (auto& p : m.params) p = r.f64();
    return m;
}

inline void save_checkpoint(const std::string& path, const SeqModel& m) {
    write_file(path, encode_checkpoint(m));
}

inline SeqModel load_checkpoint(const std::string& path) {
    return decode_checkpoint(read_file(path));
}

// ---- sequence encoding ----

// Continuous inputs shorter than the encoder width are cyclically repeated:
// [v0,v1,v2] with reward r into width 8 becomes [v0,v1,v2,r,v0,v1,v2,r].
inline std::vector<double> cyclic_pad(const std::vector<double>& v, int width) {
    if (v.empty()) throw DimensionError("cyclic_pad: empty input");
    if (static_cast<int>(v.size()) > width)
        throw ConfigError("cyclic_pad: input length " + std::to_string(v.size()) +
                          " exceeds encoder width " + std::to_string(width));
    std::vector<double> out(static_cast<std::size_t>(width));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i % v.size()];
    return out;
}

// Token provenance, kept so gradients can flow back into the right
// embedding parameters.
struct TokenSrc {
    enum Kind { cont = 0, discrete = 1, dummy = 2 } kind = dummy;
    std::vector<double> padded;  // kind == cont: encoder input of width mci
    int act_index = 0;           // kind == discrete
};

struct Encoded {
    int T = 0;             // 2 * (context_len + 1)
    int context_len = 0;   // neighbors in the context
    std::vector<double> emb;  // T x hidden, token + positional
    std::vector<TokenSrc> src;
};

// Interleaves [s0 r0, a0, s1 r1, a1, ..., sq rq, aq] where the final action
// slot holds the training target when present and an all-zero dummy at
// inference; strict causality keeps it out of every prediction.
inline Encoded encode_sequence(const ContextDatapoint& ctx, const EnvSpec& spec,
                               const SeqModel& model) {
    if (ctx.neighbors.empty())
        throw ContractViolation("encode_sequence: context has no neighbors");
    const ModelConfig& cfg = model.cfg;
    const ParamLayout lay = build_layout(cfg);
    const int cl = static_cast<int>(ctx.neighbors.size());
    const int T = 2 * (cl + 1);
    if (T > cfg.max_positions)
        throw ConfigError("encode_sequence: sequence of " + std::to_string(T) +
                          " tokens exceeds max_positions " +
                          std::to_string(cfg.max_positions));
    if (spec.obs_len() + 1 > cfg.max_cont_input)
        throw ConfigError("encode_sequence: observation length " +
                          std::to_string(spec.obs_len()) +
                          " does not fit max_cont_input " +
                          std::to_string(cfg.max_cont_input));

    const std::size_t h = static_cast<std::size_t>(cfg.hidden);
    Encoded enc;
    enc.T = T;
    enc.context_len = cl;
    enc.emb.assign(static_cast<std::size_t>(T) * h, 0.0);
    enc.src.resize(static_cast<std::size_t>(T));

    const auto emit_cont = [&](int pos, std::vector<double> padded) {
        double* out = enc.emb.data() + static_cast<std::size_t>(pos) * h;
        for (std::size_t o = 0; o < h; ++o) {
            double acc = model.params[lay.enc_b + o];
            const double* row =
                model.params.data() + lay.enc_w + o * static_cast<std::size_t>(cfg.max_cont_input);
            for (std::size_t i = 0; i < padded.size(); ++i) acc += row[i] * padded[i];
            out[o] = acc;
        }
        enc.src[static_cast<std::size_t>(pos)] = {TokenSrc::cont, std::move(padded), 0};
    };
    const auto emit_action = [&](int pos, const ActValue& a) {
        if (spec.act_kind == ActKind::discrete) {
            if (a.index >= cfg.n_act_max)
                throw ConfigError("encode_sequence: action index exceeds n_act_max");
            double* out = enc.emb.data() + static_cast<std::size_t>(pos) * h;
            const double* row =
                model.params.data() + lay.act_table + static_cast<std::size_t>(a.index) * h;
            for (std::size_t o = 0; o < h; ++o) out[o] = row[o];
            enc.src[static_cast<std::size_t>(pos)] = {TokenSrc::discrete, {}, a.index};
        } else {
            emit_cont(pos, cyclic_pad(a.vec, cfg.max_cont_input));
        }
    };
    const auto state_reward = [&](const ObsValue& s, double r) {
        std::vector<double> v = s;
        v.push_back(r);
        return cyclic_pad(v, cfg.max_cont_input);
    };

    for (int i = 0; i < cl; ++i) {
        const Step& nb = ctx.neighbors[static_cast<std::size_t>(i)];
        emit_cont(2 * i, state_reward(nb.state, nb.prev_reward));
        emit_action(2 * i + 1, nb.action);
    }
    emit_cont(2 * cl, state_reward(ctx.query_state, ctx.query_prev_reward));
    if (ctx.query_action) {
        emit_action(T - 1, *ctx.query_action);
    } else {
        enc.src[static_cast<std::size_t>(T - 1)] = {TokenSrc::dummy, {}, 0};
    }

    for (int p = 0; p < T; ++p) {
        double* out = enc.emb.data() + static_cast<std::size_t>(p) * h;
        const double* pe = model.params.data() + lay.wpe + static_cast<std::size_t>(p) * h;
        for (std::size_t o = 0; o < h; ++o) out[o] += pe[o];
    }
    return enc;
}

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double th = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

// y = g * (x - mean)/sqrt(var + eps) + b; stores xhat and rstd for backward.
inline void layernorm_fwd(const double* x, const double* g, const double* b, std::size_t h,
                          double* y, double* xhat, double* rstd) {
    double mu = 0.0;
    for (std::size_t i = 0; i < h; ++i) mu += x[i];
    mu /= static_cast<double>(h);
    double var = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
        const double c = x[i] - mu;
        var += c * c;
    }
    var /= static_cast<double>(h);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    *rstd = rs;
    for (std::size_t i = 0; i < h; ++i) {
        xhat[i] = (x[i] - mu) * rs;
        y[i] = g[i] * xhat[i] + b[i];
    }
}

inline void layernorm_bwd(const double* dy, const double* xhat, double rstd, const double* g,
                          std::size_t h, double* dx, double* dg, double* db) {
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
        const double dxh = dy[i] * g[i];
        sum_dxhat += dxh;
        sum_dxhat_xhat += dxh * xhat[i];
        dg[i] += dy[i] * xhat[i];
        db[i] += dy[i];
    }
    const double inv_h = 1.0 / static_cast<double>(h);
    for (std::size_t i = 0; i < h; ++i) {
        const double dxh = dy[i] * g[i];
        dx[i] += rstd * (dxh - inv_h * sum_dxhat - xhat[i] * inv_h * sum_dxhat_xhat);
    }
}

// y = W x + b with W (out x in) row-major.
inline void linear_fwd(const double* W, const double* b, const double* x, std::size_t out,
                       std::size_t in, double* y) {
    for (std::size_t o = 0; o < out; ++o) {
        double acc = b ? b[o] : 0.0;
        const double* row = W + o * in;
        for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
        y[o] = acc;
    }
}

inline void linear_bwd(const double* W, const double* x, const double* dy, std::size_t out,
                       std::size_t in, double* dW, double* db, double* dx) {
    for (std::size_t o = 0; o < out; ++o) {
        const double g = dy[o];
        const double* row = W + o * in;
        double* grow = dW + o * in;
        for (std::size_t i = 0; i < in; ++i) {
            grow[i] += g * x[i];
            if (dx) dx[i] += g * row[i];
        }
        if (db) db[o] += g;
    }
}

} // namespace detail

// Everything the backward pass needs, per sequence.
struct FwdCache {
    int T = 0;
    struct LayerCache {
        std::vector<double> x_in;      // T x h, layer input
        std::vector<double> ln1_xhat;  // T x h
        std::vector<double> ln1_rstd;  // T
        std::vector<double> ln1_out;   // T x h
        std::vector<double> qkv;       // T x 3h
        std::vector<double> probs;     // heads x T x T, causal softmax rows
        std::vector<double> mix;       // T x h, concatenated head outputs
        std::vector<double> x_mid;     // T x h, after attention residual
        std::vector<double> ln2_xhat;
        std::vector<double> ln2_rstd;
        std::vector<double> ln2_out;
        std::vector<double> h1;        // T x 4h, pre-activation
        std::vector<double> act;       // T x 4h, gelu output
    };
    std::vector<LayerCache> layers;
    std::vector<double> x_last;    // T x h
    std::vector<double> lnf_xhat;  // T x h
    std::vector<double> lnf_rstd;  // T
    std::vector<double> lnf_out;   // T x h
};

// Runs the trunk; per-position final hidden states land in cache.lnf_out.
inline void forward_trunk(const SeqModel& model, const Encoded& enc, FwdCache& cache) {
    const ModelConfig& cfg = model.cfg;
    const ParamLayout lay = build_layout(cfg);
    const std::size_t h = static_cast<std::size_t>(cfg.hidden);
    const std::size_t T = static_cast<std::size_t>(enc.T);
    const std::size_t nh = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t hd = h / nh;
    const double iscale = 1.0 / std::sqrt(static_cast<double>(hd));
    const double* P = model.params.data();

    cache.T = enc.T;
    cache.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    std::vector<double> x = enc.emb;

    for (int l = 0; l < cfg.n_layers; ++l) {
        auto& lc = cache.layers[static_cast<std::size_t>(l)];
        const auto& lw = lay.layers[static_cast<std::size_t>(l)];
        lc.x_in = x;
        lc.ln1_xhat.assign(T * h, 0.0);
        lc.ln1_rstd.assign(T, 0.0);
        lc.ln1_out.assign(T * h, 0.0);
        lc.qkv.assign(T * 3 * h, 0.0);
        lc.probs.assign(nh * T * T, 0.0);
        lc.mix.assign(T * h, 0.0);

        for (std::size_t t = 0; t < T; ++t) {
            detail::layernorm_fwd(x.data() + t * h, P + lw.ln1_g, P + lw.ln1_b, h,
                                  lc.ln1_out.data() + t * h, lc.ln1_xhat.data() + t * h,
                                  &lc.ln1_rstd[t]);
            detail::linear_fwd(P + lw.qkv_w, P + lw.qkv_b, lc.ln1_out.data() + t * h, 3 * h, h,
                               lc.qkv.data() + t * 3 * h);
        }
        for (std::size_t hd_i = 0; hd_i < nh; ++hd_i) {
            const std::size_t qo = hd_i * hd, ko = h + hd_i * hd, vo = 2 * h + hd_i * hd;
            for (std::size_t t = 0; t < T; ++t) {
                double* prow = lc.probs.data() + (hd_i * T + t) * T;
                const double* q = lc.qkv.data() + t * 3 * h + qo;
                double mx = -1e300;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* k = lc.qkv.data() + s * 3 * h + ko;
                    double sc = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) sc += q[i] * k[i];
                    prow[s] = sc * iscale;
                    mx = std::max(mx, prow[s]);
                }
                double z = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    prow[s] = std::exp(prow[s] - mx);
                    z += prow[s];
                }
                for (std::size_t s = 0; s <= t; ++s) prow[s] /= z;
                double* mrow = lc.mix.data() + t * h + hd_i * hd;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = lc.qkv.data() + s * 3 * h + vo;
                    for (std::size_t i = 0; i < hd; ++i) mrow[i] += prow[s] * v[i];
                }
            }
        }
        std::vector<double> attno(h);
        for (std::size_t t = 0; t < T; ++t) {
            detail::linear_fwd(P + lw.ao_w, P + lw.ao_b, lc.mix.data() + t * h, h, h,
                               attno.data());
            for (std::size_t i = 0; i < h; ++i) x[t * h + i] += attno[i];
        }
        lc.x_mid = x;

        lc.ln2_xhat.assign(T * h, 0.0);
        lc.ln2_rstd.assign(T, 0.0);
        lc.ln2_out.assign(T * h, 0.0);
        lc.h1.assign(T * 4 * h, 0.0);
        lc.act.assign(T * 4 * h, 0.0);
        std::vector<double> m2(h);
        for (std::size_t t = 0; t < T; ++t) {
            detail::layernorm_fwd(x.data() + t * h, P + lw.ln2_g, P + lw.ln2_b, h,
                                  lc.ln2_out.data() + t * h, lc.ln2_xhat.data() + t * h,
                                  &lc.ln2_rstd[t]);
            detail::linear_fwd(P + lw.m1_w, P + lw.m1_b, lc.ln2_out.data() + t * h, 4 * h, h,
                               lc.h1.data() + t * 4 * h);
            for (std::size_t i = 0; i < 4 * h; ++i)
                lc.act[t * 4 * h + i] = detail::gelu(lc.h1[t * 4 * h + i]);
            detail::linear_fwd(P + lw.m2_w, P + lw.m2_b, lc.act.data() + t * 4 * h, h, 4 * h,
                               m2.data());
            for (std::size_t i = 0; i < h; ++i) x[t * h + i] += m2[i];
        }
    }

    cache.x_last = x;
    cache.lnf_xhat.assign(T * h, 0.0);
    cache.lnf_rstd.assign(T, 0.0);
    cache.lnf_out.assign(T * h, 0.0);
    for (std::size_t t = 0; t < T; ++t)
        detail::layernorm_fwd(x.data() + t * h, P + lay.lnf_g, P + lay.lnf_b, h,
                              cache.lnf_out.data() + t * h, cache.lnf_xhat.data() + t * h,
                              &cache.lnf_rstd[t]);
}

// Head outputs at every state-token position (full head width; callers slice
// the environment's prefix). Row i predicts the action for context state i;
// the last row predicts the query action.
inline std::vector<std::vector<double>> predict(const SeqModel& model,
                                                const ContextDatapoint& ctx,
                                                const EnvSpec& spec) {
    const Encoded enc = encode_sequence(ctx, spec, model);
    FwdCache cache;
    forward_trunk(model, enc, cache);
    const ParamLayout lay = build_layout(model.cfg);
    const std::size_t h = static_cast<std::size_t>(model.cfg.hidden);
    const bool discrete = spec.act_kind == ActKind::discrete;
    const std::size_t width = discrete ? static_cast<std::size_t>(model.cfg.n_act_max)
                                       : static_cast<std::size_t>(model.cfg.max_cont_input);
    const std::size_t w_ofs = discrete ? lay.head_d_w : lay.head_c_w;
    const std::size_t b_ofs = discrete ? lay.head_d_b : lay.head_c_b;

    std::vector<std::vector<double>> preds(static_cast<std::size_t>(enc.context_len) + 1);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        preds[i].assign(width, 0.0);
        detail::linear_fwd(model.params.data() + w_ofs, model.params.data() + b_ofs,
                           cache.lnf_out.data() + (2 * i) * h, width, h, preds[i].data());
    }
    return preds;
}

// ---- training ----

// Distance reading for context-position predictions (the query always uses
// dist_first to its closest neighbor). to_first measures every context state
// against neighbor 0 and supervises against neighbor 0's action; own_nearest
// measures against the state's nearest other context member.
enum class CtxDistMode : std::uint8_t { to_first = 0, own_nearest = 1 };

struct TrainConfig {
    int batch_size = 16;
    double lr_start = 5e-5;
    int epochs = 3;                     // nominal linear-decay schedule length
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.0;
    bool single_env_batches = true;
    bool through_interpolation = true;  // loss on the interpolated policy
    CtxDistMode ctx_dist = CtxDistMode::to_first;
    double clip_norm = 1.0;             // global gradient-norm ceiling; 0 disables
    std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& cfg) {
    if (cfg.batch_size < 1) throw ParameterError("TrainConfig.batch_size: must be positive");
    if (!(cfg.lr_start > 0.0)) throw ParameterError("TrainConfig.lr_start: must be positive");
    if (cfg.epochs < 0) throw ParameterError("TrainConfig.epochs: must be non-negative");
    if (!(cfg.beta1 > 0.0 && cfg.beta1 < 1.0))
        throw ParameterError("TrainConfig.beta1: must lie in (0, 1)");
    if (!(cfg.beta2 > 0.0 && cfg.beta2 < 1.0))
        throw ParameterError("TrainConfig.beta2: must lie in (0, 1)");
    if (cfg.weight_decay < 0.0)
        throw ParameterError("TrainConfig.weight_decay: must be non-negative");
    if (cfg.clip_norm < 0.0)
        throw ParameterError("TrainConfig.clip_norm: must be non-negative");
}

// Per state position: the interpolation distance, the retrieved reference
// action, and the supervised target.
struct PositionTask {
    double d = 0.0;
    const ActValue* reference = nullptr;
    const ActValue* target = nullptr;
};

inline std::vector<PositionTask> position_tasks(const ContextDatapoint& ctx,
                                                const EnvSpec& spec, Metric metric,
                                                const Normalizer& norm, CtxDistMode mode,
                                                const SsimParams& ssim = {}) {
    if (!ctx.query_action)
        throw ContractViolation("position_tasks: datapoint has no training target");
    const std::size_t cl = ctx.neighbors.size();
    std::vector<PositionTask> tasks(cl + 1);
    for (std::size_t i = 0; i < cl; ++i) {
        const Step& s = ctx.neighbors[i];
        std::size_t ref = 0;
        if (mode == CtxDistMode::own_nearest && cl > 1) {
            double best = -1.0;
            for (std::size_t j = 0; j < cl; ++j) {
                if (j == i) continue;
                const double dj =
                    state_distance(spec, metric, s.state, ctx.neighbors[j].state, ssim);
                if (best < 0.0 || dj < best) {
                    best = dj;
                    ref = j;
                }
            }
        }
        const double raw = (i == ref) ? 0.0
                                      : state_distance(spec, metric, s.state,
                                                       ctx.neighbors[ref].state, ssim);
        tasks[i].d = normalize(norm, raw);
        tasks[i].reference = &ctx.neighbors[ref].action;
        tasks[i].target = &s.action;
    }
    tasks[cl].d = ctx.dist_first;
    tasks[cl].reference = &ctx.neighbors.front().action;
    tasks[cl].target = &*ctx.query_action;
    return tasks;
}

// Loss over all context_len + 1 action predictions, with gradients
// accumulated into grad (same layout as params) when non-null. Discrete
// positions contribute cross-entropy of the interpolated distribution;
// continuous positions the per-dimension mean squared error of the
// interpolated action. The retrieved branch carries no gradient.
inline double loss_and_grad(const SeqModel& model, const ContextDatapoint& ctx,
                            const EnvSpec& spec, Metric metric, const Normalizer& norm,
                            const InterpConfig& interp, const TrainConfig& tcfg,
                            std::vector<double>* grad, const SsimParams& ssim = {}) {
    const ModelConfig& cfg = model.cfg;
    const ParamLayout lay = build_layout(cfg);
    const std::size_t h = static_cast<std::size_t>(cfg.hidden);
    const bool discrete = spec.act_kind == ActKind::discrete;
    const std::size_t width = discrete ? static_cast<std::size_t>(cfg.n_act_max)
                                       : static_cast<std::size_t>(cfg.max_cont_input);
    const std::size_t slice = static_cast<std::size_t>(spec.act_dims);
    if (discrete && spec.act_dims > cfg.n_act_max)
        throw ConfigError("loss: action count exceeds the discrete head width");
    if (!discrete && spec.act_dims > cfg.max_cont_input)
        throw ConfigError("loss: action length exceeds the continuous head width");

    const Encoded enc = encode_sequence(ctx, spec, model);
    FwdCache cache;
    forward_trunk(model, enc, cache);
    const std::vector<PositionTask> tasks =
        position_tasks(ctx, spec, metric, norm, tcfg.ctx_dist, ssim);

    const std::size_t w_ofs = discrete ? lay.head_d_w : lay.head_c_w;
    const std::size_t b_ofs = discrete ? lay.head_d_b : lay.head_c_b;
    const double* P = model.params.data();
    const std::size_t T = static_cast<std::size_t>(enc.T);

    double total_loss = 0.0;
    std::vector<double> dlnf(T * h, 0.0);  // gradient wrt cache.lnf_out
    std::vector<double> out(width), dout(width);

    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const PositionTask& task = tasks[i];
        const std::size_t pos = 2 * i;
        detail::linear_fwd(P + w_ofs, P + b_ofs, cache.lnf_out.data() + pos * h, width, h,
                           out.data());
        std::fill(dout.begin(), dout.end(), 0.0);
        const double w = tcfg.through_interpolation ? interp_weight(task.d, interp) : 0.0;

        if (discrete) {
            const std::vector<double> logits(out.begin(),
                                             out.begin() + static_cast<std::ptrdiff_t>(slice));
            const std::vector<double> sm = softmax(logits);
            std::vector<double> q = sm;
            if (tcfg.through_interpolation) {
                const std::vector<double> rnp = rnp_distribution(
                    task.reference->index, task.d, static_cast<int>(slice));
                for (std::size_t j = 0; j < slice; ++j) q[j] = w * rnp[j] + (1.0 - w) * sm[j];
            }
            const std::size_t y = static_cast<std::size_t>(task.target->index);
            const double qy = std::max(q[y], 1e-300);
            total_loss += -std::log(qy);
            if (grad) {
                const double g_smy = -(1.0 - w) / qy;  // dL/d sm[y]
                for (std::size_t k = 0; k < slice; ++k)
                    dout[k] = g_smy * sm[y] * ((k == y ? 1.0 : 0.0) - sm[k]);
            }
        } else {
            const double scale = interp.l_scale;
            double mse = 0.0;
            for (std::size_t j = 0; j < slice; ++j) {
                const double squashed = scale * mixed_relu(out[j]);
                const double pred =
                    tcfg.through_interpolation ? w * task.reference->vec[j] + (1.0 - w) * squashed
                                               : squashed;
                const double err = pred - task.target->vec[j];
                mse += err * err;
                if (grad) {
                    const double dpred = 2.0 * err / static_cast<double>(slice);
                    const double through = tcfg.through_interpolation ? (1.0 - w) : 1.0;
                    dout[j] = dpred * through * scale * mixed_relu_grad(out[j]);
                }
            }
            total_loss += mse / static_cast<double>(slice);
        }

        if (grad) {
            detail::linear_bwd(P + w_ofs, cache.lnf_out.data() + pos * h, dout.data(), width, h,
                               grad->data() + w_ofs, grad->data() + b_ofs,
                               dlnf.data() + pos * h);
        }
    }

    if (!grad) return total_loss;
    std::vector<double>& G = *grad;

    // final layernorm
    std::vector<double> dx(T * h, 0.0);
    for (std::size_t t = 0; t < T; ++t)
        detail::layernorm_bwd(dlnf.data() + t * h, cache.lnf_xhat.data() + t * h,
                              cache.lnf_rstd[t], P + lay.lnf_g, h, dx.data() + t * h,
                              G.data() + lay.lnf_g, G.data() + lay.lnf_b);

    const std::size_t nh = static_cast<std::size_t>(cfg.n_heads);
    const std::size_t hd = h / nh;
    const double iscale = 1.0 / std::sqrt(static_cast<double>(hd));

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const auto& lc = cache.layers[static_cast<std::size_t>(l)];
        const auto& lw = lay.layers[static_cast<std::size_t>(l)];

        // mlp block: x = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
        std::vector<double> dln2(T * h, 0.0);
        {
            std::vector<double> dact(4 * h), dh1(4 * h);
            for (std::size_t t = 0; t < T; ++t) {
                std::fill(dact.begin(), dact.end(), 0.0);
                detail::linear_bwd(P + lw.m2_w, lc.act.data() + t * 4 * h, dx.data() + t * h, h,
                                   4 * h, G.data() + lw.m2_w, G.data() + lw.m2_b, dact.data());
                for (std::size_t i = 0; i < 4 * h; ++i)
                    dh1[i] = dact[i] * detail::gelu_grad(lc.h1[t * 4 * h + i]);
                detail::linear_bwd(P + lw.m1_w, lc.ln2_out.data() + t * h, dh1.data(), 4 * h, h,
                                   G.data() + lw.m1_w, G.data() + lw.m1_b, dln2.data() + t * h);
            }
            for (std::size_t t = 0; t < T; ++t)
                detail::layernorm_bwd(dln2.data() + t * h, lc.ln2_xhat.data() + t * h,
                                      lc.ln2_rstd[t], P + lw.ln2_g, h, dx.data() + t * h,
                                      G.data() + lw.ln2_g, G.data() + lw.ln2_b);
        }

        // attention block: x_mid = x_in + Wao mix + bao
        std::vector<double> dmix(T * h, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            detail::linear_bwd(P + lw.ao_w, lc.mix.data() + t * h, dx.data() + t * h, h, h,
                               G.data() + lw.ao_w, G.data() + lw.ao_b, dmix.data() + t * h);

        std::vector<double> dqkv(T * 3 * h, 0.0);
        std::vector<double> dprow(T);
        for (std::size_t hd_i = 0; hd_i < nh; ++hd_i) {
            const std::size_t qo = hd_i * hd, ko = h + hd_i * hd, vo = 2 * h + hd_i * hd;
            for (std::size_t t = 0; t < T; ++t) {
                const double* prow = lc.probs.data() + (hd_i * T + t) * T;
                const double* dm = dmix.data() + t * h + hd_i * hd;
                double dot = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* v = lc.qkv.data() + s * 3 * h + vo;
                    double dp = 0.0;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dqkv[s * 3 * h + vo + i] += prow[s] * dm[i];
                        dp += dm[i] * v[i];
                    }
                    dprow[s] = dp;
                    dot += prow[s] * dp;
                }
                const double* q = lc.qkv.data() + t * 3 * h + qo;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double ds = prow[s] * (dprow[s] - dot) * iscale;
                    const double* k = lc.qkv.data() + s * 3 * h + ko;
                    for (std::size_t i = 0; i < hd; ++i) {
                        dqkv[t * 3 * h + qo + i] += ds * k[i];
                        dqkv[s * 3 * h + ko + i] += ds * q[i];
                    }
                }
            }
        }

        std::vector<double> dln1(T * h, 0.0);
        for (std::size_t t = 0; t < T; ++t)
            detail::linear_bwd(P + lw.qkv_w, lc.ln1_out.data() + t * h,
                               dqkv.data() + t * 3 * h, 3 * h, h, G.data() + lw.qkv_w,
                               G.data() + lw.qkv_b, dln1.data() + t * h);
        for (std::size_t t = 0; t < T; ++t)
            detail::layernorm_bwd(dln1.data() + t * h, lc.ln1_xhat.data() + t * h,
                                  lc.ln1_rstd[t], P + lw.ln1_g, h, dx.data() + t * h,
                                  G.data() + lw.ln1_g, G.data() + lw.ln1_b);
    }

    // embeddings
    for (std::size_t t = 0; t < T; ++t) {
        const double* d = dx.data() + t * h;
        double* dpe = G.data() + lay.wpe + t * h;
        for (std::size_t i = 0; i < h; ++i) dpe[i] += d[i];
        const TokenSrc& src = enc.src[t];
        if (src.kind == TokenSrc::cont) {
            for (std::size_t o = 0; o < h; ++o) {
                const double g = d[o];
                double* row = G.data() + lay.enc_w +
                              o * static_cast<std::size_t>(cfg.max_cont_input);
                for (std::size_t i = 0; i < src.padded.size(); ++i)
                    row[i] += g * src.padded[i];
                G[lay.enc_b + o] += g;
            }
        } else if (src.kind == TokenSrc::discrete) {
            double* row =
                G.data() + lay.act_table + static_cast<std::size_t>(src.act_index) * h;
            for (std::size_t i = 0; i < h; ++i) row[i] += d[i];
        }
    }
    return total_loss;
}

struct LossLogRow {
    int step = 0;
    std::string env_id;
    double loss = 0.0;
    double lr = 0.0;
};

struct AdamState {
    std::vector<double> m, v;
    std::int64_t t = 0;
};

inline void adam_step(std::vector<double>& params, const std::vector<double>& grads,
                      AdamState& st, double lr, const TrainConfig& cfg) {
    if (st.m.empty()) {
        st.m.assign(params.size(), 0.0);
        st.v.assign(params.size(), 0.0);
    }
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * grads[i];
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        params[i] -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + cfg.weight_decay * params[i]);
    }
}

namespace detail {

struct Batch {
    const CtxDataset* ds;
    std::vector<std::size_t> items;
};

// One epoch's batch list: per-environment shuffles chunked to batch_size,
// then the batch order itself shuffled, so every batch stays single-env and
// environments appear proportionally to their dataset sizes.
inline std::vector<Batch> make_batches(const std::map<std::string, CtxDataset>& datasets,
                                       int batch_size, Rng& rng) {
    std::vector<Batch> batches;
    for (const auto& [env_id, ds] : datasets) {
        std::vector<std::size_t> order(ds.points.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(batch_size)) {
            Batch b;
            b.ds = &ds;
            const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(batch_size));
            b.items.assign(order.begin() + static_cast<std::ptrdiff_t>(at),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
            batches.push_back(std::move(b));
        }
    }
    rng.shuffle(batches);
    return batches;
}

inline std::size_t batches_per_epoch(const std::map<std::string, CtxDataset>& datasets,
                                     int batch_size) {
    std::size_t n = 0;
    for (const auto& [env_id, ds] : datasets)
        n += (ds.points.size() + static_cast<std::size_t>(batch_size) - 1) /
             static_cast<std::size_t>(batch_size);
    return n;
}

inline void check_dataset_fits(const CtxDataset& ds, const ModelConfig& cfg) {
    if (ds.points.empty())
        throw ParameterError("training: dataset for " + ds.spec.env_id + " is empty");
    if (ds.spec.obs_len() + 1 > cfg.max_cont_input)
        throw ConfigError("training: observations of " + ds.spec.env_id +
                          " do not fit max_cont_input");
    if (ds.spec.act_kind == ActKind::discrete && ds.spec.act_dims > cfg.n_act_max)
        throw ConfigError("training: " + ds.spec.env_id + " has more actions than n_act_max");
    if (ds.spec.act_kind == ActKind::continuous && ds.spec.act_dims > cfg.max_cont_input)
        throw ConfigError("training: " + ds.spec.env_id +
                          " action vector exceeds the continuous head width");
    if (2 * (ds.n + 1) > cfg.max_positions)
        throw ConfigError("training: context size of " + ds.spec.env_id +
                          " exceeds max_positions");
}

// Runs batches [start_step, ...) of a fixed schedule: lr decays linearly
// from lr_start to zero across total_steps.
inline void run_batches(SeqModel& model, const std::vector<Batch>& batches, AdamState& adam,
                        const TrainConfig& tcfg, const InterpConfig& interp, double lr_start,
                        std::size_t total_steps, std::size_t& step,
                        std::vector<LossLogRow>* log) {
    std::vector<double> grads(model.params.size());
    for (const Batch& b : batches) {
        const double lr =
            lr_start * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
        std::fill(grads.begin(), grads.end(), 0.0);
        double loss_sum = 0.0;
        for (std::size_t item : b.items)
            loss_sum += loss_and_grad(model, b.ds->points[item], b.ds->spec, b.ds->metric,
                                      b.ds->normalizer, interp, tcfg, &grads, SsimParams{});
        const double inv = 1.0 / static_cast<double>(b.items.size());
        for (double& g : grads) g *= inv;
        if (tcfg.clip_norm > 0.0) {
            double sq = 0.0;
            for (double g : grads) sq += g * g;
            if (const double norm = std::sqrt(sq); norm > tcfg.clip_norm) {
                const double shrink = tcfg.clip_norm / norm;
                for (double& g : grads) g *= shrink;
            }
        }
        adam_step(model.params, grads, adam, lr, tcfg);
        step += 1;
        if (log)
            log->push_back({static_cast<int>(step), b.ds->spec.env_id, loss_sum * inv, lr});
    }
}

} // namespace detail

// Pretraining: fresh parameters from model_cfg.seed, single-environment
// batches, linear lr decay scheduled over tcfg.epochs epochs, early-stopped
// after exactly one epoch.
inline SeqModel pretrain(const std::map<std::string, CtxDataset>& datasets,
                         const ModelConfig& model_cfg, const TrainConfig& tcfg,
                         const InterpConfig& interp = {},
                         std::vector<LossLogRow>* log = nullptr) {
    validate(tcfg);
    validate(interp);
    if (tcfg.epochs < 1) throw ParameterError("pretrain: schedule needs at least one epoch");
    if (datasets.empty()) throw ParameterError("pretrain: no datasets");
    for (const auto& [env_id, ds] : datasets) detail::check_dataset_fits(ds, model_cfg);

    SeqModel model = init_model(model_cfg);
    AdamState adam;
    Rng rng(tcfg.seed ^ 0x747261696eULL);
    const std::size_t per_epoch = detail::batches_per_epoch(datasets, tcfg.batch_size);
    const std::size_t total_steps = per_epoch * static_cast<std::size_t>(tcfg.epochs);
    std::size_t step = 0;
    const std::vector<detail::Batch> batches =
        detail::make_batches(datasets, tcfg.batch_size, rng);
    detail::run_batches(model, batches, adam, tcfg, interp, tcfg.lr_start, total_steps, step,
                        log);
    return model;
}

// Finetuning: exactly tcfg.epochs epochs over one environment's datapoints at
// a tenth of the configured learning rate, with fresh optimizer state.
inline SeqModel finetune(const SeqModel& base, const CtxDataset& dataset,
                         const TrainConfig& tcfg, const InterpConfig& interp = {},
                         std::vector<LossLogRow>* log = nullptr) {
    validate(tcfg);
    validate(interp);
    detail::check_dataset_fits(dataset, base.cfg);

    SeqModel model = base;
    AdamState adam;
    Rng rng(tcfg.seed ^ 0x66696e65ULL);
    std::map<std::string, CtxDataset> one;
    one.emplace(dataset.spec.env_id, dataset);

    const std::size_t per_epoch = detail::batches_per_epoch(one, tcfg.batch_size);
    const std::size_t total_steps = per_epoch * static_cast<std::size_t>(tcfg.epochs);
    std::size_t step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        const std::vector<detail::Batch> batches =
            detail::make_batches(one, tcfg.batch_size, rng);
        detail::run_batches(model, batches, adam, tcfg, interp, tcfg.lr_start / 10.0,
                            total_steps, step, log);
    }
    return model;
}

} // namespace regent
