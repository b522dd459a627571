#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "regent/core.hpp"
#include "regent/distance.hpp"
#include "regent/error.hpp"
#include "regent/io.hpp"
#include "regent/rng.hpp"
#include "regent/serialize.hpp"
#include "regent/threads.hpp"

namespace regent {

// Exact flat index over every step of every designated retrieval demo.
// Immutable once built; queries are linear scans, identical to a full sort.
struct StateIndex {
    struct Entry {
        std::uint32_t demo_id;
        std::uint32_t step_idx;
        Step step;
    };

    EnvSpec spec;
    Metric metric = Metric::l2;
    Normalizer normalizer;
    SsimParams ssim;
    std::vector<Entry> entries;
};

struct NeighborHit {
    std::size_t entry;   // position in StateIndex::entries
    std::uint32_t demo_id;
    std::uint32_t step_idx;
    double raw_dist;
};

// Returns a copy of the demoset with retrieval_ids set to a uniformly random
// size-count subset. Deterministic for a fixed seed.
inline DemoSet designate_retrieval_set(const DemoSet& set, std::size_t count,
                                       std::uint64_t seed) {
    if (count == 0) throw ParameterError("designate_retrieval_set: count must be positive");
    if (count > set.demos.size())
        throw ParameterError("designate_retrieval_set: count " + std::to_string(count) +
                             " exceeds demo count " + std::to_string(set.demos.size()));
    std::vector<std::uint32_t> ids(set.demos.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<std::uint32_t>(i);
    Rng rng(seed);
    rng.shuffle(ids);
    ids.resize(count);
    std::sort(ids.begin(), ids.end());
    DemoSet out = set;
    out.retrieval_ids = std::move(ids);
    return out;
}

inline StateIndex build_index(const DemoSet& set, Metric metric, const Normalizer& norm,
                              const SsimParams& ssim = {}) {
    if (set.retrieval_ids.empty())
        throw RetrievalError("build_index: demoset has an empty retrieval set");
    StateIndex index;
    index.spec = set.spec;
    index.metric = metric;
    index.normalizer = norm;
    index.ssim = ssim;
    std::vector<bool> designated(set.demos.size(), false);
    for (std::uint32_t id : set.retrieval_ids) designated[id] = true;
    for (const auto& d : set.demos) {
        if (!designated[d.demo_id]) continue;
        for (std::size_t t = 0; t < d.steps.size(); ++t)
            index.entries.push_back({d.demo_id, static_cast<std::uint32_t>(t), d.steps[t]});
    }
    return index;
}

// Exact k-nearest-neighbor scan. Ties on distance break by (demo_id,
// step_idx) ascending. Returns fewer than k hits when fewer are eligible.
inline std::vector<NeighborHit> knn(const StateIndex& index, const ObsValue& query,
                                    std::size_t k,
                                    std::optional<std::uint32_t> exclude_demo = {}) {
    if (k == 0) throw ParameterError("knn: k must be at least 1");
    if (index.entries.empty()) throw RetrievalError("knn: index is empty");

    std::vector<NeighborHit> hits;
    hits.reserve(index.entries.size());
    for (std::size_t ei = 0; ei < index.entries.size(); ++ei) {
        const auto& e = index.entries[ei];
        if (exclude_demo && e.demo_id == *exclude_demo) continue;
        const double d =
            state_distance(index.spec, index.metric, query, e.step.state, index.ssim);
        hits.push_back({ei, e.demo_id, e.step_idx, d});
    }
    if (hits.empty())
        throw RetrievalError("knn: no eligible entries after same-demo exclusion");

    const auto closer = [](const NeighborHit& a, const NeighborHit& b) {
        if (a.raw_dist != b.raw_dist) return a.raw_dist < b.raw_dist;
        if (a.demo_id != b.demo_id) return a.demo_id < b.demo_id;
        return a.step_idx < b.step_idx;
    };
    const std::size_t take = std::min(k, hits.size());
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(take),
                      hits.end(), closer);
    hits.resize(take);
    return hits;
}

// Assemble the retrieved context for one query: up to n neighbors closest
// first, dist_first normalized. No training target is attached here.
inline ContextDatapoint build_context(const StateIndex& index, const ObsValue& query_state,
                                      double query_prev_reward, std::size_t n,
                                      std::optional<std::uint32_t> exclude_demo = {}) {
    const auto hits = knn(index, query_state, n, exclude_demo);
    ContextDatapoint ctx;
    ctx.env_id = index.spec.env_id;
    ctx.neighbors.reserve(hits.size());
    for (const auto& h : hits) ctx.neighbors.push_back(index.entries[h.entry].step);
    ctx.query_state = query_state;
    ctx.query_prev_reward = query_prev_reward;
    ctx.dist_first = normalize(index.normalizer, hits.front().raw_dist);
    return ctx;
}

// A preprocessed training dataset: everything the sequence model needs to
// consume the datapoints, including the metric and normalizer they were
// built with. Serialized as a .ctxset file.
struct CtxDataset {
    EnvSpec spec;
    Metric metric = Metric::l2;
    Normalizer normalizer;
    int n = 19;
    std::vector<ContextDatapoint> points;
};

// Convert every transition of the demoset into a (context, query) datapoint.
// Queries inside retrieval demos never see neighbors from their own demo.
// Emits exactly one datapoint per source step, in demo/step order.
inline CtxDataset preprocess(const DemoSet& set, Metric metric, std::size_t n,
                             const SsimParams& ssim = {}) {
    if (n == 0) throw ParameterError("preprocess: n must be positive");
    validate(set);
    const Normalizer norm = calibrate(set, metric, ssim);
    const StateIndex index = build_index(set, metric, norm, ssim);

    CtxDataset out;
    out.spec = set.spec;
    out.metric = metric;
    out.normalizer = norm;
    out.n = static_cast<int>(n);

    struct Src {
        const Demonstration* demo;
        std::size_t step;
    };
    std::vector<Src> sources;
    sources.reserve(total_steps(set));
    for (const auto& d : set.demos)
        for (std::size_t t = 0; t < d.steps.size(); ++t) sources.push_back({&d, t});

    out.points.resize(sources.size());
    std::vector<std::string> failures(sources.size());
    parallel_for(sources.size(), [&](std::size_t i) {
        const auto& [demo, t] = sources[i];
        const Step& s = demo->steps[t];
        try {
            ContextDatapoint ctx =
                build_context(index, s.state, s.prev_reward, n, demo->demo_id);
            ctx.query_action = s.action;
            out.points[i] = std::move(ctx);
        } catch (const RetrievalError&) {
            failures[i] = "demo " + std::to_string(demo->demo_id);
        }
    });
    for (const auto& f : failures) {
        if (!f.empty())
            throw PreprocessError("preprocess: " + f +
                                  " has a query with zero eligible neighbors");
    }
    return out;
}

// ---- .ctxset container, version 1 ----
// magic "RGNTCTXS" | u32 version | section(header) | u32 count
// | count x section(datapoint)

inline constexpr char kCtxSetMagic[9] = "RGNTCTXS";
inline constexpr std::uint32_t kCtxSetVersion = 1;

inline std::vector<std::uint8_t> encode_ctxset(const CtxDataset& ds) {
    ByteWriter header;
    detail::put_spec(header, ds.spec);
    header.u8(static_cast<std::uint8_t>(ds.metric));
    header.str(ds.normalizer.env_id);
    header.f64(ds.normalizer.scale);
    header.u8(static_cast<std::uint8_t>(ds.normalizer.metric));
    header.u32(static_cast<std::uint32_t>(ds.n));

    ByteWriter out;
    write_magic(out, kCtxSetMagic);
    out.u32(kCtxSetVersion);
    out.section(header);
    out.u32(static_cast<std::uint32_t>(ds.points.size()));
    for (const auto& p : ds.points) {
        ByteWriter pw;
        pw.str(p.env_id);
        pw.u32(static_cast<std::uint32_t>(p.neighbors.size()));
        for (const auto& s : p.neighbors) detail::put_step(pw, s);
        pw.f64_span(p.query_state);
        pw.f64(p.query_prev_reward);
        pw.u8(p.query_action ? 1 : 0);
        if (p.query_action) detail::put_act(pw, *p.query_action);
        pw.f64(p.dist_first);
        out.section(pw);
    }
    return out.bytes();
}

inline CtxDataset decode_ctxset(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    expect_magic(r, kCtxSetMagic, "ctxset");
    expect_version(r, kCtxSetVersion, "ctxset");

    CtxDataset ds;
    ByteReader header = r.section();
    ds.spec = detail::get_spec(header);
    const std::uint8_t m = header.u8();
    if (m > 1) throw FormatError("unknown metric tag");
    ds.metric = static_cast<Metric>(m);
    ds.normalizer.env_id = header.str();
    ds.normalizer.scale = header.f64();
    const std::uint8_t nm = header.u8();
    if (nm > 1) throw FormatError("unknown metric tag");
    ds.normalizer.metric = static_cast<Metric>(nm);
    ds.n = static_cast<int>(header.u32());

    const std::uint32_t count = r.u32();
    ds.points.resize(count);
    for (auto& p : ds.points) {
        ByteReader pr = r.section();
        p.env_id = pr.str();
        const std::uint32_t nn = pr.u32();
        p.neighbors.resize(nn);
        for (auto& s : p.neighbors) s = detail::get_step(pr);
        p.query_state = pr.f64_span();
        p.query_prev_reward = pr.f64();
        if (pr.u8()) p.query_action = detail::get_act(pr);
        p.dist_first = pr.f64();
        if (p.dist_first < 0.0 || p.dist_first > 1.0)
            throw ValidationError("ContextDatapoint.dist_first: outside [0, 1]");
    }
    return ds;
}

inline void save_ctxset(const std::string& path, const CtxDataset& ds) {
    write_file(path, encode_ctxset(ds));
}

inline CtxDataset load_ctxset(const std::string& path) { return decode_ctxset(read_file(path)); }

} // namespace regent
