#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "regent/core.hpp"
#include "regent/error.hpp"
#include "regent/threads.hpp"

namespace regent {

enum class Metric : std::uint8_t { l2 = 0, ssim = 1 };

inline const char* metric_name(Metric m) { return m == Metric::l2 ? "l2" : "ssim"; }

inline Metric metric_from_name(const std::string& s) {
    if (s == "l2") return Metric::l2;
    if (s == "ssim") return Metric::ssim;
    throw ParameterError("unknown metric: " + s);
}

inline double l2_distance(const ObsValue& a, const ObsValue& b) {
    if (a.size() != b.size())
        throw DimensionError("l2_distance: vector lengths differ (" + std::to_string(a.size()) +
                             " vs " + std::to_string(b.size()) + ")");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

struct ImageShape {
    int h = 0;
    int w = 0;
    int c = 1;

    static ImageShape of(const EnvSpec& spec) {
        if (spec.obs_kind != ObsKind::image || spec.obs_dims.size() != 3)
            throw DimensionError("ImageShape: spec does not describe an image observation");
        return ImageShape{spec.obs_dims[0], spec.obs_dims[1], spec.obs_dims[2]};
    }
};

struct SsimParams {
    // 5 rather than the classical 11: the observations here are small grids,
    // and a window near the image size leaves too few positions to resolve
    // distances between states (an 8x8 image has 16 valid 5x5 windows but
    // only 4 7x7 ones, collapsing most state pairs into identical scores).
    int window = 5;
    double c1 = 1e-4;   // (0.01)^2 for pixels in [0, 1]
    double c2 = 9e-4;   // (0.03)^2
};

namespace detail {

// Summed-area tables over one channel plane let every window sum come out of
// four lookups. sat has (h+1) x (w+1) entries, row-major.
struct ChannelSat {
    std::vector<double> s, s2;
    int w = 0;

    double sum(const std::vector<double>& t, int i0, int j0, int win) const {
        const int stride = w + 1;
        return t[static_cast<std::size_t>((i0 + win) * stride + (j0 + win))] -
               t[static_cast<std::size_t>(i0 * stride + (j0 + win))] -
               t[static_cast<std::size_t>((i0 + win) * stride + j0)] +
               t[static_cast<std::size_t>(i0 * stride + j0)];
    }
};

inline void build_sat(const ObsValue& img, const ImageShape& shape, int channel, ChannelSat& out,
                      std::vector<double>* cross, const ObsValue* other) {
    const int h = shape.h, w = shape.w, c = shape.c;
    out.w = w;
    const int stride = w + 1;
    out.s.assign(static_cast<std::size_t>((h + 1) * stride), 0.0);
    out.s2.assign(static_cast<std::size_t>((h + 1) * stride), 0.0);
    if (cross) cross->assign(static_cast<std::size_t>((h + 1) * stride), 0.0);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            const std::size_t px = static_cast<std::size_t>((i * w + j) * c + channel);
            const double v = img[px];
            const std::size_t at = static_cast<std::size_t>((i + 1) * stride + (j + 1));
            const std::size_t up = static_cast<std::size_t>(i * stride + (j + 1));
            const std::size_t left = static_cast<std::size_t>((i + 1) * stride + j);
            const std::size_t diag = static_cast<std::size_t>(i * stride + j);
            out.s[at] = v + out.s[up] + out.s[left] - out.s[diag];
            out.s2[at] = v * v + out.s2[up] + out.s2[left] - out.s2[diag];
            if (cross) {
                const double o = (*other)[px];
                (*cross)[at] = v * o + (*cross)[up] + (*cross)[left] - (*cross)[diag];
            }
        }
    }
}

} // namespace detail

// SSIM distance = 1 - mean SSIM over all valid window positions of all
// channels, uniform window weighting, population (1/N) moments. Windows
// larger than the image shrink to min(window, H, W). Result lies in [0, 2]
// and is exactly 0 for identical images.
inline double ssim_distance(const ObsValue& a, const ObsValue& b, const ImageShape& shape,
                            const SsimParams& p = {}) {
    if (a.size() != b.size())
        throw DimensionError("ssim_distance: image sizes differ");
    if (static_cast<int>(a.size()) != shape.h * shape.w * shape.c)
        throw DimensionError("ssim_distance: image size does not match shape");
    if (p.window <= 0 || p.window % 2 == 0)
        throw ParameterError("ssim_distance: window must be a positive odd integer");

    const int win = std::min({p.window, shape.h, shape.w});
    const double npix = static_cast<double>(win) * win;
    const int rows = shape.h - win + 1;
    const int cols = shape.w - win + 1;

    double total = 0.0;
    detail::ChannelSat sa, sb;
    std::vector<double> sab;
    for (int ch = 0; ch < shape.c; ++ch) {
        detail::build_sat(a, shape, ch, sa, &sab, &b);
        detail::build_sat(b, shape, ch, sb, nullptr, nullptr);
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < cols; ++j) {
                const double mu_a = sa.sum(sa.s, i, j, win) / npix;
                const double mu_b = sb.sum(sb.s, i, j, win) / npix;
                const double var_a = sa.sum(sa.s2, i, j, win) / npix - mu_a * mu_a;
                const double var_b = sb.sum(sb.s2, i, j, win) / npix - mu_b * mu_b;
                const double cov = sa.sum(sab, i, j, win) / npix - mu_a * mu_b;
                const double num = (2.0 * mu_a * mu_b + p.c1) * (2.0 * cov + p.c2);
                const double den =
                    (mu_a * mu_a + mu_b * mu_b + p.c1) * (var_a + var_b + p.c2);
                total += num / den;
            }
        }
    }
    const double mean_ssim = total / (static_cast<double>(rows) * cols * shape.c);
    return 1.0 - mean_ssim;
}

// Distance between two states under the environment's metric.
inline double state_distance(const EnvSpec& spec, Metric metric, const ObsValue& a,
                             const ObsValue& b, const SsimParams& p = {}) {
    if (metric == Metric::l2) return l2_distance(a, b);
    return ssim_distance(a, b, ImageShape::of(spec), p);
}

// Per-environment scale that maps raw distances into [0, 1]. scale is the
// 95th-percentile (nearest-rank) closest-neighbor distance observed across
// the calibration demonstrations.
struct Normalizer {
    std::string env_id;
    double scale = 1.0;
    Metric metric = Metric::l2;

    bool operator==(const Normalizer&) const = default;
};

inline double normalize(const Normalizer& norm, double raw) {
    if (raw < 0.0) throw DomainError("normalize: raw distance must be non-negative");
    return std::min(raw / norm.scale, 1.0);
}

// For every state in the demoset, measure the distance to its closest legal
// retrieved state (entries from the query's own demonstration excluded), then
// take the nearest-rank 95th percentile. A zero percentile falls back to the
// smallest positive distance observed, or 1.0 when every pair is identical.
inline Normalizer calibrate(const DemoSet& set, Metric metric, const SsimParams& p = {}) {
    if (set.retrieval_ids.empty())
        throw CalibrationError("calibrate: demoset has an empty retrieval set");

    struct Entry {
        std::uint32_t demo_id;
        const ObsValue* state;
    };
    std::vector<Entry> entries;
    std::vector<bool> in_retrieval(set.demos.size(), false);
    for (std::uint32_t id : set.retrieval_ids) in_retrieval[id] = true;
    for (const auto& d : set.demos) {
        if (!in_retrieval[d.demo_id]) continue;
        for (const auto& s : d.steps) entries.push_back({d.demo_id, &s.state});
    }

    struct Query {
        std::uint32_t demo_id;
        const ObsValue* state;
    };
    std::vector<Query> queries;
    for (const auto& d : set.demos)
        for (const auto& s : d.steps) queries.push_back({d.demo_id, &s.state});

    std::vector<double> nearest(queries.size(), -1.0);
    parallel_for(queries.size(), [&](std::size_t qi) {
        const Query& q = queries[qi];
        double best = -1.0;
        for (const Entry& e : entries) {
            if (e.demo_id == q.demo_id) continue;
            const double dist = state_distance(set.spec, metric, *q.state, *e.state, p);
            if (best < 0.0 || dist < best) best = dist;
        }
        nearest[qi] = best;
    });

    std::vector<double> dists;
    dists.reserve(nearest.size());
    for (double d : nearest)
        if (d >= 0.0) dists.push_back(d);
    if (dists.empty())
        throw CalibrationError(
            "calibrate: no legal neighbor pairs (every query excludes the whole "
            "retrieval set)");

    std::sort(dists.begin(), dists.end());
    const std::size_t m = dists.size();
    const std::size_t rank = static_cast<std::size_t>(
        std::ceil(0.95 * static_cast<double>(m)));   // 1-based nearest rank
    double scale = dists[rank - 1];
    if (scale == 0.0) {
        scale = 1.0;
        for (double d : dists) {
            if (d > 0.0) {
                scale = d;
                break;
            }
        }
    }
    return Normalizer{set.spec.env_id, scale, metric};
}

} // namespace regent
