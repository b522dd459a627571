#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "regent/core.hpp"
#include "regent/io.hpp"

namespace regent {

// .demoset container, version 1. Layout (all little-endian, f64 = raw
// IEEE-754 bits; full byte-level description in docs/FORMATS.md):
//
//   magic "RGNTDEMO" | u32 version | section(spec) | section(demos)
//   | section(retrieval_ids)
//
// where section(x) = u64 byte length followed by the payload.

inline constexpr char kDemoSetMagic[9] = "RGNTDEMO";
inline constexpr std::uint32_t kDemoSetVersion = 1;

namespace detail {

inline void put_act(ByteWriter& w, const ActValue& a) {
    w.u8(static_cast<std::uint8_t>(a.kind));
    if (a.kind == ActKind::discrete)
        w.u32(static_cast<std::uint32_t>(a.index));
    else
        w.f64_span(a.vec);
}

inline ActValue get_act(ByteReader& r) {
    const std::uint8_t kind = r.u8();
    if (kind > 1) throw FormatError("unknown action kind tag");
    if (kind == 0) return ActValue::discrete(static_cast<int>(r.u32()));
    return ActValue::continuous(r.f64_span());
}

inline void put_spec(ByteWriter& w, const EnvSpec& spec) {
    w.str(spec.env_id);
    w.u8(static_cast<std::uint8_t>(spec.obs_kind));
    w.u32(static_cast<std::uint32_t>(spec.obs_dims.size()));
    for (int d : spec.obs_dims) w.u32(static_cast<std::uint32_t>(d));
    w.u8(static_cast<std::uint8_t>(spec.act_kind));
    w.u32(static_cast<std::uint32_t>(spec.act_dims));
    w.u32(static_cast<std::uint32_t>(spec.horizon));
    w.f64(spec.random_return);
    w.f64(spec.expert_return);
}

inline EnvSpec get_spec(ByteReader& r) {
    EnvSpec spec;
    spec.env_id = r.str();
    const std::uint8_t ok = r.u8();
    if (ok > 1) throw FormatError("unknown observation kind tag");
    spec.obs_kind = static_cast<ObsKind>(ok);
    const std::uint32_t nd = r.u32();
    spec.obs_dims.resize(nd);
    for (auto& d : spec.obs_dims) d = static_cast<int>(r.u32());
    const std::uint8_t ak = r.u8();
    if (ak > 1) throw FormatError("unknown action kind tag");
    spec.act_kind = static_cast<ActKind>(ak);
    spec.act_dims = static_cast<int>(r.u32());
    spec.horizon = static_cast<int>(r.u32());
    spec.random_return = r.f64();
    spec.expert_return = r.f64();
    return spec;
}

inline void put_step(ByteWriter& w, const Step& s) {
    w.f64_span(s.state);
    w.f64(s.prev_reward);
    put_act(w, s.action);
}

inline Step get_step(ByteReader& r) {
    Step s;
    s.state = r.f64_span();
    s.prev_reward = r.f64();
    s.action = get_act(r);
    return s;
}

} // namespace detail

inline std::vector<std::uint8_t> encode_demoset(const DemoSet& set) {
    validate(set);

    ByteWriter spec_w;
    detail::put_spec(spec_w, set.spec);

    ByteWriter demos_w;
    demos_w.u32(static_cast<std::uint32_t>(set.demos.size()));
    for (const auto& d : set.demos) {
        demos_w.u32(d.demo_id);
        demos_w.f64(d.total_return);
        demos_w.u32(static_cast<std::uint32_t>(d.steps.size()));
        for (const auto& s : d.steps) detail::put_step(demos_w, s);
    }

    ByteWriter ids_w;
    ids_w.u32(static_cast<std::uint32_t>(set.retrieval_ids.size()));
    for (std::uint32_t id : set.retrieval_ids) ids_w.u32(id);

    ByteWriter out;
    write_magic(out, kDemoSetMagic);
    out.u32(kDemoSetVersion);
    out.section(spec_w);
    out.section(demos_w);
    out.section(ids_w);
    return out.bytes();
}

inline DemoSet decode_demoset(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    expect_magic(r, kDemoSetMagic, "demoset");
    expect_version(r, kDemoSetVersion, "demoset");

    ByteReader spec_r = r.section();
    DemoSet set;
    set.spec = detail::get_spec(spec_r);

    ByteReader demos_r = r.section();
    const std::uint32_t ndemos = demos_r.u32();
    set.demos.resize(ndemos);
    for (auto& d : set.demos) {
        d.demo_id = demos_r.u32();
        d.total_return = demos_r.f64();
        const std::uint32_t nsteps = demos_r.u32();
        d.steps.resize(nsteps);
        for (auto& s : d.steps) s = detail::get_step(demos_r);
    }

    ByteReader ids_r = r.section();
    const std::uint32_t nids = ids_r.u32();
    set.retrieval_ids.resize(nids);
    for (auto& id : set.retrieval_ids) id = ids_r.u32();

    validate(set);
    return set;
}

inline void save_demoset(const std::string& path, const DemoSet& set) {
    write_file(path, encode_demoset(set));
}

inline DemoSet load_demoset(const std::string& path) { return decode_demoset(read_file(path)); }

// Lossy JSON-lines export, one step per line, for eyeballing datasets.
// Explicitly non-canonical: doubles go through text formatting.
inline std::string export_demoset_jsonl(const DemoSet& set) {
    std::ostringstream out;
    out.precision(17);
    for (const auto& d : set.demos) {
        for (std::size_t t = 0; t < d.steps.size(); ++t) {
            const Step& s = d.steps[t];
            out << "{\"env_id\":\"" << set.spec.env_id << "\",\"demo_id\":" << d.demo_id
                << ",\"step\":" << t << ",\"prev_reward\":" << s.prev_reward << ",\"action\":";
            if (s.action.kind == ActKind::discrete) {
                out << s.action.index;
            } else {
                out << "[";
                for (std::size_t i = 0; i < s.action.vec.size(); ++i)
                    out << (i ? "," : "") << s.action.vec[i];
                out << "]";
            }
            out << ",\"state\":[";
            for (std::size_t i = 0; i < s.state.size(); ++i)
                out << (i ? "," : "") << s.state[i];
            out << "]}\n";
        }
    }
    return out.str();
}

} // namespace regent
