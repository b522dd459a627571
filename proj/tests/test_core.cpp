#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "regent/core.hpp"
#include "regent/io.hpp"
#include "regent/rng.hpp"
#include "regent/serialize.hpp"
#include "regent/threads.hpp"

using namespace regent;

namespace {

EnvSpec vec_spec(int obs, int acts) {
    EnvSpec s;
    s.env_id = "test-env";
    s.obs_kind = ObsKind::vector;
    s.obs_dims = {obs};
    s.act_kind = ActKind::discrete;
    s.act_dims = acts;
    s.horizon = 10;
    s.random_return = 0.0;
    s.expert_return = 1.0;
    return s;
}

DemoSet tiny_set() {
    DemoSet set;
    set.spec = vec_spec(2, 3);
    for (std::uint32_t d = 0; d < 3; ++d) {
        Demonstration demo;
        demo.demo_id = d;
        for (int t = 0; t < 4; ++t) {
            Step s;
            s.state = {double(d), double(t)};
            s.prev_reward = t == 0 ? 0.0 : 0.5;
            s.action = ActValue::discrete(t % 3);
            demo.steps.push_back(s);
        }
        demo.total_return = 1.5;
        set.demos.push_back(demo);
    }
    set.retrieval_ids = {0, 1, 2};
    return set;
}

} // namespace

TEST_CASE("rng streams are deterministic and decorrelated") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    bool differs = false;
    Rng a2(42);
    for (int i = 0; i < 100; ++i) differs |= a2.next_u64() != c.next_u64();
    REQUIRE(differs);

    Rng base(7);
    Rng s0 = base.derive(0), s1 = base.derive(1);
    bool stream_differs = false;
    for (int i = 0; i < 50; ++i) stream_differs |= s0.next_u64() != s1.next_u64();
    REQUIRE(stream_differs);
}

TEST_CASE("rng real01 and below stay in range") {
    Rng r(5);
    for (int i = 0; i < 10000; ++i) {
        const double u = r.real01();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        REQUIRE(r.below(7) < 7);
    }
}

TEST_CASE("rng normal has sane first moments") {
    Rng r(11);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    REQUIRE(std::abs(mean) < 0.01);
    REQUIRE(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("rng shuffle is a permutation and seed-stable") {
    std::vector<int> v(100);
    for (int i = 0; i < 100; ++i) v[i] = i;
    std::vector<int> w = v;
    Rng r1(9), r2(9);
    r1.shuffle(v);
    r2.shuffle(w);
    REQUIRE(v == w);
    std::set<int> uniq(v.begin(), v.end());
    REQUIRE(uniq.size() == 100);
}

TEST_CASE("byte writer and reader round trip every primitive") {
    ByteWriter w;
    w.u8(0xab);
    w.u32(0xdeadbeefu);
    w.u64(0x0123456789abcdefULL);
    w.f64(-0.1);
    w.f64(std::numeric_limits<double>::denorm_min());
    w.str("hello");
    w.f64_span({1.5, -2.5, 0.0});
    const std::vector<std::uint8_t> bytes = w.bytes();

    ByteReader r(bytes);
    REQUIRE(r.u8() == 0xab);
    REQUIRE(r.u32() == 0xdeadbeefu);
    REQUIRE(r.u64() == 0x0123456789abcdefULL);
    REQUIRE(r.f64() == -0.1);
    REQUIRE(r.f64() == std::numeric_limits<double>::denorm_min());
    REQUIRE(r.str() == "hello");
    REQUIRE(r.f64_span() == std::vector<double>{1.5, -2.5, 0.0});
    REQUIRE(r.exhausted());
}

TEST_CASE("truncated payloads are format errors") {
    ByteWriter w;
    w.u64(1);
    std::vector<std::uint8_t> bytes = w.bytes();
    bytes.pop_back();
    ByteReader r(bytes);
    REQUIRE_THROWS_AS(r.u64(), FormatError);
}

TEST_CASE("fnv1a matches the published reference values") {
    REQUIRE(fnv1a(std::string("")) == 0xcbf29ce484222325ULL);
    REQUIRE(fnv1a(std::string("a")) == 0xaf63dc4c8601ec8cULL);
    REQUIRE(fnv1a(std::string("foobar")) == 0x85944171f73967e8ULL);
    REQUIRE(hex64(0xcbf29ce484222325ULL) == "cbf29ce484222325");
}

TEST_CASE("demoset validation catches structural breakage") {
    REQUIRE_NOTHROW(validate(tiny_set()));

    DemoSet gap = tiny_set();
    gap.demos[1].demo_id = 5;
    REQUIRE_THROWS_AS(validate(gap), ValidationError);

    DemoSet dup = tiny_set();
    dup.retrieval_ids = {0, 0, 1};
    REQUIRE_THROWS_AS(validate(dup), ValidationError);

    DemoSet out_of_range = tiny_set();
    out_of_range.retrieval_ids = {0, 7};
    REQUIRE_THROWS_AS(validate(out_of_range), ValidationError);

    DemoSet bad_state = tiny_set();
    bad_state.demos[0].steps[0].state.pop_back();
    REQUIRE_THROWS_AS(validate(bad_state), ValidationError);

    DemoSet bad_action = tiny_set();
    bad_action.demos[2].steps[3].action = ActValue::discrete(3);
    REQUIRE_THROWS_AS(validate(bad_action), ValidationError);
}

TEST_CASE("demoset container round trips exactly") {
    const DemoSet set = tiny_set();
    const std::vector<std::uint8_t> bytes = encode_demoset(set);
    const DemoSet back = decode_demoset(bytes);
    REQUIRE(encode_demoset(back) == bytes);
    REQUIRE(back.spec == set.spec);
    REQUIRE(back.demos.size() == set.demos.size());
    REQUIRE(back.retrieval_ids == set.retrieval_ids);

    std::vector<std::uint8_t> broken = bytes;
    broken[0] ^= 0xff;
    REQUIRE_THROWS_AS(decode_demoset(broken), FormatError);

    std::vector<std::uint8_t> version = bytes;
    version[8] = 0x7f;  // version field follows the 8-byte magic
    REQUIRE_THROWS_AS(decode_demoset(version), FormatError);
}

TEST_CASE("parallel_for covers every index once and rethrows") {
    const int saved = worker_threads();
    worker_threads() = 4;
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) REQUIRE(h == 1);

    REQUIRE_THROWS_AS(parallel_for(10,
                                   [&](std::size_t i) {
                                       if (i == 7) throw ParameterError("boom");
                                   }),
                      ParameterError);
    worker_threads() = saved;
}
