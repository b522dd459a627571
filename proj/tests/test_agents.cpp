#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "regent/agents.hpp"
#include "regent/rng.hpp"

using namespace regent;

namespace {

// Independent form: 2 * (relu((x+1)/2) - relu((x-1)/2)) - 1
double mixed_relu_oracle(double x) {
    const auto relu = [](double v) { return v > 0.0 ? v : 0.0; };
    return 2.0 * (relu((x + 1.0) / 2.0) - relu((x - 1.0) / 2.0)) - 1.0;
}

ContextDatapoint discrete_ctx(int a_prime, double dist_first, int extra = 2) {
    ContextDatapoint ctx;
    ctx.env_id = "e";
    for (int i = 0; i < 1 + extra; ++i) {
        Step s;
        s.state = {double(i)};
        s.action = ActValue::discrete(i == 0 ? a_prime : (a_prime + 1) % 3);
        ctx.neighbors.push_back(s);
    }
    ctx.query_state = {9.0};
    ctx.dist_first = dist_first;
    return ctx;
}

ContextDatapoint continuous_ctx(const std::vector<double>& a_prime, double dist_first) {
    ContextDatapoint ctx;
    ctx.env_id = "e";
    Step s;
    s.state = {0.0};
    s.action = ActValue::continuous(a_prime);
    ctx.neighbors.push_back(s);
    ctx.query_state = {1.0};
    ctx.dist_first = dist_first;
    return ctx;
}

} // namespace

TEST_CASE("mixed_relu equals the two-relu composition everywhere") {
    for (int i = 0; i <= 2000; ++i) {
        const double x = -5.0 + 10.0 * double(i) / 2000.0;
        REQUIRE(std::abs(mixed_relu(x) - mixed_relu_oracle(x)) < 1e-15);
    }
    Rng rng(2);
    for (int i = 0; i < 2000; ++i) {
        const double x = (rng.real01() - 0.5) * 10.0;
        REQUIRE(std::abs(mixed_relu(x) - mixed_relu_oracle(x)) < 1e-15);
    }
    REQUIRE(mixed_relu(-1.0) == -1.0);
    REQUIRE(mixed_relu(1.0) == 1.0);
    REQUIRE(mixed_relu(0.0) == 0.0);
    REQUIRE(mixed_relu(3.7) == 1.0);
    REQUIRE(mixed_relu(-2.2) == -1.0);
    REQUIRE(std::isnan(mixed_relu(std::numeric_limits<double>::quiet_NaN())));
}

TEST_CASE("mixed_relu gradient is the clamp indicator") {
    REQUIRE(mixed_relu_grad(0.0) == 1.0);
    REQUIRE(mixed_relu_grad(0.999) == 1.0);
    REQUIRE(mixed_relu_grad(-0.999) == 1.0);
    REQUIRE(mixed_relu_grad(1.0) == 0.0);
    REQUIRE(mixed_relu_grad(-1.0) == 0.0);
    REQUIRE(mixed_relu_grad(5.0) == 0.0);
}

TEST_CASE("softmax is a max-shifted valid distribution") {
    Rng rng(6);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<double> z(1 + rng.below(10));
        for (double& v : z) v = rng.normal() * 10.0;
        const std::vector<double> p = softmax(z);
        double sum = 0.0;
        for (double v : p) {
            REQUIRE(v > 0.0);
            sum += v;
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
        // shift invariance
        std::vector<double> shifted = z;
        for (double& v : shifted) v += 123.0;
        const std::vector<double> q = softmax(shifted);
        for (std::size_t i = 0; i < p.size(); ++i)
            REQUIRE(p[i] == Catch::Approx(q[i]).margin(1e-12));
    }
    REQUIRE_THROWS_AS(softmax({}), DimensionError);
    REQUIRE_THROWS_AS(softmax({1.0, std::numeric_limits<double>::quiet_NaN()}), DomainError);
    // huge logits stay finite
    const std::vector<double> p = softmax({1e6, 1e6 - 1.0});
    REQUIRE(std::isfinite(p[0]));
    REQUIRE(p[0] + p[1] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("softened nearest-action distribution hand values") {
    // d=0.5, 4 actions, retrieved action 0
    const std::vector<double> p = rnp_distribution(0, 0.5, 4);
    REQUIRE(p[0] == Catch::Approx(0.625).margin(1e-15));
    REQUIRE(p[1] == Catch::Approx(0.125).margin(1e-15));
    REQUIRE(p[2] == Catch::Approx(0.125).margin(1e-15));
    REQUIRE(p[3] == Catch::Approx(0.125).margin(1e-15));

    // exact one-hot at d=0, exact uniform at d=1
    const std::vector<double> onehot = rnp_distribution(2, 0.0, 5);
    for (int a = 0; a < 5; ++a) REQUIRE(onehot[std::size_t(a)] == (a == 2 ? 1.0 : 0.0));
    const std::vector<double> uniform = rnp_distribution(1, 1.0, 5);
    for (int a = 0; a < 5; ++a) REQUIRE(uniform[std::size_t(a)] == 0.2);

    REQUIRE_THROWS_AS(rnp_distribution(0, 0.5, 1), ParameterError);
    REQUIRE_THROWS_AS(rnp_distribution(4, 0.5, 4), ParameterError);
    REQUIRE_THROWS_AS(rnp_distribution(-1, 0.5, 4), ParameterError);
    REQUIRE_THROWS_AS(rnp_distribution(0, 1.5, 4), DomainError);
    REQUIRE_THROWS_AS(rnp_distribution(0, -0.1, 4), DomainError);
}

TEST_CASE("softened distribution sums to one across random triples") {
    Rng rng(10);
    for (int rep = 0; rep < 2000; ++rep) {
        const int n = 2 + int(rng.below(17));
        const int a = int(rng.below(std::uint64_t(n)));
        const double d = rng.real01();
        const std::vector<double> p = rnp_distribution(a, d, n);
        double sum = 0.0;
        for (double v : p) {
            REQUIRE(v >= 0.0);
            sum += v;
        }
        REQUIRE(std::abs(sum - 1.0) <= 1e-12);
        REQUIRE(p[std::size_t(a)] >= p[std::size_t((a + 1) % n)]);
    }
}

TEST_CASE("interpolation weight is exp(-lambda d)") {
    const InterpConfig cfg{};
    REQUIRE(interp_weight(0.0, cfg) == 1.0);
    REQUIRE(interp_weight(1.0, cfg) == Catch::Approx(4.5399929762484854e-05).margin(1e-18));
    REQUIRE(interp_weight(0.2, cfg) == Catch::Approx(std::exp(-2.0)).margin(1e-16));
    REQUIRE_THROWS_AS(interp_weight(-0.1, cfg), DomainError);
    REQUIRE_THROWS_AS(interp_weight(1.1, cfg), DomainError);
    REQUIRE_THROWS_AS(validate(InterpConfig{0.0, 10.0}), ParameterError);
}

TEST_CASE("discrete interpolation collapses to replay at distance zero") {
    const ContextDatapoint ctx = discrete_ctx(1, 0.0);
    const std::vector<double> logits = {3.0, -1.0, 0.5};
    const std::vector<double> p = regent_discrete(logits, ctx, 3);
    REQUIRE(p[0] == 0.0);
    REQUIRE(p[1] == 1.0);
    REQUIRE(p[2] == 0.0);
}

TEST_CASE("discrete interpolation is a convex blend") {
    Rng rng(14);
    const InterpConfig cfg{};
    for (int rep = 0; rep < 200; ++rep) {
        const int n = 2 + int(rng.below(6));
        const int ap = int(rng.below(std::uint64_t(n)));
        const double d = rng.real01();
        ContextDatapoint ctx = discrete_ctx(ap % 3, d);
        ctx.neighbors[0].action = ActValue::discrete(ap);
        std::vector<double> logits(std::size_t(n), 0.0);
        for (double& v : logits) v = rng.normal();

        const std::vector<double> got = regent_discrete(logits, ctx, n, cfg);
        const double w = std::exp(-cfg.lambda * d);
        const std::vector<double> rnp = rnp_distribution(ap, d, n);
        const std::vector<double> sm = softmax(logits);
        double sum = 0.0;
        for (int a = 0; a < n; ++a) {
            REQUIRE(got[std::size_t(a)] ==
                    Catch::Approx(w * rnp[std::size_t(a)] + (1 - w) * sm[std::size_t(a)])
                        .margin(1e-15));
            sum += got[std::size_t(a)];
        }
        REQUIRE(sum == Catch::Approx(1.0).margin(1e-12));
    }
    REQUIRE_THROWS_AS(regent_discrete({1.0, 2.0}, discrete_ctx(0, 0.5), 3), DimensionError);
}

TEST_CASE("continuous interpolation hand value and errors") {
    // lambda=10, scale=10, d=0.2, retrieved action [1], raw output [0.05]:
    // w = e^{-2}; 10 * clamp(0.05) = 0.5; result = w*1 + (1-w)*0.5
    const ContextDatapoint ctx = continuous_ctx({1.0}, 0.2);
    const std::vector<double> out = regent_continuous({0.05}, ctx);
    REQUIRE(out.size() == 1);
    REQUIRE(out[0] == Catch::Approx(0.5676676416183064).margin(1e-15));

    // saturation: raw far above 1 clamps to the scale
    const std::vector<double> sat = regent_continuous({25.0}, continuous_ctx({0.0}, 1.0));
    REQUIRE(sat[0] == Catch::Approx(10.0 * (1.0 - 4.5399929762484854e-05) * 1.0)
                          .margin(1e-10));

    REQUIRE_THROWS_AS(regent_continuous({0.1, 0.2}, continuous_ctx({1.0}, 0.2)),
                      DimensionError);
    REQUIRE_THROWS_AS(
        regent_continuous({std::numeric_limits<double>::quiet_NaN()}, continuous_ctx({1.0}, 0.2)),
        DomainError);
    REQUIRE_THROWS_AS(regent_continuous({0.1}, discrete_ctx(0, 0.2)), ContractViolation);
    REQUIRE_THROWS_AS(regent_discrete({0.1, 0.2}, continuous_ctx({1.0, 0.5}, 0.2), 2),
                      ContractViolation);
}

TEST_CASE("continuous interpolation is continuous in the distance") {
    // step the distance by 1e-4 and bound the output movement
    const std::vector<double> raw = {0.3};
    double prev = regent_continuous(raw, continuous_ctx({0.8}, 0.0))[0];
    for (int i = 1; i <= 10000; ++i) {
        const double d = double(i) / 10000.0;
        const double cur = regent_continuous(raw, continuous_ctx({0.8}, d))[0];
        // |d/dd (w a' + (1-w) L m)| <= lambda * |a' - L m| <= 10 * 2.2
        REQUIRE(std::abs(cur - prev) < 10.0 * 2.2 * 1e-4 + 1e-12);
        prev = cur;
    }
}

TEST_CASE("nearest-action replay returns the first neighbor's action") {
    const ContextDatapoint ctx = discrete_ctx(2, 0.7);
    REQUIRE(rnp_action(ctx) == ActValue::discrete(2));
    ContextDatapoint empty;
    empty.query_state = {0.0};
    REQUIRE_THROWS_AS(rnp_action(empty), ContractViolation);
}

TEST_CASE("argmax takes the lowest index on ties") {
    REQUIRE(argmax_index({0.1, 0.9, 0.9}) == 1);
    REQUIRE(argmax_index({0.5}) == 0);
    REQUIRE_THROWS_AS(argmax_index({}), DimensionError);
}
