#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "flowcast/analysis.hpp"
#include "flowcast/fields.hpp"
#include "flowcast/integrator.hpp"
#include "flowcast/rng.hpp"

using namespace flowcast;

namespace {

// Long-double oracle for the closed-form bound.
double bound_oracle(double m, double n, double h, double p, double eps, double t) {
    const long double term = static_cast<long double>(h) * n +
                             2.0L * static_cast<long double>(p) * sqrtl(eps);
    if (m == 0.0) return static_cast<double>(0.5L * t * term);
    return static_cast<double>(expm1l(static_cast<long double>(m) * t) / (2.0L * m) * term);
}

double epsilon_oracle(double q, double m) {
    const long double a = m == 0.0 ? 1.0L : expm1l(m) / static_cast<long double>(m);
    const long double half = q / (2.0L * a);
    return static_cast<double>(half * half);
}

}  // namespace

TEST_CASE("error bound at tabulated points matches the high-precision oracle") {
    struct Case {
        double m, n, h, p, eps, t, frozen;
    };
    // frozen values computed with the long-double oracle
    const Case cases[] = {
        {0.0, 1.0, 0.02, 0.0, 0.0, 1.0, 0.01},
        {1.0, 1.0, 0.02, 0.0, 0.0, 1.0, 0.017182818284590452},
        {1.0, 0.0, 0.02, 0.5, 0.01, 1.0, 0.085914091422952262},
    };
    for (const auto& c : cases) {
        const double got = error_bound(c.m, c.n, c.h, c.p, c.eps, c.t);
        CHECK_THAT(got, Catch::Matchers::WithinRel(c.frozen, 1e-12));
        CHECK_THAT(got, Catch::Matchers::WithinRel(bound_oracle(c.m, c.n, c.h, c.p, c.eps, c.t),
                                                   1e-12));
    }
}

TEST_CASE("error bound is monotone in every argument") {
    SplitMix64 rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const double m = 3.0 * rng.uniform01();
        const double n = 2.0 * rng.uniform01();
        const double h = 0.001 + 0.1 * rng.uniform01();
        const double p = rng.uniform01();
        const double eps = 0.1 * rng.uniform01();
        const double t = rng.uniform01();
        const double base = error_bound(m, n, h, p, eps, t);
        CHECK(error_bound(m + 0.5, n, h, p, eps, t) >= base);
        CHECK(error_bound(m, n + 0.5, h, p, eps, t) >= base);
        CHECK(error_bound(m, n, h + 0.01, p, eps, t) >= base);
        CHECK(error_bound(m, n, h, std::min(1.0, p + 0.1), eps, t) >= base);
        CHECK(error_bound(m, n, h, p, eps + 0.01, t) >= base);
        CHECK(error_bound(m, n, h, p, eps, std::min(1.0, t + 0.1)) >= base);
    }
}

TEST_CASE("error bound is continuous at M = 0") {
    for (double t : {0.1, 0.5, 1.0}) {
        const double at_zero = error_bound(0.0, 1.0, 0.05, 0.5, 0.01, t);
        const double near_zero = error_bound(1e-12, 1.0, 0.05, 0.5, 0.01, t);
        CHECK(std::abs(near_zero - at_zero) <= 1e-9);
    }
}

TEST_CASE("threshold selection rule") {
    SECTION("M = 0 limit: A = 1") {
        CHECK_THAT(epsilon_for_tolerance(0.2, 0.0), Catch::Matchers::WithinRel(0.01, 1e-15));
    }
    SECTION("M = 1 against the oracle") {
        const double got = epsilon_for_tolerance(0.1, 1.0);
        CHECK_THAT(got, Catch::Matchers::WithinRel(8.4674221834616475e-4, 1e-12));
        CHECK_THAT(got, Catch::Matchers::WithinRel(epsilon_oracle(0.1, 1.0), 1e-12));
    }
    SECTION("quadratic scaling: epsilon(2q) = 4 epsilon(q)") {
        SplitMix64 rng(23);
        for (int trial = 0; trial < 100; ++trial) {
            const double q = 0.001 + rng.uniform01();
            const double m = 3.0 * rng.uniform01();
            CHECK(epsilon_for_tolerance(2.0 * q, m) == 4.0 * epsilon_for_tolerance(q, m));
        }
    }
    SECTION("q_d must be positive") {
        CHECK_THROWS_AS(epsilon_for_tolerance(0.0, 1.0), std::invalid_argument);
        CHECK_THROWS_AS(epsilon_for_tolerance(-0.1, 1.0), std::invalid_argument);
    }
}

TEST_CASE("chosen thresholds keep the speculative term within budget by construction") {
    // A * p * sqrt(epsilon_for_tolerance(q, M)) = p * q / 2 <= q for p in [0, 1]
    SplitMix64 rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const double q = 0.001 + rng.uniform01();
        const double m = 4.0 * rng.uniform01();
        const double p = rng.uniform01();
        const double eps = epsilon_for_tolerance(q, m);
        const double spec_term = growth_factor(m) * p * std::sqrt(eps);
        CHECK(spec_term <= q * (1.0 + 1e-14));
        CHECK(spec_term <= 0.5 * q * (1.0 + 1e-12));
    }
}

TEST_CASE("deviation report") {
    const LinearField field({{-1.0}}, {0.0});
    const TimeGrid grid = make_uniform_grid(50);
    const auto [euler, euler_stats] = full_euler(field, grid, {1.0});
    const Trajectory reference = restrict_to_grid(reference_solution(field, {1.0}, 5000), grid);

    SECTION("epsilon-zero run has identically zero speculative deviation") {
        SpecConfig config;
        config.epsilon = 0.0;
        const SpeculativeResult res = speculative_euler(field, grid, {1.0}, config);
        const DeviationReport rep = deviation_report(res.trajectory, euler, reference);
        for (double d : rep.spec_deviation) CHECK(d == 0.0);
        CHECK(rep.max_spec_deviation == 0.0);
        CHECK(rep.per_step_error[0] == 0.0);
    }
    SECTION("Euler error against the reference matches the closed forms") {
        const DeviationReport rep = deviation_report(euler, euler, reference);
        const double expected = std::abs(std::exp(-1.0) - std::pow(0.98, 50.0));
        CHECK_THAT(rep.final_error, Catch::Matchers::WithinAbs(expected, 1e-9));
        CHECK(rep.max_error >= rep.final_error);
    }
    SECTION("constant fields are integrated exactly by all samplers") {
        const ConstantField cfield({1.0, -1.0});
        const TimeGrid cgrid = make_uniform_grid(20);
        const auto [ce, cs] = full_euler(cfield, cgrid, {0.0, 0.0});
        const Trajectory cref =
            restrict_to_grid(reference_solution(cfield, {0.0, 0.0}, 2000), cgrid);
        SpecConfig config;
        config.epsilon = 0.01;
        const SpeculativeResult res = speculative_euler(cfield, cgrid, {0.0, 0.0}, config);
        const DeviationReport rep = deviation_report(res.trajectory, ce, cref);
        for (double e : rep.per_step_error) CHECK(e <= 1e-12);
        for (double d : rep.spec_deviation) CHECK(d <= 1e-12);
    }
    SECTION("grid mismatch is rejected") {
        const auto [e10, s10] = full_euler(field, make_uniform_grid(10), {1.0});
        CHECK_THROWS_AS(deviation_report(e10, euler, reference), std::invalid_argument);
    }
}

TEST_CASE("bound evaluation") {
    const LinearField field({{-1.0, 0.0}, {0.0, -1.0}}, {0.0, 0.0});
    const TimeGrid grid = make_uniform_grid(50);
    const StateVector x0{1.0, 0.0};
    const auto [euler, euler_stats] = full_euler(field, grid, x0);
    const Trajectory reference = restrict_to_grid(reference_solution(field, x0, 5000), grid);

    SECTION("holds for a plain Euler run with declared constants") {
        SpecConfig config;
        config.epsilon = 0.0;
        const SpeculativeResult res = speculative_euler(field, grid, x0, config);
        const DeviationReport dev = deviation_report(res.trajectory, euler, reference);
        const FieldRegularity reg{1.0, 1.0, Provenance::declared};
        const BoundReport rep = evaluate_bound(reg, grid, res.stats, config, 2, dev);
        CHECK(rep.bound_holds);
        CHECK_FALSE(rep.advisory);
        CHECK(rep.per_step_bound[0] == 0.0);
        CHECK(rep.inputs.epsilon_effective == 0.0);
        // step 0 always carries the zero-error sentinel
        CHECK(is_tightness_sentinel(rep.tightness_ratio[0]));
        CHECK_FALSE(is_tightness_sentinel(rep.tightness_ratio[25]));
    }
    SECTION("constant field: bound and measured error both vanish") {
        const ConstantField cfield({1.0, -1.0});
        const TimeGrid cgrid = make_uniform_grid(20);
        const auto [ce, cs] = full_euler(cfield, cgrid, {0.5, 0.5});
        const Trajectory cref =
            restrict_to_grid(reference_solution(cfield, {0.5, 0.5}, 2000), cgrid);
        SpecConfig config;
        config.epsilon = 0.0;
        const SpeculativeResult res = speculative_euler(cfield, cgrid, {0.5, 0.5}, config);
        const DeviationReport dev = deviation_report(res.trajectory, ce, cref);
        const BoundReport rep = evaluate_bound(FieldRegularity{0.0, 0.0, Provenance::declared},
                                               cgrid, res.stats, config, 2, dev);
        CHECK(rep.bound_holds);
        for (double b : rep.per_step_bound) CHECK(b == 0.0);
        for (double r : rep.tightness_ratio) CHECK(is_tightness_sentinel(r));
    }
    SECTION("estimated Lipschitz constants demote the verdict to advisory") {
        SpecConfig config;
        config.epsilon = 1e-3;
        const SpeculativeResult res = speculative_euler(field, grid, x0, config);
        const DeviationReport dev = deviation_report(res.trajectory, euler, reference);
        const BoundReport rep = evaluate_bound(FieldRegularity{1.0, 1.0, Provenance::estimated},
                                               grid, res.stats, config, 2, dev);
        CHECK(rep.advisory);
    }
    SECTION("the MSE threshold enters through the d*epsilon conversion") {
        SpecConfig config;
        config.epsilon = 1e-3;
        const SpeculativeResult res = speculative_euler(field, grid, x0, config);
        const DeviationReport dev = deviation_report(res.trajectory, euler, reference);
        const BoundReport rep = evaluate_bound(FieldRegularity{1.0, 1.0, Provenance::declared},
                                               grid, res.stats, config, 2, dev);
        CHECK(rep.inputs.epsilon_effective == 2e-3);
        CHECK_THAT(rep.per_step_bound.back(),
                   Catch::Matchers::WithinRel(
                       bound_oracle(1.0, 1.0, 0.02, res.stats.acceptance_fraction, 2e-3, 1.0),
                       1e-12));
    }
}

TEST_CASE("report JSON has the documented keys") {
    const LinearField field({{-1.0}}, {0.0});
    const TimeGrid grid = make_uniform_grid(10);
    const auto [euler, euler_stats] = full_euler(field, grid, {1.0});
    const Trajectory reference = restrict_to_grid(reference_solution(field, {1.0}, 1000), grid);
    SpecConfig config;
    config.epsilon = 1e-3;
    const SpeculativeResult res = speculative_euler(field, grid, {1.0}, config);
    const DeviationReport dev = deviation_report(res.trajectory, euler, reference);
    const BoundReport rep = evaluate_bound(FieldRegularity{1.0, 1.0, Provenance::declared},
                                           grid, res.stats, config, 1, dev);

    const auto j = to_json(rep);
    CHECK(j.contains("per_step_bound"));
    CHECK(j.contains("empirical"));
    CHECK(j.at("empirical").contains("per_step_error"));
    CHECK(j.at("empirical").contains("spec_deviation"));
    CHECK(j.contains("tightness_ratio"));
    CHECK(j.at("tightness_ratio")[0].is_null());  // sentinel serializes as null
    CHECK(j.contains("bound_holds"));
    CHECK(j.at("inputs").at("provenance") == "declared");
    CHECK(j.at("inputs").at("dimension") == 1);

    const auto jt = to_json(res.trace);
    REQUIRE(jt.at("rounds").is_array());
    CHECK(jt.at("rounds")[0].contains("anchor_index"));
    CHECK(jt.at("rounds")[0].contains("drafted_indices"));
    CHECK(jt.at("rounds")[0].contains("verification_errors"));
    CHECK(jt.at("rounds")[0].at("outcome").contains("type"));
}
