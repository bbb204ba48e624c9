#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "json.hpp"

#include "flowcast/fields.hpp"
#include "flowcast/integrator.hpp"
#include "flowcast/rng.hpp"

using namespace flowcast;

namespace {

struct BlowupField final : VelocityField {
    int dim() const override { return 1; }
    StateVector eval(const StateVector&, double t) const override {
        if (t >= 0.5) return {std::numeric_limits<double>::infinity()};
        return {1.0};
    }
};

std::vector<std::shared_ptr<VelocityField>> shipped_fields() {
    return {
        std::make_shared<ConstantField>(StateVector{1.0, -1.0}),
        std::make_shared<LinearField>(Matrix{{-1.0, 0.0}, {0.0, -1.0}}, StateVector{0.0, 0.0}),
        std::make_shared<RotationField>(1.0),
        std::make_shared<GaussianBridgeField>(StateVector{3.0, 0.0}, 1.0, 1.0),
        std::make_shared<GaussianBridgeField>(StateVector{3.0, 0.0}, 1.0, 0.1),
    };
}

double max_coordinate_gap(const Trajectory& a, const Trajectory& b) {
    double worst = 0.0;
    for (std::size_t k = 0; k < a.states.size(); ++k) {
        for (std::size_t i = 0; i < a.states[k].size(); ++i) {
            worst = std::max(worst, std::abs(a.states[k][i] - b.states[k][i]));
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("Euler on a constant field telescopes to x0 + c") {
    const ConstantField field({0.3, -0.7});
    for (int K : {1, 7, 50}) {
        const auto [traj, stats] = full_euler(field, make_uniform_grid(K), {1.0, 2.0});
        CHECK_THAT(traj.states.back()[0], Catch::Matchers::WithinAbs(1.3, 1e-12));
        CHECK_THAT(traj.states.back()[1], Catch::Matchers::WithinAbs(1.3, 1e-12));
        CHECK(stats.rounds_folded == K);
        CHECK(stats.rounds_strict == K);
        CHECK(stats.total_evals == K);
        CHECK(stats.acceptance_fraction == 0.0);
    }
}

TEST_CASE("Euler contraction matches the closed-form product") {
    // dx/dt = -x, x0 = 1, K = 50 uniform: x_K = (1 - 0.02)^50
    const LinearField field({{-1.0}}, {0.0});
    const auto [traj, stats] = full_euler(field, make_uniform_grid(50), {1.0});
    long double product = 1.0L;
    for (int k = 0; k < 50; ++k) product *= (1.0L - 0.02L);
    CHECK_THAT(traj.states.back()[0],
               Catch::Matchers::WithinRel(static_cast<double>(product), 1e-12));
    CHECK_THAT(traj.states.back()[0],
               Catch::Matchers::WithinRel(std::pow(0.98, 50.0), 1e-12));
}

TEST_CASE("Euler single step") {
    const GaussianBridgeField field({3.0, 0.0}, 1.0, 1.0);
    const StateVector x0{0.5, -0.5};
    const auto [traj, stats] = full_euler(field, make_uniform_grid(1), x0);
    const StateVector v0 = field.eval(x0, 0.0);
    CHECK(traj.states[1][0] == x0[0] + 1.0 * v0[0]);
    CHECK(traj.states[1][1] == x0[1] + 1.0 * v0[1]);
    CHECK(stats.rounds_folded == 1);
}

TEST_CASE("Euler reports the blow-up step") {
    CHECK_THROWS_WITH(full_euler(BlowupField{}, make_uniform_grid(10), {0.0}),
                      Catch::Matchers::ContainsSubstring("step 6"));
}

TEST_CASE("speculative run on a constant field: one verification round") {
    const ConstantField field({1.0, -1.0});
    for (double eps : {0.0, 0.01, 1.0}) {
        for (int K : {5, 50}) {
            SpecConfig config;
            config.epsilon = eps;
            const SpeculativeResult res = speculative_euler(field, make_uniform_grid(K), {0.0, 0.0}, config);
            CHECK(res.stats.rounds_folded == 2);
            CHECK(res.stats.rounds_strict == 2);
            CHECK(res.stats.total_evals == K + 1);
            CHECK(res.stats.correction_rounds == 0);
            CHECK(res.stats.accepted_draft_steps == K - 1);
            CHECK(res.stats.acceptance_fraction ==
                  static_cast<double>(K - 1) / static_cast<double>(K));
            REQUIRE(res.trace.rounds.size() == 1);
            CHECK_FALSE(res.trace.rounds[0].rejected_at.has_value());

            const auto [euler, euler_stats] = full_euler(field, make_uniform_grid(K), {0.0, 0.0});
            CHECK(max_coordinate_gap(res.trajectory, euler) <= 1e-12);
        }
    }
}

TEST_CASE("epsilon 0 reproduces Euler exactly on strictly varying fields") {
    // every round rejects its first draft, so each step is a plain Euler step
    const StateVector x0 = sample_gaussian_state(7, 2, {0.0, 0.0}, 1.0);
    for (const auto& field :
         {std::static_pointer_cast<VelocityField>(
              std::make_shared<LinearField>(Matrix{{-1.0, 0.0}, {0.0, -1.0}},
                                            StateVector{0.0, 0.0})),
          std::static_pointer_cast<VelocityField>(
              std::make_shared<GaussianBridgeField>(StateVector{3.0, 0.0}, 1.0, 1.0)),
          std::static_pointer_cast<VelocityField>(std::make_shared<RotationField>(1.0))}) {
        for (int K : {5, 25}) {
            SpecConfig config;
            config.epsilon = 0.0;
            const SpeculativeResult res = speculative_euler(*field, make_uniform_grid(K), x0, config);
            const auto [euler, euler_stats] = full_euler(*field, make_uniform_grid(K), x0);
            CHECK(res.trajectory.states == euler.states);  // bit-for-bit
            CHECK(res.stats.acceptance_fraction == 0.0);
            CHECK(res.stats.rounds_folded == K + 1);
            for (const auto& round : res.trace.rounds) {
                REQUIRE(round.rejected_at.has_value());
                CHECK(*round.rejected_at == round.anchor_index + 1);
            }
        }
    }
}

TEST_CASE("epsilon 0 equivalence across shipped fields and grids, 1e-12 per coordinate") {
    const StateVector x0 = sample_gaussian_state(7, 2, {0.0, 0.0}, 1.0);
    for (const auto& field : shipped_fields()) {
        for (int K : {5, 10, 25, 50}) {
            SpecConfig config;
            config.epsilon = 0.0;
            const SpeculativeResult res = speculative_euler(*field, make_uniform_grid(K), x0, config);
            const auto [euler, euler_stats] = full_euler(*field, make_uniform_grid(K), x0);
            CHECK(max_coordinate_gap(res.trajectory, euler) <= 1e-12);
        }
    }
}

TEST_CASE("trace invariants hold across thresholds") {
    const GaussianBridgeField field({3.0, 0.0}, 1.0, 1.0);
    const TimeGrid grid = make_uniform_grid(50);
    for (long seed : {0L, 1L, 2L}) {
        const StateVector x0 =
            sample_gaussian_state(static_cast<std::uint64_t>(seed), 2, {0.0, 0.0}, 1.0);
        for (double eps : {0.0, 1e-4, 1e-3, 1e-2, 1e-1}) {
            SpecConfig config;
            config.epsilon = eps;
            const SpeculativeResult res = speculative_euler(field, grid, x0, config);

            CHECK(res.stats.rounds_folded <= 51);
            CHECK(res.stats.rounds_strict >= res.stats.rounds_folded);
            CHECK(res.stats.total_evals >= res.stats.rounds_folded);
            CHECK(res.stats.acceptance_fraction >= 0.0);
            CHECK(res.stats.acceptance_fraction <= 1.0);

            int prev_anchor = -1;
            for (const auto& round : res.trace.rounds) {
                CHECK(round.anchor_index > prev_anchor);
                prev_anchor = round.anchor_index;

                // drafted indices cover anchor+1 .. K
                CHECK(round.drafted_states.size() ==
                      static_cast<std::size_t>(50 - round.anchor_index));

                // the first failing index is recorded, nothing before it fails
                if (round.rejected_at.has_value()) {
                    const int j = *round.rejected_at;
                    CHECK(round.verification_errors[static_cast<std::size_t>(
                              j - round.anchor_index - 1)] > eps);
                    for (int k = round.anchor_index + 1; k < j; ++k) {
                        CHECK(round.verification_errors[static_cast<std::size_t>(
                                  k - round.anchor_index - 1)] <= eps);
                    }
                } else {
                    for (double e : round.verification_errors) CHECK(e <= eps);
                }
            }
        }
    }
}

TEST_CASE("trace replay reproduces drafts and errors bit for bit") {
    const GaussianBridgeField field({3.0, 0.0}, 1.0, 1.0);
    const TimeGrid grid = make_uniform_grid(50);
    const StateVector x0 = sample_gaussian_state(3, 2, {0.0, 0.0}, 1.0);
    SpecConfig config;
    config.epsilon = 1e-3;
    const SpeculativeResult res = speculative_euler(field, grid, x0, config);

    REQUIRE(!res.trace.rounds.empty());
    for (const auto& round : res.trace.rounds) {
        const double t_m = grid.node(round.anchor_index);
        // the anchor state is the trajectory state at the anchor node
        CHECK(round.anchor_state ==
              res.trajectory.states[static_cast<std::size_t>(round.anchor_index)]);
        for (std::size_t i = 0; i < round.drafted_states.size(); ++i) {
            const int k = round.anchor_index + 1 + static_cast<int>(i);
            StateVector replay(round.anchor_state.size());
            for (std::size_t c = 0; c < replay.size(); ++c) {
                replay[c] =
                    round.anchor_state[c] + (grid.node(k) - t_m) * round.anchor_velocity[c];
            }
            CHECK(replay == round.drafted_states[i]);
            CHECK(round.verification_errors[i] ==
                  mse(round.anchor_velocity, field.eval(round.drafted_states[i], grid.node(k))));
        }
        // accepted drafts are exactly the linear extrapolation from the anchor
        const int upto = round.rejected_at.has_value() ? *round.rejected_at
                                                       : grid.step_count() + 1;
        for (int k = round.anchor_index + 1; k < upto; ++k) {
            CHECK(res.trajectory.states[static_cast<std::size_t>(k)] ==
                  round.drafted_states[static_cast<std::size_t>(k - round.anchor_index - 1)]);
        }
    }
}

TEST_CASE("literal correction policy") {
    SECTION("identical on a constant field") {
        const ConstantField field({1.0, -1.0});
        SpecConfig config;
        config.epsilon = 0.0;
        config.policy = CorrectionPolicy::literal;
        const SpeculativeResult res = speculative_euler(field, make_uniform_grid(20), {0.0, 0.0}, config);
        CHECK(res.stats.rounds_folded == 2);
    }
    SECTION("does not progress when the first draft is rejected") {
        const GaussianBridgeField field({3.0, 0.0}, 1.0, 1.0);
        SpecConfig config;
        config.epsilon = 0.0;
        config.policy = CorrectionPolicy::literal;
        const StateVector x0 = sample_gaussian_state(7, 2, {0.0, 0.0}, 1.0);
        CHECK_THROWS_WITH(speculative_euler(field, make_uniform_grid(10), x0, config),
                          Catch::Matchers::ContainsSubstring("max_rounds"));
    }
}

TEST_CASE("non-finite drafts carry round and index") {
    SpecConfig config;
    config.epsilon = 1.0;
    CHECK_THROWS_WITH(speculative_euler(BlowupField{}, make_uniform_grid(10), {0.0}, config),
                      Catch::Matchers::ContainsSubstring("index"));
}

TEST_CASE("reference solution") {
    SECTION("constant field is an exact straight line") {
        const ConstantField field({2.0});
        const Trajectory traj = reference_solution(field, {1.0}, 100);
        for (int i = 0; i <= 100; ++i) {
            CHECK_THAT(traj.states[static_cast<std::size_t>(i)][0],
                       Catch::Matchers::WithinAbs(1.0 + 2.0 * traj.grid.node(i), 1e-13));
        }
    }
    SECTION("contraction reaches e^{-1} to 1e-10") {
        const LinearField field({{-1.0}}, {0.0});
        const Trajectory traj = reference_solution(field, {1.0}, 10000);
        CHECK_THAT(traj.states.back()[0],
                   Catch::Matchers::WithinAbs(std::exp(-1.0), 1e-10));
    }
    SECTION("full rotation returns to the start") {
        const RotationField field(2.0 * std::numbers::pi);
        const Trajectory traj = reference_solution(field, {1.0, 0.0}, 10000);
        CHECK_THAT(traj.states.back()[0], Catch::Matchers::WithinAbs(1.0, 1e-6));
        CHECK_THAT(traj.states.back()[1], Catch::Matchers::WithinAbs(0.0, 1e-6));
    }
}

TEST_CASE("restriction to coarser grids") {
    const LinearField field({{-1.0}}, {0.0});
    const Trajectory fine = reference_solution(field, {1.0}, 1000);

    SECTION("aligned uniform grid") {
        const Trajectory coarse = restrict_to_grid(fine, make_uniform_grid(50));
        CHECK(coarse.states.size() == 51);
        CHECK(coarse.states[0] == fine.states[0]);
        CHECK(coarse.states[50] == fine.states[1000]);
        CHECK(coarse.states[1] == fine.states[20]);
    }
    SECTION("aligned non-uniform grid") {
        const Trajectory coarse = restrict_to_grid(fine, TimeGrid({0.0, 0.25, 0.5, 1.0}));
        CHECK(coarse.states[1] == fine.states[250]);
    }
    SECTION("misaligned node is rejected") {
        CHECK_THROWS_WITH(restrict_to_grid(fine, TimeGrid({0.0, 1.0 / 3.0, 1.0})),
                          Catch::Matchers::ContainsSubstring("not divisible"));
    }
    SECTION("insufficient refinement is rejected") {
        CHECK_THROWS_WITH(restrict_to_grid(fine, make_uniform_grid(200)),
                          Catch::Matchers::ContainsSubstring("10x"));
    }
}

TEST_CASE("golden speculative run is stable") {
    // gauss-bridge, x0 sampled with seed 7, K = 50, epsilon = 0.01; values
    // frozen from the first verified run of this implementation.
    std::ifstream in(std::string(FLOWCAST_GOLDEN_DIR) + "/gauss-bridge-seed7-eps1e-2.json");
    REQUIRE(in.good());
    nlohmann::json golden;
    in >> golden;

    const GaussianBridgeField field({3.0, 0.0}, 1.0, 1.0);
    const TimeGrid grid = make_uniform_grid(50);
    const StateVector x0 = sample_gaussian_state(7, 2, {0.0, 0.0}, 1.0);
    SpecConfig config;
    config.epsilon = 0.01;
    const SpeculativeResult res = speculative_euler(field, grid, x0, config);
    const auto [euler, euler_stats] = full_euler(field, grid, x0);

    CHECK(res.stats.rounds_folded == golden.at("rounds_folded").get<long>());
    CHECK(res.stats.rounds_strict == golden.at("rounds_strict").get<long>());
    CHECK(res.stats.total_evals == golden.at("total_evals").get<long>());
    CHECK(res.stats.acceptance_fraction > 0.0);
    CHECK_THAT(res.stats.acceptance_fraction,
               Catch::Matchers::WithinAbs(golden.at("acceptance_fraction").get<double>(), 1e-12));
    const auto final_state = golden.at("final_state").get<StateVector>();
    REQUIRE(final_state.size() == 2);
    CHECK_THAT(res.trajectory.states.back()[0],
               Catch::Matchers::WithinAbs(final_state[0], 1e-12));
    CHECK_THAT(res.trajectory.states.back()[1],
               Catch::Matchers::WithinAbs(final_state[1], 1e-12));

    // deviation from plain Euler stays below the tolerance budget that the
    // threshold-selection rule associates with epsilon = 0.01 (q = 2 A sqrt(eps))
    double dev = 0.0;
    for (std::size_t k = 0; k < euler.states.size(); ++k) {
        dev = std::max(dev, distance(res.trajectory.states[k], euler.states[k]));
    }
    const double budget = 2.0 * (std::expm1(1.0) / 1.0) * std::sqrt(0.01);
    CHECK(dev <= budget);
    CHECK_THAT(dev, Catch::Matchers::WithinAbs(golden.at("max_spec_deviation").get<double>(),
                                               1e-12));
}
