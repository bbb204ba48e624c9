#pragma once

// Quantitative guarantees: the worst-case trajectory error bound for Euler
// integration with speculative velocity reuse, the threshold selection rule
// that keeps the speculative deviation within a budget, and the machinery
// for comparing bound against measured error.

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowcast/core.hpp"
#include "flowcast/fields.hpp"
#include "flowcast/integrator.hpp"

namespace flowcast {

/// Equality slack used throughout: floating-point accumulation noise sits
/// outside the real-analysis statement the bound makes.
inline constexpr double kEqualityTolerance = 1e-12;

/// Worst-case distance between the exact solution and the Euler iterate at
/// time t, when a fraction p of the steps reused a velocity whose deviation
/// from the true one is at most sqrt(epsilon):
///
///     (e^{M t} - 1) / (2 M) * (h N + 2 p sqrt(epsilon)),
///
/// evaluated through expm1 so the M -> 0 limit, (t/2)(hN + 2p sqrt(eps)),
/// is reached continuously.
inline double error_bound(double lipschitz, double curvature, double max_step,
                          double acceptance_fraction, double epsilon, double t) {
    if (!(lipschitz >= 0.0)) throw std::invalid_argument("error_bound: M must be >= 0");
    if (!(curvature >= 0.0)) throw std::invalid_argument("error_bound: N must be >= 0");
    if (!(max_step > 0.0)) throw std::invalid_argument("error_bound: h must be > 0");
    if (!(acceptance_fraction >= 0.0 && acceptance_fraction <= 1.0)) {
        throw std::invalid_argument("error_bound: p must be in [0, 1]");
    }
    if (!(epsilon >= 0.0)) throw std::invalid_argument("error_bound: epsilon must be >= 0");
    const double term = max_step * curvature + 2.0 * acceptance_fraction * std::sqrt(epsilon);
    if (lipschitz == 0.0) return 0.5 * t * term;
    return std::expm1(lipschitz * t) / (2.0 * lipschitz) * term;
}

/// Growth factor A = (e^M - 1) / M, with A = 1 at M = 0.
inline double growth_factor(double lipschitz) {
    if (!(lipschitz >= 0.0)) throw std::invalid_argument("growth_factor: M must be >= 0");
    if (lipschitz == 0.0) return 1.0;
    return std::expm1(lipschitz) / lipschitz;
}

/// Largest acceptance threshold guaranteeing that the deviation between the
/// speculative and the plain Euler trajectory stays within q_d:
/// epsilon = (q_d / (2 A))^2 with A = (e^M - 1) / M.
inline double epsilon_for_tolerance(double q_d, double lipschitz) {
    if (!(q_d > 0.0)) throw std::invalid_argument("epsilon_for_tolerance: q_d must be > 0");
    const double half = q_d / (2.0 * growth_factor(lipschitz));
    return half * half;
}

/// Measured per-node errors for one run.
///   per_step_error[k]  = ||x_ref(t_k) - x_spec(t_k)||  (error vs ground truth)
///   spec_deviation[k]  = ||x_spec(t_k) - x_euler(t_k)|| (cost of speculation)
/// max_error / final_error summarize per_step_error.
struct DeviationReport {
    std::vector<double> per_step_error;
    std::vector<double> spec_deviation;
    double max_error = 0.0;
    double final_error = 0.0;
    double max_spec_deviation = 0.0;
    double final_spec_deviation = 0.0;
};

inline DeviationReport deviation_report(const Trajectory& spec, const Trajectory& euler,
                                        const Trajectory& reference) {
    if (!(spec.grid == euler.grid) || !(spec.grid == reference.grid)) {
        throw std::invalid_argument("deviation_report: trajectories must share grid nodes");
    }
    DeviationReport rep;
    const std::size_t n = spec.states.size();
    rep.per_step_error.reserve(n);
    rep.spec_deviation.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const double err = distance(reference.states[k], spec.states[k]);
        const double dev = distance(spec.states[k], euler.states[k]);
        rep.per_step_error.push_back(err);
        rep.spec_deviation.push_back(dev);
        rep.max_error = std::max(rep.max_error, err);
        rep.max_spec_deviation = std::max(rep.max_spec_deviation, dev);
    }
    rep.final_error = rep.per_step_error.back();
    rep.final_spec_deviation = rep.spec_deviation.back();
    return rep;
}

/// Everything that entered a bound evaluation. `epsilon_effective` is
/// dimension * epsilon: acceptance thresholds the mean MSE, while the bound
/// needs a Euclidean norm, and mse(u, v) <= eps implies
/// ||u - v|| <= sqrt(d * eps). The conversion is applied, not hidden.
struct BoundInputs {
    double lipschitz = 0.0;
    double curvature = 0.0;
    double max_step = 0.0;
    double acceptance_fraction = 0.0;
    double epsilon = 0.0;
    double epsilon_effective = 0.0;
    int dimension = 0;
    Provenance provenance = Provenance::declared;
};

/// Bound evaluated at every grid node against the measured error.
/// tightness_ratio[k] = per_step_bound[k] / per_step_error[k]; steps whose
/// measured error is numerically zero carry a NaN sentinel (serialized as
/// null) instead of an infinite ratio. `advisory` is set when the Lipschitz
/// constant was estimated by sampling, which makes it a lower bound and the
/// guarantee only indicative.
struct BoundReport {
    std::vector<double> per_step_bound;
    DeviationReport empirical;
    std::vector<double> tightness_ratio;
    bool bound_holds = false;
    bool advisory = false;
    BoundInputs inputs;
};

inline bool is_tightness_sentinel(double r) { return std::isnan(r); }

inline BoundReport evaluate_bound(const FieldRegularity& regularity, const TimeGrid& grid,
                                  const RunStats& stats, const SpecConfig& config,
                                  int dimension, const DeviationReport& deviation) {
    if (dimension < 1) throw std::invalid_argument("evaluate_bound: dimension must be >= 1");
    if (deviation.per_step_error.size() != static_cast<std::size_t>(grid.step_count()) + 1) {
        throw std::invalid_argument("evaluate_bound: deviation report does not match grid");
    }
    BoundReport rep;
    rep.inputs.lipschitz = regularity.lipschitz;
    rep.inputs.curvature = regularity.curvature;
    rep.inputs.max_step = grid.max_step();
    rep.inputs.acceptance_fraction = stats.acceptance_fraction;
    rep.inputs.epsilon = config.epsilon;
    rep.inputs.epsilon_effective = static_cast<double>(dimension) * config.epsilon;
    rep.inputs.dimension = dimension;
    rep.inputs.provenance = regularity.provenance;
    rep.advisory = regularity.provenance == Provenance::estimated;

    const int K = grid.step_count();
    rep.per_step_bound.reserve(static_cast<std::size_t>(K) + 1);
    rep.tightness_ratio.reserve(static_cast<std::size_t>(K) + 1);
    rep.bound_holds = true;
    for (int k = 0; k <= K; ++k) {
        const double t = grid.node(k);
        const double bound =
            (k == 0) ? 0.0
                     : error_bound(regularity.lipschitz, regularity.curvature, grid.max_step(),
                                   stats.acceptance_fraction, rep.inputs.epsilon_effective, t);
        const double emp = deviation.per_step_error[static_cast<std::size_t>(k)];
        rep.per_step_bound.push_back(bound);
        if (emp > bound + kEqualityTolerance) rep.bound_holds = false;
        rep.tightness_ratio.push_back(emp <= kEqualityTolerance
                                          ? std::numeric_limits<double>::quiet_NaN()
                                          : bound / emp);
    }
    rep.empirical = deviation;
    return rep;
}

// ---------------------------------------------------------------------------
// JSON serialization (fixed key names; see docs/formats.md)
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const DeviationReport& rep) {
    return nlohmann::ordered_json{
        {"per_step_error", rep.per_step_error},
        {"spec_deviation", rep.spec_deviation},
        {"max_error", rep.max_error},
        {"final_error", rep.final_error},
        {"max_spec_deviation", rep.max_spec_deviation},
        {"final_spec_deviation", rep.final_spec_deviation},
    };
}

inline nlohmann::ordered_json to_json(const BoundReport& rep) {
    nlohmann::ordered_json ratios = nlohmann::ordered_json::array();
    for (double r : rep.tightness_ratio) {
        if (is_tightness_sentinel(r)) {
            ratios.push_back(nullptr);
        } else {
            ratios.push_back(r);
        }
    }
    return nlohmann::ordered_json{
        {"per_step_bound", rep.per_step_bound},
        {"empirical", to_json(rep.empirical)},
        {"tightness_ratio", ratios},
        {"tightness_sentinel", "null marks steps with numerically zero measured error"},
        {"bound_holds", rep.bound_holds},
        {"advisory", rep.advisory},
        {"inputs",
         nlohmann::ordered_json{
             {"lipschitz", rep.inputs.lipschitz},
             {"curvature", rep.inputs.curvature},
             {"max_step", rep.inputs.max_step},
             {"acceptance_fraction", rep.inputs.acceptance_fraction},
             {"epsilon", rep.inputs.epsilon},
             {"epsilon_effective", rep.inputs.epsilon_effective},
             {"dimension", rep.inputs.dimension},
             {"provenance", to_string(rep.inputs.provenance)},
         }},
    };
}

inline nlohmann::ordered_json to_json(const SpecTrace& trace) {
    nlohmann::ordered_json rounds = nlohmann::ordered_json::array();
    for (const auto& r : trace.rounds) {
        nlohmann::ordered_json indices = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < r.drafted_states.size(); ++i) {
            indices.push_back(r.anchor_index + 1 + static_cast<int>(i));
        }
        nlohmann::ordered_json round{
            {"anchor_index", r.anchor_index},
            {"anchor_state", r.anchor_state},
            {"anchor_velocity", r.anchor_velocity},
            {"drafted_indices", indices},
            {"drafted_states", r.drafted_states},
            {"verification_errors", r.verification_errors},
        };
        if (r.rejected_at.has_value()) {
            round["outcome"] = nlohmann::ordered_json{{"type", "rejected_at"},
                                                      {"index", *r.rejected_at}};
        } else {
            round["outcome"] = nlohmann::ordered_json{{"type", "all_accepted"}};
        }
        rounds.push_back(std::move(round));
    }
    return nlohmann::ordered_json{{"rounds", rounds}};
}

inline nlohmann::ordered_json to_json(const RunStats& stats) {
    return nlohmann::ordered_json{
        {"rounds_folded", stats.rounds_folded},
        {"rounds_strict", stats.rounds_strict},
        {"total_evals", stats.total_evals},
        {"accepted_draft_steps", stats.accepted_draft_steps},
        {"correction_rounds", stats.correction_rounds},
        {"acceptance_fraction", stats.acceptance_fraction},
    };
}

}  // namespace flowcast
