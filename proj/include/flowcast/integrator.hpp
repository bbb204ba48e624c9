#pragma once

// The three samplers: baseline forward Euler, speculative generation with
// constant-velocity drafts, and a high-resolution Runge-Kutta reference
// used as the ground-truth oracle for discretization error.

#include <cmath>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowcast/core.hpp"

namespace flowcast {

/// Discrete path: one state per grid node (K+1 states for K steps).
struct Trajectory {
    TimeGrid grid;
    std::vector<StateVector> states;
};

/// One drafting/verification round. Drafted indices run from
/// anchor_index+1 to K in order; drafted_states[i] and
/// verification_errors[i] belong to grid index anchor_index+1+i.
/// rejected_at is empty when the whole draft was accepted.
struct RoundRecord {
    int anchor_index = 0;
    StateVector anchor_state;
    StateVector anchor_velocity;
    std::vector<StateVector> drafted_states;
    std::vector<double> verification_errors;
    std::optional<int> rejected_at;
};

/// Complete audit record of a speculative run: replaying the linear
/// extrapolation from each recorded anchor reproduces the drafted states
/// bit for bit.
struct SpecTrace {
    std::vector<RoundRecord> rounds;
};

struct SpeculativeResult {
    Trajectory trajectory;
    RunStats stats;
    SpecTrace trace;
};

namespace detail {

inline void check_state_finite(const StateVector& x, const std::string& where) {
    if (!all_finite(x)) {
        throw std::runtime_error("non-finite state produced at " + where +
                                 " (field blow-up?)");
    }
}

inline StateVector extrapolate(const StateVector& x, double dt, const StateVector& v) {
    StateVector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + dt * v[i];
    return out;
}

}  // namespace detail

/// Forward Euler baseline: x_{k+1} = x_k + dt_k * v(x_k, t_k).
/// Every step is one sequential model call, so rounds = evals = K.
inline std::pair<Trajectory, RunStats> full_euler(const VelocityField& field,
                                                  const TimeGrid& grid,
                                                  const StateVector& x0) {
    if (x0.size() != static_cast<std::size_t>(field.dim())) {
        throw std::invalid_argument("full_euler: x0 dimension " + std::to_string(x0.size()) +
                                    " does not match field dimension " +
                                    std::to_string(field.dim()));
    }
    detail::check_state_finite(x0, "step 0 (initial state)");
    const int K = grid.step_count();
    std::vector<StateVector> states;
    states.reserve(static_cast<std::size_t>(K) + 1);
    states.push_back(x0);
    for (int k = 0; k < K; ++k) {
        const StateVector v = field.eval(states.back(), grid.node(k));
        states.push_back(detail::extrapolate(states.back(), grid.step(k), v));
        detail::check_state_finite(states.back(), "step " + std::to_string(k + 1));
    }
    RunStats stats;
    stats.rounds_folded = K;
    stats.rounds_strict = K;
    stats.total_evals = K;
    stats.accepted_draft_steps = 0;
    stats.correction_rounds = 0;
    stats.acceptance_fraction = 0.0;
    return {Trajectory{grid, std::move(states)}, stats};
}

/// Speculative generation. From the current anchor m the remaining path is
/// drafted by reusing the anchor velocity,
///     draft_k = x_m + (t_k - t_m) * v_m   for k = m+1..K,
/// then all drafts are verified in one batch by evaluating the model at the
/// drafted points and comparing MSE(v_m, v_k) against epsilon. The first
/// index j whose error exceeds epsilon triggers a correction: drafts before
/// j stay, x_j is the Euler step from the last verified state, and the
/// anchor moves to j.
///
/// Cost accounting: each verification batch is one round. A rejection at
/// j = m+1 re-anchors onto a state whose velocity the batch just computed,
/// so it costs nothing extra. A rejection further out needs one fresh
/// evaluation at the corrected state before the next round can draft;
/// rounds_folded treats that evaluation as part of the next batch while
/// rounds_strict charges it as its own round. total_evals counts every
/// individual model evaluation either way.
inline SpeculativeResult speculative_euler(const VelocityField& field, const TimeGrid& grid,
                                           const StateVector& x0, const SpecConfig& config) {
    if (!(config.epsilon >= 0.0)) {
        throw std::invalid_argument("speculative_euler: epsilon must be >= 0");
    }
    if (x0.size() != static_cast<std::size_t>(field.dim())) {
        throw std::invalid_argument("speculative_euler: x0 dimension " +
                                    std::to_string(x0.size()) +
                                    " does not match field dimension " +
                                    std::to_string(field.dim()));
    }
    detail::check_state_finite(x0, "round 1, index 0 (initial state)");

    const int K = grid.step_count();
    const long max_rounds = config.max_rounds > 0 ? config.max_rounds : 4L * K;
    const bool literal = config.policy == CorrectionPolicy::literal;

    std::vector<StateVector> states(static_cast<std::size_t>(K) + 1);
    states[0] = x0;

    RunStats stats;
    SpecTrace trace;

    StateVector anchor_velocity = field.eval(x0, grid.node(0));
    stats.total_evals = 1;
    stats.rounds_folded = 1;
    long strict_extra = 0;

    int m = 0;
    while (m < K) {
        if (stats.rounds_folded >= max_rounds) {
            throw std::runtime_error(
                "speculative_euler: max_rounds (" + std::to_string(max_rounds) +
                ") exceeded at anchor index " + std::to_string(m) +
                (literal ? " (the literal correction policy does not progress when"
                           " the first draft is rejected)"
                         : " (internal error: the progress invariant is violated)"));
        }

        RoundRecord round;
        round.anchor_index = m;
        round.anchor_state = states[static_cast<std::size_t>(m)];
        round.anchor_velocity = anchor_velocity;

        const double t_m = grid.node(m);
        std::vector<std::pair<StateVector, double>> points;
        points.reserve(static_cast<std::size_t>(K - m));
        for (int k = m + 1; k <= K; ++k) {
            StateVector draft =
                detail::extrapolate(round.anchor_state, grid.node(k) - t_m, anchor_velocity);
            if (!all_finite(draft)) {
                throw std::runtime_error("speculative_euler: non-finite draft in round " +
                                         std::to_string(stats.rounds_folded + 1) +
                                         " at index " + std::to_string(k));
            }
            points.emplace_back(std::move(draft), grid.node(k));
        }

        // One parallel verification batch: one sequential round.
        std::vector<StateVector> velocities = field.batch_eval(points);
        stats.rounds_folded += 1;
        stats.total_evals += K - m;

        round.drafted_states.reserve(points.size());
        round.verification_errors.reserve(points.size());
        for (std::size_t i = 0; i < points.size(); ++i) {
            round.drafted_states.push_back(points[i].first);
            round.verification_errors.push_back(mse(anchor_velocity, velocities[i]));
        }

        int j = -1;
        for (int k = m + 1; k <= K; ++k) {
            if (round.verification_errors[static_cast<std::size_t>(k - m - 1)] >
                config.epsilon) {
                j = k;
                break;
            }
        }
        round.rejected_at = (j < 0) ? std::nullopt : std::optional<int>(j);
        trace.rounds.push_back(round);

        if (j < 0) {
            for (int k = m + 1; k <= K; ++k) {
                states[static_cast<std::size_t>(k)] =
                    round.drafted_states[static_cast<std::size_t>(k - m - 1)];
            }
            stats.accepted_draft_steps += K - 1 - m;
            m = K;
            continue;
        }

        for (int k = m + 1; k < j; ++k) {
            states[static_cast<std::size_t>(k)] =
                round.drafted_states[static_cast<std::size_t>(k - m - 1)];
        }
        stats.correction_rounds += 1;
        if (j - m - 2 > 0) stats.accepted_draft_steps += j - m - 2;

        // Euler step from the last verified state. For j = m+1 this is the
        // plain step from the anchor and coincides bit for bit with the
        // rejected draft, whose velocity the batch already computed.
        const StateVector& prev_state =
            (j == m + 1) ? round.anchor_state
                         : round.drafted_states[static_cast<std::size_t>(j - m - 2)];
        const StateVector& prev_velocity =
            (j == m + 1) ? anchor_velocity
                         : velocities[static_cast<std::size_t>(j - m - 2)];
        StateVector corrected =
            detail::extrapolate(prev_state, grid.node(j) - grid.node(j - 1), prev_velocity);
        if (!all_finite(corrected)) {
            throw std::runtime_error("speculative_euler: non-finite corrected state in round " +
                                     std::to_string(stats.rounds_folded) + " at index " +
                                     std::to_string(j));
        }
        states[static_cast<std::size_t>(j)] = corrected;

        if (literal) {
            // Algorithm as written: re-anchor on the last accepted state and
            // re-evaluate its velocity, even though verification already did.
            m = j - 1;
            anchor_velocity = field.eval(states[static_cast<std::size_t>(m)], grid.node(m));
            stats.total_evals += 1;
            stats.rounds_folded += 1;
            continue;
        }

        m = j;
        if (m < K) {
            if (j == round.anchor_index + 1) {
                anchor_velocity = velocities[0];
            } else {
                anchor_velocity = field.eval(corrected, grid.node(j));
                stats.total_evals += 1;
                strict_extra += 1;
            }
        }
    }

    stats.rounds_strict = stats.rounds_folded + strict_extra;
    stats.acceptance_fraction =
        static_cast<double>(stats.accepted_draft_steps) / static_cast<double>(K);
    return SpeculativeResult{Trajectory{grid, std::move(states)}, stats, std::move(trace)};
}

/// Classical fourth-order Runge-Kutta on a uniform grid with fine_steps
/// steps over [0, 1]. Used as the ground-truth solution oracle.
inline Trajectory reference_solution(const VelocityField& field, const StateVector& x0,
                                     int fine_steps) {
    if (fine_steps < 1) {
        throw std::invalid_argument("reference_solution: fine_steps must be >= 1");
    }
    if (x0.size() != static_cast<std::size_t>(field.dim())) {
        throw std::invalid_argument("reference_solution: x0 dimension mismatch");
    }
    const double h = 1.0 / static_cast<double>(fine_steps);
    const std::size_t d = x0.size();
    std::vector<StateVector> states;
    states.reserve(static_cast<std::size_t>(fine_steps) + 1);
    states.push_back(x0);
    StateVector x = x0;
    StateVector tmp(d);
    for (int i = 0; i < fine_steps; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(fine_steps);
        const StateVector k1 = field.eval(x, t);
        for (std::size_t c = 0; c < d; ++c) tmp[c] = x[c] + 0.5 * h * k1[c];
        const StateVector k2 = field.eval(tmp, t + 0.5 * h);
        for (std::size_t c = 0; c < d; ++c) tmp[c] = x[c] + 0.5 * h * k2[c];
        const StateVector k3 = field.eval(tmp, t + 0.5 * h);
        for (std::size_t c = 0; c < d; ++c) tmp[c] = x[c] + h * k3[c];
        const StateVector k4 = field.eval(tmp, t + h);
        for (std::size_t c = 0; c < d; ++c) {
            x[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        detail::check_state_finite(x, "reference step " + std::to_string(i + 1));
        states.push_back(x);
    }
    return Trajectory{make_uniform_grid(fine_steps), std::move(states)};
}

/// Restricts a fine trajectory to the nodes of a coarser grid. Every coarse
/// node must land exactly on a fine node (the fine step count is expected
/// to be a multiple of the coarse one), and the fine grid must be at least
/// ten times finer.
inline Trajectory restrict_to_grid(const Trajectory& fine, const TimeGrid& coarse) {
    const int fine_steps = fine.grid.step_count();
    const int K = coarse.step_count();
    if (fine_steps < 10 * K) {
        throw std::invalid_argument("restrict_to_grid: reference must be at least 10x finer "
                                    "than the target grid (" +
                                    std::to_string(fine_steps) + " vs K=" + std::to_string(K) +
                                    ")");
    }
    std::vector<StateVector> states;
    states.reserve(static_cast<std::size_t>(K) + 1);
    for (int k = 0; k <= K; ++k) {
        const double t = coarse.node(k);
        const long idx = std::lround(t * static_cast<double>(fine_steps));
        const double aligned = static_cast<double>(idx) / static_cast<double>(fine_steps);
        if (idx < 0 || idx > fine_steps || std::abs(aligned - t) > 1e-12) {
            throw std::invalid_argument(
                "restrict_to_grid: fine grid not divisible by target grid (node " +
                std::to_string(k) + " at t=" + std::to_string(t) + ")");
        }
        states.push_back(fine.states[static_cast<std::size_t>(idx)]);
    }
    return Trajectory{coarse, std::move(states)};
}

}  // namespace flowcast
