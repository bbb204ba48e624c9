#pragma once

// Core types shared by every module: state vectors, time grids, the
// velocity-field interface, run statistics, and the MSE primitive.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace flowcast {

/// A point x in R^d. Plain vector of doubles; dimension is fixed per run.
using StateVector = std::vector<double>;

inline bool all_finite(const StateVector& x) {
    for (double v : x) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

inline double squared_norm(const StateVector& x) {
    double acc = 0.0;
    for (double v : x) acc += v * v;
    return acc;
}

inline double norm(const StateVector& x) { return std::sqrt(squared_norm(x)); }

inline double distance(const StateVector& a, const StateVector& b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("distance: dimension mismatch (" +
                                    std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

/// Mean squared error between two states: (1/d) * sum_i (a_i - b_i)^2.
/// The mean normalization keeps thresholds comparable across dimensions.
inline double mse(const StateVector& a, const StateVector& b) {
    if (a.empty() || a.size() != b.size()) {
        throw std::invalid_argument("mse: dimension mismatch (" +
                                    std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc / static_cast<double>(a.size());
}

/// Discretization t_0 = 0 < t_1 < ... < t_K = 1 of the unit interval.
class TimeGrid {
public:
    explicit TimeGrid(std::vector<double> nodes) : nodes_(std::move(nodes)) {
        if (nodes_.size() < 2) {
            throw std::invalid_argument("TimeGrid: need at least two nodes");
        }
        if (nodes_.front() != 0.0) {
            throw std::invalid_argument("TimeGrid: first node must be 0, got " +
                                        std::to_string(nodes_.front()));
        }
        if (nodes_.back() != 1.0) {
            throw std::invalid_argument("TimeGrid: last node must be 1, got " +
                                        std::to_string(nodes_.back()));
        }
        max_step_ = 0.0;
        for (std::size_t k = 0; k + 1 < nodes_.size(); ++k) {
            const double dt = nodes_[k + 1] - nodes_[k];
            if (!(dt > 0.0)) {
                throw std::invalid_argument(
                    "TimeGrid: nodes must be strictly increasing (violated at index " +
                    std::to_string(k + 1) + ")");
            }
            if (dt > max_step_) max_step_ = dt;
        }
    }

    /// Number of steps K (one less than the number of nodes).
    int step_count() const { return static_cast<int>(nodes_.size()) - 1; }

    double node(int k) const { return nodes_.at(static_cast<std::size_t>(k)); }
    double step(int k) const { return node(k + 1) - node(k); }

    /// h = max_k dt_k.
    double max_step() const { return max_step_; }

    const std::vector<double>& nodes() const { return nodes_; }

    bool operator==(const TimeGrid& other) const { return nodes_ == other.nodes_; }

private:
    std::vector<double> nodes_;
    double max_step_;
};

/// Uniform grid t_k = k/K.
inline TimeGrid make_uniform_grid(int steps) {
    if (steps < 1) throw std::invalid_argument("make_uniform_grid: K must be >= 1");
    std::vector<double> nodes(static_cast<std::size_t>(steps) + 1);
    for (int k = 0; k <= steps; ++k) {
        nodes[static_cast<std::size_t>(k)] =
            static_cast<double>(k) / static_cast<double>(steps);
    }
    return TimeGrid(std::move(nodes));
}

/// The model v(x, t). Implementations must be pure: the same (x, t) always
/// yields the same velocity, and concurrent eval calls must be safe.
class VelocityField {
public:
    virtual ~VelocityField() = default;

    virtual int dim() const = 0;

    virtual StateVector eval(const StateVector& x, double t) const = 0;

    /// Evaluates many points; entry i must equal eval(points[i]) exactly.
    virtual std::vector<StateVector> batch_eval(
        const std::vector<std::pair<StateVector, double>>& points) const {
        std::vector<StateVector> out;
        out.reserve(points.size());
        for (const auto& [x, t] : points) out.push_back(eval(x, t));
        return out;
    }

    /// Lipschitz constant of v in x, when known in closed form.
    virtual std::optional<double> declared_lipschitz() const { return std::nullopt; }

    /// Bound on ||x''(t)|| along trajectories, when known in closed form.
    virtual std::optional<double> declared_curvature() const { return std::nullopt; }
};

/// Counters for one sampler run. "Rounds" are sequential model-call batches:
/// a parallel verification batch counts once regardless of its size.
/// rounds_strict additionally charges one round for each re-anchoring
/// evaluation that cannot share a batch with anything else.
struct RunStats {
    long rounds_folded = 0;
    long rounds_strict = 0;
    long total_evals = 0;
    long accepted_draft_steps = 0;
    long correction_rounds = 0;
    double acceptance_fraction = 0.0;
};

/// How a rejection re-anchors the draft loop.
///   reanchor_at_rejection: anchor moves to the corrected state (always
///     progresses; the default).
///   literal: anchor moves to the last accepted state and its velocity is
///     re-evaluated. Does not progress when the first draft is rejected;
///     kept only for comparison, guarded by max_rounds.
enum class CorrectionPolicy { reanchor_at_rejection, literal };

struct SpecConfig {
    double epsilon = 0.0;  // MSE acceptance threshold (squared velocity units)
    long max_rounds = 0;   // safety cap; 0 means 4*K
    CorrectionPolicy policy = CorrectionPolicy::reanchor_at_rejection;
};

}  // namespace flowcast
