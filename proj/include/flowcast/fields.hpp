#pragma once

// Concrete velocity fields: analytic families with closed-form regularity
// constants, a tabulated grid field, a tiny MLP field, and sampling-based
// estimators for the Lipschitz and curvature constants.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowcast/core.hpp"
#include "flowcast/integrator.hpp"
#include "flowcast/rng.hpp"

namespace flowcast {

// ---------------------------------------------------------------------------
// Small dense-matrix helpers (dimensions here are tiny).
// ---------------------------------------------------------------------------

using Matrix = std::vector<StateVector>;  // row-major list of rows

inline void check_square(const Matrix& a, const std::string& what) {
    if (a.empty()) throw std::invalid_argument(what + ": empty matrix");
    for (const auto& row : a) {
        if (row.size() != a.size()) {
            throw std::invalid_argument(what + ": matrix must be square");
        }
    }
}

/// Operator 2-norm via cyclic Jacobi diagonalization of A^T A.
inline double spectral_norm(const Matrix& a) {
    check_square(a, "spectral_norm");
    const std::size_t n = a.size();
    Matrix b(n, StateVector(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += a[k][i] * a[k][j];
            b[i][j] = acc;
        }
    }
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) off += b[p][q] * b[p][q];
        }
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                if (b[p][q] == 0.0) continue;
                const double theta = (b[q][q] - b[p][p]) / (2.0 * b[p][q]);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double bkp = b[k][p];
                    const double bkq = b[k][q];
                    b[k][p] = c * bkp - s * bkq;
                    b[k][q] = s * bkp + c * bkq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double bpk = b[p][k];
                    const double bqk = b[q][k];
                    b[p][k] = c * bpk - s * bqk;
                    b[q][k] = s * bpk + c * bqk;
                }
            }
        }
    }
    double lambda = 0.0;
    for (std::size_t i = 0; i < n; ++i) lambda = std::max(lambda, b[i][i]);
    return std::sqrt(std::max(lambda, 0.0));
}

// ---------------------------------------------------------------------------
// Analytic fields
// ---------------------------------------------------------------------------

/// v(x, t) = c. Drafting is exact on this field.
class ConstantField final : public VelocityField {
public:
    explicit ConstantField(StateVector c) : c_(std::move(c)) {
        if (c_.empty()) throw std::invalid_argument("ConstantField: empty velocity");
    }

    int dim() const override { return static_cast<int>(c_.size()); }

    StateVector eval(const StateVector& x, double) const override {
        if (x.size() != c_.size()) {
            throw std::invalid_argument("ConstantField: state dimension mismatch");
        }
        return c_;
    }

    std::optional<double> declared_lipschitz() const override { return 0.0; }
    std::optional<double> declared_curvature() const override { return 0.0; }

    const StateVector& velocity() const { return c_; }

private:
    StateVector c_;
};

/// v(x, t) = A x + b. Lipschitz constant is ||A||_2.
class LinearField final : public VelocityField {
public:
    LinearField(Matrix a, StateVector b) : a_(std::move(a)), b_(std::move(b)) {
        check_square(a_, "LinearField");
        if (b_.size() != a_.size()) {
            throw std::invalid_argument("LinearField: b dimension must match A");
        }
        lipschitz_ = spectral_norm(a_);
    }

    int dim() const override { return static_cast<int>(a_.size()); }

    StateVector eval(const StateVector& x, double) const override {
        if (x.size() != a_.size()) {
            throw std::invalid_argument("LinearField: state dimension mismatch");
        }
        StateVector out(b_);
        for (std::size_t i = 0; i < a_.size(); ++i) {
            double acc = out[i];
            for (std::size_t j = 0; j < a_.size(); ++j) acc += a_[i][j] * x[j];
            out[i] = acc;
        }
        return out;
    }

    std::optional<double> declared_lipschitz() const override { return lipschitz_; }

    const Matrix& matrix() const { return a_; }
    const StateVector& offset() const { return b_; }

private:
    Matrix a_;
    StateVector b_;
    double lipschitz_;
};

/// Planar rotation v(x, t) = omega * (-x1, x0). Orbits are circles, so the
/// acceleration has constant magnitude omega^2 * ||x0||.
class RotationField final : public VelocityField {
public:
    explicit RotationField(double omega) : omega_(omega) {}

    int dim() const override { return 2; }

    StateVector eval(const StateVector& x, double) const override {
        if (x.size() != 2) {
            throw std::invalid_argument("RotationField: state must be 2-dimensional");
        }
        return {-omega_ * x[1], omega_ * x[0]};
    }

    std::optional<double> declared_lipschitz() const override { return std::abs(omega_); }

    double omega() const { return omega_; }

private:
    double omega_;
};

/// Marginal velocity field of the Gaussian path x_t = (1-t) x_0 + t x_1 with
/// independent x_0 ~ N(0, sigma0^2 I) and x_1 ~ N(mu, sigma1^2 I):
///
///   v(x, t) = a(t) (x - t mu) + mu,
///   a(t)    = (t sigma1^2 - (1-t) sigma0^2) / sigma_t^2,
///   sigma_t^2 = (1-t)^2 sigma0^2 + t^2 sigma1^2.
///
/// The field is affine in x at each t with slope a(t); |a| is 1 at both
/// endpoints and peaks at (sigma0^2 + sigma1^2) / (2 sigma0 sigma1) at the
/// interior critical point, which gives the exact Lipschitz constant.
class GaussianBridgeField final : public VelocityField {
public:
    GaussianBridgeField(StateVector mu, double sigma0, double sigma1)
        : mu_(std::move(mu)), sigma0_(sigma0), sigma1_(sigma1) {
        if (mu_.empty()) throw std::invalid_argument("GaussianBridgeField: empty mu");
        if (!(sigma0 > 0.0) || !(sigma1 > 0.0)) {
            throw std::invalid_argument("GaussianBridgeField: sigma0 and sigma1 must be > 0");
        }
    }

    int dim() const override { return static_cast<int>(mu_.size()); }

    double slope(double t) const {
        const double u = sigma0_ * sigma0_;
        const double w = sigma1_ * sigma1_;
        const double var = (1.0 - t) * (1.0 - t) * u + t * t * w;
        return (t * w - (1.0 - t) * u) / var;
    }

    StateVector eval(const StateVector& x, double t) const override {
        if (x.size() != mu_.size()) {
            throw std::invalid_argument("GaussianBridgeField: state dimension mismatch");
        }
        const double a = slope(t);
        StateVector out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i) {
            out[i] = a * (x[i] - t * mu_[i]) + mu_[i];
        }
        return out;
    }

    std::optional<double> declared_lipschitz() const override {
        return (sigma0_ * sigma0_ + sigma1_ * sigma1_) / (2.0 * sigma0_ * sigma1_);
    }

    const StateVector& mu() const { return mu_; }
    double sigma0() const { return sigma0_; }
    double sigma1() const { return sigma1_; }

private:
    StateVector mu_;
    double sigma0_;
    double sigma1_;
};

// ---------------------------------------------------------------------------
// Tabulated field
// ---------------------------------------------------------------------------

/// Velocity stored on an axis-aligned grid over a box in R^d x [0,1] (the
/// last axis is time) with multilinear interpolation between nodes and
/// constant (clamped) extrapolation outside the box, so drafts that
/// overshoot slightly remain evaluable.
class TabulatedField final : public VelocityField {
public:
    /// axes: strictly increasing node coordinates per axis (d space axes
    /// followed by time). values: velocity components in row-major node
    /// order, innermost index the component, size prod(n_axis) * d.
    TabulatedField(std::vector<std::vector<double>> axes, std::vector<double> values)
        : axes_(std::move(axes)), values_(std::move(values)) {
        if (axes_.size() < 2) {
            throw std::invalid_argument(
                "TabulatedField: need at least one space axis plus the time axis");
        }
        dim_ = static_cast<int>(axes_.size()) - 1;
        std::size_t nodes = 1;
        for (std::size_t a = 0; a < axes_.size(); ++a) {
            if (axes_[a].size() < 2) {
                throw std::invalid_argument("TabulatedField: axis " + std::to_string(a) +
                                            " needs at least 2 nodes");
            }
            for (std::size_t i = 0; i + 1 < axes_[a].size(); ++i) {
                if (!(axes_[a][i + 1] > axes_[a][i])) {
                    throw std::invalid_argument(
                        "TabulatedField: axis " + std::to_string(a) +
                        " is not strictly increasing at node " + std::to_string(i + 1));
                }
            }
            nodes *= axes_[a].size();
        }
        if (values_.size() != nodes * static_cast<std::size_t>(dim_)) {
            throw std::invalid_argument(
                "TabulatedField: values size " + std::to_string(values_.size()) +
                " does not match grid nodes * dim = " +
                std::to_string(nodes * static_cast<std::size_t>(dim_)));
        }
        strides_.assign(axes_.size(), 1);
        for (std::size_t a = axes_.size(); a-- > 1;) {
            strides_[a - 1] = strides_[a] * axes_[a].size();
        }
    }

    int dim() const override { return dim_; }

    StateVector eval(const StateVector& x, double t) const override {
        if (x.size() != static_cast<std::size_t>(dim_)) {
            throw std::invalid_argument("TabulatedField: state dimension mismatch");
        }
        const std::size_t naxes = axes_.size();
        // Cell index and interpolation weight per axis, clamped to the box.
        std::vector<std::size_t> lo(naxes);
        std::vector<double> w(naxes);
        for (std::size_t a = 0; a < naxes; ++a) {
            const double coord = (a < static_cast<std::size_t>(dim_)) ? x[a] : t;
            const auto& nodes = axes_[a];
            if (coord <= nodes.front()) {
                lo[a] = 0;
                w[a] = 0.0;
            } else if (coord >= nodes.back()) {
                lo[a] = nodes.size() - 2;
                w[a] = 1.0;
            } else {
                const auto it = std::upper_bound(nodes.begin(), nodes.end(), coord);
                lo[a] = static_cast<std::size_t>(it - nodes.begin()) - 1;
                w[a] = (coord - nodes[lo[a]]) / (nodes[lo[a] + 1] - nodes[lo[a]]);
            }
        }
        StateVector out(static_cast<std::size_t>(dim_), 0.0);
        const std::size_t corners = std::size_t{1} << naxes;
        for (std::size_t corner = 0; corner < corners; ++corner) {
            double weight = 1.0;
            std::size_t base = 0;
            for (std::size_t a = 0; a < naxes; ++a) {
                const bool hi = (corner >> a) & 1u;
                weight *= hi ? w[a] : 1.0 - w[a];
                base += (lo[a] + (hi ? 1 : 0)) * strides_[a];
            }
            if (weight == 0.0) continue;
            const double* node = &values_[base * static_cast<std::size_t>(dim_)];
            for (int c = 0; c < dim_; ++c) {
                out[static_cast<std::size_t>(c)] += weight * node[c];
            }
        }
        return out;
    }

    const std::vector<std::vector<double>>& axes() const { return axes_; }
    const std::vector<double>& values() const { return values_; }

private:
    std::vector<std::vector<double>> axes_;
    std::vector<double> values_;
    std::vector<std::size_t> strides_;
    int dim_;
};

// ---------------------------------------------------------------------------
// Tiny MLP field
// ---------------------------------------------------------------------------

enum class Activation { tanh_act, identity };

struct MlpLayer {
    Matrix weights;  // rows = outputs, cols = inputs
    StateVector bias;
    Activation activation = Activation::identity;
};

/// Small fully connected network mapping (x, t) in R^{d+1} to a velocity in
/// R^d. Stands in for a trained flow model at desk scale.
class TinyMLPField final : public VelocityField {
public:
    explicit TinyMLPField(std::vector<MlpLayer> layers) : layers_(std::move(layers)) {
        if (layers_.empty()) throw std::invalid_argument("TinyMLPField: no layers");
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& layer = layers_[l];
            if (layer.weights.empty()) {
                throw std::invalid_argument("TinyMLPField: layer " + std::to_string(l) +
                                            " has no rows");
            }
            const std::size_t cols = layer.weights.front().size();
            if (cols == 0) {
                throw std::invalid_argument("TinyMLPField: layer " + std::to_string(l) +
                                            " has no columns");
            }
            for (const auto& row : layer.weights) {
                if (row.size() != cols) {
                    throw std::invalid_argument("TinyMLPField: ragged weight matrix in layer " +
                                                std::to_string(l));
                }
            }
            if (layer.bias.size() != layer.weights.size()) {
                throw std::invalid_argument("TinyMLPField: bias size mismatch in layer " +
                                            std::to_string(l));
            }
            if (l > 0 && cols != layers_[l - 1].weights.size()) {
                throw std::invalid_argument(
                    "TinyMLPField: layer " + std::to_string(l) + " expects " +
                    std::to_string(cols) + " inputs but layer " + std::to_string(l - 1) +
                    " produces " + std::to_string(layers_[l - 1].weights.size()));
            }
        }
        if (layers_.back().activation != Activation::identity) {
            throw std::invalid_argument("TinyMLPField: final activation must be identity");
        }
        dim_ = static_cast<int>(layers_.back().weights.size());
        if (layers_.front().weights.front().size() != static_cast<std::size_t>(dim_) + 1) {
            throw std::invalid_argument(
                "TinyMLPField: first layer must take dim+1 inputs (state plus time), got " +
                std::to_string(layers_.front().weights.front().size()) + " for output dim " +
                std::to_string(dim_));
        }
    }

    int dim() const override { return dim_; }

    StateVector eval(const StateVector& x, double t) const override {
        if (x.size() != static_cast<std::size_t>(dim_)) {
            throw std::invalid_argument("TinyMLPField: state dimension mismatch");
        }
        StateVector h(x.size() + 1);
        std::copy(x.begin(), x.end(), h.begin());
        h.back() = t;
        for (const auto& layer : layers_) {
            StateVector next(layer.weights.size());
            for (std::size_t r = 0; r < layer.weights.size(); ++r) {
                double acc = layer.bias[r];
                const auto& row = layer.weights[r];
                for (std::size_t c = 0; c < row.size(); ++c) acc += row[c] * h[c];
                next[r] = layer.activation == Activation::tanh_act ? std::tanh(acc) : acc;
            }
            h = std::move(next);
        }
        return h;
    }

    const std::vector<MlpLayer>& layers() const { return layers_; }

private:
    std::vector<MlpLayer> layers_;
    int dim_;
};

// ---------------------------------------------------------------------------
// Regularity constants
// ---------------------------------------------------------------------------

enum class Provenance { declared, estimated };

inline const char* to_string(Provenance p) {
    return p == Provenance::declared ? "declared" : "estimated";
}

/// Constants entering the trajectory error bound. `provenance` records how
/// the Lipschitz constant was obtained; a sampled estimate is a lower bound
/// on the true constant and makes the bound advisory rather than rigorous.
struct FieldRegularity {
    double lipschitz = 0.0;  // M: Lipschitz constant of v in x
    double curvature = 0.0;  // N: bound on ||x''(t)|| along the trajectory
    Provenance provenance = Provenance::declared;
};

/// Axis-aligned box in state space used for sampling-based estimation.
struct BoundingBox {
    StateVector lo;
    StateVector hi;
};

/// Sampled lower estimate of the Lipschitz constant: the largest finite
/// difference ratio ||v(x+delta, t) - v(x, t)|| / ||delta|| over random
/// (x, t, delta) in the box. Never exceeds the true constant.
inline double estimate_lipschitz(const VelocityField& field, const BoundingBox& box,
                                 int samples, std::uint64_t rng_seed) {
    const std::size_t d = static_cast<std::size_t>(field.dim());
    if (box.lo.size() != d || box.hi.size() != d) {
        throw std::invalid_argument("estimate_lipschitz: box dimension mismatch");
    }
    double extent = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        if (!(box.hi[i] > box.lo[i])) {
            throw std::invalid_argument("estimate_lipschitz: degenerate box on axis " +
                                        std::to_string(i));
        }
        extent = std::max(extent, box.hi[i] - box.lo[i]);
    }
    if (samples < 2) throw std::invalid_argument("estimate_lipschitz: samples must be >= 2");

    SplitMix64 uni(rng_seed);
    GaussianStream gauss(rng_seed ^ 0x6A09E667F3BCC909ULL);
    const double step = 1e-3 * extent;
    double best = 0.0;
    StateVector x(d), y(d), dir(d);
    for (int s = 0; s < samples; ++s) {
        for (std::size_t i = 0; i < d; ++i) {
            x[i] = box.lo[i] + uni.uniform01() * (box.hi[i] - box.lo[i]);
        }
        const double t = uni.uniform01();
        double n2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            dir[i] = gauss.next();
            n2 += dir[i] * dir[i];
        }
        if (n2 == 0.0) continue;
        const double scale = step / std::sqrt(n2);
        for (std::size_t i = 0; i < d; ++i) y[i] = x[i] + scale * dir[i];
        const StateVector va = field.eval(x, t);
        const StateVector vb = field.eval(y, t);
        best = std::max(best, distance(va, vb) / distance(x, y));
    }
    return best;
}

/// Estimate of max ||x''(t)|| along the trajectory from x0, from central
/// finite differences of the velocity along a fine reference solution
/// (second-order one-sided stencils at the interval endpoints).
inline double estimate_curvature(const VelocityField& field, const StateVector& x0,
                                 int resolution) {
    if (resolution < 8) throw std::invalid_argument("estimate_curvature: resolution must be >= 8");
    const Trajectory traj = reference_solution(field, x0, resolution);
    const int n = resolution;
    const double h = 1.0 / static_cast<double>(n);
    std::vector<StateVector> vel(static_cast<std::size_t>(n) + 1);
    for (int i = 0; i <= n; ++i) {
        vel[static_cast<std::size_t>(i)] =
            field.eval(traj.states[static_cast<std::size_t>(i)], traj.grid.node(i));
    }
    const std::size_t d = x0.size();
    double best = 0.0;
    StateVector acc(d);
    for (int i = 1; i < n; ++i) {
        for (std::size_t c = 0; c < d; ++c) {
            acc[c] = (vel[static_cast<std::size_t>(i) + 1][c] -
                      vel[static_cast<std::size_t>(i) - 1][c]) /
                     (2.0 * h);
        }
        best = std::max(best, norm(acc));
    }
    for (std::size_t c = 0; c < d; ++c) {
        acc[c] = (-3.0 * vel[0][c] + 4.0 * vel[1][c] - vel[2][c]) / (2.0 * h);
    }
    best = std::max(best, norm(acc));
    const std::size_t last = static_cast<std::size_t>(n);
    for (std::size_t c = 0; c < d; ++c) {
        acc[c] = (3.0 * vel[last][c] - 4.0 * vel[last - 1][c] + vel[last - 2][c]) / (2.0 * h);
    }
    return std::max(best, norm(acc));
}

}  // namespace flowcast
