// Minimal tour: integrate a velocity field with plain Euler, then with
// speculative drafting, and compare cost and deviation.

#include <cstdio>

#include "flowcast/flowcast.hpp"

int main() {
    using namespace flowcast;

    // Gaussian-path field transporting N(0, I) toward N(mu, I).
    GaussianBridgeField field({3.0, 0.0}, 1.0, 1.0);
    const TimeGrid grid = make_uniform_grid(50);
    const StateVector x0 = sample_gaussian_state(7, 2, {0.0, 0.0}, 1.0);

    const auto [euler, euler_stats] = full_euler(field, grid, x0);

    std::printf("%-10s %8s %8s %6s %12s\n", "epsilon", "rounds", "evals", "p", "deviation");
    for (double eps : {0.0, 1e-4, 1e-3, 1e-2, 1e-1}) {
        SpecConfig config;
        config.epsilon = eps;
        const SpeculativeResult result = speculative_euler(field, grid, x0, config);
        double dev = 0.0;
        for (int k = 0; k <= grid.step_count(); ++k) {
            dev = std::max(dev, distance(result.trajectory.states[k], euler.states[k]));
        }
        std::printf("%-10g %8ld %8ld %6.2f %12.4e\n", eps, result.stats.rounds_folded,
                    result.stats.total_evals, result.stats.acceptance_fraction, dev);
    }
    std::printf("full Euler: %ld rounds, %ld evals\n", euler_stats.rounds_folded,
                euler_stats.total_evals);
    return 0;
}
