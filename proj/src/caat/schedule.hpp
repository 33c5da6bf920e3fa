#pragma once

#include <vector>

#include "caat/errors.hpp"

namespace caat {

// Forward-process tables: linear beta ramp and the cumulative product
// alpha_bar[t] = prod_{i<=t} (1 - beta[i]), kept in double precision.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha_bar;

    void check_t(int t) const {
        if (t < 0 || t >= T) {
            throw IndexError("timestep " + std::to_string(t) + " outside [0," + std::to_string(T) + ")");
        }
    }

    double sqrt_alpha_bar(int t) const;
    double sqrt_one_minus_alpha_bar(int t) const;
};

NoiseSchedule build_schedule(int T, double beta_start, double beta_end);

// Desk-scale default: T=100 with the classic 1000-step ramp rescaled so the
// terminal alpha_bar stays near zero.
NoiseSchedule default_schedule();

}  // namespace caat
