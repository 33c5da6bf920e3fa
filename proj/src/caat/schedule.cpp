#include "caat/schedule.hpp"

#include <cmath>
#include <string>

namespace caat {

double NoiseSchedule::sqrt_alpha_bar(int t) const {
    check_t(t);
    return std::sqrt(alpha_bar[static_cast<size_t>(t)]);
}

double NoiseSchedule::sqrt_one_minus_alpha_bar(int t) const {
    check_t(t);
    return std::sqrt(1.0 - alpha_bar[static_cast<size_t>(t)]);
}

NoiseSchedule build_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("schedule needs T >= 1, got " + std::to_string(T));
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw ConfigError("betas must satisfy 0 < start <= end < 1, got start=" +
                          std::to_string(beta_start) + " end=" + std::to_string(beta_end));
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        const double b =
            T == 1 ? beta_start
                   : beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T - 1);
        s.beta[static_cast<size_t>(t)] = b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<size_t>(t)] = prod;
    }
    return s;
}

NoiseSchedule default_schedule() { return build_schedule(100, 1e-3, 0.2); }

}  // namespace caat
