#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "caat/autodiff.hpp"
#include "caat/rng.hpp"

namespace caat {

// Rebuilds a scalar loss from named leaf values. The builder decides which
// leaves become differentiable inputs; it is called once for the analytic
// gradient and twice per probed component for the central differences.
template <typename T>
using LossBuilder = std::function<Var(Graph<T>&, const std::map<std::string, Tensor<T>>&)>;

template <typename T>
T eval_loss(const LossBuilder<T>& build, const std::map<std::string, Tensor<T>>& leaves) {
    Graph<T> g;
    Var loss = build(g, leaves);
    if (g.value(loss).numel() != 1) {
        throw ContractError("loss must be scalar, got " + shape_str(g.value(loss).dims));
    }
    return g.value(loss).data[0];
}

// Max over probed components of |analytic - numeric| / max(1, |numeric|).
// When the variable has more components than max_components, a deterministic
// random subset is probed. Runs should use 64-bit scalars.
template <typename T>
double finite_diff_check(const LossBuilder<T>& build, std::map<std::string, Tensor<T>> leaves,
                         const std::string& var, double step, int max_components = -1,
                         uint64_t pick_seed = 17) {
    if (step <= 0) throw ConfigError("finite difference step must be positive");
    if (!leaves.count(var)) throw ContractError("unknown finite-difference variable: " + var);

    Tensor<T> analytic;
    {
        Graph<T> g;
        Var loss = build(g, leaves);
        auto rec = g.evaluate_with_grads(loss, {var});
        analytic = rec.grads.at(var);
    }

    const size_t n = leaves.at(var).numel();
    std::vector<size_t> picks;
    if (max_components > 0 && n > static_cast<size_t>(max_components)) {
        Rng rng(hash_combine(pick_seed, fnv1a64(var)));
        for (int i = 0; i < max_components; ++i) {
            picks.push_back(static_cast<size_t>(rng.uniform_int(static_cast<int>(n))));
        }
    } else {
        picks.resize(n);
        for (size_t i = 0; i < n; ++i) picks[i] = i;
    }

    double worst = 0.0;
    Tensor<T>& v = leaves.at(var);
    for (size_t i : picks) {
        const T keep = v.data[i];
        v.data[i] = keep + static_cast<T>(step);
        const double fp = static_cast<double>(eval_loss(build, leaves));
        v.data[i] = keep - static_cast<T>(step);
        const double fm = static_cast<double>(eval_loss(build, leaves));
        v.data[i] = keep;
        const double numeric = (fp - fm) / (2.0 * step);
        const double err = std::abs(static_cast<double>(analytic.data[i]) - numeric) /
                           std::max(1.0, std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace caat
