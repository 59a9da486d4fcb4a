#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "star/autodiff.hpp"

namespace star {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
};

struct GradCheckOptions {
    double eps = 5e-3;
    // Coordinates sampled per parameter; 0 checks every coordinate.
    std::size_t coords_per_param = 0;
    std::uint64_t seed = 7;
    double floor = 1e-6;
};

// Below `floor` the denominator stops shrinking, so coordinates whose true
// gradient is zero are judged by absolute error instead of amplified noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max(floor, std::abs(analytic) + std::abs(numeric));
}

// Compares reverse-mode gradients of a scalar function against the
// fourth-order central difference (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h. `f` must rebuild its graph from the current parameter values
// on every call.
inline GradCheckResult grad_check(const std::function<Var()>& f, const std::vector<Parameter>& params,
                                  const GradCheckOptions& opt = {}) {
    for (const auto& p : params) {
        Var v = p.var;
        v.zero_grad();
    }
    {
        Var loss = f();
        if (!std::isfinite(loss.value().item())) throw NumericError("grad_check: objective is not finite");
        backward(loss);
    }

    auto eval = [&f]() {
        NoGradGuard guard;
        const double v = f().value().item();
        if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite at a perturbed point");
        return v;
    };

    GradCheckResult result;
    std::mt19937_64 rng(opt.seed);
    for (const auto& p : params) {
        if (!p.trainable) continue;
        Var var = p.var;
        const std::size_t n = var.value().size();
        Tensor analytic = var.has_grad() ? var.grad() : Tensor(var.shape(), 0.0);

        std::vector<std::size_t> coords(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        if (opt.coords_per_param && opt.coords_per_param < n) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(opt.coords_per_param);
        }

        for (std::size_t i : coords) {
            double& x = var.mutable_value()[i];
            const double saved = x;
            auto at = [&](double offset) {
                x = saved + offset;
                return eval();
            };
            const double h = opt.eps;
            const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
            x = saved;
            const double err = relative_error(analytic[i], numeric, opt.floor);
            ++result.coords_checked;
            if (err > result.max_rel_error || result.worst_param.empty()) {
                result.max_rel_error = std::max(err, result.max_rel_error);
                result.worst_param = p.name;
                result.worst_index = i;
                result.worst_analytic = analytic[i];
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

} // namespace star
