// Central-finite-difference gradient checking for tests. Kept independent of
// the autograd internals: it only perturbs parameter values and re-runs a
// forward closure, so it can referee any analytic gradient.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "asvc/autograd.hpp"

namespace asvc::test {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int worst_param = -1;
    size_t worst_index = 0;
};

// Relative error with an absolute floor so near-zero pairs compare sanely.
inline double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-6});
    return std::abs(a - b) / denom;
}

// `forward` must rebuild the graph from the current parameter values and
// return the scalar objective. `params` are the leaves to check; their .grad
// must already hold the analytic gradient of that same objective.
inline GradCheckResult finite_diff_check(const std::function<double()>& forward,
                                         std::vector<ag::Tensor>& params,
                                         double step = 1e-5) {
    GradCheckResult res;
    for (size_t p = 0; p < params.size(); ++p) {
        auto& vals = params[p].values();
        const auto& grad = params[p].grad();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + step;
            const double fplus = forward();
            vals[i] = keep - step;
            const double fminus = forward();
            vals[i] = keep;
            const double numeric = (fplus - fminus) / (2.0 * step);
            const double err = rel_err(grad[i], numeric);
            if (err > res.max_rel_err) {
                res.max_rel_err = err;
                res.worst_analytic = grad[i];
                res.worst_numeric = numeric;
                res.worst_param = static_cast<int>(p);
                res.worst_index = i;
            }
        }
    }
    return res;
}

inline std::vector<double> random_values(size_t n, Rng& rng, double scale = 0.5) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

}  // namespace asvc::test
