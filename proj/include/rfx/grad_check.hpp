// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "rfx/tensor.hpp"

namespace rfx {

// Central-difference check of an analytic gradient.
//
// f is a scalar function of the flat parameter vector theta; analytic_grad is
// the hand-written gradient at theta. Returns
//   max_i |analytic_i - numeric_i| / max(1e-8, |analytic_i| + |numeric_i|)
// where numeric_i = (f(theta + h*e_i) - f(theta - h*e_i)) / (2h).
inline double grad_check(const std::function<double(const Tensor&)>& f, const Tensor& theta,
                         const Tensor& analytic_grad, double h = 1e-5) {
    check_same_shape(theta, analytic_grad, "grad_check");
    Tensor probe = theta;
    double worst = 0.0;
    for (int64_t i = 0; i < theta.numel(); ++i) {
        const double original = probe.data[i];
        probe.data[i] = original + h;
        const double fp = f(probe);
        probe.data[i] = original - h;
        const double fm = f(probe);
        probe.data[i] = original;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::domain_error("grad_check: non-finite objective near theta");
        const double numeric = (fp - fm) / (2.0 * h);
        const double analytic = analytic_grad.data[i];
        const double denom = std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
    return worst;
}

}  // namespace rfx
