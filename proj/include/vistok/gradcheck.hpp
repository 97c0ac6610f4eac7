#pragma once

#include <functional>
#include <vector>

#include "vistok/autograd.hpp"

namespace vistok {

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_input = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    // max over coordinates of |analytic - numeric| / (atol + rtol * |numeric|); <= 1 passes
    double max_tol_ratio = 0.0;
};

// Compares reverse-mode gradients of a scalar f64 function against central differences.
// Per coordinate: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// max_tol_ratio uses rtol and atol; useful where many coordinates are near zero and the
// central difference carries roundoff of order |f| * 1e-16 / eps.
GradCheckReport grad_check_report(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs,
                                  double eps = 1e-5, double rtol = 1e-4, double atol = 1e-8);

inline double grad_check(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs,
                         double eps = 1e-5) {
    return grad_check_report(fn, inputs, eps).max_rel_error;
}

}  // namespace vistok
