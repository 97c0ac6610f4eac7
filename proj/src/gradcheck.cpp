#include "vistok/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace vistok {

namespace {
double evaluate(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs) {
    NoGradGuard guard;
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(Var<double>::constant(t));
    const Var<double> out = fn(vars);
    if (out.numel() != 1) {
        throw ContractError("grad_check: function output must be scalar, got " + shape_str(out.shape()));
    }
    return out.item();
}
}  // namespace

GradCheckReport grad_check_report(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs,
                                  double eps, double rtol, double atol) {
    std::vector<Var<double>> vars;
    vars.reserve(inputs.size());
    for (const auto& t : inputs) vars.push_back(Var<double>::leaf(t, true));
    const Var<double> out = fn(vars);
    if (out.numel() != 1) {
        throw ContractError("grad_check: function output must be scalar, got " + shape_str(out.shape()));
    }
    out.backward();

    GradCheckReport report;
    std::vector<Tensor<double>> probe = inputs;
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        const bool has = vars[a].has_grad();
        for (std::size_t i = 0; i < inputs[a].numel(); ++i) {
            const double orig = probe[a][i];
            probe[a][i] = orig + eps;
            const double fp = evaluate(fn, probe);
            probe[a][i] = orig - eps;
            const double fm = evaluate(fn, probe);
            probe[a][i] = orig;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic = has ? vars[a].grad()[i] : 0.0;
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            const double err = std::abs(analytic - numeric) / denom;
            if (err > report.max_rel_error) {
                report = {err, a, i, analytic, numeric, report.max_tol_ratio};
            }
            report.max_tol_ratio =
                std::max(report.max_tol_ratio, std::abs(analytic - numeric) / (atol + rtol * std::abs(numeric)));
        }
    }
    return report;
}

}  // namespace vistok
