#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "autograd.hpp"

namespace dismesh::ag {

struct GradCheckReport {
    std::vector<double> max_rel_error;  // one entry per input
    std::vector<std::size_t> worst_index;
    double tolerance = 0.0;
    bool passed = false;

    std::string summary() const {
        std::string s = passed ? "PASS" : "FAIL";
        for (std::size_t i = 0; i < max_rel_error.size(); ++i)
            s += " input" + std::to_string(i) + "=" + std::to_string(max_rel_error[i]) + "@" + std::to_string(worst_index[i]);
        return s;
    }
};

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate. The relative error of one
/// coordinate is |analytic - numeric| / max(|analytic|, |numeric|, floor);
/// the floor keeps near-zero gradients from amplifying round-off.
inline GradCheckReport grad_check(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                                  std::vector<Tensor<double>> inputs, double h = 1e-5, double tol = 1e-4,
                                  double floor = 1e-3) {
    for (auto& x : inputs) x.zero_grad();
    {
        auto y = f(inputs);
        if (y.size() != 1) throw ValidationError("grad_check: function must be scalar-valued, got " + y.shape());
        y.backward();
    }
    GradCheckReport report;
    report.tolerance = tol;
    for (auto& x : inputs) {
        std::vector<double> analytic(x.size(), 0.0);
        if (!x.grad().empty()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
        double worst = 0.0;
        std::size_t worst_at = 0;
        auto values = x.mutable_value();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double saved = values[i];
            double fp, fm;
            {
                NoGradGuard guard;
                values[i] = saved + h;
                fp = f(inputs).item();
                values[i] = saved - h;
                fm = f(inputs).item();
            }
            values[i] = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
            const double err = std::abs(analytic[i] - numeric) / denom;
            if (err > worst) {
                worst = err;
                worst_at = i;
            }
        }
        report.max_rel_error.push_back(worst);
        report.worst_index.push_back(worst_at);
    }
    report.passed = std::all_of(report.max_rel_error.begin(), report.max_rel_error.end(), [tol](double e) { return e <= tol; });
    return report;
}

}  // namespace dismesh::ag
