#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "nsl/error.hpp"
#include "nsl/tensor.hpp"

namespace nsl {

/// Named parameter set, ordered (the order is part of the contract between a
/// checked function and its gradient output).
using ParamList = std::vector<std::pair<std::string, Tensor>>;

struct CheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    int worst_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct CheckReport {
    std::vector<CheckEntry> entries;
    double worst = 0.0;
    double h = 0.0;
    double tol = 0.0;
    bool pass = false;
};

/// A checkable scalar function: returns the loss at `params`; when `grads`
/// is non-null it must also fill the analytic gradient, one tensor per
/// parameter in the same order and shape.
using CheckedFn = std::function<double(const ParamList& params, ParamList* grads)>;

/// Central finite differences against the analytic gradient. The error per
/// entry is |a - d| / max(1, |a|, |d|), which behaves like a plain relative
/// error for O(1) gradients and does not blow up on near-zero ones.
inline CheckReport finite_diff_check(const CheckedFn& f, ParamList params, double h, double tol) {
    if (!(h > 0.0)) throw ArgumentError("finite_diff_check: step h must be positive");
    CheckReport report;
    report.h = h;
    report.tol = tol;

    ParamList analytic;
    const double base = f(params, &analytic);
    if (!std::isfinite(base)) throw EvalError("finite_diff_check: f is non-finite at the base point");
    if (analytic.size() != params.size())
        throw ContractError("finite_diff_check: gradient count does not match parameter count");

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& [name, value] = params[pi];
        const Tensor& grad = analytic[pi].second;
        if (!grad.same_shape(value))
            throw ContractError("finite_diff_check: gradient shape mismatch for " + name);
        CheckEntry entry;
        entry.name = name;
        for (int i = 0; i < value.size(); ++i) {
            const double saved = params[pi].second[i];
            params[pi].second[i] = saved + h;
            const double fp = f(params, nullptr);
            params[pi].second[i] = saved - h;
            const double fm = f(params, nullptr);
            params[pi].second[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw EvalError("finite_diff_check: f is non-finite at perturbed parameter " +
                                name + "[" + std::to_string(i) + "]");
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = grad[i];
            const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        report.worst = std::max(report.worst, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    report.pass = report.worst <= tol;
    return report;
}

}  // namespace nsl
