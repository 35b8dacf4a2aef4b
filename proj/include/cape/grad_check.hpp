// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cape/autodiff.hpp"

namespace cape::ad {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error.
    double floor = 1e-4;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_coordinate;
    bool non_finite = false;
    bool passed = false;
    std::string message;
};

namespace detail {

inline void compare(GradCheckReport& rep, double analytic, double numeric, double floor, const std::string& label) {
    const double abs_err = std::abs(analytic - numeric);
    const double rel_err = abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
    ++rep.coordinates;
    rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
    if (rel_err > rep.max_rel_error) {
        rep.max_rel_error = rel_err;
        rep.worst_coordinate = label;
    }
}

inline bool evaluate(const std::function<double()>& f, double& out) {
    try {
        out = f();
    } catch (const NonFiniteError&) {
        return false;
    }
    return std::isfinite(out);
}

}  // namespace detail

/// Compares the reverse-mode gradient of a scalar function of one tensor with
/// central differences, coordinate by coordinate.
inline GradCheckReport grad_check(const std::function<Var(Graph&, const Var&)>& f, const Tensor& point,
                                  const GradCheckOptions& opt = {}) {
    GradCheckReport rep;
    Tensor analytic;
    {
        Graph g;
        Var x = g.variable(point);
        Var y = f(g, x);
        g.backward(y);
        analytic = g.grad(x);
    }
    Tensor probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double orig = probe[i];
        auto eval_at = [&](double v) {
            return [&, v] {
                probe[i] = v;
                Graph g;
                return f(g, g.constant(probe)).item();
            };
        };
        double fp = 0.0;
        double fm = 0.0;
        const bool ok = detail::evaluate(eval_at(orig + opt.step), fp) && detail::evaluate(eval_at(orig - opt.step), fm);
        probe[i] = orig;
        if (!ok) {
            rep.non_finite = true;
            rep.message = "non-finite value at perturbed coordinate " + std::to_string(i);
            return rep;
        }
        detail::compare(rep, analytic[i], (fp - fm) / (2.0 * opt.step), opt.floor, "x[" + std::to_string(i) + "]");
    }
    rep.passed = rep.max_rel_error < opt.tolerance;
    return rep;
}

/// Same check over every coordinate of a set of model parameters. `f` must
/// build the scalar from the parameters' current values; parameters are
/// perturbed in place and restored.
inline GradCheckReport grad_check_parameters(const std::function<Var(Graph&)>& f, std::span<Parameter* const> params,
                                             const GradCheckOptions& opt = {}) {
    GradCheckReport rep;
    Gradients grads;
    {
        Graph g;
        Var y = f(g);
        grads = g.backward(y);
    }
    for (Parameter* p : params) {
        const Tensor analytic = grads.get(*p);
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double orig = p->value[i];
            auto eval_at = [&](double v) {
                return [&, v] {
                    p->value[i] = v;
                    Graph g;
                    return f(g).item();
                };
            };
            double fp = 0.0;
            double fm = 0.0;
            const bool ok =
                detail::evaluate(eval_at(orig + opt.step), fp) && detail::evaluate(eval_at(orig - opt.step), fm);
            p->value[i] = orig;
            if (!ok) {
                rep.non_finite = true;
                rep.message = "non-finite value when perturbing " + p->name + "[" + std::to_string(i) + "]";
                return rep;
            }
            detail::compare(rep, analytic[i], (fp - fm) / (2.0 * opt.step), opt.floor,
                            p->name + "[" + std::to_string(i) + "]");
        }
    }
    rep.passed = rep.max_rel_error < opt.tolerance;
    return rep;
}

}  // namespace cape::ad
