// SPDX-License-Identifier: Apache-2.0
//
// Adam with decoupled weight decay and global-norm gradient clipping.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "cape/autodiff.hpp"
#include "cape/error.hpp"

namespace cape::optim {

using ad::Gradients;
using ad::Parameter;
using ad::Tensor;

struct AdamWOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
    double clip = 1.0;  ///< global gradient-norm bound; 0 disables

    void validate() const {
        if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(eps > 0) ||
            !(weight_decay >= 0) || !(clip >= 0)) {
            throw ValidationError("invalid AdamW options");
        }
    }
};

/// Moments and step counts are kept per parameter, so a parameter that sits
/// out a phase resumes with correct bias correction. Weight decay applies to
/// matrices only (rank >= 2).
class AdamW {
public:
    AdamW() = default;

    AdamW(const std::vector<Parameter>& params, AdamWOptions opt) : opt_(opt) {
        opt_.validate();
        for (const auto& p : params) {
            m_.emplace_back(p.value.shape());
            v_.emplace_back(p.value.shape());
        }
        steps_.assign(params.size(), 0);
    }

    const AdamWOptions& options() const { return opt_; }
    std::size_t size() const { return m_.size(); }
    const Tensor& first_moment(std::size_t i) const { return m_.at(i); }
    const Tensor& second_moment(std::size_t i) const { return v_.at(i); }
    std::uint64_t steps(std::size_t i) const { return steps_.at(i); }

    void set_state(std::size_t i, Tensor m, Tensor v, std::uint64_t steps) {
        if (m.shape() != m_.at(i).shape() || v.shape() != v_.at(i).shape()) {
            throw ShapeError("AdamW::set_state: moment shape mismatch");
        }
        m_[i] = std::move(m);
        v_[i] = std::move(v);
        steps_[i] = steps;
    }

    /// Updates every parameter for which `trainable(i)` holds and returns the
    /// global gradient norm over those parameters before clipping.
    double step(std::vector<Parameter>& params, const Gradients& grads,
                const std::function<bool(std::size_t)>& trainable) {
        if (params.size() != m_.size()) {
            throw ShapeError("AdamW::step: parameter count changed");
        }
        std::vector<Tensor> g(params.size());
        double sq = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!trainable(i)) {
                continue;
            }
            if (params[i].value.shape() != m_[i].shape()) {
                throw ShapeError("AdamW::step: shape of " + params[i].name + " changed");
            }
            g[i] = grads.get(params[i]);
            for (double x : g[i].values()) {
                sq += x * x;
            }
        }
        const double norm = std::sqrt(sq);
        const double factor = (opt_.clip > 0 && norm > opt_.clip) ? opt_.clip / norm : 1.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!trainable(i)) {
                continue;
            }
            const auto t = static_cast<double>(++steps_[i]);
            const double bc1 = 1.0 - std::pow(opt_.beta1, t);
            const double bc2 = 1.0 - std::pow(opt_.beta2, t);
            const double wd = params[i].value.rank() >= 2 ? opt_.weight_decay : 0.0;
            Tensor& w = params[i].value;
            Tensor& m = m_[i];
            Tensor& v = v_[i];
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = g[i][k] * factor;
                m[k] = opt_.beta1 * m[k] + (1.0 - opt_.beta1) * gk;
                v[k] = opt_.beta2 * v[k] + (1.0 - opt_.beta2) * gk * gk;
                const double mhat = m[k] / bc1;
                const double vhat = v[k] / bc2;
                w[k] -= opt_.lr * (mhat / (std::sqrt(vhat) + opt_.eps) + wd * w[k]);
            }
        }
        return norm;
    }

private:
    AdamWOptions opt_;
    std::vector<Tensor> m_, v_;
    std::vector<std::uint64_t> steps_;
};

}  // namespace cape::optim
