// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference audit of every autodiff op, every loss term, and the
// full pretraining and finetuning objectives on a small model.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cape/autodiff.hpp"
#include "cape/grad_check.hpp"
#include "cape/linalg.hpp"
#include "cape/losses.hpp"
#include "cape/training.hpp"

namespace cape::gradcheck {

using ad::Graph;
using ad::Shape;
using ad::Tensor;
using ad::Var;

/// Standard normal entries pushed at least `margin` away from zero, so kinked
/// ops are never probed at their kink.
inline Tensor random_away_from_zero(Shape shape, Rng& rng, double margin = 0.05) {
    Tensor t = Tensor::randn(std::move(shape), rng);
    for (double& v : t.values()) {
        if (std::abs(v) < margin) {
            v = v < 0 ? -margin - 0.1 : margin + 0.1;
        }
    }
    return t;
}

/// Scalar read-out with non-uniform weights, so every output coordinate
/// influences the result differently.
inline Var weighted_readout(Graph& g, const Var& y, std::uint64_t seed) {
    Rng rng(seed);
    return ad::sum(ad::mul(y, g.constant(Tensor::randn(y.shape(), rng))));
}

struct OpCase {
    std::string name;
    Shape shape;
    std::function<Var(Graph&, const Var&)> f;
    bool avoid_zero = false;
};

inline std::vector<OpCase> op_cases() {
    using namespace ad;
    return {
        {"matmul_shared", {2, 3, 4},
         [](Graph& g, const Var& x) {
             Rng r(11);
             return matmul(x, g.constant(Tensor::randn({4, 5}, r)));
         }},
        {"matmul_rhs", {4, 5},
         [](Graph& g, const Var& x) {
             Rng r(12);
             return matmul(g.constant(Tensor::randn({2, 3, 4}, r)), x);
         }},
        {"matmul_batched", {2, 3, 4},
         [](Graph& g, const Var& x) {
             Rng r(13);
             return matmul(x, g.constant(Tensor::randn({2, 4, 3}, r)));
         }},
        {"add_broadcast", {3, 4},
         [](Graph& g, const Var& x) {
             Rng r(14);
             return add(g.constant(Tensor::randn({2, 3, 4}, r)), x);
         }},
        {"sub", {3, 4},
         [](Graph& g, const Var& x) {
             Rng r(15);
             return sub(x, g.constant(Tensor::randn({4}, r)));
         }},
        {"mul_hadamard", {2, 4}, [](Graph&, const Var& x) { return mul(x, reshape(slice(x, 0, 1, 2), {4})); }},
        {"div", {2, 3},
         [](Graph& g, const Var& x) {
             Rng r(16);
             return div(g.constant(Tensor::randn({2, 3}, r)), exp(x));
         }},
        {"relu", {3, 5}, [](Graph&, const Var& x) { return relu(x); }, true},
        {"exp", {3, 4}, [](Graph&, const Var& x) { return exp(x); }},
        {"log", {3, 4}, [](Graph&, const Var& x) { return log(square(x) + 0.5); }},
        {"softmax", {3, 6}, [](Graph&, const Var& x) { return softmax(x); }},
        {"logsumexp", {2, 3, 5}, [](Graph&, const Var& x) { return logsumexp(x); }},
        {"sum", {4, 3}, [](Graph&, const Var& x) { return square(sum(x)); }},
        {"mean_axis", {2, 3, 4}, [](Graph&, const Var& x) { return mean_axis(x, 1); }},
        {"sum_axis0", {3, 4}, [](Graph&, const Var& x) { return sum_axis(x, 0); }},
        {"transpose", {2, 3, 4}, [](Graph&, const Var& x) { return transpose(x); }},
        {"permute", {2, 3, 4}, [](Graph&, const Var& x) { return permute(x, {1, 2, 0}); }},
        {"reshape", {2, 6}, [](Graph&, const Var& x) { return reshape(x, {3, 4}); }},
        {"concat", {2, 3}, [](Graph&, const Var& x) { return concat({x, square(x), x}, 1); }},
        {"slice", {4, 3}, [](Graph&, const Var& x) { return slice(x, 1, 1, 3); }},
        {"index_select", {4, 3}, [](Graph&, const Var& x) { return index_select(x, 0, {3, 0, 3}); }},
        {"layer_norm", {3, 6},
         [](Graph& g, const Var& x) {
             Rng r(17);
             return layer_norm(x, g.constant(Tensor::randn({6}, r)), g.constant(Tensor::randn({6}, r)));
         }},
        {"layer_norm_params", {6},
         [](Graph& g, const Var& p) {
             Rng r(18);
             return layer_norm(g.constant(Tensor::randn({4, 6}, r)), p, p);
         }},
        {"l2_normalize", {3, 5}, [](Graph&, const Var& x) { return l2_normalize(x); }},
        {"singular_values", {4, 4}, [](Graph&, const Var& x) { return singular_values(x); }},
        {"attention_composition", {3, 4},
         [](Graph& g, const Var& x) {
             Rng r(19);
             Var q = matmul(x, g.constant(Tensor::randn({4, 4}, r)));
             Var k = matmul(x, g.constant(Tensor::randn({4, 4}, r)));
             Var att = softmax(scale(matmul(q, transpose(k)), 0.5));
             return matmul(att, x);
         }},
    };
}

/// d=16, K=4, T=12, patch 4, one prototype per role.
inline model::ModelConfig toy_config() {
    model::ModelConfig c;
    c.T = 12;
    c.patch_len = 4;
    c.d = 16;
    c.layers = 2;
    c.heads = 2;
    c.K = 4;
    c.ffn_hidden = 32;
    c.horizon = 4;
    c.roles = model::roles_from_counts(1, 1, 1, 1);
    return c;
}

struct CaseResult {
    std::string name;
    std::uint64_t seed = 0;
    ad::GradCheckReport report;
};

struct SuiteOptions {
    std::uint64_t first_seed = 0;
    std::size_t seeds = 10;
    ad::GradCheckOptions check{};
    bool include_model = true;  ///< the model-level objectives dominate the runtime
};

struct SuiteReport {
    std::vector<CaseResult> cases;

    bool passed() const {
        for (const auto& c : cases) {
            if (!c.report.passed) return false;
        }
        return !cases.empty();
    }
    double max_rel_error() const {
        double worst = 0.0;
        for (const auto& c : cases) worst = std::max(worst, c.report.max_rel_error);
        return worst;
    }
};

namespace detail {

inline std::vector<ad::Parameter*> all_parameters(model::CapeModel& m) {
    std::vector<ad::Parameter*> out;
    for (auto& p : m.parameters()) out.push_back(&p);
    return out;
}

/// Single-argument loss cases: a tensor to perturb and the scalar built from it.
struct LossCase {
    std::string name;
    Tensor point;
    std::function<Var(Graph&, const Var&)> f;
};

inline std::vector<LossCase> loss_cases(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x1055));
    const Tensor target = Tensor::randn({2, 12}, rng);
    Tensor mask({2, 12});
    for (std::size_t t = 4; t < 8; ++t) {
        mask[t] = 1.0;
        mask[12 + t] = 1.0;
    }
    const Tensor positive = Tensor::randn({3, 4, 8}, rng);
    const auto roles = model::roles_from_counts(2, 1, 0, 1);
    return {
        {"recon_loss", Tensor::randn({2, 12}, rng),
         [target](Graph& g, const Var& x) { return loss::recon_loss(x, g.constant(target)); }},
        {"recon_loss_masked", Tensor::randn({2, 12}, rng),
         [target, mask](Graph& g, const Var& x) { return loss::recon_loss_masked(x, g.constant(target), mask); }},
        {"contrastive_loss", Tensor::randn({3, 4, 8}, rng),
         [positive](Graph& g, const Var& x) { return loss::contrastive_loss(x, g.constant(positive), true); }},
        {"contrastive_loss_raw", Tensor::randn({3, 4, 8}, rng),
         [positive](Graph& g, const Var& x) { return loss::contrastive_loss(x, g.constant(positive), false); }},
        {"monotonic_loss_dec", Tensor::uniform({3, 7}, rng, 0.0, 1.0),
         [](Graph&, const Var& x) { return loss::monotonic_loss(x, loss::Direction::dec, 0.01); }},
        {"monotonic_loss_inc", Tensor::uniform({3, 7}, rng, 0.0, 1.0),
         [](Graph&, const Var& x) { return loss::monotonic_loss(x, loss::Direction::inc, 0.01); }},
        {"smoothness_loss", Tensor::uniform({6, 4}, rng, 0.0, 1.0),
         [](Graph&, const Var& x) { return loss::smoothness_loss(x); }},
        {"role_monotonic_loss", Tensor::uniform({2, 5, 4}, rng, 0.0, 1.0),
         [roles](Graph&, const Var& x) { return loss::role_monotonic_loss(x, roles, 0.01); }},
    };
}

inline loss::PretrainBatch toy_pretrain_batch(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xBA7C));
    std::vector<std::vector<double>> series(2, std::vector<double>(24));
    for (auto& s : series) {
        for (double& v : s) v = rng.normal();
    }
    return train::make_pretrain_batch({&series[0], &series[1]}, 12, 4, 0.3, {1.0, 3.0}, rng);
}

}  // namespace detail

/// Runs every case for seeds first_seed .. first_seed + seeds - 1. `on_case`
/// sees each result as it completes.
inline SuiteReport run_suite(const SuiteOptions& opt = {},
                             const std::function<void(const CaseResult&)>& on_case = {}) {
    SuiteReport out;
    auto record = [&](std::string name, std::uint64_t seed, ad::GradCheckReport rep) {
        out.cases.push_back({std::move(name), seed, std::move(rep)});
        if (on_case) on_case(out.cases.back());
    };
    const auto ops = op_cases();
    for (std::uint64_t s = opt.first_seed; s < opt.first_seed + opt.seeds; ++s) {
        for (const auto& c : ops) {
            Rng rng(1000 + s);
            const Tensor x = c.avoid_zero ? random_away_from_zero(c.shape, rng) : Tensor::randn(c.shape, rng);
            auto f = [&](Graph& g, const Var& v) { return weighted_readout(g, c.f(g, v), 77 + s); };
            record("op/" + c.name, s, ad::grad_check(f, x, opt.check));
        }
        for (const auto& c : detail::loss_cases(s)) {
            record("loss/" + c.name, s, ad::grad_check(c.f, c.point, opt.check));
        }
        if (!opt.include_model) continue;

        model::CapeModel m(toy_config(), derive_seed(s, 0x70E));
        const auto params = detail::all_parameters(m);
        loss::LossWeights w;
        // a narrow target far above the proxy keeps both hinge terms active
        auto ngm = [&](Graph& g) {
            return loss::ngm_proxy(m, m.bind(g, model::Trainable::all), g, {50.0, 60.0}, w).loss;
        };
        record("loss/ngm_hinge", s, ad::grad_check_parameters(ngm, params, opt.check));

        const loss::PretrainBatch pb = detail::toy_pretrain_batch(s);
        loss::LossWeights wp = w;
        wp.lambda_align = 0.5;
        auto pre = [&](Graph& g) { return loss::pretrain_loss(m, m.bind(g, model::Trainable::all), g, pb, wp).total; };
        record("objective/pretrain", s, ad::grad_check_parameters(pre, params, opt.check));

        Rng rng(derive_seed(s, 0xF17E));
        const loss::FinetuneBatch fb{Tensor::randn({2, 12}, rng), Tensor::randn({2, 4}, rng), {1.0, 3.0}};
        loss::LossWeights wf = w;
        wf.lambda_align = 1e-3;
        auto fine = [&](Graph& g) { return loss::finetune_loss(m, m.bind(g, model::Trainable::all), g, fb, wf).total; };
        record("objective/finetune", s, ad::grad_check_parameters(fine, params, opt.check));
    }
    return out;
}

}  // namespace cape::gradcheck
