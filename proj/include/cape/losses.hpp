// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Every loss is a scalar Var on the caller's graph.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cape/autodiff.hpp"
#include "cape/data.hpp"
#include "cape/linalg.hpp"
#include "cape/model.hpp"

namespace cape::loss {

using ad::Graph;
using ad::Tensor;
using ad::Var;
using model::Bound;
using model::CapeModel;
using model::Role;

struct LossWeights {
    double lambda_align = 1e-5;
    double epsilon_mono = 0.01;
    double ngm_eps = 0.05;    ///< perturbation added to pi* before renormalizing
    double ngm_alpha = 0.1;   ///< mixing weight of the perturbed prototype mixture
    bool ngm_infectious_only = false;
    bool recon_masked_only = false;
    bool cl_normalize = true;

    void validate() const {
        if (!(lambda_align >= 0 && epsilon_mono >= 0)) {
            throw ValidationError("loss weights must be nonnegative");
        }
        if (!(ngm_eps > 0)) {
            throw ValidationError("ngm perturbation eps must be positive");
        }
        if (!(ngm_alpha > 0 && ngm_alpha < 1)) {
            throw ValidationError("ngm alpha must lie in (0, 1)");
        }
    }
};

// ---------------------------------------------------------------- reconstruction

/// Mean squared error over all entries.
inline Var recon_loss(const Var& x_hat, const Var& x) {
    if (x_hat.shape() != x.shape()) {
        throw ShapeError("recon_loss: shapes " + ad::to_string(x_hat.shape()) + " and " + ad::to_string(x.shape()));
    }
    return ad::mean(ad::square(ad::sub(x_hat, x)));
}

/// Mean squared error over the entries where mask is nonzero.
inline Var recon_loss_masked(const Var& x_hat, const Var& x, const Tensor& mask) {
    if (x_hat.shape() != x.shape() || mask.shape() != x.shape()) {
        throw ShapeError("recon_loss_masked: shape mismatch");
    }
    double count = 0.0;
    for (double m : mask.values()) {
        count += m != 0.0 ? 1.0 : 0.0;
    }
    if (count == 0.0) {
        throw ValidationError("recon_loss_masked: empty mask");
    }
    Var m = x.graph().constant(mask);
    return ad::scale(ad::sum(ad::mul(ad::square(ad::sub(x_hat, x)), m)), 1.0 / count);
}

inline Var mse(const Var& a, const Var& b) { return recon_loss(a, b); }

// ---------------------------------------------------------------- contrastive

namespace detail {

/// Drops the diagonal of the last two (equal) axes: (N, M, M) -> (N, M, M-1).
inline Var drop_diagonal(const Var& s) {
    const std::size_t n = s.dim(0);
    const std::size_t m = s.dim(1);
    std::vector<std::size_t> keep;
    keep.reserve(m * (m - 1));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            if (i != j) {
                keep.push_back(i * m + j);
            }
        }
    }
    Var flat = ad::reshape(s, {n, m * m});
    return ad::reshape(ad::index_select(flat, 1, keep), {n, m, m - 1});
}

/// log( sum_b exp(cross[.., b]) + sum_{b != self} exp(same[.., b]) ) for
/// (N, M, M) similarity blocks.
inline Var negatives_lse(const Var& cross, const Var& same) {
    if (cross.dim(1) == 1) {
        return ad::logsumexp(cross);
    }
    return ad::logsumexp(ad::concat({cross, drop_diagonal(same)}, 2));
}

}  // namespace detail

/// Patch-wise contrastive loss. x and x_prime are (B, M, d) representations of
/// the M overlapping patches of two views of B series, aligned so that index
/// (j, c) refers to the same absolute time in both. For each anchor
/// X_(j,c) the loss is -X.X'_(j,c) plus a log-sum-exp over instance negatives
/// (X'_(b,c) for all b, X_(b,c) for b != j) and one over temporal negatives
/// (X'_(j,t) for all t, X_(j,t) for t != c), averaged over anchors.
inline Var contrastive_loss(const Var& x, const Var& x_prime, bool normalize = true) {
    if (x.rank() != 3 || x.shape() != x_prime.shape()) {
        throw ShapeError("contrastive_loss: expected matching (B, M, d), got " + ad::to_string(x.shape()) + " and " +
                         ad::to_string(x_prime.shape()));
    }
    const std::size_t B = x.dim(0);
    const std::size_t M = x.dim(1);
    if (B == 1 && M == 1) {
        throw ValidationError("contrastive_loss: a single sample with a single overlapping patch has no negatives");
    }
    Var a = normalize ? ad::l2_normalize(x) : x;
    Var b = normalize ? ad::l2_normalize(x_prime) : x_prime;

    Var positive = ad::sum_axis(ad::mul(a, b), 2);  // (B, M)

    // instance negatives: per patch, similarities across the batch
    Var at = ad::permute(a, {1, 0, 2});  // (M, B, d)
    Var bt = ad::permute(b, {1, 0, 2});
    Var inst = detail::negatives_lse(ad::matmul(at, ad::transpose(bt)), ad::matmul(at, ad::transpose(at)));  // (M, B)

    // temporal negatives: per series, similarities across overlapping patches
    Var temp = detail::negatives_lse(ad::matmul(a, ad::transpose(b)), ad::matmul(a, ad::transpose(a)));  // (B, M)

    return ad::mean(ad::add(ad::sub(ad::transpose(inst), positive), temp));
}

// ---------------------------------------------------------------- prototype constraints

enum class Direction { inc, dec };

/// Hinge on consecutive differences of a (..., C) sequence, averaged over
/// the C-1 steps and summed over leading axes. dec penalizes
/// relu(pi_c - pi_{c-1} + eps); inc swaps the operands.
inline Var monotonic_loss(const Var& seq, Direction dir, double epsilon) {
    const std::size_t C = seq.shape().back();
    if (C < 2) {
        throw ValidationError("monotonic_loss: need at least 2 patches");
    }
    const std::size_t axis = seq.rank() - 1;
    Var prev = ad::slice(seq, axis, 0, C - 1);
    Var next = ad::slice(seq, axis, 1, C);
    Var diff = dir == Direction::dec ? ad::sub(next, prev) : ad::sub(prev, next);
    return ad::scale(ad::sum(ad::relu(ad::affine(diff, 1.0, epsilon))), 1.0 / static_cast<double>(C - 1));
}

/// Sum of squared second differences along the patch axis of a (..., C, K)
/// mixture field. Fields with fewer than 3 patches give 0.
inline Var smoothness_loss(const Var& pi) {
    const std::size_t axis = pi.rank() - 2;
    const std::size_t C = pi.dim(axis);
    if (C < 3) {
        return pi.graph().constant(0.0);
    }
    Var a = ad::slice(pi, axis, 0, C - 2);
    Var b = ad::slice(pi, axis, 1, C - 1);
    Var c = ad::slice(pi, axis, 2, C);
    return ad::sum(ad::square(ad::add(ad::sub(a, ad::scale(b, 2.0)), c)));
}

/// Monotonic losses for the role-tagged prototypes of a final-layer (B, C, K)
/// mixture field, averaged over the batch.
inline Var role_monotonic_loss(const Var& pi, const std::vector<Role>& roles, double epsilon) {
    Graph& g = pi.graph();
    const std::size_t B = pi.dim(0);
    Var total = g.constant(0.0);
    bool any = false;
    Var by_proto = ad::permute(pi, {0, 2, 1});  // (B, K, C)
    for (auto [role, dir] : {std::pair{Role::mono_inc, Direction::inc}, std::pair{Role::mono_dec, Direction::dec}}) {
        std::vector<std::size_t> idx;
        for (std::size_t k = 0; k < roles.size(); ++k) {
            if (roles[k] == role) {
                idx.push_back(k);
            }
        }
        if (idx.empty()) {
            continue;
        }
        Var part = monotonic_loss(ad::index_select(by_proto, 1, idx), dir, epsilon);
        total = any ? ad::add(total, part) : part;
        any = true;
    }
    return ad::scale(total, 1.0 / static_cast<double>(B));
}

// ---------------------------------------------------------------- NGM proxy

struct NgmResult {
    Var loss;             ///< scalar; constant 0 when skipped
    Var F, V;             ///< (n, n)
    Var pi_star;          ///< (K)
    linalg::R0Bounds raw{};
    linalg::R0Bounds calibrated{};
    bool skipped = false;  ///< V numerically singular
};

/// Differentiable next-generation proxy for R0 bounds.
///
/// With E_DFE the encoding of an all-zero series and g(H) the patch mean of
/// softmax(H E^T), pi* = g(E_DFE). For each prototype j:
///   F[:, j] = relu(g(phi(renorm(pi* + eps e_j))) - pi*)
///   V[i, j] = relu(g(phi(e_j))_i) for i != j, V[j, j] = 1 - g(phi(e_j))_j
/// where phi(m) = (1 - alpha) E_DFE + alpha m^T E on every patch. Raw bounds
/// are sigma_min(F)/sigma_max(V) and sigma_max(F)/sigma_min(V); each passes
/// through a learned scale and shift, and the hinge penalizes calibrated
/// bounds that fall outside the disease's [r0_lower, r0_upper].
inline NgmResult ngm_proxy(const CapeModel& m, const Bound& p, Graph& g, const data::R0Range& target,
                           const LossWeights& w) {
    w.validate();
    const std::size_t K = m.config().K;
    const std::size_t C = m.config().C();
    const double alpha = w.ngm_alpha;
    const Var& E = p[m.prototypes_index()];

    Var e_dfe = m.dfe_embedding(g, p);                                 // (C, d)
    Var base = ad::scale(ad::matmul(e_dfe, ad::transpose(E)), 1.0 - alpha);  // (C, K)
    NgmResult r;
    r.pi_star = ad::mean_axis(ad::softmax(ad::matmul(e_dfe, ad::transpose(E))), 0);

    // g(phi(m_j)) for the K mixtures stacked as rows of `mix` (K, K) -> (K, K)
    std::vector<std::size_t> repeat(C, 0);
    auto evolve = [&](const Var& mix) {
        Var shift = ad::scale(ad::matmul(ad::matmul(mix, E), ad::transpose(E)), alpha);  // (K, K)
        Var tiled = ad::index_select(ad::reshape(shift, {K, 1, K}), 1, repeat);         // (K, C, K)
        return ad::mean_axis(ad::softmax(ad::add(tiled, base)), 1);
    };

    Var eye = g.constant(Tensor::identity(K));
    Var perturbed = ad::scale(ad::add(ad::scale(eye, w.ngm_eps), r.pi_star), 1.0 / (1.0 + w.ngm_eps));
    Var f_rows = ad::relu(ad::sub(evolve(perturbed), r.pi_star));  // row j = column j of F
    Var p_rows = evolve(eye);                                       // row j = pi_evolved for e_j

    Tensor off(ad::Shape{K, K}, 1.0);
    for (std::size_t i = 0; i < K; ++i) {
        off[i * K + i] = 0.0;
    }
    Var P = ad::transpose(p_rows);  // P[i, j] = pi_evolved_j[i]
    Var V = ad::add(ad::mul(ad::relu(P), g.constant(off)), ad::sub(eye, ad::mul(P, eye)));
    Var F = ad::transpose(f_rows);

    if (w.ngm_infectious_only) {
        const auto idx = m.config().indices_with(Role::infectious);
        if (idx.empty()) {
            throw ValidationError("ngm_proxy: infectious-only restriction with no infectious prototypes");
        }
        F = ad::index_select(ad::index_select(F, 0, idx), 1, idx);
        V = ad::index_select(ad::index_select(V, 0, idx), 1, idx);
    }
    r.F = F;
    r.V = V;

    const std::size_t n = F.dim(0);
    Var sf = ad::singular_values(F);
    Var sv = ad::singular_values(V);
    const double sv_max = sv.value()[0];
    const double sv_min = sv.value()[n - 1];
    if (!(sv_min > linalg::kSingularFloor * sv_max)) {
        r.skipped = true;
        r.loss = g.constant(0.0);
        return r;
    }
    Var lo = ad::div(ad::element(sf, n - 1), ad::element(sv, 0));
    Var hi = ad::div(ad::element(sf, 0), ad::element(sv, n - 1));
    r.raw = {lo.item(), hi.item()};
    Var lo_cal = ad::add(ad::mul(p[m.ngm_lo_scale()], lo), p[m.ngm_lo_shift()]);
    Var hi_cal = ad::add(ad::mul(p[m.ngm_hi_scale()], hi), p[m.ngm_hi_shift()]);
    r.calibrated = {lo_cal.item(), hi_cal.item()};
    r.loss = ad::add(ad::relu(ad::affine(hi_cal, -1.0, target.lower)), ad::relu(ad::affine(lo_cal, 1.0, -target.upper)));
    return r;
}

// ---------------------------------------------------------------- combined

struct AlignTerms {
    Var total;
    Var ngm, mono, smooth;
    bool ngm_skipped = false;
};

/// L_align = L_R0 + L_mono + L_smooth, with the constraint terms on the final
/// layer's mixture field (B, C, K) averaged over the batch.
inline AlignTerms align_loss(const CapeModel& m, const Bound& p, Graph& g, const Var& final_pi,
                             const data::R0Range& target, const LossWeights& w) {
    AlignTerms t;
    NgmResult ngm = ngm_proxy(m, p, g, target, w);
    t.ngm = ngm.loss;
    t.ngm_skipped = ngm.skipped;
    t.mono = role_monotonic_loss(final_pi, m.config().roles, w.epsilon_mono);
    t.smooth = ad::scale(smoothness_loss(final_pi), 1.0 / static_cast<double>(final_pi.dim(0)));
    t.total = ad::add(ad::add(t.ngm, t.mono), t.smooth);
    return t;
}

/// Inputs of one pretraining step: B series, each cropped into two views of
/// length T with an independent patch mask per view. Rows of omega_a/omega_b
/// hold the M overlapping patch indices per sample (M shared by the batch).
struct PretrainBatch {
    Tensor view_a, view_b;                  ///< (B, T) unmasked, normalized
    Tensor masked_a, masked_b;              ///< (B, T) zero-filled masked patches
    Tensor mask_a, mask_b;                  ///< (B, T) 1 where masked
    std::vector<std::vector<std::size_t>> omega_a, omega_b;
    data::R0Range r0;

    std::size_t size() const { return view_a.dim(0); }
};

struct PretrainTerms {
    Var total;
    Var recon, contrastive;
    AlignTerms align;
};

namespace detail {

/// Gathers (B, C, d) -> (B, M, d) with per-sample patch indices.
inline Var gather_patches(const Var& repr, const std::vector<std::vector<std::size_t>>& omega) {
    const std::size_t B = repr.dim(0);
    const std::size_t C = repr.dim(1);
    const std::size_t d = repr.dim(2);
    const std::size_t M = omega.at(0).size();
    std::vector<std::size_t> flat;
    flat.reserve(B * M);
    for (std::size_t b = 0; b < B; ++b) {
        if (omega[b].size() != M) {
            throw ShapeError("gather_patches: overlap sizes differ within the batch");
        }
        for (std::size_t c : omega[b]) {
            flat.push_back(b * C + c);
        }
    }
    return ad::reshape(ad::index_select(ad::reshape(repr, {B * C, d}), 0, flat), {B, M, d});
}

}  // namespace detail

/// L_pretrain = recon + CL + lambda * align. Reconstruction is averaged over
/// both views; the alignment terms use the first view's final-layer mixture.
inline PretrainTerms pretrain_loss(const CapeModel& m, const Bound& p, Graph& g, const PretrainBatch& batch,
                                   const LossWeights& w) {
    PretrainTerms t;
    auto fa = m.forward(p, g.constant(batch.masked_a), model::Mode::pretrain);
    auto fb = m.forward(p, g.constant(batch.masked_b), model::Mode::pretrain);
    Var ta = g.constant(batch.view_a);
    Var tb = g.constant(batch.view_b);
    if (w.recon_masked_only) {
        t.recon = ad::scale(ad::add(recon_loss_masked(fa.reconstruction, ta, batch.mask_a),
                                    recon_loss_masked(fb.reconstruction, tb, batch.mask_b)),
                            0.5);
    } else {
        t.recon = ad::scale(ad::add(recon_loss(fa.reconstruction, ta), recon_loss(fb.reconstruction, tb)), 0.5);
    }
    t.contrastive = contrastive_loss(detail::gather_patches(fa.final_repr, batch.omega_a),
                                     detail::gather_patches(fb.final_repr, batch.omega_b), w.cl_normalize);
    Var total = ad::add(t.recon, t.contrastive);
    if (w.lambda_align > 0) {
        t.align = align_loss(m, p, g, fa.mixture.back(), batch.r0, w);
        total = ad::add(total, ad::scale(t.align.total, w.lambda_align));
    }
    t.total = total;
    return t;
}

struct FinetuneBatch {
    Tensor x;  ///< (B, T)
    Tensor y;  ///< (B, h)
    data::R0Range r0;
};

struct FinetuneTerms {
    Var total;
    Var mse;
    AlignTerms align;
};

/// L_finetune = MSE(y, y_hat) + lambda * align.
inline FinetuneTerms finetune_loss(const CapeModel& m, const Bound& p, Graph& g, const FinetuneBatch& batch,
                                   const LossWeights& w) {
    FinetuneTerms t;
    auto f = m.forward(p, g.constant(batch.x), model::Mode::forecast);
    t.mse = mse(f.forecast, g.constant(batch.y));
    Var total = t.mse;
    if (w.lambda_align > 0) {
        t.align = align_loss(m, p, g, f.mixture.back(), batch.r0, w);
        total = ad::add(total, ad::scale(t.align.total, w.lambda_align));
    }
    t.total = total;
    return t;
}

}  // namespace cape::loss
