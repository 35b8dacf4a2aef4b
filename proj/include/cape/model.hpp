// SPDX-License-Identifier: Apache-2.0
//
// Patch encoder with a compartmental prototype dictionary. Each block runs
// self-attention over patches, mixes the prototypes per patch with a softmax
// over (W_k e_k)^T (W_s h_c), and applies a pre-norm feed-forward update.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cape/autodiff.hpp"
#include "cape/error.hpp"
#include "cape/random.hpp"
#include "cape/tensor.hpp"

namespace cape::model {

using ad::Graph;
using ad::Parameter;
using ad::Shape;
using ad::Tensor;
using ad::Var;

enum class Role { mono_inc, mono_dec, infectious, free };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::mono_inc: return "mono_inc";
        case Role::mono_dec: return "mono_dec";
        case Role::infectious: return "infectious";
        case Role::free: return "free";
    }
    return "free";
}

inline Role parse_role(const std::string& s) {
    if (s == "mono_inc" || s == "inc") return Role::mono_inc;
    if (s == "mono_dec" || s == "dec") return Role::mono_dec;
    if (s == "infectious" || s == "inf") return Role::infectious;
    if (s == "free") return Role::free;
    throw ValidationError("unknown prototype role '" + s + "'");
}

/// Roles from counts of (mono_inc, mono_dec, infectious, free), in that order.
inline std::vector<Role> roles_from_counts(std::size_t inc, std::size_t dec, std::size_t inf, std::size_t free) {
    std::vector<Role> r;
    r.insert(r.end(), inc, Role::mono_inc);
    r.insert(r.end(), dec, Role::mono_dec);
    r.insert(r.end(), inf, Role::infectious);
    r.insert(r.end(), free, Role::free);
    return r;
}

struct ModelConfig {
    std::size_t T = 36;
    std::size_t patch_len = 4;
    std::size_t d = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t K = 16;
    std::size_t ffn_hidden = 128;
    std::size_t horizon = 4;
    bool attention = true;  ///< false replaces self-attention by the identity
    std::vector<Role> roles = roles_from_counts(1, 1, 6, 8);

    std::size_t C() const { return patch_len == 0 ? 0 : T / patch_len; }

    void validate() const {
        if (patch_len == 0 || T == 0 || T % patch_len != 0) {
            throw ValidationError("model: T must be a positive multiple of patch_len");
        }
        if (d == 0 || heads == 0 || d % heads != 0) {
            throw ValidationError("model: d must be a positive multiple of heads");
        }
        if (K == 0 || layers == 0 || ffn_hidden == 0) {
            throw ValidationError("model: K, layers and ffn_hidden must be positive");
        }
        if (roles.size() != K) {
            throw ValidationError("model: " + std::to_string(roles.size()) + " prototype roles given for K=" +
                                  std::to_string(K));
        }
    }

    std::vector<std::size_t> indices_with(Role r) const {
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k < roles.size(); ++k) {
            if (roles[k] == r) {
                out.push_back(k);
            }
        }
        return out;
    }
};

/// Which parameters receive gradients when a model is bound to a graph.
enum class Trainable { none, all, encoder, prototypes };

struct LayerIndex {
    std::size_t ln1_g, ln1_b, wq, wk, wv, wo;
    std::size_t proto_k, proto_s, wf;
    std::size_t ln2_g, ln2_b, w1, b1, w2, b2;
};

/// Parameter values bound into one graph, addressable like the model's
/// parameter list.
struct Bound {
    std::vector<Var> vars;
    const Var& operator[](std::size_t i) const { return vars.at(i); }
};

struct ForwardOutput {
    Var final_repr;               ///< (B, C, d)
    std::vector<Var> mixture;     ///< per layer, (B, C, K)
    Var reconstruction;           ///< (B, T), pretrain mode
    Var forecast;                 ///< (B, h), forecast mode
};

enum class Mode { pretrain, forecast };

class CapeModel {
public:
    CapeModel() = default;

    CapeModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(seed, 0xCA9E));
        build(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<Parameter>& parameters() { return params_; }
    const std::vector<Parameter>& parameters() const { return params_; }
    Parameter& param(std::size_t i) { return params_.at(i); }
    const Parameter& param(std::size_t i) const { return params_.at(i); }

    std::size_t index_of(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) {
            throw ValidationError("model has no parameter '" + name + "'");
        }
        return it->second;
    }

    std::size_t prototypes_index() const { return protos_; }
    const Tensor& prototypes() const { return params_[protos_].value; }
    Tensor& prototypes() { return params_[protos_].value; }
    const std::vector<LayerIndex>& layers() const { return layer_; }

    /// Prototype dictionary versus everything else (encoder, heads, calibration).
    bool is_prototype(std::size_t i) const { return i == protos_; }

    bool trainable(std::size_t i, Trainable t) const {
        switch (t) {
            case Trainable::none: return false;
            case Trainable::all: return true;
            case Trainable::encoder: return !is_prototype(i);
            case Trainable::prototypes: return is_prototype(i);
        }
        return false;
    }

    Bound bind(Graph& g, Trainable t = Trainable::none) const {
        Bound b;
        b.vars.reserve(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            b.vars.push_back(trainable(i, t) ? g.parameter(params_[i]) : g.frozen(params_[i]));
        }
        return b;
    }

    /// Patch projection plus learned positional embedding: (B, T) -> (B, C, d).
    Var embed_patches(const Bound& p, const Var& x) const {
        const std::size_t C = cfg_.C();
        if (x.rank() != 2 || x.dim(1) != cfg_.T) {
            throw ShapeError("embed_patches: expected (B, " + std::to_string(cfg_.T) + "), got " +
                             ad::to_string(x.shape()));
        }
        Var patches = ad::reshape(x, {x.dim(0), C, cfg_.patch_len});
        return ad::add(ad::add(ad::matmul(patches, p[embed_w_]), p[embed_b_]), p[pos_]);
    }

    /// Softmax over prototypes of (W_k e_k)^T (W_s h_c): (B, C, d) -> (B, C, K).
    Var mixture_weights(const Bound& p, std::size_t layer, const Var& h) const {
        const LayerIndex& li = layer_.at(layer);
        Var keys = ad::matmul(p[protos_], p[li.proto_k]);  // (K, d)
        Var queries = ad::matmul(h, p[li.proto_s]);        // (B, C, d)
        return ad::softmax(ad::matmul(queries, ad::transpose(keys)));
    }

    /// Multi-head self-attention over patches with a residual: x + MHA(LN(x)).
    Var self_attention(const Bound& p, const LayerIndex& li, const Var& x) const {
        if (!cfg_.attention) {
            return x;
        }
        const std::size_t B = x.dim(0);
        const std::size_t C = cfg_.C();
        const std::size_t H = cfg_.heads;
        const std::size_t dh = cfg_.d / H;
        Var a = ad::layer_norm(x, p[li.ln1_g], p[li.ln1_b]);
        auto split = [&](const Var& w) {
            return ad::permute(ad::reshape(ad::matmul(a, w), {B, C, H, dh}), {0, 2, 1, 3});
        };
        Var q = split(p[li.wq]);
        Var k = split(p[li.wk]);
        Var v = split(p[li.wv]);
        Var att = ad::softmax(ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh))));
        Var ctx = ad::reshape(ad::permute(ad::matmul(att, v), {0, 2, 1, 3}), {B, C, cfg_.d});
        return ad::add(x, ad::matmul(ctx, p[li.wo]));
    }

    struct BlockOutput {
        Var x;
        Var pi;
    };

    /// x^(l+1) = sigma(W_f sum_k pi_k (h ⊙ e_k)) with sigma(z) = z + FFN(LN(z)).
    BlockOutput block_forward(const Bound& p, std::size_t layer, const Var& x) const {
        const LayerIndex& li = layer_.at(layer);
        Var h = self_attention(p, li, x);
        Var pi = mixture_weights(p, layer, h);
        Var mixed = ad::mul(h, ad::matmul(pi, p[protos_]));
        Var z = ad::matmul(mixed, p[li.wf]);
        Var hidden = ad::relu(ad::add(ad::matmul(ad::layer_norm(z, p[li.ln2_g], p[li.ln2_b]), p[li.w1]), p[li.b1]));
        Var out = ad::add(z, ad::add(ad::matmul(hidden, p[li.w2]), p[li.b2]));
        return {out, pi};
    }

    /// Encoder only: (B, T) -> (B, C, d), recording every layer's mixture.
    Var encode(const Bound& p, const Var& x, std::vector<Var>* mixture = nullptr) const {
        Var cur = embed_patches(p, x);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            BlockOutput b = block_forward(p, l, cur);
            cur = b.x;
            if (mixture != nullptr) {
                mixture->push_back(b.pi);
            }
        }
        return cur;
    }

    Var reconstruct_head(const Bound& p, const Var& repr) const {
        const std::size_t B = repr.dim(0);
        Var r = ad::add(ad::matmul(repr, p[recon_w_]), p[recon_b_]);
        return ad::reshape(r, {B, cfg_.T});
    }

    Var forecast_head(const Bound& p, const Var& repr) const {
        if (cfg_.horizon == 0) {
            throw ValidationError("forward: forecast mode needs a forecast head (horizon > 0)");
        }
        const std::size_t B = repr.dim(0);
        Var flat = ad::reshape(repr, {B, cfg_.C() * cfg_.d});
        return ad::add(ad::matmul(flat, p[fc_w_]), p[fc_b_]);
    }

    ForwardOutput forward(const Bound& p, const Var& x, Mode mode) const {
        ForwardOutput out;
        out.final_repr = encode(p, x, &out.mixture);
        if (mode == Mode::pretrain) {
            out.reconstruction = reconstruct_head(p, out.final_repr);
        } else {
            out.forecast = forecast_head(p, out.final_repr);
        }
        return out;
    }

    /// Disease-free equilibrium: E_DFE = x^(L) of an all-zero series, (C, d).
    Var dfe_embedding(Graph& g, const Bound& p) const {
        Var zeros = g.constant(Tensor({1, cfg_.T}));
        Var repr = encode(p, zeros);
        return ad::reshape(repr, {cfg_.C(), cfg_.d});
    }

    /// Patch-mean of softmax(H E^T): the mixture estimator used for pi* and
    /// the next-generation proxy. H is (..., C, d); result (..., K).
    Var patch_mean_mixture(const Bound& p, const Var& h) const {
        Var w = ad::softmax(ad::matmul(h, ad::transpose(p[protos_])));
        return ad::mean_axis(w, w.rank() - 2);
    }

    /// Reinitializes the forecast head for a new horizon. The last patch's
    /// block copies the reconstruction head for the first min(h, patch_len)
    /// outputs; every other weight starts at zero.
    void reset_forecast_head(std::size_t horizon) {
        cfg_.horizon = horizon;
        const std::size_t C = cfg_.C();
        const std::size_t d = cfg_.d;
        const std::size_t P = cfg_.patch_len;
        Tensor w({C * d, horizon});
        Tensor b({horizon});
        const Tensor& rw = params_[recon_w_].value;
        const Tensor& rb = params_[recon_b_].value;
        for (std::size_t j = 0; j < std::min(horizon, P); ++j) {
            for (std::size_t i = 0; i < d; ++i) {
                w[((C - 1) * d + i) * horizon + j] = rw[i * P + j];
            }
            b[j] = rb[j];
        }
        params_[fc_w_].value = std::move(w);
        params_[fc_b_].value = std::move(b);
    }

    /// Reconstruction of the last patch with the final patch masked. The
    /// window passed to the encoder is x[P:] followed by P zeros, so the
    /// masked patch sits right after the observed history. Horizons beyond
    /// patch_len roll forward on the model's own predictions, so errors
    /// compound with each extra patch.
    std::vector<double> zero_shot_forecast(const std::vector<double>& x, std::size_t horizon = 0) const {
        const std::size_t T = cfg_.T;
        const std::size_t P = cfg_.patch_len;
        if (x.size() != T) {
            throw ShapeError("zero_shot_forecast: expected length " + std::to_string(T) + ", got " +
                             std::to_string(x.size()));
        }
        if (horizon == 0) {
            horizon = P;
        }
        std::vector<double> history = x;
        std::vector<double> out;
        while (out.size() < horizon) {
            Tensor window({1, T});
            for (std::size_t t = 0; t + P < T; ++t) {
                window[t] = history[t + P];
            }
            Graph g;
            Bound p = bind(g);
            Var rec = reconstruct_head(p, encode(p, g.constant(window)));
            std::vector<double> pred(P);
            for (std::size_t j = 0; j < P; ++j) {
                pred[j] = rec.value()[T - P + j];
            }
            history.erase(history.begin(), history.begin() + static_cast<std::ptrdiff_t>(P));
            history.insert(history.end(), pred.begin(), pred.end());
            out.insert(out.end(), pred.begin(), pred.end());
        }
        out.resize(horizon);
        return out;
    }

    /// Forecast head output for one lookback window.
    std::vector<double> forecast(const std::vector<double>& x) const {
        if (x.size() != cfg_.T) {
            throw ShapeError("forecast: expected length " + std::to_string(cfg_.T));
        }
        Graph g;
        Bound p = bind(g);
        Var y = forward(p, g.constant(Tensor({1, cfg_.T}, x)), Mode::forecast).forecast;
        return y.value().storage();
    }

    std::size_t ngm_lo_scale() const { return ngm_[0]; }
    std::size_t ngm_lo_shift() const { return ngm_[1]; }
    std::size_t ngm_hi_scale() const { return ngm_[2]; }
    std::size_t ngm_hi_shift() const { return ngm_[3]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) {
            n += p.value.size();
        }
        return n;
    }

private:
    std::size_t add(const std::string& name, Tensor value) {
        by_name_[name] = params_.size();
        params_.push_back(Parameter{name, std::move(value)});
        return params_.size() - 1;
    }

    std::size_t add_linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
        return add(name, Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in))));
    }

    void build(Rng& rng) {
        const std::size_t d = cfg_.d;
        const std::size_t C = cfg_.C();
        const std::size_t P = cfg_.patch_len;
        embed_w_ = add_linear("embed.w", P, d, rng);
        embed_b_ = add("embed.b", Tensor({d}));
        pos_ = add("embed.pos", Tensor::randn({C, d}, rng, 0.1));
        protos_ = add("prototypes", Tensor::randn({cfg_.K, d}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            LayerIndex li{};
            li.ln1_g = add(pre + "ln1.g", Tensor({d}, 1.0));
            li.ln1_b = add(pre + "ln1.b", Tensor({d}));
            li.wq = add_linear(pre + "attn.wq", d, d, rng);
            li.wk = add_linear(pre + "attn.wk", d, d, rng);
            li.wv = add_linear(pre + "attn.wv", d, d, rng);
            li.wo = add_linear(pre + "attn.wo", d, d, rng);
            li.proto_k = add_linear(pre + "mix.wk", d, d, rng);
            li.proto_s = add_linear(pre + "mix.ws", d, d, rng);
            li.wf = add_linear(pre + "mix.wf", d, d, rng);
            li.ln2_g = add(pre + "ln2.g", Tensor({d}, 1.0));
            li.ln2_b = add(pre + "ln2.b", Tensor({d}));
            li.w1 = add_linear(pre + "ffn.w1", d, cfg_.ffn_hidden, rng);
            li.b1 = add(pre + "ffn.b1", Tensor({cfg_.ffn_hidden}));
            li.w2 = add_linear(pre + "ffn.w2", cfg_.ffn_hidden, d, rng);
            li.b2 = add(pre + "ffn.b2", Tensor({d}));
            layer_.push_back(li);
        }
        recon_w_ = add_linear("recon.w", d, P, rng);
        recon_b_ = add("recon.b", Tensor({P}));
        fc_w_ = add("forecast.w", Tensor({C * d, cfg_.horizon}));
        fc_b_ = add("forecast.b", Tensor({cfg_.horizon}));
        ngm_[0] = add("ngm.lo_scale", Tensor::scalar(1.0));
        ngm_[1] = add("ngm.lo_shift", Tensor::scalar(0.0));
        ngm_[2] = add("ngm.hi_scale", Tensor::scalar(1.0));
        ngm_[3] = add("ngm.hi_shift", Tensor::scalar(0.0));
        reset_forecast_head(cfg_.horizon);
    }

    ModelConfig cfg_;
    std::vector<Parameter> params_;
    std::map<std::string, std::size_t> by_name_;
    std::size_t embed_w_ = 0, embed_b_ = 0, pos_ = 0, protos_ = 0;
    std::vector<LayerIndex> layer_;
    std::size_t recon_w_ = 0, recon_b_ = 0, fc_w_ = 0, fc_b_ = 0;
    std::size_t ngm_[4] = {0, 0, 0, 0};
};

}  // namespace cape::model
