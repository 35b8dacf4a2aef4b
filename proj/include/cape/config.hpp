// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a closed set of dotted keys with string values, read
// from `key = value` files (`#` starts a comment) and overridable per key.
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "cape/data.hpp"
#include "cape/epi_sim.hpp"
#include "cape/error.hpp"
#include "cape/losses.hpp"
#include "cape/model.hpp"
#include "cape/training.hpp"

namespace cape {

struct ConfigKey {
    const char* name;
    const char* default_value;
    const char* help;
};

// clang-format off
inline const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        {"seed", "0", "master random seed"},
        {"model.T", "36", "lookback length"},
        {"model.patch_len", "4", "patch length"},
        {"model.d", "64", "hidden size"},
        {"model.layers", "2", "encoder blocks"},
        {"model.heads", "4", "attention heads"},
        {"model.K", "16", "prototype count"},
        {"model.ffn_hidden", "128", "feed-forward width"},
        {"model.horizon", "4", "forecast horizon"},
        {"model.attention", "1", "0 replaces self-attention by the identity"},
        {"model.role_counts", "1,1,6,8", "prototype roles as counts of mono_inc,mono_dec,infectious,free"},
        {"model.roles", "", "explicit comma-separated role per prototype (overrides role_counts)"},
        {"model.checkpoint", "", "checkpoint to start from"},
        {"loss.lambda_pretrain", "1e-5", "alignment weight during pretraining"},
        {"loss.lambda_finetune", "1e-3", "alignment weight during finetuning"},
        {"loss.eps_mono", "0.01", "monotonic tolerance"},
        {"loss.ngm_eps", "0.05", "next-generation proxy perturbation"},
        {"loss.ngm_alpha", "0.1", "next-generation proxy mixing weight"},
        {"loss.ngm_infectious_only", "0", "restrict F and V to infectious prototypes"},
        {"loss.r0_lo", "0", "R0 lower bound used during pretraining"},
        {"loss.r0_hi", "20", "R0 upper bound used during pretraining"},
        {"loss.mask_ratio", "0.3", "fraction of patches masked"},
        {"loss.recon_masked_only", "0", "reconstruction error on masked patches only"},
        {"loss.cl_normalize", "1", "L2-normalize contrastive representations"},
        {"train.lr", "1e-5", "pretraining learning rate"},
        {"train.wd", "1e-4", "pretraining weight decay"},
        {"train.finetune_lr", "1e-3", "finetuning learning rate"},
        {"train.finetune_wd", "1e-4", "finetuning weight decay"},
        {"train.beta1", "0.9", "first-moment decay"},
        {"train.beta2", "0.999", "second-moment decay"},
        {"train.clip", "1.0", "global gradient-norm clip (0 disables)"},
        {"train.epochs", "50", "pretraining epochs"},
        {"train.finetune_epochs", "5", "finetuning epochs"},
        {"train.batch", "16", "batch size"},
        {"train.views_per_series", "1", "view pairs drawn per training series each epoch"},
        {"train.val_fraction", "0.1", "fraction of series held out for pretraining validation"},
        {"data.csv", "", "input CSV; empty uses the synthetic corpus"},
        {"data.split", "0.6,0.1,0.3", "chronological train,val,test fractions"},
        {"data.stride", "1", "window stride"},
        {"sim.n_series", "200", "synthetic series"},
        {"sim.length", "120", "synthetic series length"},
        {"sim.dt", "1", "synthetic sampling step"},
        {"sim.beta", "0.2,0.6", "transmission rate range"},
        {"sim.gamma", "0.05,0.2", "recovery rate range"},
        {"sim.mu", "0.001,0.02", "death rate range"},
        {"sim.i0", "1e-4,1e-2", "initial infectious fraction range"},
        {"sim.noise", "0.05", "lognormal observation noise"},
        {"sim.observation", "incidence", "incidence or prevalence"},
        {"zeroshot.horizon", "4", "zero-shot forecast horizon"},
        {"eval.horizons", "1,2,4,8,16", "horizons reported in metric files"},
        {"analyze.group_s", "", "prototypes standing for S (empty: mono_dec prototypes)"},
        {"analyze.group_i", "", "prototypes standing for I (empty: infectious prototypes)"},
        {"analyze.group_r", "", "prototypes standing for R (empty: mono_inc prototypes)"},
        {"analyze.group_d", "", "prototypes standing for D (empty: mono_inc prototypes)"},
        {"gradcheck.seeds", "10", "random seeds per gradient check case"},
    };
    return keys;
}
// clang-format on

namespace detail {

inline std::string trim_copy(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    if (s.empty()) {
        return out;
    }
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == ',') {
            out.push_back(trim_copy(std::string_view(s).substr(start, i - start)));
            start = i + 1;
        }
    }
    return out;
}

}  // namespace detail

class Config {
public:
    Config() {
        for (const auto& k : config_keys()) {
            values_[k.name] = k.default_value;
        }
    }

    static bool known(const std::string& key) {
        for (const auto& k : config_keys()) {
            if (key == k.name) {
                return true;
            }
        }
        return false;
    }

    void set(const std::string& key, const std::string& value) {
        if (!known(key)) {
            throw ValidationError("unknown config key '" + key + "'");
        }
        values_[key] = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) {
            throw ValidationError("unknown config key '" + key + "'");
        }
        return it->second;
    }

    double get_double(const std::string& key) const { return parse_double(key, get(key)); }

    std::int64_t get_int(const std::string& key) const {
        const std::string& v = get(key);
        std::int64_t out = 0;
        auto r = std::from_chars(v.data(), v.data() + v.size(), out);
        if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) {
            throw ValidationError("config " + key + ": '" + v + "' is not an integer");
        }
        return out;
    }

    std::size_t get_size(const std::string& key) const {
        const auto v = get_int(key);
        if (v < 0) {
            throw ValidationError("config " + key + " must be nonnegative");
        }
        return static_cast<std::size_t>(v);
    }

    bool get_bool(const std::string& key) const {
        const std::string& v = get(key);
        if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
        if (v == "0" || v == "false" || v == "no" || v == "off") return false;
        throw ValidationError("config " + key + ": '" + v + "' is not a boolean");
    }

    std::vector<double> get_doubles(const std::string& key) const {
        std::vector<double> out;
        for (const auto& part : detail::split_list(get(key))) {
            out.push_back(parse_double(key, part));
        }
        return out;
    }

    std::vector<std::string> get_list(const std::string& key) const { return detail::split_list(get(key)); }

    /// Parses `key = value` lines; blank lines and text after `#` are ignored.
    void merge_stream(std::istream& in, const std::string& source) {
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) {
                line.erase(hash);
            }
            const std::string t = detail::trim_copy(line);
            if (t.empty()) {
                continue;
            }
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw ValidationError(source + ":" + std::to_string(lineno) + ": expected key = value");
            }
            const std::string key = detail::trim_copy(std::string_view(t).substr(0, eq));
            if (!known(key)) {
                throw ValidationError(source + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
            }
            values_[key] = detail::trim_copy(std::string_view(t).substr(eq + 1));
        }
    }

    void merge_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) {
            throw ValidationError("cannot open config file " + path);
        }
        merge_stream(in, path);
    }

    /// Canonical `key=value` lines in key order.
    std::string serialize() const {
        std::string out;
        for (const auto& [k, v] : values_) {
            out += k + "=" + v + "\n";
        }
        return out;
    }

    /// 64-bit FNV-1a of serialize(), as 16 hex digits.
    std::string hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : serialize()) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

    // ------------------------------------------------------------ typed views

    model::ModelConfig model() const {
        model::ModelConfig m;
        m.T = get_size("model.T");
        m.patch_len = get_size("model.patch_len");
        m.d = get_size("model.d");
        m.layers = get_size("model.layers");
        m.heads = get_size("model.heads");
        m.K = get_size("model.K");
        m.ffn_hidden = get_size("model.ffn_hidden");
        m.horizon = get_size("model.horizon");
        m.attention = get_bool("model.attention");
        const auto roles = get_list("model.roles");
        if (!roles.empty()) {
            m.roles.clear();
            for (const auto& r : roles) {
                m.roles.push_back(model::parse_role(r));
            }
        } else {
            const auto counts = get_doubles("model.role_counts");
            if (counts.size() != 4) {
                throw ValidationError("config model.role_counts needs 4 entries");
            }
            auto n = [&](std::size_t i) {
                if (counts[i] < 0 || counts[i] != static_cast<double>(static_cast<std::size_t>(counts[i]))) {
                    throw ValidationError("config model.role_counts entries must be nonnegative integers");
                }
                return static_cast<std::size_t>(counts[i]);
            };
            m.roles = model::roles_from_counts(n(0), n(1), n(2), n(3));
        }
        m.validate();
        return m;
    }

    loss::LossWeights loss_weights(bool finetune) const {
        loss::LossWeights w;
        w.lambda_align = get_double(finetune ? "loss.lambda_finetune" : "loss.lambda_pretrain");
        w.epsilon_mono = get_double("loss.eps_mono");
        w.ngm_eps = get_double("loss.ngm_eps");
        w.ngm_alpha = get_double("loss.ngm_alpha");
        w.ngm_infectious_only = get_bool("loss.ngm_infectious_only");
        w.recon_masked_only = get_bool("loss.recon_masked_only");
        w.cl_normalize = get_bool("loss.cl_normalize");
        w.validate();
        return w;
    }

    data::R0Range pretrain_r0() const {
        data::R0Range r{get_double("loss.r0_lo"), get_double("loss.r0_hi")};
        if (!(r.lower <= r.upper)) {
            throw ValidationError("config loss.r0_lo must not exceed loss.r0_hi");
        }
        return r;
    }

    data::SplitFractions split() const {
        const auto v = get_doubles("data.split");
        if (v.size() != 3) {
            throw ValidationError("config data.split needs 3 fractions");
        }
        data::SplitFractions f{v[0], v[1], v[2]};
        f.validate();
        return f;
    }

    sim::CorpusSpec corpus() const {
        sim::CorpusSpec s;
        s.n_series = get_size("sim.n_series");
        s.length = get_size("sim.length");
        s.dt = get_double("sim.dt");
        s.beta = range("sim.beta");
        s.gamma = range("sim.gamma");
        s.mu = range("sim.mu");
        s.i0 = range("sim.i0");
        s.noise_level = get_double("sim.noise");
        const std::string& obs = get("sim.observation");
        if (obs == "incidence") {
            s.observation = sim::Observation::incidence;
        } else if (obs == "prevalence") {
            s.observation = sim::Observation::prevalence;
        } else {
            throw ValidationError("config sim.observation must be incidence or prevalence");
        }
        s.validate();
        return s;
    }

    std::uint64_t seed() const { return static_cast<std::uint64_t>(get_int("seed")); }

    train::PretrainOptions pretrain_options() const {
        train::PretrainOptions o;
        o.adam = adam(get_double("train.lr"), get_double("train.wd"));
        o.epochs = get_size("train.epochs");
        o.batch = get_size("train.batch");
        o.views_per_series = get_size("train.views_per_series");
        o.val_fraction = get_double("train.val_fraction");
        o.mask_ratio = get_double("loss.mask_ratio");
        o.r0 = pretrain_r0();
        o.weights = loss_weights(false);
        o.seed = seed();
        o.validate();
        return o;
    }

    train::FinetuneOptions finetune_options() const {
        train::FinetuneOptions o;
        o.adam = adam(get_double("train.finetune_lr"), get_double("train.finetune_wd"));
        o.epochs = get_size("train.finetune_epochs");
        o.batch = get_size("train.batch");
        o.horizon = get_size("model.horizon");
        o.stride = get_size("data.stride");
        o.split = split();
        o.weights = loss_weights(true);
        o.seed = seed();
        o.validate();
        return o;
    }

private:
    static double parse_double(const std::string& key, const std::string& v) {
        double out = 0.0;
        auto r = std::from_chars(v.data(), v.data() + v.size(), out);
        if (r.ec != std::errc{} || r.ptr != v.data() + v.size()) {
            throw ValidationError("config " + key + ": '" + v + "' is not a number");
        }
        return out;
    }

    optim::AdamWOptions adam(double lr, double wd) const {
        optim::AdamWOptions o;
        o.lr = lr;
        o.weight_decay = wd;
        o.beta1 = get_double("train.beta1");
        o.beta2 = get_double("train.beta2");
        o.clip = get_double("train.clip");
        o.validate();
        return o;
    }

    sim::Range range(const std::string& key) const {
        const auto v = get_doubles(key);
        if (v.size() != 2) {
            throw ValidationError("config " + key + " needs lo,hi");
        }
        return {v[0], v[1]};
    }

    std::map<std::string, std::string> values_;
};

/// model.* keys of a model configuration, in the form Config::model() reads.
inline std::map<std::string, std::string> model_config_entries(const model::ModelConfig& m) {
    std::string roles;
    for (std::size_t k = 0; k < m.roles.size(); ++k) {
        roles += (k ? "," : "");
        roles += model::role_name(m.roles[k]);
    }
    return {
        {"model.T", std::to_string(m.T)},
        {"model.patch_len", std::to_string(m.patch_len)},
        {"model.d", std::to_string(m.d)},
        {"model.layers", std::to_string(m.layers)},
        {"model.heads", std::to_string(m.heads)},
        {"model.K", std::to_string(m.K)},
        {"model.ffn_hidden", std::to_string(m.ffn_hidden)},
        {"model.horizon", std::to_string(m.horizon)},
        {"model.attention", m.attention ? "1" : "0"},
        {"model.roles", roles},
    };
}

inline model::ModelConfig model_config_from_entries(const std::map<std::string, std::string>& kv) {
    Config c;
    for (const auto& [k, v] : kv) {
        if (k.rfind("model.", 0) == 0) {
            c.set(k, v);
        }
    }
    return c.model();
}

}  // namespace cape
