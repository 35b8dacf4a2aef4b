// SPDX-License-Identifier: Apache-2.0
//
// Pretraining with per-epoch alternation between the encoder and the
// prototype dictionary, and full-model finetuning for forecasting.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cape/data.hpp"
#include "cape/losses.hpp"
#include "cape/model.hpp"
#include "cape/optim.hpp"
#include "cape/random.hpp"

namespace cape::train {

using ad::Graph;
using ad::Tensor;
using model::CapeModel;
using model::Trainable;

/// Seed streams; every random draw in a run derives from (seed, stream).
inline constexpr std::uint64_t kSplitStream = 0x5E11;
inline constexpr std::uint64_t kValMaskStream = 0x7A11;
inline constexpr std::uint64_t kEpochStream = 0xE90C;

struct PretrainOptions {
    optim::AdamWOptions adam{};
    std::size_t epochs = 50;
    std::size_t batch = 16;
    std::size_t views_per_series = 1;
    double val_fraction = 0.1;
    double mask_ratio = 0.3;
    data::R0Range r0{};
    loss::LossWeights weights{};
    std::uint64_t seed = 0;

    void validate() const {
        adam.validate();
        weights.validate();
        if (batch == 0 || views_per_series == 0) {
            throw ValidationError("batch and views_per_series must be positive");
        }
        if (!(val_fraction >= 0 && val_fraction < 1)) {
            throw ValidationError("val_fraction must lie in [0, 1)");
        }
        if (!(mask_ratio > 0 && mask_ratio < 1)) {
            throw ValidationError("mask_ratio must lie in (0, 1)");
        }
    }
};

/// Phase of an epoch: even epochs train everything but E, odd epochs train E.
inline Trainable phase_of(std::size_t epoch) { return epoch % 2 == 0 ? Trainable::encoder : Trainable::prototypes; }

inline const char* phase_name(Trainable t) {
    switch (t) {
        case Trainable::encoder: return "encoder";
        case Trainable::prototypes: return "prototypes";
        case Trainable::all: return "all";
        case Trainable::none: return "none";
    }
    return "?";
}

struct EpochLog {
    std::size_t epoch = 0;
    Trainable phase = Trainable::encoder;
    double train_total = 0, train_recon = 0, train_contrastive = 0, train_align = 0;
    std::size_t steps = 0;
    std::size_t ngm_skipped = 0;
    double val_recon = 0;         ///< reconstruction MSE over all steps of masked inputs
    double val_masked_recon = 0;  ///< same, restricted to masked steps
};

/// Fixed validation crops: non-overlapping length-T windows of each held-out
/// series, each with one mask drawn once per run.
struct ReconValidation {
    Tensor x, masked, mask;  ///< (N, T)

    std::size_t size() const { return x.rank() == 2 ? x.dim(0) : 0; }
};

struct ReconScore {
    double recon = 0;
    double masked_recon = 0;
};

inline std::vector<double> mask_to_steps(const data::PatchSet& ps) {
    std::vector<double> m(ps.values.size(), 0.0);
    for (std::size_t c = 0; c < ps.count(); ++c) {
        if (ps.mask[c]) {
            std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(c * ps.patch_len), ps.patch_len, 1.0);
        }
    }
    return m;
}

inline ReconValidation make_recon_validation(const std::vector<const std::vector<double>*>& series, std::size_t T,
                                             std::size_t P, double mask_ratio, std::uint64_t seed) {
    Rng rng(derive_seed(seed, kValMaskStream));
    std::vector<double> x, masked, mask;
    std::size_t n = 0;
    for (const auto* s : series) {
        for (std::size_t off = 0; off + T <= s->size(); off += T) {
            std::vector<double> w(s->begin() + static_cast<std::ptrdiff_t>(off),
                                  s->begin() + static_cast<std::ptrdiff_t>(off + T));
            const auto ps = data::mask_patches(data::patchify(w, P), mask_ratio, rng);
            const auto m = mask_to_steps(ps);
            x.insert(x.end(), w.begin(), w.end());
            masked.insert(masked.end(), ps.values.begin(), ps.values.end());
            mask.insert(mask.end(), m.begin(), m.end());
            ++n;
        }
    }
    ReconValidation v;
    if (n > 0) {
        v.x = Tensor({n, T}, std::move(x));
        v.masked = Tensor({n, T}, std::move(masked));
        v.mask = Tensor({n, T}, std::move(mask));
    }
    return v;
}

inline ReconScore evaluate_recon(const CapeModel& m, const ReconValidation& v, std::size_t chunk = 64) {
    ReconScore s;
    const std::size_t n = v.size();
    if (n == 0) {
        return s;
    }
    const std::size_t T = v.x.dim(1);
    double sq = 0, sq_masked = 0, n_masked = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += chunk) {
        const std::size_t b1 = std::min(n, b0 + chunk);
        std::vector<double> in(v.masked.values().begin() + static_cast<std::ptrdiff_t>(b0 * T),
                               v.masked.values().begin() + static_cast<std::ptrdiff_t>(b1 * T));
        Graph g;
        auto p = m.bind(g);
        auto out = m.forward(p, g.constant(Tensor({b1 - b0, T}, std::move(in))), model::Mode::pretrain);
        const Tensor& rec = out.reconstruction.value();
        for (std::size_t i = 0; i < (b1 - b0) * T; ++i) {
            const double e = rec[i] - v.x[b0 * T + i];
            sq += e * e;
            if (v.mask[b0 * T + i] != 0.0) {
                sq_masked += e * e;
                n_masked += 1.0;
            }
        }
    }
    s.recon = sq / static_cast<double>(n * T);
    s.masked_recon = n_masked > 0 ? sq_masked / n_masked : 0.0;
    return s;
}

/// Two views per series sharing one patch shift, each with its own mask.
/// Every series must have at least T values.
inline loss::PretrainBatch make_pretrain_batch(const std::vector<const std::vector<double>*>& series, std::size_t T,
                                               std::size_t P, double mask_ratio, const data::R0Range& r0, Rng& rng) {
    if (series.empty()) {
        throw ValidationError("make_pretrain_batch: empty batch");
    }
    std::size_t room = data::max_view_shift(T, P);
    for (const auto* s : series) {
        if (s->size() < T) {
            throw ValidationError("make_pretrain_batch: series shorter than T");
        }
        room = std::min(room, (s->size() - T) / P);
    }
    const std::size_t shift = rng.index(room + 1);
    const std::size_t B = series.size();
    loss::PretrainBatch b;
    b.view_a = Tensor({B, T});
    b.view_b = Tensor({B, T});
    b.masked_a = Tensor({B, T});
    b.masked_b = Tensor({B, T});
    b.mask_a = Tensor({B, T});
    b.mask_b = Tensor({B, T});
    b.r0 = r0;
    for (std::size_t i = 0; i < B; ++i) {
        const auto v = data::make_views_with_shift(*series[i], T, P, shift, rng);
        const auto pa = data::mask_patches(data::patchify(v->view_a, P), mask_ratio, rng);
        const auto pb = data::mask_patches(data::patchify(v->view_b, P), mask_ratio, rng);
        const auto ma = mask_to_steps(pa);
        const auto mb = mask_to_steps(pb);
        for (std::size_t t = 0; t < T; ++t) {
            b.view_a[i * T + t] = v->view_a[t];
            b.view_b[i * T + t] = v->view_b[t];
            b.masked_a[i * T + t] = pa.values[t];
            b.masked_b[i * T + t] = pb.values[t];
            b.mask_a[i * T + t] = ma[t];
            b.mask_b[i * T + t] = mb[t];
        }
        b.omega_a.push_back(v->omega_a);
        b.omega_b.push_back(v->omega_b);
    }
    return b;
}

/// Deterministic record-level split of series indices into (train, val).
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_series(std::size_t n, double val_fraction,
                                                                                   std::uint64_t seed) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, kSplitStream));
    for (std::size_t i = n; i > 1; --i) {
        std::swap(idx[i - 1], idx[rng.index(i)]);
    }
    std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    if (val_fraction > 0 && n_val == 0 && n > 1) {
        n_val = 1;
    }
    n_val = std::min(n_val, n > 0 ? n - 1 : 0);
    std::vector<std::size_t> val(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::vector<std::size_t> train(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
    return {train, val};
}

struct PretrainResult {
    CapeModel model;          ///< best-validation parameters
    optim::AdamW optimizer;   ///< moments at the best-validation epoch
    std::vector<EpochLog> history;
    ReconScore initial_val;
    std::optional<std::size_t> best_epoch;  ///< empty when the initial model was best
    double best_val = 0;
    bool diverged = false;
    std::string message;
};

/// Alternating pretraining on z-scored series. Series shorter than T are
/// skipped. Validation uses held-out series; the model with the lowest
/// validation reconstruction MSE (initial model included) is returned.
inline PretrainResult pretrain(CapeModel init, const std::vector<std::vector<double>>& corpus,
                               const PretrainOptions& opt) {
    opt.validate();
    const auto& cfg = init.config();
    const std::size_t T = cfg.T;
    const std::size_t P = cfg.patch_len;
    if (corpus.empty()) {
        throw ValidationError("pretrain: empty corpus");
    }
    auto [train_idx, val_idx] = split_series(corpus.size(), opt.val_fraction, opt.seed);
    std::vector<const std::vector<double>*> train_series, val_series;
    for (auto i : train_idx) {
        if (corpus[i].size() >= T) train_series.push_back(&corpus[i]);
    }
    for (auto i : val_idx) {
        if (corpus[i].size() >= T) val_series.push_back(&corpus[i]);
    }
    if (train_series.empty()) {
        throw ValidationError("pretrain: no training series of length >= T");
    }
    const ReconValidation val = make_recon_validation(val_series.empty() ? train_series : val_series, T, P,
                                                      opt.mask_ratio, opt.seed);

    PretrainResult r;
    r.optimizer = optim::AdamW(init.parameters(), opt.adam);
    r.model = std::move(init);
    r.initial_val = evaluate_recon(r.model, val);
    r.best_val = r.initial_val.recon;
    CapeModel best_model = r.model;
    optim::AdamW best_opt = r.optimizer;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        const Trainable phase = phase_of(epoch);
        Rng rng(derive_seed(opt.seed, kEpochStream + epoch));
        std::vector<const std::vector<double>*> order;
        for (std::size_t rep = 0; rep < opt.views_per_series; ++rep) {
            order.insert(order.end(), train_series.begin(), train_series.end());
        }
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.index(i)]);
        }
        const CapeModel epoch_start = r.model;
        const optim::AdamW epoch_opt = r.optimizer;
        EpochLog log;
        log.epoch = epoch;
        log.phase = phase;
        try {
            for (std::size_t b0 = 0; b0 < order.size(); b0 += opt.batch) {
                const std::size_t b1 = std::min(order.size(), b0 + opt.batch);
                if (b1 - b0 < 2 && order.size() >= 2) {
                    break;
                }
                std::vector<const std::vector<double>*> chunk(order.begin() + static_cast<std::ptrdiff_t>(b0),
                                                              order.begin() + static_cast<std::ptrdiff_t>(b1));
                const auto batch = make_pretrain_batch(chunk, T, P, opt.mask_ratio, opt.r0, rng);
                Graph g;
                auto p = r.model.bind(g, phase);
                const auto terms = loss::pretrain_loss(r.model, p, g, batch, opt.weights);
                const auto grads = g.backward(terms.total);
                r.optimizer.step(r.model.parameters(), grads,
                                 [&](std::size_t i) { return r.model.trainable(i, phase); });
                log.train_total += terms.total.item();
                log.train_recon += terms.recon.item();
                log.train_contrastive += terms.contrastive.item();
                if (opt.weights.lambda_align > 0) {
                    log.train_align += terms.align.total.item();
                    log.ngm_skipped += terms.align.ngm_skipped ? 1 : 0;
                }
                ++log.steps;
            }
            const auto score = evaluate_recon(r.model, val);
            log.val_recon = score.recon;
            log.val_masked_recon = score.masked_recon;
        } catch (const NonFiniteError& e) {
            r.model = epoch_start;
            r.optimizer = epoch_opt;
            r.diverged = true;
            r.message = "diverged in epoch " + std::to_string(epoch) + ": " + e.what();
            break;
        }
        if (log.steps > 0) {
            const double s = static_cast<double>(log.steps);
            log.train_total /= s;
            log.train_recon /= s;
            log.train_contrastive /= s;
            log.train_align /= s;
        }
        r.history.push_back(log);
        if (log.val_recon < r.best_val) {
            r.best_val = log.val_recon;
            r.best_epoch = epoch;
            best_model = r.model;
            best_opt = r.optimizer;
        }
    }
    r.model = std::move(best_model);
    r.optimizer = std::move(best_opt);
    return r;
}

// ---------------------------------------------------------------- finetune

struct FinetuneOptions {
    optim::AdamWOptions adam{};
    std::size_t epochs = 5;
    std::size_t batch = 16;
    std::size_t horizon = 4;
    std::size_t stride = 1;
    data::SplitFractions split{};
    loss::LossWeights weights = [] {
        loss::LossWeights w;
        w.lambda_align = 1e-3;
        return w;
    }();
    std::uint64_t seed = 0;

    void validate() const {
        adam.validate();
        weights.validate();
        split.validate();
        if (batch == 0 || horizon == 0 || stride == 0) {
            throw ValidationError("batch, horizon and stride must be positive");
        }
    }
};

struct FinetuneLog {
    std::size_t epoch = 0;
    double train_total = 0, train_mse = 0, train_align = 0;
    std::size_t steps = 0;
    double val_mse = 0;
};

struct FinetuneResult {
    CapeModel model;
    std::vector<FinetuneLog> history;
    double initial_val_mse = 0;
    std::optional<std::size_t> best_epoch;
    double best_val = 0;
    bool diverged = false;
    std::vector<std::string> warnings;
    std::string message;
};

/// Chronological windows of every record, tagged with the record index.
struct WindowSet {
    std::vector<data::WindowPair> train, val, test;
};

inline WindowSet make_window_set(const std::vector<data::TimeSeriesRecord>& records, std::size_t T, std::size_t h,
                                 std::size_t stride, const data::SplitFractions& f) {
    WindowSet ws;
    for (std::size_t r = 0; r < records.size(); ++r) {
        auto w = data::split_windows(records[r].values, T, h, stride, f, r);
        ws.train.insert(ws.train.end(), w.train.begin(), w.train.end());
        ws.val.insert(ws.val.end(), w.val.begin(), w.val.end());
        ws.test.insert(ws.test.end(), w.test.begin(), w.test.end());
    }
    return ws;
}

/// Forecast-head outputs for a set of windows, row-major (N, h).
inline std::vector<double> predict_windows(const CapeModel& m, const std::vector<data::WindowPair>& windows,
                                           std::size_t chunk = 128) {
    const std::size_t T = m.config().T;
    std::vector<double> out;
    for (std::size_t b0 = 0; b0 < windows.size(); b0 += chunk) {
        const std::size_t b1 = std::min(windows.size(), b0 + chunk);
        Tensor x({b1 - b0, T});
        for (std::size_t i = b0; i < b1; ++i) {
            std::copy(windows[i].x.begin(), windows[i].x.end(), x.data() + (i - b0) * T);
        }
        Graph g;
        auto p = m.bind(g);
        auto y = m.forward(p, g.constant(std::move(x)), model::Mode::forecast).forecast;
        out.insert(out.end(), y.value().values().begin(), y.value().values().end());
    }
    return out;
}

/// Forecasts of length H for each window, row-major (N, H). Horizons beyond
/// the forecast head roll forward, appending each forecast to the lookback.
inline std::vector<double> predict_horizon(const CapeModel& m, const std::vector<data::WindowPair>& windows,
                                           std::size_t H, std::size_t chunk = 128) {
    const std::size_t T = m.config().T;
    const std::size_t h = m.config().horizon;
    if (H == 0) {
        throw ValidationError("predict_horizon: horizon must be positive");
    }
    std::vector<data::WindowPair> current = windows;
    std::vector<double> out(windows.size() * H);
    for (std::size_t done = 0; done < H; done += h) {
        const std::vector<double> pred = predict_windows(m, current, chunk);
        const std::size_t take = std::min(h, H - done);
        for (std::size_t i = 0; i < windows.size(); ++i) {
            std::copy_n(pred.begin() + static_cast<std::ptrdiff_t>(i * h), take,
                        out.begin() + static_cast<std::ptrdiff_t>(i * H + done));
            auto& x = current[i].x;
            x.insert(x.end(), pred.begin() + static_cast<std::ptrdiff_t>(i * h),
                     pred.begin() + static_cast<std::ptrdiff_t>((i + 1) * h));
            x.erase(x.begin(), x.end() - static_cast<std::ptrdiff_t>(T));
        }
    }
    return out;
}

inline double windows_mse(const std::vector<double>& pred, const std::vector<data::WindowPair>& windows) {
    double s = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const std::size_t h = windows[i].y.size();
        for (std::size_t j = 0; j < h; ++j) {
            const double e = pred[i * h + j] - windows[i].y[j];
            s += e * e;
            ++n;
        }
    }
    return n > 0 ? s / static_cast<double>(n) : 0.0;
}

/// Full-model finetuning on forecasting windows of z-scored records. The
/// alignment target of a batch is the r0_range of its first window's record.
inline FinetuneResult finetune(CapeModel init, const std::vector<data::TimeSeriesRecord>& records,
                               const FinetuneOptions& opt) {
    opt.validate();
    FinetuneResult r;
    if (init.config().horizon != opt.horizon) {
        r.warnings.push_back("horizon " + std::to_string(init.config().horizon) + " != " +
                             std::to_string(opt.horizon) + ": forecast head reinitialized");
        init.reset_forecast_head(opt.horizon);
    }
    const std::size_t T = init.config().T;
    const WindowSet ws = make_window_set(records, T, opt.horizon, opt.stride, opt.split);
    if (ws.train.empty()) {
        throw ValidationError("finetune: no training windows");
    }
    r.model = std::move(init);
    optim::AdamW adam(r.model.parameters(), opt.adam);
    auto val_mse = [&](const CapeModel& m) { return windows_mse(predict_windows(m, ws.val), ws.val); };
    r.initial_val_mse = val_mse(r.model);
    r.best_val = r.initial_val_mse;
    CapeModel best = r.model;
    const std::size_t h = opt.horizon;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        Rng rng(derive_seed(opt.seed, kEpochStream + epoch));
        std::vector<std::size_t> order(ws.train.size());
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.index(i)]);
        }
        const CapeModel epoch_start = r.model;
        FinetuneLog log;
        log.epoch = epoch;
        try {
            for (std::size_t b0 = 0; b0 < order.size(); b0 += opt.batch) {
                const std::size_t b1 = std::min(order.size(), b0 + opt.batch);
                const std::size_t B = b1 - b0;
                loss::FinetuneBatch batch{Tensor({B, T}), Tensor({B, h}), records[ws.train[order[b0]].record].r0_range};
                for (std::size_t i = 0; i < B; ++i) {
                    const auto& w = ws.train[order[b0 + i]];
                    std::copy(w.x.begin(), w.x.end(), batch.x.data() + i * T);
                    std::copy(w.y.begin(), w.y.end(), batch.y.data() + i * h);
                }
                Graph g;
                auto p = r.model.bind(g, Trainable::all);
                const auto terms = loss::finetune_loss(r.model, p, g, batch, opt.weights);
                const auto grads = g.backward(terms.total);
                adam.step(r.model.parameters(), grads, [](std::size_t) { return true; });
                log.train_total += terms.total.item();
                log.train_mse += terms.mse.item();
                if (opt.weights.lambda_align > 0) {
                    log.train_align += terms.align.total.item();
                }
                ++log.steps;
            }
            log.val_mse = val_mse(r.model);
        } catch (const NonFiniteError& e) {
            r.model = epoch_start;
            r.diverged = true;
            r.message = "diverged in epoch " + std::to_string(epoch) + ": " + e.what();
            break;
        }
        const double s = static_cast<double>(std::max<std::size_t>(log.steps, 1));
        log.train_total /= s;
        log.train_mse /= s;
        log.train_align /= s;
        r.history.push_back(log);
        if (ws.val.empty() || log.val_mse < r.best_val) {
            r.best_val = log.val_mse;
            r.best_epoch = epoch;
            best = r.model;
        }
    }
    r.model = std::move(best);
    return r;
}

/// z-scores each record on its leading train_fraction (records already
/// carrying a NormState are passed through).
inline std::vector<data::TimeSeriesRecord> normalize_records(const std::vector<data::TimeSeriesRecord>& records,
                                                             double train_fraction) {
    std::vector<data::TimeSeriesRecord> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        out.push_back(r.norm ? r : data::zscore_normalize(r, train_fraction));
    }
    return out;
}

}  // namespace cape::train
