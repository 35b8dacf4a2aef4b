// SPDX-License-Identifier: Apache-2.0
//
// Forecast metrics, naive baselines, and latent-space statistics (central
// moment discrepancy, Davies-Bouldin index, prototype alignment).
#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cape/data.hpp"
#include "cape/epi_sim.hpp"
#include "cape/error.hpp"
#include "cape/model.hpp"

namespace cape::eval {

using Matrix = std::vector<std::vector<double>>;

struct MetricReport {
    std::size_t horizon = 0;  ///< 0 marks an average over horizons
    double mse = 0;
    double mae = 0;
    std::size_t n_windows = 0;
    double residual_mean = 0;      ///< mean signed error, prediction - target
    double residual_max_abs = 0;
    std::vector<double> window_mse;  ///< per window, in input order

    bool operator==(const MetricReport&) const = default;
};

/// Per-window MSE and MAE averaged over windows.
inline MetricReport forecast_metrics(const Matrix& predictions, const Matrix& targets) {
    if (predictions.empty()) {
        throw ValidationError("forecast_metrics: no windows");
    }
    if (predictions.size() != targets.size()) {
        throw ShapeError("forecast_metrics: prediction and target counts differ");
    }
    MetricReport r;
    r.horizon = predictions[0].size();
    r.n_windows = predictions.size();
    double n_res = 0;
    for (std::size_t w = 0; w < predictions.size(); ++w) {
        const auto& p = predictions[w];
        const auto& t = targets[w];
        if (p.size() != t.size() || p.size() != r.horizon || p.empty()) {
            throw ShapeError("forecast_metrics: window " + std::to_string(w) + " has mismatched length");
        }
        double se = 0, ae = 0;
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double e = p[j] - t[j];
            se += e * e;
            ae += std::abs(e);
            r.residual_mean += e;
            r.residual_max_abs = std::max(r.residual_max_abs, std::abs(e));
            n_res += 1;
        }
        const double h = static_cast<double>(p.size());
        r.window_mse.push_back(se / h);
        r.mse += se / h;
        r.mae += ae / h;
    }
    r.mse /= static_cast<double>(r.n_windows);
    r.mae /= static_cast<double>(r.n_windows);
    r.residual_mean /= n_res;
    return r;
}

/// Mean of MSE and MAE over horizons; horizon 0 marks the result.
inline MetricReport average_over_horizons(const std::vector<MetricReport>& reports) {
    if (reports.empty()) {
        throw ValidationError("average_over_horizons: no reports");
    }
    MetricReport r;
    for (const auto& x : reports) {
        r.mse += x.mse;
        r.mae += x.mae;
        r.n_windows += x.n_windows;
        r.residual_max_abs = std::max(r.residual_max_abs, x.residual_max_abs);
        r.residual_mean += x.residual_mean;
    }
    const auto n = static_cast<double>(reports.size());
    r.mse /= n;
    r.mae /= n;
    r.residual_mean /= n;
    return r;
}

struct BaselineReports {
    MetricReport persistence;
    MetricReport mean;
};

/// Persistence repeats the last lookback value; the mean baseline predicts
/// train_means[window.record] (0 for z-scored series).
inline BaselineReports naive_baselines(const std::vector<data::WindowPair>& windows,
                                       const std::vector<double>& train_means) {
    Matrix pers, mean, target;
    for (const auto& w : windows) {
        if (w.x.empty() || w.y.empty()) {
            throw ValidationError("naive_baselines: empty window");
        }
        if (w.record >= train_means.size()) {
            throw ValidationError("naive_baselines: no train mean for record " + std::to_string(w.record));
        }
        pers.emplace_back(w.y.size(), w.x.back());
        mean.emplace_back(w.y.size(), train_means[w.record]);
        target.push_back(w.y);
    }
    return {forecast_metrics(pers, target), forecast_metrics(mean, target)};
}

inline BaselineReports naive_baselines(const std::vector<data::WindowPair>& windows, double train_mean = 0.0) {
    std::size_t n = 0;
    for (const auto& w : windows) {
        n = std::max(n, w.record + 1);
    }
    return naive_baselines(windows, std::vector<double>(n, train_mean));
}

// ------------------------------------------------------------- statistics

inline void require_rows(const Matrix& a, const char* what) {
    if (a.empty()) {
        throw ValidationError(std::string(what) + ": empty set");
    }
    for (const auto& row : a) {
        if (row.size() != a[0].size()) {
            throw ShapeError(std::string(what) + ": ragged rows");
        }
    }
}

/// Elementwise central moments mu_1 (the mean) through mu_order.
inline Matrix central_moments(const Matrix& x, std::size_t order) {
    require_rows(x, "central_moments");
    const std::size_t d = x[0].size();
    const auto n = static_cast<double>(x.size());
    Matrix mu(order, std::vector<double>(d, 0.0));
    for (const auto& row : x) {
        for (std::size_t j = 0; j < d; ++j) {
            mu[0][j] += row[j];
        }
    }
    for (double& v : mu[0]) {
        v /= n;
    }
    for (std::size_t k = 2; k <= order; ++k) {
        for (const auto& row : x) {
            for (std::size_t j = 0; j < d; ++j) {
                mu[k - 1][j] += std::pow(row[j] - mu[0][j], static_cast<double>(k));
            }
        }
        for (double& v : mu[k - 1]) {
            v /= n;
        }
    }
    return mu;
}

/// sum_k ||mu_k(A) - mu_k(B)||_2 for k = 1..order.
inline double cmd_score(const Matrix& a, const Matrix& b, std::size_t order = 3) {
    require_rows(a, "cmd_score");
    require_rows(b, "cmd_score");
    if (a[0].size() != b[0].size()) {
        throw ShapeError("cmd_score: dimension mismatch");
    }
    if (order == 0) {
        throw ValidationError("cmd_score: order must be positive");
    }
    const Matrix ma = central_moments(a, order);
    const Matrix mb = central_moments(b, order);
    double total = 0.0;
    for (std::size_t k = 0; k < order; ++k) {
        double sq = 0.0;
        for (std::size_t j = 0; j < ma[k].size(); ++j) {
            const double diff = ma[k][j] - mb[k][j];
            sq += diff * diff;
        }
        total += std::sqrt(sq);
    }
    return total;
}

inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        s += (a[j] - b[j]) * (a[j] - b[j]);
    }
    return std::sqrt(s);
}

struct ClusterStats {
    std::vector<int> labels;  ///< sorted distinct labels
    Matrix centroids;
    std::vector<double> spread;  ///< mean distance to the centroid
};

inline ClusterStats cluster_stats(const Matrix& x, const std::vector<int>& labels) {
    require_rows(x, "cluster_stats");
    if (labels.size() != x.size()) {
        throw ShapeError("cluster_stats: one label per row required");
    }
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        members[labels[i]].push_back(i);
    }
    ClusterStats s;
    const std::size_t d = x[0].size();
    for (const auto& [label, rows] : members) {
        std::vector<double> mu(d, 0.0);
        for (auto i : rows) {
            for (std::size_t j = 0; j < d; ++j) {
                mu[j] += x[i][j];
            }
        }
        for (double& v : mu) {
            v /= static_cast<double>(rows.size());
        }
        double spread = 0.0;
        for (auto i : rows) {
            spread += distance(x[i], mu);
        }
        s.labels.push_back(label);
        s.centroids.push_back(std::move(mu));
        s.spread.push_back(spread / static_cast<double>(rows.size()));
    }
    return s;
}

/// (1/K) sum_i max_{j != i} (sigma_i + sigma_j) / ||mu_i - mu_j||.
inline double dbi_score(const Matrix& x, const std::vector<int>& labels) {
    const ClusterStats s = cluster_stats(x, labels);
    const std::size_t K = s.labels.size();
    if (K < 2) {
        throw ValidationError("dbi_score: at least two clusters required");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < K; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
            if (i == j) {
                continue;
            }
            const double sep = distance(s.centroids[i], s.centroids[j]);
            if (!(sep > 0)) {
                throw ValidationError("dbi_score: coincident centroids for labels " + std::to_string(s.labels[i]) +
                                      " and " + std::to_string(s.labels[j]));
            }
            worst = std::max(worst, (s.spread[i] + s.spread[j]) / sep);
        }
        total += worst;
    }
    return total / static_cast<double>(K);
}

/// Two-cluster DBI for every pair of labels; the diagonal is 0.
struct PairwiseDbi {
    std::vector<int> labels;
    Matrix values;
};

inline PairwiseDbi dbi_pairwise(const Matrix& x, const std::vector<int>& labels) {
    const ClusterStats s = cluster_stats(x, labels);
    const std::size_t K = s.labels.size();
    PairwiseDbi out{s.labels, Matrix(K, std::vector<double>(K, 0.0))};
    for (std::size_t i = 0; i < K; ++i) {
        for (std::size_t j = i + 1; j < K; ++j) {
            const double sep = distance(s.centroids[i], s.centroids[j]);
            if (!(sep > 0)) {
                throw ValidationError("dbi_pairwise: coincident centroids");
            }
            // With two clusters both max terms coincide.
            out.values[i][j] = out.values[j][i] = (s.spread[i] + s.spread[j]) / sep;
        }
    }
    return out;
}

/// Ranks starting at 1, ties sharing their average rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        idx[i] = i;
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

/// Pearson correlation; empty when either input is constant.
inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw ShapeError("correlation: length mismatch");
    }
    if (a.size() < 2) {
        return std::nullopt;
    }
    const auto n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (!(saa > 0) || !(sbb > 0)) {
        return std::nullopt;
    }
    return sab / std::sqrt(saa * sbb);
}

/// Spearman rank correlation; empty when either input is constant.
inline std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw ShapeError("correlation: length mismatch");
    }
    return pearson(average_ranks(a), average_ranks(b));
}

// ---------------------------------------------------------------- model-based

/// Patch mean of the final-layer representation, one row per window.
inline Matrix window_embeddings(const model::CapeModel& m, const std::vector<std::vector<double>>& windows,
                                std::size_t chunk = 128) {
    const std::size_t T = m.config().T;
    const std::size_t C = m.config().C();
    const std::size_t d = m.config().d;
    Matrix out;
    for (std::size_t b0 = 0; b0 < windows.size(); b0 += chunk) {
        const std::size_t b1 = std::min(windows.size(), b0 + chunk);
        ad::Tensor x({b1 - b0, T});
        for (std::size_t i = b0; i < b1; ++i) {
            if (windows[i].size() != T) {
                throw ShapeError("window_embeddings: window length must equal T");
            }
            std::copy(windows[i].begin(), windows[i].end(), x.data() + (i - b0) * T);
        }
        ad::Graph g;
        auto p = m.bind(g);
        const ad::Tensor& h = m.encode(p, g.constant(std::move(x))).value();
        for (std::size_t b = 0; b < b1 - b0; ++b) {
            std::vector<double> row(d, 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t j = 0; j < d; ++j) {
                    row[j] += h[(b * C + c) * d + j] / static_cast<double>(C);
                }
            }
            out.push_back(std::move(row));
        }
    }
    return out;
}

/// Final-layer mixture weights of one window, as (C, K) rows.
inline Matrix final_mixture(const model::CapeModel& m, const std::vector<double>& window) {
    const std::size_t T = m.config().T;
    const std::size_t C = m.config().C();
    const std::size_t K = m.config().K;
    if (window.size() != T) {
        throw ShapeError("final_mixture: window length must equal T");
    }
    ad::Graph g;
    auto p = m.bind(g);
    std::vector<ad::Var> mix;
    m.encode(p, g.constant(ad::Tensor({1, T}, window)), &mix);
    const ad::Tensor& pi = mix.back().value();
    Matrix out(C, std::vector<double>(K));
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t k = 0; k < K; ++k) {
            out[c][k] = pi[c * K + k];
        }
    }
    return out;
}

inline double group_sum(const std::vector<double>& pi_row, const std::vector<std::size_t>& group) {
    double s = 0.0;
    for (auto k : group) {
        s += pi_row.at(k);
    }
    return s;
}

struct CompartmentSeries {
    std::string name;
    std::vector<double> fraction;  ///< aligned with the observed series
    std::vector<std::size_t> prototypes;
};

struct AlignmentEntry {
    std::string compartment;
    std::optional<double> spearman;  ///< mean over windows with a defined correlation
    std::size_t n_windows = 0;
    std::size_t n_defined = 0;
    std::vector<std::optional<double>> per_window;  ///< empty where either side is constant
};

/// Per-patch group sums of the final-layer mixture of one window.
inline std::vector<double> group_trajectory(const Matrix& pi, const std::vector<std::size_t>& group) {
    std::vector<double> out;
    out.reserve(pi.size());
    for (const auto& row : pi) {
        out.push_back(group_sum(row, group));
    }
    return out;
}

/// Slides a length-T window with the given stride over `observed` (already
/// normalized). Within each window, the group-summed final-layer mixture of
/// every patch is rank-correlated with the true compartment fraction
/// averaged over that patch; the report averages over windows.
inline std::vector<AlignmentEntry> prototype_alignment_report(const model::CapeModel& m,
                                                              const std::vector<double>& observed,
                                                              const std::vector<CompartmentSeries>& compartments,
                                                              std::size_t stride = 1) {
    const std::size_t T = m.config().T;
    const std::size_t P = m.config().patch_len;
    const std::size_t C = m.config().C();
    if (stride == 0) {
        throw ValidationError("prototype_alignment_report: stride must be positive");
    }
    for (const auto& c : compartments) {
        if (c.fraction.size() != observed.size()) {
            throw ShapeError("prototype_alignment_report: compartment " + c.name + " length mismatch");
        }
        for (auto k : c.prototypes) {
            if (k >= m.config().K) {
                throw ValidationError("prototype_alignment_report: prototype index out of range");
            }
        }
    }
    std::vector<AlignmentEntry> out(compartments.size());
    for (std::size_t i = 0; i < compartments.size(); ++i) {
        out[i].compartment = compartments[i].name;
    }
    for (std::size_t s = 0; s + T <= observed.size(); s += stride) {
        const std::vector<double> window(observed.begin() + static_cast<std::ptrdiff_t>(s),
                                         observed.begin() + static_cast<std::ptrdiff_t>(s + T));
        const Matrix pi = final_mixture(m, window);
        for (std::size_t i = 0; i < compartments.size(); ++i) {
            std::vector<double> truth(C, 0.0);
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t j = 0; j < P; ++j) {
                    truth[c] += compartments[i].fraction[s + c * P + j] / static_cast<double>(P);
                }
            }
            out[i].per_window.push_back(spearman(group_trajectory(pi, compartments[i].prototypes), truth));
        }
    }
    for (auto& e : out) {
        e.n_windows = e.per_window.size();
        double sum = 0.0;
        for (const auto& r : e.per_window) {
            if (r) {
                sum += *r;
                ++e.n_defined;
            }
        }
        if (e.n_defined > 0) {
            e.spearman = sum / static_cast<double>(e.n_defined);
        }
    }
    return out;
}

/// Mean over patches of the first difference of the group-summed mixture.
inline double group_mean_first_difference(const model::CapeModel& m, const std::vector<double>& window,
                                          const std::vector<std::size_t>& group) {
    const Matrix pi = final_mixture(m, window);
    if (pi.size() < 2) {
        return 0.0;
    }
    double s = 0.0;
    for (std::size_t c = 1; c < pi.size(); ++c) {
        s += group_sum(pi[c], group) - group_sum(pi[c - 1], group);
    }
    return s / static_cast<double>(pi.size() - 1);
}

/// Prototype groups standing for the S, I, R and D compartments.
struct SirdGroups {
    std::vector<std::size_t> s, i, r, d;
};

/// S from the mono_dec prototypes, I from the infectious ones, and both R and
/// D from the mono_inc ones.
inline SirdGroups sird_groups_from_roles(const std::vector<model::Role>& roles) {
    SirdGroups g;
    for (std::size_t k = 0; k < roles.size(); ++k) {
        switch (roles[k]) {
            case model::Role::mono_dec: g.s.push_back(k); break;
            case model::Role::infectious: g.i.push_back(k); break;
            case model::Role::mono_inc:
                g.r.push_back(k);
                g.d.push_back(k);
                break;
            case model::Role::free: break;
        }
    }
    return g;
}

struct CorpusAlignment {
    std::vector<AlignmentEntry> entries;  ///< S, I, R, D; windows pooled over series
    double mono_inc_trend = 0.0;          ///< mean first difference of the mono_inc group
    std::size_t trend_windows = 0;
};

/// Alignment of a pretrained model with the true compartment fractions of a
/// simulated corpus. Each series is z-scored on its leading train_fraction,
/// its compartments are re-simulated from the stored parameters, and the
/// mono_inc trend is averaged over non-overlapping length-T windows.
inline CorpusAlignment sird_alignment(const model::CapeModel& m, const std::vector<sim::CorpusEntry>& corpus,
                                      const sim::CorpusSpec& spec, const SirdGroups& groups,
                                      double train_fraction, std::size_t stride) {
    const std::size_t T = m.config().T;
    std::vector<std::size_t> inc;
    for (std::size_t k = 0; k < m.config().roles.size(); ++k) {
        if (m.config().roles[k] == model::Role::mono_inc) inc.push_back(k);
    }
    CorpusAlignment out;
    const char* names[4] = {"S", "I", "R", "D"};
    const std::vector<std::size_t>* sets[4] = {&groups.s, &groups.i, &groups.r, &groups.d};
    out.entries.resize(4);
    for (std::size_t c = 0; c < 4; ++c) {
        out.entries[c].compartment = names[c];
    }
    double trend = 0.0;
    for (const auto& e : corpus) {
        const sim::Trajectory tr = sim::simulate_sird(e.params, e.record.size(), spec.dt, spec.observation);
        const std::vector<double> observed = data::zscore_normalize(e.record, train_fraction).values;
        const std::vector<double>* fractions[4] = {&tr.s, &tr.i, &tr.r, &tr.d};
        std::vector<CompartmentSeries> cs;
        for (std::size_t c = 0; c < 4; ++c) {
            if (!sets[c]->empty()) cs.push_back({names[c], *fractions[c], *sets[c]});
        }
        const auto rep = prototype_alignment_report(m, observed, cs, stride);
        for (const auto& entry : rep) {
            auto& dst = out.entries[static_cast<std::size_t>(
                std::find(names, names + 4, entry.compartment) - names)];
            dst.per_window.insert(dst.per_window.end(), entry.per_window.begin(), entry.per_window.end());
        }
        if (!inc.empty()) {
            for (std::size_t s = 0; s + T <= observed.size(); s += T) {
                const std::vector<double> window(observed.begin() + static_cast<std::ptrdiff_t>(s),
                                                 observed.begin() + static_cast<std::ptrdiff_t>(s + T));
                trend += group_mean_first_difference(m, window, inc);
                ++out.trend_windows;
            }
        }
    }
    for (auto& e : out.entries) {
        e.n_windows = e.per_window.size();
        double sum = 0.0;
        for (const auto& r : e.per_window) {
            if (r) {
                sum += *r;
                ++e.n_defined;
            }
        }
        if (e.n_defined > 0) e.spearman = sum / static_cast<double>(e.n_defined);
    }
    if (out.trend_windows > 0) out.mono_inc_trend = trend / static_cast<double>(out.trend_windows);
    return out;
}

// ------------------------------------------------------------- metrics CSV

/// One row per (metric, horizon); horizon 0 is the average over horizons.
inline void write_metrics_csv(std::ostream& out, const std::vector<MetricReport>& reports) {
    out << "metric,horizon,value\n";
    for (const auto& r : reports) {
        const std::string h = std::to_string(r.horizon);
        out << "mse," << h << ',' << data::format_double(r.mse) << '\n';
        out << "mae," << h << ',' << data::format_double(r.mae) << '\n';
        out << "n_windows," << h << ',' << r.n_windows << '\n';
        out << "residual_mean," << h << ',' << data::format_double(r.residual_mean) << '\n';
        out << "residual_max_abs," << h << ',' << data::format_double(r.residual_max_abs) << '\n';
        for (double w : r.window_mse) {
            out << "window_mse," << h << ',' << data::format_double(w) << '\n';
        }
    }
}

inline std::vector<MetricReport> parse_metrics_csv(std::istream& in, const std::string& source = "<metrics>") {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line) || data::detail::trim(line) != "metric,horizon,value") {
        throw FormatError(source + ":1: expected header metric,horizon,value");
    }
    std::vector<MetricReport> out;
    std::map<std::size_t, std::size_t> slot;
    while (std::getline(in, line)) {
        ++lineno;
        if (data::detail::trim(line).empty()) {
            continue;
        }
        const auto f = data::detail::split_fields(line);
        auto fail = [&](const std::string& what) { throw FormatError(source + ":" + std::to_string(lineno) + ": " + what); };
        if (f.size() != 3) {
            fail("expected 3 fields");
        }
        const auto h = data::detail::parse_real(data::detail::trim(f[1]));
        const auto v = data::detail::parse_real(data::detail::trim(f[2]));
        if (!h || !v || *h < 0 || *h != std::floor(*h)) {
            fail("bad number");
        }
        const auto horizon = static_cast<std::size_t>(*h);
        auto [it, fresh] = slot.try_emplace(horizon, out.size());
        if (fresh) {
            out.emplace_back();
            out.back().horizon = horizon;
        }
        MetricReport& r = out[it->second];
        const std::string_view name = data::detail::trim(f[0]);
        if (name == "mse") {
            r.mse = *v;
        } else if (name == "mae") {
            r.mae = *v;
        } else if (name == "n_windows") {
            r.n_windows = static_cast<std::size_t>(*v);
        } else if (name == "residual_mean") {
            r.residual_mean = *v;
        } else if (name == "residual_max_abs") {
            r.residual_max_abs = *v;
        } else if (name == "window_mse") {
            r.window_mse.push_back(*v);
        } else {
            fail("unknown metric '" + std::string(name) + "'");
        }
    }
    return out;
}

}  // namespace cape::eval
