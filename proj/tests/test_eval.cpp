// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "cape/eval.hpp"
#include "stat_oracles.hpp"

using namespace cape;
using namespace cape::eval;

namespace {

Matrix random_rows(std::size_t n, std::size_t d, Rng& rng, double scale = 1.0, double shift = 0.0) {
    Matrix x(n, std::vector<double>(d));
    for (auto& r : x) {
        for (double& v : r) {
            v = shift + scale * rng.normal();
        }
    }
    return x;
}

/// Random orthogonal d x d matrix by Gram-Schmidt on Gaussian columns.
Matrix random_orthogonal(std::size_t d, Rng& rng) {
    Matrix q = random_rows(d, d, rng);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += q[i][k] * q[j][k];
            for (std::size_t k = 0; k < d; ++k) q[i][k] -= dot * q[j][k];
        }
        double n = 0.0;
        for (double v : q[i]) n += v * v;
        n = std::sqrt(n);
        for (double& v : q[i]) v /= n;
    }
    return q;
}

model::ModelConfig toy_config() {
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

}  // namespace

// ------------------------------------------------------------- forecast metrics

TEST(ForecastMetrics, PerfectPredictionIsZero) {
    const Matrix y = {{1, 2, 3}, {4, 5, 6}};
    const auto r = forecast_metrics(y, y);
    EXPECT_EQ(r.mse, 0.0);
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_EQ(r.n_windows, 2u);
    EXPECT_EQ(r.horizon, 3u);
}

TEST(ForecastMetrics, ConstantOffsetTwo) {
    const Matrix y = {{1, 2, 3, 4}, {0, 0, 0, 0}};
    Matrix p = y;
    for (auto& row : p) {
        for (double& v : row) v += 2.0;
    }
    const auto r = forecast_metrics(p, y);
    EXPECT_DOUBLE_EQ(r.mse, 4.0);
    EXPECT_DOUBLE_EQ(r.mae, 2.0);
    EXPECT_DOUBLE_EQ(r.residual_mean, 2.0);
    EXPECT_DOUBLE_EQ(r.residual_max_abs, 2.0);
}

TEST(ForecastMetrics, MatchesLoopOracleExactly) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.index(30);
        const std::size_t h = 1 + rng.index(16);
        const Matrix p = random_rows(n, h, rng);
        const Matrix y = random_rows(n, h, rng);
        double mse = 0.0, mae = 0.0;
        for (std::size_t w = 0; w < n; ++w) {
            double se = 0.0, ae = 0.0;
            for (std::size_t j = 0; j < h; ++j) {
                se += (p[w][j] - y[w][j]) * (p[w][j] - y[w][j]);
                ae += std::abs(p[w][j] - y[w][j]);
            }
            mse += se / static_cast<double>(h);
            mae += ae / static_cast<double>(h);
        }
        const auto r = forecast_metrics(p, y);
        EXPECT_EQ(r.mse, mse / static_cast<double>(n));
        EXPECT_EQ(r.mae, mae / static_cast<double>(n));
    }
}

TEST(ForecastMetrics, InvalidInputsRejected) {
    EXPECT_THROW(forecast_metrics({}, {}), ValidationError);
    EXPECT_THROW(forecast_metrics({{1, 2}}, {{1}}), ShapeError);
    EXPECT_THROW(forecast_metrics({{1}}, {{1}, {2}}), ShapeError);
    EXPECT_THROW(forecast_metrics({{1, 2}, {1}}, {{1, 2}, {1}}), ShapeError);
}

TEST(ForecastMetrics, AverageOverHorizons) {
    MetricReport a, b;
    a.mse = 1;
    a.mae = 2;
    b.mse = 3;
    b.mae = 4;
    const auto r = average_over_horizons({a, b});
    EXPECT_EQ(r.horizon, 0u);
    EXPECT_DOUBLE_EQ(r.mse, 2.0);
    EXPECT_DOUBLE_EQ(r.mae, 3.0);
}

TEST(NaiveBaselines, ConstantSeriesPersistenceIsExact) {
    const auto windows = data::make_windows(std::vector<double>(30, 3.5), 8, 4, 1);
    const auto r = naive_baselines(windows);
    EXPECT_EQ(r.persistence.mse, 0.0);
    EXPECT_EQ(r.persistence.mae, 0.0);
}

TEST(NaiveBaselines, RampPersistenceMse) {
    std::vector<double> ramp(40);
    std::iota(ramp.begin(), ramp.end(), 0.0);
    const auto r = naive_baselines(data::make_windows(ramp, 8, 4, 1));
    EXPECT_DOUBLE_EQ(r.persistence.mse, 7.5);
    EXPECT_DOUBLE_EQ(r.persistence.mae, 2.5);
}

TEST(NaiveBaselines, MeanBaselinePredictsTrainMean) {
    data::TimeSeriesRecord rec;
    Rng rng(3);
    for (int i = 0; i < 60; ++i) {
        rec.timestamps.push_back(i);
        rec.values.push_back(10.0 + rng.normal());
    }
    const auto z = data::zscore_normalize(rec);
    const auto windows = data::make_windows(z.values, 12, 4, 1);
    const auto r = naive_baselines(windows);
    double expect = 0.0;
    for (const auto& w : windows) {
        for (double y : w.y) expect += y * y / 4.0;
    }
    EXPECT_NEAR(r.mean.mse, expect / static_cast<double>(windows.size()), 1e-12);

    const auto shifted = naive_baselines(windows, std::vector<double>{1.0});
    EXPECT_GT(shifted.mean.mse, 0.0);
    EXPECT_THROW(naive_baselines(windows, std::vector<double>{}), ValidationError);
}

// ------------------------------------------------------------------- CMD

TEST(Cmd, IdenticalSetsGiveExactZero) {
    Rng rng(1);
    const Matrix a = random_rows(25, 6, rng);
    EXPECT_EQ(cmd_score(a, a), 0.0);
}

TEST(Cmd, TranslationGivesShiftInFirstTerm) {
    Rng rng(2);
    const Matrix a = random_rows(40, 1, rng);
    Matrix b = a;
    for (auto& r : b) r[0] += 0.75;
    EXPECT_NEAR(cmd_score(a, b, 1), 0.75, 1e-12);
    EXPECT_NEAR(cmd_score(a, b, 3), 0.75, 1e-12);
}

TEST(Cmd, SymmetricNonnegativeAndMatchesOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 1 + rng.index(8);
        const Matrix a = random_rows(2 + rng.index(30), d, rng, 1.0 + rng.uniform(), rng.normal());
        const Matrix b = random_rows(2 + rng.index(30), d, rng, 1.0 + rng.uniform(), rng.normal());
        const int order = 1 + static_cast<int>(rng.index(4));
        const double s = cmd_score(a, b, static_cast<std::size_t>(order));
        EXPECT_GE(s, 0.0);
        EXPECT_EQ(s, cmd_score(b, a, static_cast<std::size_t>(order)));
        EXPECT_NEAR(s, stat_oracle::cmd(a, b, order), 1e-10);
    }
}

TEST(Cmd, InvalidInputsRejected) {
    EXPECT_THROW(cmd_score({{1, 2}}, {{1}}), ShapeError);
    EXPECT_THROW(cmd_score({}, {{1}}), ValidationError);
    EXPECT_THROW(cmd_score({{1}}, {{1}}, 0), ValidationError);
}

// ------------------------------------------------------------------- DBI

TEST(Dbi, SingletonClustersGiveZero) {
    EXPECT_EQ(dbi_score({{0.0}, {1.0}}, {0, 1}), 0.0);
}

TEST(Dbi, SeparatedUnitClustersMatchClosedForm) {
    Rng rng(4);
    Matrix x;
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
        x.push_back({-10.0 + rng.normal()});
        labels.push_back(0);
        x.push_back({10.0 + rng.normal()});
        labels.push_back(1);
    }
    const auto s = cluster_stats(x, labels);
    const double expect = (s.spread[0] + s.spread[1]) / std::abs(s.centroids[0][0] - s.centroids[1][0]);
    EXPECT_NEAR(dbi_score(x, labels), expect, 1e-12);
    EXPECT_LT(dbi_score(x, labels), 0.1);
    EXPECT_NEAR(dbi_score(x, labels), stat_oracle::dbi(x, labels, 2), 1e-10);
}

TEST(Dbi, MatchesLoopOracle) {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        const int K = 2 + static_cast<int>(rng.index(4));
        const std::size_t d = 1 + rng.index(6);
        Matrix x;
        std::vector<int> labels;
        for (int k = 0; k < K; ++k) {
            const std::size_t n = 1 + rng.index(10);
            const double centre = 5.0 * rng.normal();
            for (std::size_t i = 0; i < n; ++i) {
                x.push_back(random_rows(1, d, rng, 1.0, centre)[0]);
                labels.push_back(k);
            }
        }
        EXPECT_NEAR(dbi_score(x, labels), stat_oracle::dbi(x, labels, K), 1e-10);
    }
}

TEST(Dbi, LabelPermutationInvariant) {
    Rng rng(6);
    Matrix x = random_rows(30, 3, rng);
    std::vector<int> labels(30), relabelled(30);
    for (std::size_t i = 0; i < 30; ++i) {
        labels[i] = static_cast<int>(i % 3);
        relabelled[i] = 7 - 3 * labels[i];
    }
    EXPECT_EQ(dbi_score(x, labels), dbi_score(x, relabelled));
}

TEST(Dbi, RotationTranslationInvariant) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t d = 2 + rng.index(5);
        Matrix x = random_rows(40, d, rng);
        std::vector<int> labels(40);
        for (std::size_t i = 0; i < 40; ++i) {
            labels[i] = static_cast<int>(i % 4);
            x[i][0] += 3.0 * labels[i];
        }
        const Matrix q = random_orthogonal(d, rng);
        const auto t = random_rows(1, d, rng, 10.0)[0];
        Matrix y(x.size(), std::vector<double>(d, 0.0));
        for (std::size_t i = 0; i < x.size(); ++i) {
            for (std::size_t r = 0; r < d; ++r) {
                for (std::size_t c = 0; c < d; ++c) y[i][r] += q[r][c] * x[i][c];
                y[i][r] += t[r];
            }
        }
        EXPECT_NEAR(dbi_score(x, labels), dbi_score(y, labels), 1e-9);
    }
}

TEST(Dbi, DegenerateInputsRejected) {
    EXPECT_THROW(dbi_score({{1.0}, {2.0}}, {0, 0}), ValidationError);
    EXPECT_THROW(dbi_score({{1.0}, {1.0}}, {0, 1}), ValidationError);
    EXPECT_THROW(dbi_score({{1.0}}, {0, 1}), ShapeError);
}

TEST(Dbi, PairwiseMatrixIsSymmetricAndMatchesTwoClusterScore) {
    Rng rng(8);
    Matrix x;
    std::vector<int> labels;
    for (int k = 0; k < 3; ++k) {
        for (int i = 0; i < 10; ++i) {
            x.push_back(random_rows(1, 2, rng, 1.0, 4.0 * k)[0]);
            labels.push_back(k);
        }
    }
    const auto pw = dbi_pairwise(x, labels);
    ASSERT_EQ(pw.values.size(), 3u);
    for (int i = 0; i < 3; ++i) {
        EXPECT_EQ(pw.values[i][i], 0.0);
        for (int j = 0; j < 3; ++j) {
            EXPECT_EQ(pw.values[i][j], pw.values[j][i]);
        }
    }
    Matrix sub;
    std::vector<int> sub_labels;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (labels[i] != 2) {
            sub.push_back(x[i]);
            sub_labels.push_back(labels[i]);
        }
    }
    EXPECT_NEAR(pw.values[0][1], dbi_score(sub, sub_labels), 1e-12);
}

// --------------------------------------------------------------- Spearman

TEST(Spearman, IdentityAndReversal) {
    const std::vector<double> a = {0.1, 0.5, 0.2, 0.9, 0.3};
    std::vector<double> neg(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) neg[i] = -a[i];
    EXPECT_NEAR(*spearman(a, a), 1.0, 1e-15);
    EXPECT_NEAR(*spearman(a, neg), -1.0, 1e-15);
}

TEST(Spearman, ConstantInputIsUndefined) {
    EXPECT_FALSE(spearman({1, 1, 1}, {1, 2, 3}).has_value());
    EXPECT_FALSE(spearman({1}, {2}).has_value());
    EXPECT_THROW(spearman({1, 2}, {1}), ShapeError);
}

TEST(Spearman, MatchesNaiveRankOracleWithTies) {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 3 + rng.index(40);
        std::vector<double> a(n), b(n);
        for (std::size_t i = 0; i < n; ++i) {
            a[i] = static_cast<double>(rng.index(6));  // heavy ties
            b[i] = rng.normal();
        }
        const auto s = spearman(a, b);
        if (!s) {
            continue;
        }
        EXPECT_NEAR(*s, stat_oracle::spearman(a, b), 1e-10);
    }
}

TEST(Spearman, AverageRanksShareTies) {
    const auto r = average_ranks({3, 1, 3, 2});
    EXPECT_EQ(r, (std::vector<double>{3.5, 1, 3.5, 2}));
}

// -------------------------------------------------------- model-based analysis

TEST(Embeddings, PatchMeanOfEncoderOutput) {
    model::CapeModel m(toy_config(), 3);
    Rng rng(4);
    std::vector<std::vector<double>> windows(3, std::vector<double>(12));
    for (auto& w : windows) {
        for (double& v : w) v = rng.normal();
    }
    const Matrix e = window_embeddings(m, windows, 2);
    ASSERT_EQ(e.size(), 3u);
    ASSERT_EQ(e[0].size(), 16u);
    ad::Graph g;
    auto p = m.bind(g);
    const auto& h = m.encode(p, g.constant(ad::Tensor({1, 12}, windows[2]))).value();
    for (std::size_t j = 0; j < 16; ++j) {
        double mean = 0.0;
        for (std::size_t c = 0; c < 3; ++c) mean += h[c * 16 + j] / 3.0;
        EXPECT_NEAR(e[2][j], mean, 1e-12);
    }
}

namespace {

/// A series of two non-overlapping windows and, for the given prototype
/// group, a fraction series equal to the model's own group mixture.
struct SelfAligned {
    std::vector<double> observed;
    std::vector<double> fraction;
};

SelfAligned self_aligned(const model::CapeModel& m, const std::vector<std::size_t>& group, Rng& rng) {
    const std::size_t T = m.config().T;
    const std::size_t P = m.config().patch_len;
    SelfAligned s;
    for (std::size_t t = 0; t < 2 * T; ++t) s.observed.push_back(rng.normal());
    s.fraction.resize(2 * T);
    for (std::size_t w = 0; w < 2; ++w) {
        const Matrix pi = final_mixture(m, {s.observed.begin() + static_cast<std::ptrdiff_t>(w * T),
                                            s.observed.begin() + static_cast<std::ptrdiff_t>((w + 1) * T)});
        for (std::size_t c = 0; c < pi.size(); ++c) {
            for (std::size_t j = 0; j < P; ++j) s.fraction[w * T + c * P + j] = group_sum(pi[c], group);
        }
    }
    return s;
}

}  // namespace

TEST(AlignmentReport, SelfAlignedWeightsCorrelatePerfectly) {
    model::CapeModel m(toy_config(), 5);
    Rng rng(6);
    const std::vector<std::size_t> group = {0, 2};
    const auto s = self_aligned(m, group, rng);
    std::vector<double> reversed(s.fraction.size());
    for (std::size_t i = 0; i < reversed.size(); ++i) reversed[i] = 1.0 - s.fraction[i];
    const auto rep = prototype_alignment_report(
        m, s.observed, {{"same", s.fraction, group}, {"reversed", reversed, group}}, m.config().T);
    ASSERT_EQ(rep.size(), 2u);
    EXPECT_EQ(rep[0].n_windows, 2u);
    EXPECT_EQ(rep[0].n_defined, 2u);
    EXPECT_NEAR(*rep[0].spearman, 1.0, 1e-12);
    EXPECT_NEAR(*rep[1].spearman, -1.0, 1e-12);
}

TEST(AlignmentReport, MatchesIndependentRankCorrelation) {
    model::CapeModel m(toy_config(), 7);
    Rng rng(8);
    std::vector<double> obs(40), frac(40);
    for (std::size_t t = 0; t < 40; ++t) {
        obs[t] = rng.normal();
        frac[t] = rng.uniform();
    }
    const std::vector<std::size_t> group = {1, 3};
    const auto rep = prototype_alignment_report(m, obs, {{"x", frac, group}}, 4);
    ASSERT_EQ(rep[0].n_windows, (40 - 12) / 4 + 1);
    for (std::size_t w = 0; w < rep[0].n_windows; ++w) {
        const std::size_t s = 4 * w;
        const Matrix pi = final_mixture(m, {obs.begin() + static_cast<std::ptrdiff_t>(s),
                                            obs.begin() + static_cast<std::ptrdiff_t>(s + 12)});
        std::vector<double> a, b;
        for (std::size_t c = 0; c < 3; ++c) {
            a.push_back(pi[c][1] + pi[c][3]);
            b.push_back((frac[s + 4 * c] + frac[s + 4 * c + 1] + frac[s + 4 * c + 2] + frac[s + 4 * c + 3]) / 4.0);
        }
        ASSERT_TRUE(rep[0].per_window[w].has_value());
        EXPECT_NEAR(*rep[0].per_window[w], stat_oracle::spearman(a, b), 1e-10);
    }
}

TEST(AlignmentReport, ConstantTruthIsUndefined) {
    model::CapeModel m(toy_config(), 9);
    const std::vector<double> obs(24, 0.5), frac(24, 0.2);
    const auto rep = prototype_alignment_report(m, obs, {{"flat", frac, {0}}}, 12);
    EXPECT_EQ(rep[0].n_defined, 0u);
    EXPECT_FALSE(rep[0].spearman.has_value());
}

TEST(AlignmentReport, InvalidInputsRejected) {
    model::CapeModel m(toy_config(), 9);
    const std::vector<double> obs(24, 0.5);
    EXPECT_THROW(prototype_alignment_report(m, obs, {{"x", std::vector<double>(23), {0}}}), ShapeError);
    EXPECT_THROW(prototype_alignment_report(m, obs, {{"x", obs, {4}}}), ValidationError);
    EXPECT_THROW(prototype_alignment_report(m, obs, {{"x", obs, {0}}}, 0), ValidationError);
}

TEST(GroupTrend, MeanFirstDifferenceTelescopes) {
    model::CapeModel m(toy_config(), 11);
    Rng rng(12);
    std::vector<double> w(12);
    for (double& v : w) v = rng.normal();
    const Matrix pi = final_mixture(m, w);
    const std::vector<std::size_t> g = {0, 1};
    const double expect = (group_sum(pi.back(), g) - group_sum(pi.front(), g)) / 2.0;
    EXPECT_NEAR(group_mean_first_difference(m, w, g), expect, 1e-15);
}

// -------------------------------------------------------------- metrics CSV

TEST(SirdAlignment, GroupsFollowRoles) {
    using model::Role;
    const auto g = sird_groups_from_roles({Role::mono_dec, Role::infectious, Role::mono_inc, Role::free, Role::mono_inc});
    EXPECT_EQ(g.s, (std::vector<std::size_t>{0}));
    EXPECT_EQ(g.i, (std::vector<std::size_t>{1}));
    EXPECT_EQ(g.r, (std::vector<std::size_t>{2, 4}));
    EXPECT_EQ(g.d, (std::vector<std::size_t>{2, 4}));
}

TEST(SirdAlignment, PoolsWindowsAcrossSeries) {
    sim::CorpusSpec spec;
    spec.n_series = 3;
    spec.length = 40;
    const auto corpus = sim::make_corpus(2, spec);
    const model::CapeModel m(toy_config(), 13);
    const SirdGroups groups{{0}, {1}, {2}, {2, 3}};
    const auto got = sird_alignment(m, corpus, spec, groups, 0.6, 4);
    ASSERT_EQ(got.entries.size(), 4u);
    EXPECT_EQ(got.trend_windows, 3u * (40 / 12));

    std::vector<double> sums(4, 0.0);
    std::vector<std::size_t> defined(4, 0);
    for (const auto& e : corpus) {
        const auto tr = sim::simulate_sird(e.params, 40, spec.dt, spec.observation);
        const auto obs = data::zscore_normalize(e.record, 0.6).values;
        const auto rep = prototype_alignment_report(
            m, obs, {{"S", tr.s, {0}}, {"I", tr.i, {1}}, {"R", tr.r, {2}}, {"D", tr.d, {2, 3}}}, 4);
        for (std::size_t c = 0; c < 4; ++c) {
            for (const auto& r : rep[c].per_window) {
                if (r) {
                    sums[c] += *r;
                    ++defined[c];
                }
            }
        }
    }
    for (std::size_t c = 0; c < 4; ++c) {
        EXPECT_EQ(got.entries[c].n_windows, 3u * ((40 - 12) / 4 + 1));
        EXPECT_EQ(got.entries[c].n_defined, defined[c]);
        ASSERT_TRUE(got.entries[c].spearman.has_value());
        EXPECT_NEAR(*got.entries[c].spearman, sums[c] / static_cast<double>(defined[c]), 1e-12);
    }
}

TEST(MetricsCsv, RoundTripIsLossless) {
    Rng rng(13);
    std::vector<MetricReport> reports;
    for (std::size_t h : {1u, 2u, 4u}) {
        reports.push_back(forecast_metrics(random_rows(5, h, rng), random_rows(5, h, rng)));
    }
    reports.push_back(average_over_horizons(reports));
    std::stringstream ss;
    write_metrics_csv(ss, reports);
    const auto back = parse_metrics_csv(ss);
    ASSERT_EQ(back.size(), reports.size());
    for (std::size_t i = 0; i < reports.size(); ++i) {
        EXPECT_EQ(back[i], reports[i]);
    }
}

TEST(MetricsCsv, MalformedInputRejected) {
    std::istringstream no_header("mse,1,2\n");
    EXPECT_THROW(parse_metrics_csv(no_header), FormatError);
    std::istringstream bad_metric("metric,horizon,value\nrmse,1,2\n");
    EXPECT_THROW(parse_metrics_csv(bad_metric), FormatError);
    std::istringstream bad_number("metric,horizon,value\nmse,x,2\n");
    EXPECT_THROW(parse_metrics_csv(bad_number), FormatError);
}
