// SPDX-License-Identifier: Apache-2.0
//
// Brute-force statistics over plain doubles, written directly from their
// definitions without sharing code with the library.
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace stat_oracle {

using Rows = std::vector<std::vector<double>>;

inline double column_mean(const Rows& x, std::size_t j) {
    double s = 0.0;
    for (const auto& r : x) {
        s += r[j];
    }
    return s / static_cast<double>(x.size());
}

inline double central_moment(const Rows& x, std::size_t j, int k) {
    const double m = column_mean(x, j);
    double s = 0.0;
    for (const auto& r : x) {
        double p = 1.0;
        for (int i = 0; i < k; ++i) {
            p *= r[j] - m;
        }
        s += p;
    }
    return s / static_cast<double>(x.size());
}

inline double cmd(const Rows& a, const Rows& b, int order) {
    const std::size_t d = a[0].size();
    double total = 0.0;
    for (int k = 1; k <= order; ++k) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double da = k == 1 ? column_mean(a, j) : central_moment(a, j, k);
            const double db = k == 1 ? column_mean(b, j) : central_moment(b, j, k);
            sq += (da - db) * (da - db);
        }
        total += std::sqrt(sq);
    }
    return total;
}

inline double dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        s += (a[j] - b[j]) * (a[j] - b[j]);
    }
    return std::sqrt(s);
}

/// Davies-Bouldin index for labels 0..K-1.
inline double dbi(const Rows& x, const std::vector<int>& labels, int K) {
    const std::size_t d = x[0].size();
    Rows mu(K, std::vector<double>(d, 0.0));
    std::vector<double> n(K, 0.0), sigma(K, 0.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        n[labels[i]] += 1.0;
        for (std::size_t j = 0; j < d; ++j) {
            mu[labels[i]][j] += x[i][j];
        }
    }
    for (int k = 0; k < K; ++k) {
        for (double& v : mu[k]) {
            v /= n[k];
        }
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        sigma[labels[i]] += dist(x[i], mu[labels[i]]) / n[labels[i]];
    }
    double total = 0.0;
    for (int i = 0; i < K; ++i) {
        double worst = -1.0;
        for (int j = 0; j < K; ++j) {
            if (j != i) {
                worst = std::max(worst, (sigma[i] + sigma[j]) / dist(mu[i], mu[j]));
            }
        }
        total += worst;
    }
    return total / K;
}

/// Rank of v[i] counting smaller entries, ties sharing the mean rank.
inline std::vector<double> naive_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double less = 0.0, equal = 0.0;
        for (double w : v) {
            less += w < v[i] ? 1.0 : 0.0;
            equal += w == v[i] ? 1.0 : 0.0;
        }
        r[i] = less + (equal + 1.0) / 2.0;
    }
    return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    const auto ra = naive_ranks(a);
    const auto rb = naive_ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i] / n;
        mb += rb[i] / n;
    }
    double num = 0.0, da = 0.0, db = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    return num / std::sqrt(da * db);
}

}  // namespace stat_oracle
