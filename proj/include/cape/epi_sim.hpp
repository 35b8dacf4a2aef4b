// SPDX-License-Identifier: Apache-2.0
//
// Deterministic compartmental ODE simulators (fixed-step RK4) and the
// synthetic corpus generator built on them.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cape/data.hpp"
#include "cape/error.hpp"
#include "cape/random.hpp"

namespace cape::sim {

/// One RK4 step of dy/dt = f(y) for a fixed-size state.
template <std::size_t N, typename Deriv>
std::array<double, N> rk4_step(const std::array<double, N>& y, double dt, Deriv&& f) {
    auto axpy = [](const std::array<double, N>& a, const std::array<double, N>& b, double s) {
        std::array<double, N> r{};
        for (std::size_t i = 0; i < N; ++i) {
            r[i] = a[i] + s * b[i];
        }
        return r;
    };
    const auto k1 = f(y);
    const auto k2 = f(axpy(y, k1, dt / 2));
    const auto k3 = f(axpy(y, k2, dt / 2));
    const auto k4 = f(axpy(y, k3, dt));
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) {
        out[i] = y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    return out;
}

struct SirdParams {
    double beta = 0.3;   ///< transmission rate per unit time
    double gamma = 0.1;  ///< recovery rate
    double mu = 0.01;    ///< death rate
    double population = 1e6;
    double s0 = 0.99;
    double i0 = 0.01;
    double r0_init = 0.0;
    double d0 = 0.0;

    /// beta / (gamma + mu)
    double basic_reproduction_number() const { return beta / (gamma + mu); }

    void validate() const {
        if (!(beta >= 0 && gamma >= 0 && mu >= 0)) {
            throw ValidationError("SIRD rates must be nonnegative");
        }
        if (!(s0 >= 0 && i0 >= 0 && r0_init >= 0 && d0 >= 0)) {
            throw ValidationError("SIRD initial fractions must be nonnegative");
        }
        if (std::abs(s0 + i0 + r0_init + d0 - 1.0) > 1e-9) {
            throw ValidationError("SIRD initial fractions must sum to 1");
        }
        if (!(population > 0)) {
            throw ValidationError("SIRD population must be positive");
        }
    }
};

/// Which series a Trajectory exposes as the model-facing observation.
enum class Observation { incidence, prevalence };

struct Trajectory {
    std::vector<double> times;
    std::vector<double> s, i, r, d;
    /// incidence: new infections over [t_n, t_n + dt); prevalence: I(t_n)
    std::vector<double> observed;
};

/// RK4 integration of dS=-bSI, dI=bSI-(g+m)I, dR=gI, dD=mI, sampled at
/// t_n = n * dt for n < horizon.
inline Trajectory simulate_sird(const SirdParams& p, std::size_t horizon, double dt,
                                Observation obs = Observation::incidence) {
    p.validate();
    if (!(dt > 0)) {
        throw ValidationError("simulate_sird: dt must be positive");
    }
    if (horizon < 1) {
        throw ValidationError("simulate_sird: horizon must be at least 1");
    }
    auto deriv = [&p](const std::array<double, 4>& y) {
        const double inf = p.beta * y[0] * y[1];
        return std::array<double, 4>{-inf, inf - (p.gamma + p.mu) * y[1], p.gamma * y[1], p.mu * y[1]};
    };
    Trajectory t;
    t.times.reserve(horizon);
    std::array<double, 4> y{p.s0, p.i0, p.r0_init, p.d0};
    for (std::size_t n = 0; n < horizon; ++n) {
        t.times.push_back(static_cast<double>(n) * dt);
        t.s.push_back(y[0]);
        t.i.push_back(y[1]);
        t.r.push_back(y[2]);
        t.d.push_back(y[3]);
        const auto next = rk4_step(y, dt, deriv);
        t.observed.push_back(obs == Observation::incidence ? std::max(0.0, y[0] - next[0]) : y[1]);
        y = next;
    }
    return t;
}

struct SeirParams {
    double beta = 0.4;
    double sigma = 0.2;  ///< incubation exit rate
    double gamma = 0.1;
    double s0 = 0.99;
    double e0 = 0.0;
    double i0 = 0.01;
};

/// SEIR variant; returns S, E, I, R sampled at t_n = n * dt and incidence
/// (new infectious cases, sigma * E integrated over the step).
struct SeirTrajectory {
    std::vector<double> s, e, i, r, observed;
};

inline SeirTrajectory simulate_seir(const SeirParams& p, std::size_t horizon, double dt) {
    if (!(dt > 0) || horizon < 1) {
        throw ValidationError("simulate_seir: need dt > 0 and horizon >= 1");
    }
    if (!(p.beta >= 0 && p.sigma >= 0 && p.gamma >= 0)) {
        throw ValidationError("SEIR rates must be nonnegative");
    }
    // fifth component accumulates sigma * E to measure incidence exactly
    auto deriv = [&p](const std::array<double, 5>& y) {
        const double inf = p.beta * y[0] * y[2];
        return std::array<double, 5>{-inf, inf - p.sigma * y[1], p.sigma * y[1] - p.gamma * y[2], p.gamma * y[2],
                                     p.sigma * y[1]};
    };
    SeirTrajectory t;
    std::array<double, 5> y{p.s0, p.e0, p.i0, 1.0 - p.s0 - p.e0 - p.i0, 0.0};
    for (std::size_t n = 0; n < horizon; ++n) {
        t.s.push_back(y[0]);
        t.e.push_back(y[1]);
        t.i.push_back(y[2]);
        t.r.push_back(y[3]);
        auto next = rk4_step(y, dt, deriv);
        t.observed.push_back(std::max(0.0, next[4] - y[4]));
        y = next;
    }
    return t;
}

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

struct CorpusSpec {
    std::size_t n_series = 200;
    std::size_t length = 120;
    double dt = 1.0;
    Range beta{0.2, 0.6};
    Range gamma{0.05, 0.2};
    Range mu{0.001, 0.02};
    Range i0{1e-4, 1e-2};
    double noise_level = 0.05;
    double population = 1e6;
    Observation observation = Observation::incidence;
    std::string disease_id = "sird";

    void validate() const {
        auto ok = [](const Range& r) { return r.lo >= 0 && r.lo <= r.hi; };
        if (!ok(beta) || !ok(gamma) || !ok(mu) || !ok(i0) || i0.hi >= 1.0) {
            throw ValidationError("corpus parameter ranges must satisfy 0 <= lo <= hi (and i0 < 1)");
        }
        if (!(gamma.lo + mu.lo > 0)) {
            throw ValidationError("corpus gamma + mu must be positive");
        }
        if (!(dt > 0) || length < 1 || noise_level < 0) {
            throw ValidationError("corpus needs dt > 0, length >= 1, noise_level >= 0");
        }
    }
};

struct CorpusEntry {
    data::TimeSeriesRecord record;
    SirdParams params;
};

/// Synthetic SIRD corpus. Series k draws its parameters and noise from an RNG
/// stream derived from (seed, k), so the corpus is identical on rerun and
/// series are independent of n_series. Observed values are population-scaled
/// new infections with multiplicative lognormal noise exp(noise * z).
inline std::vector<CorpusEntry> make_corpus(std::uint64_t seed, const CorpusSpec& spec) {
    spec.validate();
    std::vector<CorpusEntry> out;
    out.reserve(spec.n_series);
    for (std::size_t k = 0; k < spec.n_series; ++k) {
        Rng rng(derive_seed(seed, k));
        SirdParams p;
        p.beta = rng.uniform(spec.beta.lo, spec.beta.hi);
        p.gamma = rng.uniform(spec.gamma.lo, spec.gamma.hi);
        p.mu = rng.uniform(spec.mu.lo, spec.mu.hi);
        p.i0 = rng.uniform(spec.i0.lo, spec.i0.hi);
        p.s0 = 1.0 - p.i0;
        p.population = spec.population;
        const Trajectory traj = simulate_sird(p, spec.length, spec.dt, spec.observation);

        data::TimeSeriesRecord rec;
        rec.disease_id = spec.disease_id;
        rec.region_id = "series" + std::to_string(k);
        rec.values.reserve(spec.length);
        rec.timestamps.reserve(spec.length);
        for (std::size_t n = 0; n < spec.length; ++n) {
            double v = traj.observed[n] * spec.population;
            if (spec.noise_level > 0) {
                v *= std::exp(spec.noise_level * rng.normal());
            }
            rec.values.push_back(v);
            rec.timestamps.push_back(data::kSyntheticEpochDay + static_cast<std::int64_t>(n));
        }
        const double r0 = p.basic_reproduction_number();
        rec.r0_range = {0.9 * r0, 1.1 * r0};
        out.push_back(CorpusEntry{std::move(rec), p});
    }
    return out;
}

inline std::vector<data::TimeSeriesRecord> records_of(const std::vector<CorpusEntry>& corpus) {
    std::vector<data::TimeSeriesRecord> r;
    r.reserve(corpus.size());
    for (const auto& e : corpus) {
        r.push_back(e.record);
    }
    return r;
}

}  // namespace cape::sim
