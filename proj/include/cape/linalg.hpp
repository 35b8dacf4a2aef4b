// SPDX-License-Identifier: Apache-2.0
//
// Dense routines for small matrices (K x K with K <= 64): singular values by
// one-sided Jacobi, eigenvalues by Hessenberg reduction plus shifted QR, and
// the singular-value bounds on the spectral radius of F * inv(V).
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "cape/autodiff.hpp"
#include "cape/error.hpp"

namespace cape::linalg {

/// Row-major dense matrix.
class SmallMatrix {
public:
    SmallMatrix() = default;
    SmallMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    SmallMatrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        for (const auto& r : rows) {
            if (r.size() != cols_) {
                throw ShapeError("SmallMatrix: ragged initializer");
            }
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static SmallMatrix identity(std::size_t n) {
        SmallMatrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    static SmallMatrix diagonal(const std::vector<double>& d) {
        SmallMatrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            m(i, i) = d[i];
        }
        return m;
    }

    static SmallMatrix from_tensor(const ad::Tensor& t) {
        if (t.rank() != 2) {
            throw ShapeError("SmallMatrix: expected rank-2 tensor, got " + ad::to_string(t.shape()));
        }
        SmallMatrix m(t.dim(0), t.dim(1));
        std::copy(t.storage().begin(), t.storage().end(), m.data_.begin());
        return m;
    }

    ad::Tensor to_tensor() const { return ad::Tensor({rows_, cols_}, data_); }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool square() const { return rows_ == cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    const std::vector<double>& data() const { return data_; }

    SmallMatrix transposed() const {
        SmallMatrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i) {
            for (std::size_t j = 0; j < cols_; ++j) {
                t(j, i) = (*this)(i, j);
            }
        }
        return t;
    }

    SmallMatrix& operator*=(double s) {
        for (double& v : data_) {
            v *= s;
        }
        return *this;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend SmallMatrix operator*(const SmallMatrix& a, const SmallMatrix& b) {
        if (a.cols_ != b.rows_) {
            throw ShapeError("SmallMatrix product: " + std::to_string(a.rows_) + "x" + std::to_string(a.cols_) +
                             " times " + std::to_string(b.rows_) + "x" + std::to_string(b.cols_));
        }
        SmallMatrix c(a.rows_, b.cols_);
        for (std::size_t i = 0; i < a.rows_; ++i) {
            for (std::size_t k = 0; k < a.cols_; ++k) {
                const double av = a(i, k);
                for (std::size_t j = 0; j < b.cols_; ++j) {
                    c(i, j) += av * b(k, j);
                }
            }
        }
        return c;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

struct Svd {
    SmallMatrix u;               ///< rows x r, columns are left singular vectors
    std::vector<double> sigma;  ///< r = min(rows, cols) values, nonincreasing
    SmallMatrix v;               ///< cols x r, columns are right singular vectors
};

namespace detail {

// Hestenes one-sided Jacobi for rows >= cols. Orthogonalizes the columns of A
// by plane rotations, which is cyclic Jacobi on A^T A without forming it.
inline Svd jacobi_svd_tall(const SmallMatrix& m) {
    const std::size_t rows = m.rows();
    const std::size_t n = m.cols();
    SmallMatrix a = m;
    SmallMatrix v = SmallMatrix::identity(n);
    constexpr double eps = std::numeric_limits<double>::epsilon();
    constexpr int max_sweeps = 80;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0;
                double beta = 0.0;
                double gamma = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    alpha += a(i, p) * a(i, p);
                    beta += a(i, q) * a(i, q);
                    gamma += a(i, p) * a(i, q);
                }
                if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) {
                    continue;
                }
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double ap = a(i, p);
                    const double aq = a(i, q);
                    a(i, p) = c * ap - s * aq;
                    a(i, q) = s * ap + c * aq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p);
                    const double vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) {
            break;
        }
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
            s += a(i, j) * a(i, j);
        }
        sigma[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    Svd out{SmallMatrix(rows, n), std::vector<double>(n), SmallMatrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.sigma[k] = sigma[j];
        for (std::size_t i = 0; i < rows; ++i) {
            // Zero singular value: left vector left as zero (any unit vector is valid).
            out.u(i, k) = sigma[j] > 0.0 ? a(i, j) / sigma[j] : 0.0;
        }
        for (std::size_t i = 0; i < n; ++i) {
            out.v(i, k) = v(i, j);
        }
    }
    return out;
}

inline double sign_of(double a, double b) { return b >= 0.0 ? std::abs(a) : -std::abs(a); }

inline void balance(SmallMatrix& a) {
    constexpr double radix = 2.0;
    const std::size_t n = a.rows();
    bool done = false;
    while (!done) {
        done = true;
        for (std::size_t i = 0; i < n; ++i) {
            double r = 0.0;
            double c = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) {
                    c += std::abs(a(j, i));
                    r += std::abs(a(i, j));
                }
            }
            if (c != 0.0 && r != 0.0) {
                double g = r / radix;
                double f = 1.0;
                const double s = c + r;
                while (c < g) {
                    f *= radix;
                    c *= radix * radix;
                }
                g = r * radix;
                while (c > g) {
                    f /= radix;
                    c /= radix * radix;
                }
                if ((c + r) / f < 0.95 * s) {
                    done = false;
                    g = 1.0 / f;
                    for (std::size_t j = 0; j < n; ++j) {
                        a(i, j) *= g;
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        a(j, i) *= f;
                    }
                }
            }
        }
    }
}

// Householder reduction to upper Hessenberg form (similarity transform).
inline void hessenberg(SmallMatrix& h) {
    const std::size_t n = h.rows();
    std::vector<double> v(n);
    for (std::size_t k = 0; k + 2 < n; ++k) {
        const std::size_t len = n - k - 1;
        double norm = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            v[i] = h(k + 1 + i, k);
            norm += v[i] * v[i];
        }
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            continue;
        }
        const double alpha = v[0] >= 0.0 ? -norm : norm;
        v[0] -= alpha;
        double vnorm = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            vnorm += v[i] * v[i];
        }
        vnorm = std::sqrt(vnorm);
        if (vnorm == 0.0) {
            continue;
        }
        for (std::size_t i = 0; i < len; ++i) {
            v[i] /= vnorm;
        }
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                s += v[i] * h(k + 1 + i, j);
            }
            for (std::size_t i = 0; i < len; ++i) {
                h(k + 1 + i, j) -= 2.0 * v[i] * s;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                s += h(i, k + 1 + j) * v[j];
            }
            for (std::size_t j = 0; j < len; ++j) {
                h(i, k + 1 + j) -= 2.0 * s * v[j];
            }
        }
        for (std::size_t i = k + 2; i < n; ++i) {
            h(i, k) = 0.0;
        }
    }
}

// Francis double-shift QR on an upper Hessenberg matrix (destroys `a`).
inline std::vector<std::complex<double>> hessenberg_qr(SmallMatrix& a) {
    const int n = static_cast<int>(a.rows());
    std::vector<std::complex<double>> w(static_cast<std::size_t>(n));
    constexpr double eps = std::numeric_limits<double>::epsilon();
    constexpr int max_iterations = 60;
    auto A = [&](int i, int j) -> double& { return a(static_cast<std::size_t>(i), static_cast<std::size_t>(j)); };

    double anorm = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = std::max(i - 1, 0); j < n; ++j) {
            anorm += std::abs(A(i, j));
        }
    }
    int nn = n - 1;
    double t = 0.0;
    double p = 0.0, q = 0.0, r = 0.0, s = 0.0, x = 0.0, y = 0.0, z = 0.0, ww = 0.0;
    while (nn >= 0) {
        int its = 0;
        int l = 0;
        do {
            for (l = nn; l > 0; --l) {
                s = std::abs(A(l - 1, l - 1)) + std::abs(A(l, l));
                if (s == 0.0) {
                    s = anorm;
                }
                if (std::abs(A(l, l - 1)) <= eps * s) {
                    A(l, l - 1) = 0.0;
                    break;
                }
            }
            x = A(nn, nn);
            if (l == nn) {
                w[static_cast<std::size_t>(nn--)] = x + t;
            } else {
                y = A(nn - 1, nn - 1);
                ww = A(nn, nn - 1) * A(nn - 1, nn);
                if (l == nn - 1) {
                    p = 0.5 * (y - x);
                    q = p * p + ww;
                    z = std::sqrt(std::abs(q));
                    x += t;
                    if (q >= 0.0) {
                        z = p + sign_of(z, p);
                        w[static_cast<std::size_t>(nn - 1)] = w[static_cast<std::size_t>(nn)] = x + z;
                        if (z != 0.0) {
                            w[static_cast<std::size_t>(nn)] = x - ww / z;
                        }
                    } else {
                        w[static_cast<std::size_t>(nn)] = std::complex<double>(x + p, -z);
                        w[static_cast<std::size_t>(nn - 1)] = std::conj(w[static_cast<std::size_t>(nn)]);
                    }
                    nn -= 2;
                } else {
                    if (its == max_iterations) {
                        throw Error("eigenvalues: QR iteration did not converge");
                    }
                    if (its % 10 == 0 && its > 0) {
                        // exceptional shift
                        t += x;
                        for (int i = 0; i <= nn; ++i) {
                            A(i, i) -= x;
                        }
                        s = std::abs(A(nn, nn - 1)) + std::abs(A(nn - 1, nn - 2));
                        y = x = 0.75 * s;
                        ww = -0.4375 * s * s;
                    }
                    ++its;
                    int m = nn - 2;
                    for (; m >= l; --m) {
                        z = A(m, m);
                        r = x - z;
                        s = y - z;
                        p = (r * s - ww) / A(m + 1, m) + A(m, m + 1);
                        q = A(m + 1, m + 1) - z - r - s;
                        r = A(m + 2, m + 1);
                        s = std::abs(p) + std::abs(q) + std::abs(r);
                        p /= s;
                        q /= s;
                        r /= s;
                        if (m == l) {
                            break;
                        }
                        const double u = std::abs(A(m, m - 1)) * (std::abs(q) + std::abs(r));
                        const double v = std::abs(p) * (std::abs(A(m - 1, m - 1)) + std::abs(z) + std::abs(A(m + 1, m + 1)));
                        if (u <= eps * v) {
                            break;
                        }
                    }
                    for (int i = m; i < nn - 1; ++i) {
                        A(i + 2, i) = 0.0;
                        if (i != m) {
                            A(i + 2, i - 1) = 0.0;
                        }
                    }
                    for (int k = m; k < nn; ++k) {
                        if (k != m) {
                            p = A(k, k - 1);
                            q = A(k + 1, k - 1);
                            r = 0.0;
                            if (k + 1 != nn) {
                                r = A(k + 2, k - 1);
                            }
                            if ((x = std::abs(p) + std::abs(q) + std::abs(r)) != 0.0) {
                                p /= x;
                                q /= x;
                                r /= x;
                            }
                        }
                        if ((s = sign_of(std::sqrt(p * p + q * q + r * r), p)) != 0.0) {
                            if (k == m) {
                                if (l != m) {
                                    A(k, k - 1) = -A(k, k - 1);
                                }
                            } else {
                                A(k, k - 1) = -s * x;
                            }
                            p += s;
                            x = p / s;
                            y = q / s;
                            z = r / s;
                            q /= p;
                            r /= p;
                            for (int j = k; j <= nn; ++j) {
                                p = A(k, j) + q * A(k + 1, j);
                                if (k + 1 != nn) {
                                    p += r * A(k + 2, j);
                                    A(k + 2, j) -= p * z;
                                }
                                A(k + 1, j) -= p * y;
                                A(k, j) -= p * x;
                            }
                            const int mmin = nn < k + 3 ? nn : k + 3;
                            for (int i = l; i <= mmin; ++i) {
                                p = x * A(i, k) + y * A(i, k + 1);
                                if (k + 1 != nn) {
                                    p += z * A(i, k + 2);
                                    A(i, k + 2) -= p * r;
                                }
                                A(i, k + 1) -= p * q;
                                A(i, k) -= p;
                            }
                        }
                    }
                }
            }
        } while (l + 1 < nn);
    }
    return w;
}

}  // namespace detail

/// Full SVD, M = U diag(sigma) V^T, with sigma nonincreasing.
inline Svd svd(const SmallMatrix& m) {
    if (!m.all_finite()) {
        throw NonFiniteError("svd: non-finite entry");
    }
    if (m.rows() >= m.cols()) {
        return detail::jacobi_svd_tall(m);
    }
    Svd t = detail::jacobi_svd_tall(m.transposed());
    return Svd{t.v, t.sigma, t.u};
}

/// Singular values, nonincreasing, min(rows, cols) of them.
inline std::vector<double> singular_values(const SmallMatrix& m) { return svd(m).sigma; }

/// All eigenvalues of a square matrix (order unspecified).
inline std::vector<std::complex<double>> eigenvalues(const SmallMatrix& m) {
    if (!m.square()) {
        throw ShapeError("eigenvalues: matrix is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    }
    if (!m.all_finite()) {
        throw NonFiniteError("eigenvalues: non-finite entry");
    }
    if (m.rows() == 0) {
        return {};
    }
    SmallMatrix h = m;
    detail::balance(h);
    detail::hessenberg(h);
    return detail::hessenberg_qr(h);
}

/// Largest eigenvalue modulus.
inline double spectral_radius(const SmallMatrix& m) {
    double rho = 0.0;
    for (const auto& l : eigenvalues(m)) {
        rho = std::max(rho, std::abs(l));
    }
    return rho;
}

struct R0Bounds {
    double lower = 0.0;
    double upper = 0.0;
};

/// Relative floor on sigma_min(V) below which V is treated as singular.
inline constexpr double kSingularFloor = 1e-10;

inline void require_ngm_pair(const SmallMatrix& f, const SmallMatrix& v) {
    if (!f.square() || !v.square() || f.rows() != v.rows()) {
        throw ShapeError("r0_bounds: F and V must be square of equal size, got " + std::to_string(f.rows()) + "x" +
                         std::to_string(f.cols()) + " and " + std::to_string(v.rows()) + "x" +
                         std::to_string(v.cols()));
    }
}

/// sigma_min(F)/sigma_max(V) <= rho(F V^-1) <= sigma_max(F)/sigma_min(V),
/// evaluated from singular values only (V is never inverted).
inline R0Bounds r0_bounds(const SmallMatrix& f, const SmallMatrix& v) {
    require_ngm_pair(f, v);
    const auto sf = singular_values(f);
    const auto sv = singular_values(v);
    if (sv.empty() || sv.front() == 0.0 || sv.back() < kSingularFloor * sv.front()) {
        throw SingularMatrixError("r0_bounds: V is numerically singular (sigma_min=" +
                                  std::to_string(sv.empty() ? 0.0 : sv.back()) + ")");
    }
    R0Bounds b{sf.back() / sv.front(), sf.front() / sv.back()};
    b.upper = std::max(b.upper, b.lower);
    return b;
}

}  // namespace cape::linalg

namespace cape::ad {

/// Differentiable singular values of a rank-2 tensor, nonincreasing.
/// d sigma_i / dM = u_i v_i^T; at repeated singular values this is the
/// subgradient given by the computed singular vectors.
inline Var singular_values(const Var& m) {
    if (m.rank() != 2) {
        throw ShapeError("singular_values: expected a matrix, got shape " + to_string(m.shape()));
    }
    auto dec = linalg::svd(linalg::SmallMatrix::from_tensor(m.value()));
    Tensor out = Tensor::vector(dec.sigma);
    return m.graph().record(std::move(out), {m},
                            [dec = std::move(dec)](const BackwardArgs& g) {
                                Tensor& gm = *g.input_grads[0];
                                const std::size_t rows = dec.u.rows();
                                const std::size_t cols = dec.v.rows();
                                for (std::size_t k = 0; k < dec.sigma.size(); ++k) {
                                    const double d = g.out_grad[k];
                                    if (d == 0.0) {
                                        continue;
                                    }
                                    for (std::size_t i = 0; i < rows; ++i) {
                                        for (std::size_t j = 0; j < cols; ++j) {
                                            gm[i * cols + j] += d * dec.u(i, k) * dec.v(j, k);
                                        }
                                    }
                                }
                            },
                            "singular_values");
}

}  // namespace cape::ad
