// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// A Graph owns every intermediate value produced while evaluating an
// expression. Nodes are appended in evaluation order, so the append order is a
// valid topological order and backward simply walks the tape in reverse.
// Broadcasting is restricted to leading dimensions: in a binary op the second
// operand's shape must be a suffix of the first operand's shape.
#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cape/error.hpp"
#include "cape/tensor.hpp"

namespace cape::ad {

class Graph;

/// Handle to a node of a Graph.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    std::size_t dim(std::size_t i) const { return shape().at(i); }
    std::size_t rank() const { return shape().size(); }
    double item() const { return value().item(); }
    bool requires_grad() const;
    Graph& graph() const { return *graph_; }
    std::size_t id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

private:
    friend class Graph;
    Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

struct BackwardArgs {
    const Tensor& out;
    const Tensor& out_grad;
    std::span<const Tensor* const> inputs;
    /// nullptr for inputs that do not require a gradient.
    std::span<Tensor* const> input_grads;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

/// Gradients of a scalar with respect to the parameters bound into a graph.
class Gradients {
public:
    /// Zero tensor of the parameter's shape when it was not reachable.
    Tensor get(const Parameter& p) const {
        auto it = grads_.find(&p);
        return it == grads_.end() ? Tensor(p.value.shape()) : it->second;
    }

    bool contains(const Parameter& p) const { return grads_.count(&p) != 0; }

    const std::map<const Parameter*, Tensor>& entries() const { return grads_; }

    void accumulate(const Parameter* p, const Tensor& g) {
        auto [it, inserted] = grads_.try_emplace(p, g);
        if (!inserted) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                it->second[i] += g[i];
            }
        }
    }

private:
    std::map<const Parameter*, Tensor> grads_;
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf that never receives a gradient.
    Var constant(Tensor value) {
        check_finite(value, "constant");
        return push(std::move(value), {}, nullptr, false, nullptr);
    }

    Var constant(double v) { return constant(Tensor::scalar(v)); }

    /// Leaf that receives a gradient, readable through grad() after backward.
    Var variable(Tensor value) {
        check_finite(value, "variable");
        return push(std::move(value), {}, nullptr, true, nullptr);
    }

    /// Leaf bound to a model parameter. The value is copied; gradients are
    /// reported per parameter by backward().
    Var parameter(const Parameter& p) {
        check_finite(p.value, p.name);
        return push(p.value, {}, nullptr, true, &p);
    }

    /// Leaf bound to a parameter that is frozen for this evaluation.
    Var frozen(const Parameter& p) { return constant(p.value); }

    /// Appends the result of an op. Gradient bookkeeping is recorded only when
    /// some input requires a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn, const char* op) {
        return record(std::move(value), std::vector<Var>(inputs), std::move(fn), op);
    }

    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn, const char* op) {
        check_finite(value, op);
        bool needs = false;
        std::vector<std::size_t> parents;
        parents.reserve(inputs.size());
        for (const Var& v : inputs) {
            if (v.graph_ != this) {
                throw ValidationError(std::string(op) + ": input belongs to another graph");
            }
            parents.push_back(v.id_);
            needs = needs || nodes_[v.id_].requires_grad;
        }
        if (!needs) {
            return push(std::move(value), {}, nullptr, false, nullptr);
        }
        return push(std::move(value), std::move(parents), std::move(fn), true, nullptr);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient of the last backward() target with respect to v (zeros when
    /// v was unreachable or is a constant).
    Tensor grad(const Var& v) const {
        const Node& n = nodes_.at(v.id_);
        return n.grad.size() == n.value.size() && n.has_grad ? n.grad : Tensor(n.value.shape());
    }

    Gradients backward(const Var& loss) {
        if (loss.graph_ != this) {
            throw ValidationError("backward: loss belongs to another graph");
        }
        if (nodes_[loss.id_].value.size() != 1) {
            throw ShapeError("backward: loss must be scalar, got shape " + to_string(nodes_[loss.id_].value.shape()));
        }
        for (Node& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor();
        }
        Gradients out;
        Node& root = nodes_[loss.id_];
        if (!root.requires_grad) {
            return out;
        }
        ensure_grad(root);
        root.grad[0] = 1.0;

        std::vector<const Tensor*> inputs;
        std::vector<Tensor*> input_grads;
        for (std::size_t id = loss.id_ + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.has_grad) {
                continue;
            }
            if (n.param != nullptr) {
                out.accumulate(n.param, n.grad);
            }
            if (!n.backward) {
                continue;
            }
            inputs.clear();
            input_grads.clear();
            for (std::size_t p : n.parents) {
                Node& pn = nodes_[p];
                inputs.push_back(&pn.value);
                if (pn.requires_grad) {
                    ensure_grad(pn);
                    input_grads.push_back(&pn.grad);
                } else {
                    input_grads.push_back(nullptr);
                }
            }
            n.backward(BackwardArgs{n.value, n.grad, inputs, input_grads});
        }
        return out;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
        const Parameter* param = nullptr;
    };

    static void check_finite(const Tensor& t, const std::string& what) {
        if (!t.all_finite()) {
            throw NonFiniteError(what + ": non-finite value");
        }
    }

    static void ensure_grad(Node& n) {
        if (!n.has_grad) {
            n.grad = Tensor(n.value.shape());
            n.has_grad = true;
        }
    }

    Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn fn, bool requires_grad,
             const Parameter* param) {
        nodes_.push_back(Node{std::move(value), Tensor(), false, std::move(parents), std::move(fn), requires_grad, param});
        return Var(this, nodes_.size() - 1);
    }

    // deque: references to existing nodes stay valid while new nodes are appended.
    std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

namespace detail {

inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c) {
    // c[m x n] += op(a)[m x k] * op(b)[k x n]
    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = a[i * k + p];
                const double* bp = b + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    ci[j] += av * bp[j];
                }
            }
        }
    } else if (!trans_a && trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            for (std::size_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) {
                    s += ai[p] * bj[p];
                }
                c[i * n + j] += s;
            }
        }
    } else if (trans_a && !trans_b) {
        for (std::size_t p = 0; p < k; ++p) {
            const double* ap = a + p * m;
            const double* bp = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = ap[i];
                double* ci = c + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    ci[j] += av * bp[j];
                }
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) {
                    s += a[p * m + i] * b[j * k + p];
                }
                c[i * n + j] += s;
            }
        }
    }
}

inline bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) {
        return false;
    }
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline void require_suffix(const Var& a, const Var& b, const char* op) {
    if (!is_suffix(b.shape(), a.shape())) {
        throw ShapeError(std::string(op) + ": shape " + to_string(b.shape()) + " does not broadcast against " +
                         to_string(a.shape()));
    }
}

/// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) {
        r.outer *= s[i];
    }
    r.extent = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) {
        r.inner *= s[i];
    }
    return r;
}

inline void require_axis(const Var& a, std::size_t axis, const char* op) {
    if (axis >= a.rank()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(a.shape()));
    }
}

template <typename Fwd, typename Deriv>
Var unary(const Var& a, const char* op, Fwd fwd, Deriv deriv) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = fwd(av[i]);
    }
    return a.graph().record(std::move(out), {a},
                            [deriv](const BackwardArgs& b) {
                                const Tensor& x = *b.inputs[0];
                                Tensor& gx = *b.input_grads[0];
                                for (std::size_t i = 0; i < x.size(); ++i) {
                                    gx[i] += b.out_grad[i] * deriv(x[i], b.out[i]);
                                }
                            },
                            op);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
    detail::require_suffix(a, b, "add");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = av;
    const std::size_t nb = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += bv[i % nb];
    }
    return a.graph().record(std::move(out), {a, b},
                            [nb](const BackwardArgs& g) {
                                if (g.input_grads[0] != nullptr) {
                                    Tensor& ga = *g.input_grads[0];
                                    for (std::size_t i = 0; i < ga.size(); ++i) {
                                        ga[i] += g.out_grad[i];
                                    }
                                }
                                if (g.input_grads[1] != nullptr) {
                                    Tensor& gb = *g.input_grads[1];
                                    for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
                                        gb[i % nb] += g.out_grad[i];
                                    }
                                }
                            },
                            "add");
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_suffix(a, b, "sub");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = av;
    const std::size_t nb = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] -= bv[i % nb];
    }
    return a.graph().record(std::move(out), {a, b},
                            [nb](const BackwardArgs& g) {
                                if (g.input_grads[0] != nullptr) {
                                    Tensor& ga = *g.input_grads[0];
                                    for (std::size_t i = 0; i < ga.size(); ++i) {
                                        ga[i] += g.out_grad[i];
                                    }
                                }
                                if (g.input_grads[1] != nullptr) {
                                    Tensor& gb = *g.input_grads[1];
                                    for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
                                        gb[i % nb] -= g.out_grad[i];
                                    }
                                }
                            },
                            "sub");
}

/// Hadamard product.
inline Var mul(const Var& a, const Var& b) {
    detail::require_suffix(a, b, "mul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = av;
    const std::size_t nb = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= bv[i % nb];
    }
    return a.graph().record(std::move(out), {a, b},
                            [nb](const BackwardArgs& g) {
                                const Tensor& x = *g.inputs[0];
                                const Tensor& y = *g.inputs[1];
                                if (g.input_grads[0] != nullptr) {
                                    Tensor& ga = *g.input_grads[0];
                                    for (std::size_t i = 0; i < ga.size(); ++i) {
                                        ga[i] += g.out_grad[i] * y[i % nb];
                                    }
                                }
                                if (g.input_grads[1] != nullptr) {
                                    Tensor& gb = *g.input_grads[1];
                                    for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
                                        gb[i % nb] += g.out_grad[i] * x[i];
                                    }
                                }
                            },
                            "mul");
}

inline Var div(const Var& a, const Var& b) {
    detail::require_suffix(a, b, "div");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = av;
    const std::size_t nb = bv.size();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] /= bv[i % nb];
    }
    return a.graph().record(std::move(out), {a, b},
                            [nb](const BackwardArgs& g) {
                                const Tensor& y = *g.inputs[1];
                                if (g.input_grads[0] != nullptr) {
                                    Tensor& ga = *g.input_grads[0];
                                    for (std::size_t i = 0; i < ga.size(); ++i) {
                                        ga[i] += g.out_grad[i] / y[i % nb];
                                    }
                                }
                                if (g.input_grads[1] != nullptr) {
                                    Tensor& gb = *g.input_grads[1];
                                    for (std::size_t i = 0; i < g.out_grad.size(); ++i) {
                                        gb[i % nb] -= g.out_grad[i] * g.out[i] / y[i % nb];
                                    }
                                }
                            },
                            "div");
}

/// scale * a + shift
inline Var affine(const Var& a, double scale, double shift = 0.0) {
    return detail::unary(
        a, "affine", [=](double x) { return scale * x + shift; }, [=](double, double) { return scale; });
}

inline Var scale(const Var& a, double s) { return affine(a, s, 0.0); }
inline Var neg(const Var& a) { return affine(a, -1.0, 0.0); }

/// Subgradient at 0 is 0.
inline Var relu(const Var& a) {
    return detail::unary(
        a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var exp(const Var& a) {
    return detail::unary(
        a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(const Var& a) {
    return detail::unary(
        a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var square(const Var& a) {
    return detail::unary(
        a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

// ---------------------------------------------------------------- reductions

inline Var sum(const Var& a) {
    const Tensor& av = a.value();
    double s = 0.0;
    for (double v : av.values()) {
        s += v;
    }
    return a.graph().record(Tensor::scalar(s), {a},
                            [](const BackwardArgs& g) {
                                Tensor& ga = *g.input_grads[0];
                                const double d = g.out_grad[0];
                                for (std::size_t i = 0; i < ga.size(); ++i) {
                                    ga[i] += d;
                                }
                            },
                            "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Sums out one axis.
inline Var sum_axis(const Var& a, std::size_t axis) {
    detail::require_axis(a, axis, "sum_axis");
    const auto sp = detail::split_axis(a.shape(), axis);
    Shape out_shape = a.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    Tensor out(out_shape);
    const Tensor& av = a.value();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t e = 0; e < sp.extent; ++e) {
            for (std::size_t i = 0; i < sp.inner; ++i) {
                out[o * sp.inner + i] += av[(o * sp.extent + e) * sp.inner + i];
            }
        }
    }
    return a.graph().record(std::move(out), {a},
                            [sp](const BackwardArgs& g) {
                                Tensor& ga = *g.input_grads[0];
                                for (std::size_t o = 0; o < sp.outer; ++o) {
                                    for (std::size_t e = 0; e < sp.extent; ++e) {
                                        for (std::size_t i = 0; i < sp.inner; ++i) {
                                            ga[(o * sp.extent + e) * sp.inner + i] += g.out_grad[o * sp.inner + i];
                                        }
                                    }
                                }
                            },
                            "sum_axis");
}

inline Var mean_axis(const Var& a, std::size_t axis) {
    detail::require_axis(a, axis, "mean_axis");
    return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

// ---------------------------------------------------------------- linear algebra

/// a(..., m, k) x b(k, n) -> (..., m, n), or batched a(..., m, k) x b(..., k, n)
/// with identical leading dimensions.
inline Var matmul(const Var& a, const Var& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const std::size_t k = as.back();
    if (bs[bs.size() - 2] != k) {
        throw ShapeError("matmul: inner dimensions differ: " + to_string(as) + " x " + to_string(bs));
    }
    const std::size_t n = bs.back();
    Shape out_shape = as;
    out_shape.back() = n;

    if (b.rank() == 2) {
        const std::size_t rows = a.size() / k;
        Tensor out(out_shape);
        detail::gemm(false, false, rows, n, k, a.value().data(), b.value().data(), out.data());
        return a.graph().record(std::move(out), {a, b},
                                [rows, n, k](const BackwardArgs& g) {
                                    if (g.input_grads[0] != nullptr) {
                                        detail::gemm(false, true, rows, k, n, g.out_grad.data(), g.inputs[1]->data(),
                                                     g.input_grads[0]->data());
                                    }
                                    if (g.input_grads[1] != nullptr) {
                                        detail::gemm(true, false, k, n, rows, g.inputs[0]->data(), g.out_grad.data(),
                                                     g.input_grads[1]->data());
                                    }
                                },
                                "matmul");
    }

    if (a.rank() != b.rank() || !std::equal(as.begin(), as.end() - 2, bs.begin())) {
        throw ShapeError("matmul: batch dimensions differ: " + to_string(as) + " x " + to_string(bs));
    }
    const std::size_t m = as[as.size() - 2];
    const std::size_t batch = a.size() / (m * k);
    Tensor out(out_shape);
    for (std::size_t t = 0; t < batch; ++t) {
        detail::gemm(false, false, m, n, k, a.value().data() + t * m * k, b.value().data() + t * k * n,
                     out.data() + t * m * n);
    }
    return a.graph().record(std::move(out), {a, b},
                            [batch, m, n, k](const BackwardArgs& g) {
                                for (std::size_t t = 0; t < batch; ++t) {
                                    const double* go = g.out_grad.data() + t * m * n;
                                    if (g.input_grads[0] != nullptr) {
                                        detail::gemm(false, true, m, k, n, go, g.inputs[1]->data() + t * k * n,
                                                     g.input_grads[0]->data() + t * m * k);
                                    }
                                    if (g.input_grads[1] != nullptr) {
                                        detail::gemm(true, false, k, n, m, g.inputs[0]->data() + t * m * k, go,
                                                     g.input_grads[1]->data() + t * k * n);
                                    }
                                }
                            },
                            "matmul");
}

/// General axis permutation: out.shape[i] = a.shape[perm[i]].
inline Var permute(const Var& a, std::vector<std::size_t> perm) {
    const Shape& s = a.shape();
    const std::size_t r = s.size();
    if (perm.size() != r) {
        throw ShapeError("permute: permutation of length " + std::to_string(perm.size()) + " for shape " +
                         to_string(s));
    }
    {
        std::vector<bool> seen(r, false);
        for (std::size_t p : perm) {
            if (p >= r || seen[p]) {
                throw ShapeError("permute: invalid permutation for shape " + to_string(s));
            }
            seen[p] = true;
        }
    }
    std::vector<std::size_t> in_strides(r, 1);
    for (std::size_t i = r; i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * s[i];
    }
    Shape out_shape(r);
    std::vector<std::size_t> src_strides(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = s[perm[i]];
        src_strides[i] = in_strides[perm[i]];
    }
    // map[out_flat] = in_flat
    const std::size_t n = a.size();
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t f = 0; f < n; ++f) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) {
            src += idx[i] * src_strides[i];
        }
        map[f] = src;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) {
                break;
            }
            idx[i] = 0;
        }
    }
    Tensor out(out_shape);
    const Tensor& av = a.value();
    for (std::size_t f = 0; f < n; ++f) {
        out[f] = av[map[f]];
    }
    return a.graph().record(std::move(out), {a},
                            [map = std::move(map)](const BackwardArgs& g) {
                                Tensor& ga = *g.input_grads[0];
                                for (std::size_t f = 0; f < map.size(); ++f) {
                                    ga[map[f]] += g.out_grad[f];
                                }
                            },
                            "permute");
}

/// Swaps the last two axes.
inline Var transpose(const Var& a) {
    if (a.rank() < 2) {
        throw ShapeError("transpose: rank < 2 for shape " + to_string(a.shape()));
    }
    std::vector<std::size_t> perm(a.rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, std::move(perm));
}

inline Var reshape(const Var& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
    }
    Tensor out = a.value().reshaped(std::move(shape));
    return a.graph().record(std::move(out), {a},
                            [](const BackwardArgs& g) {
                                Tensor& ga = *g.input_grads[0];
                                for (std::size_t i = 0; i < ga.size(); ++i) {
                                    ga[i] += g.out_grad[i];
                                }
                            },
                            "reshape");
}

/// Concatenates along `axis`; all other dimensions must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) {
        throw ShapeError("concat: no inputs");
    }
    const Shape& s0 = parts[0].shape();
    detail::require_axis(parts[0], axis, "concat");
    Shape out_shape = s0;
    out_shape[axis] = 0;
    std::vector<std::size_t> extents;
    for (const Var& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) {
            ok = i == axis || s[i] == s0[i];
        }
        if (!ok) {
            throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(s0) + " on axis " +
                             std::to_string(axis));
        }
        extents.push_back(s[axis]);
        out_shape[axis] += s[axis];
    }
    const auto sp = detail::split_axis(out_shape, axis);
    Tensor out(out_shape);
    std::size_t offset = 0;
    for (std::size_t q = 0; q < parts.size(); ++q) {
        const Tensor& pv = parts[q].value();
        const std::size_t e = extents[q];
        for (std::size_t o = 0; o < sp.outer; ++o) {
            std::copy_n(pv.data() + o * e * sp.inner, e * sp.inner,
                        out.data() + (o * sp.extent + offset) * sp.inner);
        }
        offset += e;
    }
    return parts[0].graph().record(std::move(out), parts,
                                   [sp, extents](const BackwardArgs& g) {
                                       std::size_t off = 0;
                                       for (std::size_t q = 0; q < extents.size(); ++q) {
                                           const std::size_t e = extents[q];
                                           if (Tensor* gq = g.input_grads[q]) {
                                               for (std::size_t o = 0; o < sp.outer; ++o) {
                                                   for (std::size_t i = 0; i < e * sp.inner; ++i) {
                                                       (*gq)[o * e * sp.inner + i] +=
                                                           g.out_grad[(o * sp.extent + off) * sp.inner + i];
                                                   }
                                               }
                                           }
                                           off += e;
                                       }
                                   },
                                   "concat");
}

/// Selects entries `indices` along `axis` (repeats allowed).
inline Var index_select(const Var& a, std::size_t axis, std::vector<std::size_t> indices) {
    detail::require_axis(a, axis, "index_select");
    const auto sp = detail::split_axis(a.shape(), axis);
    for (std::size_t i : indices) {
        if (i >= sp.extent) {
            throw ShapeError("index_select: index " + std::to_string(i) + " out of range for axis of size " +
                             std::to_string(sp.extent));
        }
    }
    Shape out_shape = a.shape();
    out_shape[axis] = indices.size();
    const std::size_t m = indices.size();
    Tensor out(out_shape);
    const Tensor& av = a.value();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t q = 0; q < m; ++q) {
            std::copy_n(av.data() + (o * sp.extent + indices[q]) * sp.inner, sp.inner,
                        out.data() + (o * m + q) * sp.inner);
        }
    }
    return a.graph().record(std::move(out), {a},
                            [sp, indices = std::move(indices)](const BackwardArgs& g) {
                                Tensor& ga = *g.input_grads[0];
                                const std::size_t m = indices.size();
                                for (std::size_t o = 0; o < sp.outer; ++o) {
                                    for (std::size_t q = 0; q < m; ++q) {
                                        for (std::size_t i = 0; i < sp.inner; ++i) {
                                            ga[(o * sp.extent + indices[q]) * sp.inner + i] +=
                                                g.out_grad[(o * m + q) * sp.inner + i];
                                        }
                                    }
                                }
                            },
                            "index_select");
}

/// Half-open range [begin, end) along `axis`.
inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
    detail::require_axis(a, axis, "slice");
    if (begin > end || end > a.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for shape " + to_string(a.shape()));
    }
    std::vector<std::size_t> idx(end - begin);
    std::iota(idx.begin(), idx.end(), begin);
    return index_select(a, axis, std::move(idx));
}

/// Single element as a rank-0 tensor.
inline Var element(const Var& a, std::size_t flat_index) {
    if (flat_index >= a.size()) {
        throw ShapeError("element: index " + std::to_string(flat_index) + " out of range for shape " +
                         to_string(a.shape()));
    }
    const double v = a.value()[flat_index];
    return a.graph().record(Tensor::scalar(v), {a},
                            [flat_index](const BackwardArgs& g) { (*g.input_grads[0])[flat_index] += g.out_grad[0]; },
                            "element");
}

// ---------------------------------------------------------------- last-axis ops

/// Numerically stable softmax over the last axis.
inline Var softmax(const Var& a) {
    if (a.rank() < 1) {
        throw ShapeError("softmax: rank-0 input");
    }
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * n;
        double* y = out.data() + r * n;
        const double mx = *std::max_element(x, x + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            y[j] /= z;
        }
    }
    return a.graph().record(std::move(out), {a},
                            [rows, n](const BackwardArgs& g) {
                                Tensor& ga = *g.input_grads[0];
                                for (std::size_t r = 0; r < rows; ++r) {
                                    const double* y = g.out.data() + r * n;
                                    const double* dy = g.out_grad.data() + r * n;
                                    double dot = 0.0;
                                    for (std::size_t j = 0; j < n; ++j) {
                                        dot += dy[j] * y[j];
                                    }
                                    for (std::size_t j = 0; j < n; ++j) {
                                        ga[r * n + j] += y[j] * (dy[j] - dot);
                                    }
                                }
                            },
                            "softmax");
}

/// log(sum(exp(x))) over the last axis, which is removed.
inline Var logsumexp(const Var& a) {
    if (a.rank() < 1) {
        throw ShapeError("logsumexp: rank-0 input");
    }
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    const Tensor& av = a.value();
    Tensor out(out_shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * n;
        const double mx = *std::max_element(x, x + n);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            z += std::exp(x[j] - mx);
        }
        out[r] = mx + std::log(z);
    }
    return a.graph().record(std::move(out), {a},
                            [rows, n](const BackwardArgs& g) {
                                const Tensor& x = *g.inputs[0];
                                Tensor& ga = *g.input_grads[0];
                                for (std::size_t r = 0; r < rows; ++r) {
                                    for (std::size_t j = 0; j < n; ++j) {
                                        ga[r * n + j] += g.out_grad[r] * std::exp(x[r * n + j] - g.out[r]);
                                    }
                                }
                            },
                            "logsumexp");
}

/// Layer normalization over the last axis with elementwise gain and bias.
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
    const std::size_t n = x.shape().back();
    if (gain.shape() != Shape{n} || bias.shape() != Shape{n}) {
        throw ShapeError("layer_norm: gain/bias must have shape (" + std::to_string(n) + "), got " +
                         to_string(gain.shape()) + " and " + to_string(bias.shape()));
    }
    const std::size_t rows = x.size() / n;
    const Tensor& xv = x.value();
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            mu += xr[j];
        }
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            var += (xr[j] - mu) * (xr[j] - mu);
        }
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xr[j] - mu) * inv_std[r];
            xhat[r * n + j] = h;
            out[r * n + j] = h * gv[j] + bv[j];
        }
    }
    return x.graph().record(
        std::move(out), {x, gain, bias},
        [rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](const BackwardArgs& g) {
            const Tensor& gv = *g.inputs[1];
            const double nn = static_cast<double>(n);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* dy = g.out_grad.data() + r * n;
                const double* h = xhat.data() + r * n;
                if (Tensor* gg = g.input_grads[1]) {
                    for (std::size_t j = 0; j < n; ++j) {
                        (*gg)[j] += dy[j] * h[j];
                    }
                }
                if (Tensor* gb = g.input_grads[2]) {
                    for (std::size_t j = 0; j < n; ++j) {
                        (*gb)[j] += dy[j];
                    }
                }
                if (Tensor* gx = g.input_grads[0]) {
                    double mean_d = 0.0;
                    double mean_dh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = dy[j] * gv[j];
                        mean_d += d;
                        mean_dh += d * h[j];
                    }
                    mean_d /= nn;
                    mean_dh /= nn;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double d = dy[j] * gv[j];
                        (*gx)[r * n + j] += inv_std[r] * (d - mean_d - h[j] * mean_dh);
                    }
                }
            }
        },
        "layer_norm");
}

/// x / sqrt(|x|^2 + eps) over the last axis.
inline Var l2_normalize(const Var& a, double eps = 1e-12) {
    const std::size_t n = a.shape().back();
    const std::size_t rows = a.size() / n;
    const Tensor& av = a.value();
    Tensor out(av.shape());
    std::vector<double> norms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            s += av[r * n + j] * av[r * n + j];
        }
        norms[r] = std::sqrt(s + eps);
        for (std::size_t j = 0; j < n; ++j) {
            out[r * n + j] = av[r * n + j] / norms[r];
        }
    }
    return a.graph().record(std::move(out), {a},
                            [rows, n, norms = std::move(norms)](const BackwardArgs& g) {
                                Tensor& ga = *g.input_grads[0];
                                for (std::size_t r = 0; r < rows; ++r) {
                                    const double* y = g.out.data() + r * n;
                                    const double* dy = g.out_grad.data() + r * n;
                                    double dot = 0.0;
                                    for (std::size_t j = 0; j < n; ++j) {
                                        dot += y[j] * dy[j];
                                    }
                                    for (std::size_t j = 0; j < n; ++j) {
                                        ga[r * n + j] += (dy[j] - y[j] * dot) / norms[r];
                                    }
                                }
                            },
                            "l2_normalize");
}

// ---------------------------------------------------------------- operator sugar

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator+(const Var& a, double s) { return affine(a, 1.0, s); }
inline Var operator-(double s, const Var& a) { return affine(a, -1.0, s); }

}  // namespace cape::ad
