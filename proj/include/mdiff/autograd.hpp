// Copyright (c) 2026 The mdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal reverse-mode automatic differentiation over dense row-major
// double tensors. Every op records a closure that accumulates into its
// parents' gradients; `backward` replays them in reverse topological order.

#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mdiff::ag {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct Node {
    std::vector<double> value;
    std::vector<double> grad;
    Shape shape;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// RAII scope that disables graph recording on the current thread.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var constant(std::vector<double> v, Shape s) {
        if (v.size() != numel(s)) throw std::invalid_argument("Var: value size does not match shape " + shape_str(s));
        auto n = std::make_shared<Node>();
        n->value = std::move(v);
        n->shape = std::move(s);
        return Var(std::move(n));
    }
    static Var zeros(Shape s) {
        const std::size_t n = numel(s);
        return constant(std::vector<double>(n, 0.0), std::move(s));
    }
    static Var parameter(std::vector<double> v, Shape s) {
        Var p = constant(std::move(v), std::move(s));
        p.node_->requires_grad = true;
        return p;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    const std::vector<double>& value() const { return node_->value; }
    std::vector<double>& mutable_value() { return node_->value; }
    const std::vector<double>& grad() const { return node_->grad; }
    std::vector<double>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const {
        if (node_->value.size() != 1) throw std::logic_error("Var::item on non-scalar " + shape_str(shape()));
        return node_->value[0];
    }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Creates the result node for an op. When recording is disabled, or no
/// parent needs a gradient, the closure is dropped and the node is a leaf.
inline Var make_result(std::vector<double> value, Shape shape, std::vector<Var> parents,
                       std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->shape = std::move(shape);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents) any = any || p.requires_grad();
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(parents.size());
            for (auto& p : parents) n->parents.push_back(p.ptr());
            n->backward_fn = std::move(backward_fn);
        }
    }
    return Var(std::move(n));
}

/// Accumulates d(root)/d(leaf) into every reachable node's grad. `root`
/// must be a scalar unless a seed gradient is given.
inline void backward(const Var& root, std::vector<double> seed = {}) {
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    seen.insert(root.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    Node* r = root.node();
    r->ensure_grad();
    if (seed.empty()) {
        if (r->value.size() != 1) throw std::logic_error("backward: non-scalar root needs a seed gradient");
        r->grad[0] += 1.0;
    } else {
        if (seed.size() != r->value.size()) throw std::invalid_argument("backward: seed size mismatch");
        for (std::size_t i = 0; i < seed.size(); ++i) r->grad[i] += seed[i];
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            for (auto& p : n->parents) p->ensure_grad();
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

namespace detail {
inline void require_same(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

template <typename F, typename DF>
Var unary(const Var& x, F f, DF df) {
    const auto& xv = x.value();
    std::vector<double> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
    return make_result(std::move(out), x.shape(), {x}, [df](Node& n) {
        Node& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * df(p.value[i], n.value[i]);
    });
}
}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::require_same(a, b, "add");
    std::vector<double> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result(std::move(out), a.shape(), {a, b}, [](Node& n) {
        for (auto& p : n.parents)
            if (p->requires_grad)
                for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same(a, b, "sub");
    std::vector<double> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), a.shape(), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            pa.grad[i] += n.grad[i];
            pb.grad[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same(a, b, "mul");
    std::vector<double> out(a.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), a.shape(), {a, b}, [](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            pa.grad[i] += n.grad[i] * pb.value[i];
            pb.grad[i] += n.grad[i] * pa.value[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    std::vector<double> out(a.value());
    for (auto& v : out) v *= s;
    return make_result(std::move(out), a.shape(), {a}, [s](Node& n) {
        Node& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += s * n.grad[i];
    });
}

/// NaN passes through so non-finite values stay detectable downstream.
inline Var relu(const Var& x) {
    return detail::unary(
        x, [](double v) { return v < 0.0 ? 0.0 : v; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& x) {
    return detail::unary(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(const Var& x) {
    return detail::unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var silu(const Var& x) {
    return detail::unary(
        x, [](double v) { return v / (1.0 + std::exp(-v)); },
        [](double v, double) {
            double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 + v * (1.0 - s));
        });
}

// Exact (erf) GELU.
inline Var gelu(const Var& x) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt_2pi = 0.39894228040143267794;
    return detail::unary(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
        [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
}

inline Var reshape(const Var& x, Shape s) {
    if (numel(s) != x.size())
        throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " -> " + shape_str(s));
    return make_result(x.value(), std::move(s), {x}, [](Node& n) {
        Node& p = *n.parents[0];
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
    });
}

/// y[..., j] = sum_k x[..., k] * w[k, j] + b[j]. `b` may be undefined.
inline Var linear(const Var& x, const Var& w, const Var& b) {
    if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.dim(0))
        throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    const std::size_t in = w.dim(0), out = w.dim(1), rows = x.size() / in;
    if (b.defined() && b.size() != out) throw std::invalid_argument("linear: bias size");
    std::vector<double> y(rows * out, 0.0);
    const double* xv = x.value().data();
    const double* wv = w.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        double* yr = y.data() + r * out;
        if (b.defined()) std::copy(b.value().begin(), b.value().end(), yr);
        const double* xr = xv + r * in;
        for (std::size_t k = 0; k < in; ++k) {
            const double xk = xr[k];
            if (xk == 0.0) continue;
            const double* wk = wv + k * out;
            for (std::size_t j = 0; j < out; ++j) yr[j] += xk * wk[j];
        }
    }
    Shape s = x.shape();
    s.back() = out;
    std::vector<Var> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_result(std::move(y), std::move(s), std::move(parents), [in, out, rows](Node& n) {
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        const double* g = n.grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g + r * out;
            const double* xr = px.value.data() + r * in;
            double* gxr = px.grad.data() + r * in;
            for (std::size_t k = 0; k < in; ++k) {
                const double* wk = pw.value.data() + k * out;
                double* gwk = pw.grad.data() + k * out;
                double acc = 0.0;
                const double xk = xr[k];
                for (std::size_t j = 0; j < out; ++j) {
                    acc += gr[j] * wk[j];
                    gwk[j] += xk * gr[j];
                }
                gxr[k] += acc;
            }
        }
        if (n.parents.size() > 2) {
            Node& pb = *n.parents[2];
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < out; ++j) pb.grad[j] += g[r * out + j];
        }
    });
}

/// x viewed as [outer, mid, inner] plus y viewed as [outer, inner], broadcast
/// over `mid`. Covers bias-over-time and per-sample conditioning adds.
inline Var add_broadcast_mid(const Var& x, const Var& y, std::size_t outer, std::size_t mid, std::size_t inner) {
    if (x.size() != outer * mid * inner || y.size() != outer * inner)
        throw std::invalid_argument("add_broadcast_mid: " + shape_str(x.shape()) + " + " + shape_str(y.shape()));
    std::vector<double> out(x.value());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m)
            for (std::size_t i = 0; i < inner; ++i) out[(o * mid + m) * inner + i] += y.value()[o * inner + i];
    return make_result(std::move(out), x.shape(), {x, y}, [outer, mid, inner](Node& n) {
        Node& px = *n.parents[0];
        Node& py = *n.parents[1];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < mid; ++m)
                for (std::size_t i = 0; i < inner; ++i) {
                    const double g = n.grad[(o * mid + m) * inner + i];
                    px.grad[(o * mid + m) * inner + i] += g;
                    py.grad[o * inner + i] += g;
                }
    });
}

/// Broadcast-add a tensor of shape `y.shape()` onto the trailing dims of x.
inline Var add_broadcast_leading(const Var& x, const Var& y) {
    const std::size_t inner = y.size();
    if (inner == 0 || x.size() % inner != 0) throw std::invalid_argument("add_broadcast_leading: size mismatch");
    return add_broadcast_mid(x, reshape(y, {1, inner}), 1, x.size() / inner, inner);
}

/// Slice [start, start+len) of the last dimension.
inline Var slice_last(const Var& x, std::size_t start, std::size_t len) {
    const std::size_t last = x.shape().back();
    if (start + len > last) throw std::invalid_argument("slice_last: out of range");
    const std::size_t rows = x.size() / last;
    std::vector<double> out(rows * len);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < len; ++j) out[r * len + j] = x.value()[r * last + start + j];
    Shape s = x.shape();
    s.back() = len;
    return make_result(std::move(out), std::move(s), {x}, [rows, last, start, len](Node& n) {
        Node& p = *n.parents[0];
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < len; ++j) p.grad[r * last + start + j] += n.grad[r * len + j];
    });
}

inline Var concat_last(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_last: empty");
    const std::size_t rows = xs[0].size() / xs[0].shape().back();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& x : xs) {
        const std::size_t w = x.shape().back();
        if (x.size() / w != rows) throw std::invalid_argument("concat_last: row mismatch");
        widths.push_back(w);
        total += w;
    }
    std::vector<double> out(rows * total);
    std::size_t off = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < widths[i]; ++j) out[r * total + off + j] = xs[i].value()[r * widths[i] + j];
        off += widths[i];
    }
    Shape s = xs[0].shape();
    s.back() = total;
    return make_result(std::move(out), std::move(s), xs, [rows, total, widths](Node& n) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < n.parents.size(); ++i) {
            Node& p = *n.parents[i];
            if (p.requires_grad)
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < widths[i]; ++j) p.grad[r * widths[i] + j] += n.grad[r * total + off + j];
            off += widths[i];
        }
    });
}

/// [B, M, N] -> [B, N, M]
inline Var transpose_last2(const Var& x) {
    if (x.rank() < 2) throw std::invalid_argument("transpose_last2: rank < 2");
    const std::size_t m = x.shape()[x.rank() - 2], nn = x.shape().back();
    const std::size_t batch = x.size() / (m * nn);
    std::vector<double> out(x.size());
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < nn; ++j) out[b * m * nn + j * m + i] = x.value()[b * m * nn + i * nn + j];
    Shape s = x.shape();
    std::swap(s[s.size() - 1], s[s.size() - 2]);
    return make_result(std::move(out), std::move(s), {x}, [batch, m, nn](Node& n) {
        Node& p = *n.parents[0];
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < nn; ++j) p.grad[b * m * nn + i * nn + j] += n.grad[b * m * nn + j * m + i];
    });
}

/// Batched matmul: [B, M, K] x [B, K, N] -> [B, M, N]
inline Var bmm(const Var& a, const Var& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw std::invalid_argument("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t B = a.dim(0), M = a.dim(1), K = a.dim(2), N = b.dim(2);
    std::vector<double> out(B * M * N, 0.0);
    for (std::size_t s = 0; s < B; ++s)
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                const double av = a.value()[(s * M + i) * K + k];
                for (std::size_t j = 0; j < N; ++j) out[(s * M + i) * N + j] += av * b.value()[(s * K + k) * N + j];
            }
    return make_result(std::move(out), {B, M, N}, {a, b}, [B, M, K, N](Node& n) {
        Node& pa = *n.parents[0];
        Node& pb = *n.parents[1];
        for (std::size_t s = 0; s < B; ++s)
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    double acc = 0.0;
                    const double av = pa.value[(s * M + i) * K + k];
                    for (std::size_t j = 0; j < N; ++j) {
                        const double g = n.grad[(s * M + i) * N + j];
                        acc += g * pb.value[(s * K + k) * N + j];
                        pb.grad[(s * K + k) * N + j] += av * g;
                    }
                    pa.grad[(s * M + i) * K + k] += acc;
                }
    });
}

inline Var softmax_last(const Var& x) {
    const std::size_t last = x.shape().back(), rows = x.size() / last;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.value().data() + r * last;
        double mx = xr[0];
        for (std::size_t j = 1; j < last; ++j) mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < last; ++j) z += (out[r * last + j] = std::exp(xr[j] - mx));
        for (std::size_t j = 0; j < last; ++j) out[r * last + j] /= z;
    }
    return make_result(std::move(out), x.shape(), {x}, [rows, last](Node& n) {
        Node& p = *n.parents[0];
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < last; ++j) dot += n.grad[r * last + j] * n.value[r * last + j];
            for (std::size_t j = 0; j < last; ++j)
                p.grad[r * last + j] += n.value[r * last + j] * (n.grad[r * last + j] - dot);
        }
    });
}

/// Normalizes over the last dimension, then applies gain and bias.
inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    const std::size_t last = x.shape().back(), rows = x.size() / last;
    if (gamma.size() != last || beta.size() != last) throw std::invalid_argument("layer_norm: affine size");
    std::vector<double> out(x.size()), xhat(x.size()), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.value().data() + r * last;
        double mean = 0.0;
        for (std::size_t j = 0; j < last; ++j) mean += xr[j];
        mean /= static_cast<double>(last);
        double var = 0.0;
        for (std::size_t j = 0; j < last; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(last);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < last; ++j) {
            xhat[r * last + j] = (xr[j] - mean) * inv_std[r];
            out[r * last + j] = xhat[r * last + j] * gamma.value()[j] + beta.value()[j];
        }
    }
    return make_result(std::move(out), x.shape(), {x, gamma, beta},
                       [rows, last, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                           Node& px = *n.parents[0];
                           Node& pg = *n.parents[1];
                           Node& pb = *n.parents[2];
                           const double L = static_cast<double>(last);
                           for (std::size_t r = 0; r < rows; ++r) {
                               double sum_g = 0.0, sum_gx = 0.0;
                               for (std::size_t j = 0; j < last; ++j) {
                                   const double g = n.grad[r * last + j];
                                   pg.grad[j] += g * xhat[r * last + j];
                                   pb.grad[j] += g;
                                   const double gh = g * pg.value[j];
                                   sum_g += gh;
                                   sum_gx += gh * xhat[r * last + j];
                               }
                               for (std::size_t j = 0; j < last; ++j) {
                                   const double gh = n.grad[r * last + j] * pg.value[j];
                                   px.grad[r * last + j] +=
                                       inv_std[r] / L * (L * gh - sum_g - xhat[r * last + j] * sum_gx);
                               }
                           }
                       });
}

inline Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value()) s += v;
    return make_result({s}, {1}, {x}, [](Node& n) {
        Node& p = *n.parents[0];
        for (auto& g : p.grad) g += n.grad[0];
    });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Var mse(const Var& pred, const Var& target) {
    Var d = sub(pred, target);
    return mean(mul(d, d));
}

/// Depthwise causal convolution along the time axis.
/// x: [B, L, C], kernel: [C, L]. y[b, l, c] = sum_{k<=l} kernel[c, k] * x[b, l-k, c].
inline Var causal_depthwise_conv(const Var& x, const Var& kernel) {
    if (x.rank() != 3 || kernel.rank() != 2 || kernel.dim(0) != x.dim(2) || kernel.dim(1) < x.dim(1))
        throw std::invalid_argument("causal_depthwise_conv: " + shape_str(x.shape()) + " with kernel " +
                                    shape_str(kernel.shape()));
    const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2), KL = kernel.dim(1);
    std::vector<double> out(x.size(), 0.0);
    const auto& xv = x.value();
    const auto& kv = kernel.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t k = 0; k <= l; ++k)
                for (std::size_t c = 0; c < C; ++c) out[(b * L + l) * C + c] += kv[c * KL + k] * xv[(b * L + l - k) * C + c];
    return make_result(std::move(out), x.shape(), {x, kernel}, [B, L, C, KL](Node& n) {
        Node& px = *n.parents[0];
        Node& pk = *n.parents[1];
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t k = 0; k <= l; ++k)
                    for (std::size_t c = 0; c < C; ++c) {
                        const double g = n.grad[(b * L + l) * C + c];
                        px.grad[(b * L + l - k) * C + c] += g * pk.value[c * KL + k];
                        pk.grad[c * KL + k] += g * px.value[(b * L + l - k) * C + c];
                    }
    });
}

/// 2-D convolution on NHWC input with zero padding.
/// x: [B, H, W, Ci], w: [kh, kw, Ci, Co], b: [Co] (optional).
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || w.dim(2) != x.dim(3))
        throw std::invalid_argument("conv2d: " + shape_str(x.shape()) + " with weight " + shape_str(w.shape()));
    const std::size_t B = x.dim(0), H = x.dim(1), Wd = x.dim(2), Ci = x.dim(3);
    const std::size_t KH = w.dim(0), KW = w.dim(1), Co = w.dim(3);
    if (H + 2 * pad < KH || Wd + 2 * pad < KW) throw std::invalid_argument("conv2d: kernel larger than input");
    const std::size_t OH = (H + 2 * pad - KH) / stride + 1, OW = (Wd + 2 * pad - KW) / stride + 1;
    std::vector<double> out(B * OH * OW * Co, 0.0);
    const auto& xv = x.value();
    const auto& wv = w.value();
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t oy = 0; oy < OH; ++oy)
            for (std::size_t ox = 0; ox < OW; ++ox) {
                double* o = out.data() + ((n * OH + oy) * OW + ox) * Co;
                if (b.defined()) std::copy(b.value().begin(), b.value().end(), o);
                for (std::size_t ky = 0; ky < KH; ++ky) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t kx = 0; kx < KW; ++kx) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix < 0 || ix >= static_cast<long>(Wd)) continue;
                        const double* xi = xv.data() + ((n * H + static_cast<std::size_t>(iy)) * Wd + static_cast<std::size_t>(ix)) * Ci;
                        const double* wk = wv.data() + (ky * KW + kx) * Ci * Co;
                        for (std::size_t ci = 0; ci < Ci; ++ci) {
                            const double xval = xi[ci];
                            if (xval == 0.0) continue;
                            const double* wr = wk + ci * Co;
                            for (std::size_t co = 0; co < Co; ++co) o[co] += xval * wr[co];
                        }
                    }
                }
            }
    std::vector<Var> parents{x, w};
    if (b.defined()) parents.push_back(b);
    return make_result(std::move(out), {B, OH, OW, Co}, std::move(parents),
                       [B, H, Wd, Ci, KH, KW, Co, OH, OW, stride, pad](Node& nd) {
                           Node& px = *nd.parents[0];
                           Node& pw = *nd.parents[1];
                           for (std::size_t n = 0; n < B; ++n)
                               for (std::size_t oy = 0; oy < OH; ++oy)
                                   for (std::size_t ox = 0; ox < OW; ++ox) {
                                       const double* g = nd.grad.data() + ((n * OH + oy) * OW + ox) * Co;
                                       for (std::size_t ky = 0; ky < KH; ++ky) {
                                           const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                                           if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                           for (std::size_t kx = 0; kx < KW; ++kx) {
                                               const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                                               if (ix < 0 || ix >= static_cast<long>(Wd)) continue;
                                               const std::size_t xoff =
                                                   ((n * H + static_cast<std::size_t>(iy)) * Wd + static_cast<std::size_t>(ix)) * Ci;
                                               const std::size_t woff = (ky * KW + kx) * Ci * Co;
                                               for (std::size_t ci = 0; ci < Ci; ++ci) {
                                                   const double* wr = pw.value.data() + woff + ci * Co;
                                                   double* gw = pw.grad.data() + woff + ci * Co;
                                                   const double xval = px.value[xoff + ci];
                                                   double acc = 0.0;
                                                   for (std::size_t co = 0; co < Co; ++co) {
                                                       acc += g[co] * wr[co];
                                                       gw[co] += xval * g[co];
                                                   }
                                                   px.grad[xoff + ci] += acc;
                                               }
                                           }
                                       }
                                   }
                           if (nd.parents.size() > 2) {
                               Node& pb = *nd.parents[2];
                               for (std::size_t i = 0; i < nd.grad.size(); ++i) pb.grad[i % Co] += nd.grad[i];
                           }
                       });
}

/// Adaptive average pooling of NHWC input to [B, P, P, C].
inline Var adaptive_avg_pool(const Var& x, std::size_t P) {
    if (x.rank() != 4) throw std::invalid_argument("adaptive_avg_pool: expects NHWC");
    const std::size_t B = x.dim(0), H = x.dim(1), Wd = x.dim(2), C = x.dim(3);
    auto lo = [](std::size_t i, std::size_t in, std::size_t outn) { return (i * in) / outn; };
    auto hi = [](std::size_t i, std::size_t in, std::size_t outn) { return ((i + 1) * in + outn - 1) / outn; };
    std::vector<double> out(B * P * P * C, 0.0);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t py = 0; py < P; ++py)
            for (std::size_t px = 0; px < P; ++px) {
                const std::size_t y0 = lo(py, H, P), y1 = hi(py, H, P), x0 = lo(px, Wd, P), x1 = hi(px, Wd, P);
                const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
                double* o = out.data() + ((n * P + py) * P + px) * C;
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t xx = x0; xx < x1; ++xx)
                        for (std::size_t c = 0; c < C; ++c) o[c] += x.value()[((n * H + y) * Wd + xx) * C + c] * inv;
            }
    return make_result(std::move(out), {B, P, P, C}, {x}, [B, H, Wd, C, P, lo, hi](Node& nd) {
        Node& p = *nd.parents[0];
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t py = 0; py < P; ++py)
                for (std::size_t px = 0; px < P; ++px) {
                    const std::size_t y0 = lo(py, H, P), y1 = hi(py, H, P), x0 = lo(px, Wd, P), x1 = hi(px, Wd, P);
                    const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
                    const double* g = nd.grad.data() + ((n * P + py) * P + px) * C;
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xx = x0; xx < x1; ++xx)
                            for (std::size_t c = 0; c < C; ++c) p.grad[((n * H + y) * Wd + xx) * C + c] += g[c] * inv;
                }
    });
}


/// x[..., c] * d[c]
inline Var mul_broadcast_last(const Var& x, const Var& d) {
    const std::size_t C = d.size();
    if (x.shape().back() != C) throw std::invalid_argument("mul_broadcast_last: " + shape_str(x.shape()) + " * " + shape_str(d.shape()));
    std::vector<double> out(x.value());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= d.value()[i % C];
    return make_result(std::move(out), x.shape(), {x, d}, [C](Node& n) {
        Node& px = *n.parents[0];
        Node& pd = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            px.grad[i] += n.grad[i] * pd.value[i % C];
            pd.grad[i % C] += n.grad[i] * px.value[i];
        }
    });
}

/// Convolution kernel of a diagonal state-space model, one per channel.
/// For channel c with modes m: dt = exp(log_dt[c]), a = -exp(log_neg_re[c,m]) + i*im[c,m],
/// E = exp(dt*a), Bbar = (E - 1)/a (zero-order hold, B = 1), and
///   K[c, l] = 2 Re( sum_m (c_re + i c_im)[c,m] * Bbar * E^l ),  l = 0..L-1.
inline Var s4d_kernel(const Var& log_dt, const Var& log_neg_re, const Var& im, const Var& c_re, const Var& c_im,
                      std::size_t L) {
    using cplx = std::complex<double>;
    const std::size_t C = log_dt.size(), M = im.size() / C;
    if (log_neg_re.size() != C * M || c_re.size() != C * M || c_im.size() != C * M)
        throw std::invalid_argument("s4d_kernel: parameter shapes disagree");
    std::vector<double> out(C * L, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        const double dt = std::exp(log_dt.value()[c]);
        for (std::size_t m = 0; m < M; ++m) {
            const std::size_t k = c * M + m;
            const cplx a(-std::exp(log_neg_re.value()[k]), im.value()[k]);
            const cplx E = std::exp(dt * a);
            const cplx coeff = cplx(c_re.value()[k], c_im.value()[k]) * (E - 1.0) / a;
            cplx p(1.0, 0.0);
            for (std::size_t l = 0; l < L; ++l) {
                out[c * L + l] += 2.0 * (coeff * p).real();
                p *= E;
            }
        }
    }
    return make_result(std::move(out), {C, L}, {log_dt, log_neg_re, im, c_re, c_im}, [C, M, L](Node& n) {
        using cplx = std::complex<double>;
        Node& pdt = *n.parents[0];
        Node& pre = *n.parents[1];
        Node& pim = *n.parents[2];
        Node& pcr = *n.parents[3];
        Node& pci = *n.parents[4];
        for (std::size_t c = 0; c < C; ++c) {
            const double dt = std::exp(pdt.value[c]);
            for (std::size_t m = 0; m < M; ++m) {
                const std::size_t k = c * M + m;
                const double neg_re = std::exp(pre.value[k]);
                const cplx a(-neg_re, pim.value[k]);
                const cplx E = std::exp(dt * a);
                const cplx Cc(pcr.value[k], pci.value[k]);
                const cplx Bbar = (E - 1.0) / a;
                const cplx dBbar_da = (dt * E * a - (E - 1.0)) / (a * a);
                cplx g_cc(0.0, 0.0), g_a(0.0, 0.0), g_dt(0.0, 0.0);
                cplx p(1.0, 0.0);  // E^l
                for (std::size_t l = 0; l < L; ++l) {
                    const double g = 2.0 * n.grad[c * L + l];
                    const double ld = static_cast<double>(l);
                    // f_l = Cc * Bbar * E^l, holomorphic in Cc, a and dt.
                    g_cc += g * Bbar * p;
                    g_a += g * Cc * (dBbar_da * p + Bbar * ld * dt * p);
                    g_dt += g * Cc * (E * p + (E - 1.0) * ld * p);
                    p *= E;
                }
                pcr.grad[k] += g_cc.real();
                pci.grad[k] += (g_cc * cplx(0.0, 1.0)).real();
                pre.grad[k] += (g_a * -neg_re).real();
                pim.grad[k] += (g_a * cplx(0.0, 1.0)).real();
                pdt.grad[c] += g_dt.real() * dt;
            }
        }
    });
}

}  // namespace mdiff::ag
