#pragma once

// Minimal reverse-mode autodiff over dense double tensors. Graphs are built
// eagerly (every op computes its value on construction) and freed when the
// last Var handle goes away; parameters are long-lived leaf nodes shared
// across step graphs. Loop orders in every kernel are fixed, so forward and
// backward are bit-deterministic.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "focal3d/tensor.hpp"

namespace focal3d::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor t;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
    bool requires_grad = true;
    std::string name;

    int64_t numel() const { return t.numel(); }
};

inline Var make_var(Tensor t, bool requires_grad = true, std::string name = "") {
    auto n = std::make_shared<Node>();
    n->t = std::move(t);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    return n;
}

inline Var constant(Tensor t, std::string name = "") { return make_var(std::move(t), false, std::move(name)); }
inline Var param(Tensor t, std::string name) { return make_var(std::move(t), true, std::move(name)); }

inline Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward,
                   std::string name = "") {
    auto n = std::make_shared<Node>();
    n->t = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    n->requires_grad = any;
    if (any) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward);
    }
    n->name = std::move(name);
    return n;
}

[[noreturn]] inline void shape_fail(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

inline void check_same_shape(const std::string& op, const Var& a, const Var& b) {
    if (!a->t.same_shape(b->t))
        shape_fail(op, "shape mismatch " + a->t.shape_str() + " vs " + b->t.shape_str());
}

// Run reverse-mode accumulation from a scalar root. Gradients accumulate into
// each node's grad slot; callers zero/drop parameter grads between steps.
inline void backward(const Var& root, double seed = 1.0) {
    if (!root) throw std::logic_error("backward: null root");
    if (root->numel() != 1) throw std::logic_error("backward: root must be scalar");
    // iterative DFS topological sort
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // interior-node gradients are per-sweep scratch; leaf (parameter) grads accumulate
    for (Node* n : order)
        if (n->backward_fn) n->t.zero_grad();
    root->t.ensure_grad();
    root->t.grad[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->t.grad.empty()) n->backward_fn(*n);
    }
}

// --- elementwise ------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    check_same_shape("add", a, b);
    Tensor out = a->t;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += b->t.v[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->t.ensure_grad();
            for (size_t i = 0; i < n.t.grad.size(); ++i) a->t.grad[i] += n.t.grad[i];
        }
        if (b->requires_grad) {
            b->t.ensure_grad();
            for (size_t i = 0; i < n.t.grad.size(); ++i) b->t.grad[i] += n.t.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape("sub", a, b);
    Tensor out = a->t;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= b->t.v[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->t.ensure_grad();
            for (size_t i = 0; i < n.t.grad.size(); ++i) a->t.grad[i] += n.t.grad[i];
        }
        if (b->requires_grad) {
            b->t.ensure_grad();
            for (size_t i = 0; i < n.t.grad.size(); ++i) b->t.grad[i] -= n.t.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape("mul", a, b);
    Tensor out = a->t;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= b->t.v[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            a->t.ensure_grad();
            for (size_t i = 0; i < n.t.grad.size(); ++i) a->t.grad[i] += n.t.grad[i] * b->t.v[i];
        }
        if (b->requires_grad) {
            b->t.ensure_grad();
            for (size_t i = 0; i < n.t.grad.size(); ++i) b->t.grad[i] += n.t.grad[i] * a->t.v[i];
        }
    });
}

inline Var scale(const Var& a, double c) {
    Tensor out = a->t;
    for (auto& v : out.v) v *= c;
    return make_op(std::move(out), {a}, [a, c](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i) a->t.grad[i] += c * n.t.grad[i];
    });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var add_const(const Var& a, double c) {
    Tensor out = a->t;
    for (auto& v : out.v) v += c;
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i) a->t.grad[i] += n.t.grad[i];
    });
}

// c - a
inline Var rsub_const(double c, const Var& a) {
    Tensor out = a->t;
    for (auto& v : out.v) v = c - v;
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i) a->t.grad[i] -= n.t.grad[i];
    });
}

inline Var vlog(const Var& a) {
    Tensor out = a->t;
    for (auto& v : out.v) v = std::log(v);
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i) a->t.grad[i] += n.t.grad[i] / a->t.v[i];
    });
}

inline Var vpow(const Var& a, double e) {
    Tensor out = a->t;
    for (auto& v : out.v) v = std::pow(v, e);
    return make_op(std::move(out), {a}, [a, e](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i)
            a->t.grad[i] += n.t.grad[i] * e * std::pow(a->t.v[i], e - 1.0);
    });
}

inline Var vsigmoid(const Var& a) {
    Tensor out = a->t;
    for (auto& v : out.v) v = 1.0 / (1.0 + std::exp(-v));
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i) {
            const double s = n.t.v[i];
            a->t.grad[i] += n.t.grad[i] * s * (1.0 - s);
        }
    });
}

inline Var vrelu(const Var& a) {
    Tensor out = a->t;
    for (auto& v : out.v) v = v > 0.0 ? v : 0.0;
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i)
            if (a->t.v[i] > 0.0) a->t.grad[i] += n.t.grad[i];
    });
}

inline Var vclamp(const Var& a, double lo, double hi) {
    Tensor out = a->t;
    for (auto& v : out.v) v = std::min(std::max(v, lo), hi);
    return make_op(std::move(out), {a}, [a, lo, hi](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i)
            if (a->t.v[i] > lo && a->t.v[i] < hi) a->t.grad[i] += n.t.grad[i];
    });
}

// Per-component Huber with transition at 1, applied elementwise.
inline Var vhuber(const Var& a) {
    Tensor out = a->t;
    for (auto& v : out.v) {
        const double d = std::abs(v);
        v = d <= 1.0 ? 0.5 * d * d : d - 0.5;
    }
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i)
            a->t.grad[i] += n.t.grad[i] * std::clamp(a->t.v[i], -1.0, 1.0);
    });
}

inline Var vsum(const Var& a) {
    double s = 0.0;
    for (double v : a->t.v) s += v;
    return make_op(Tensor::scalar(s), {a}, [a](Node& n) {
        a->t.ensure_grad();
        const double g = n.t.grad[0];
        for (auto& gv : a->t.grad) gv += g;
    });
}

inline Var reshape(const Var& a, std::vector<int64_t> shape) {
    if (Tensor::numel_of(shape) != a->numel())
        shape_fail("reshape", "element count mismatch for " + a->t.shape_str());
    Tensor out(std::move(shape), a->t.v);
    return make_op(std::move(out), {a}, [a](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < n.t.grad.size(); ++i) a->t.grad[i] += n.t.grad[i];
    });
}

// Gather flat elements; backward scatter-adds.
inline Var gather(const Var& a, std::vector<int64_t> idx) {
    Tensor out({static_cast<int64_t>(idx.size())});
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a->numel()) shape_fail("gather", "index out of range");
        out.v[i] = a->t.v[static_cast<size_t>(idx[i])];
    }
    return make_op(std::move(out), {a}, [a, idx = std::move(idx)](Node& n) {
        a->t.ensure_grad();
        for (size_t i = 0; i < idx.size(); ++i)
            a->t.grad[static_cast<size_t>(idx[i])] += n.t.grad[i];
    });
}

// --- dense linear algebra -----------------------------------------------------

// (n,k) x (k,m) -> (n,m)
inline Var matmul(const Var& a, const Var& b, const std::string& name = "matmul") {
    if (a->t.rank() != 2 || b->t.rank() != 2 || a->t.dim(1) != b->t.dim(0))
        shape_fail(name, "incompatible shapes " + a->t.shape_str() + " x " + b->t.shape_str());
    const int64_t n = a->t.dim(0), k = a->t.dim(1), m = b->t.dim(1);
    Tensor out({n, m});
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = a->t.v.data() + i * k;
        double* orow = out.v.data() + i * m;
        for (int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = b->t.v.data() + kk * m;
            for (int64_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    return make_op(std::move(out), {a, b}, [a, b, n, k, m](Node& node) {
        const double* g = node.t.grad.data();
        if (a->requires_grad) {
            a->t.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    const double* brow = b->t.v.data() + kk * m;
                    const double* grow = g + i * m;
                    for (int64_t j = 0; j < m; ++j) acc += grow[j] * brow[j];
                    a->t.grad[static_cast<size_t>(i * k + kk)] += acc;
                }
        }
        if (b->requires_grad) {
            b->t.ensure_grad();
            for (int64_t kk = 0; kk < k; ++kk)
                for (int64_t i = 0; i < n; ++i) {
                    const double av = a->t.v[static_cast<size_t>(i * k + kk)];
                    const double* grow = g + i * m;
                    double* brow = b->t.grad.data() + kk * m;
                    for (int64_t j = 0; j < m; ++j) brow[j] += av * grow[j];
                }
        }
    }, name);
}

// x (n,m) + b (m) broadcast over rows
inline Var bias_add_rows(const Var& x, const Var& b, const std::string& name = "bias") {
    if (x->t.rank() != 2 || b->t.rank() != 1 || x->t.dim(1) != b->t.dim(0))
        shape_fail(name, "bias shape " + b->t.shape_str() + " does not match " + x->t.shape_str());
    const int64_t n = x->t.dim(0), m = x->t.dim(1);
    Tensor out = x->t;
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) out.v[static_cast<size_t>(i * m + j)] += b->t.v[static_cast<size_t>(j)];
    return make_op(std::move(out), {x, b}, [x, b, n, m](Node& node) {
        if (x->requires_grad) {
            x->t.ensure_grad();
            for (size_t i = 0; i < node.t.grad.size(); ++i) x->t.grad[i] += node.t.grad[i];
        }
        if (b->requires_grad) {
            b->t.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < m; ++j)
                    b->t.grad[static_cast<size_t>(j)] += node.t.grad[static_cast<size_t>(i * m + j)];
        }
    });
}

// Normalization with fixed per-channel statistics (mean/var are constants in
// the graph; the training loop refreshes them outside the tape).
// Channel axis: 1 for (n,C) row matrices, 0 otherwise ((C,...) feature maps).
inline Var batchnorm(const Var& x, const Var& scale_p, const Var& shift_p, const Var& mean_c,
                     const Var& var_c, double eps = 1e-5, const std::string& name = "batchnorm") {
    const bool rows = x->t.rank() == 2;
    const int64_t C = rows ? x->t.dim(1) : x->t.dim(0);
    if (scale_p->numel() != C || shift_p->numel() != C || mean_c->numel() != C || var_c->numel() != C)
        shape_fail(name, "channel parameter size mismatch for " + x->t.shape_str());
    const int64_t inner = rows ? 1 : x->numel() / C;
    const int64_t outer = rows ? x->t.dim(0) : 1;
    std::vector<double> inv_std(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c)
        inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(var_c->t.v[static_cast<size_t>(c)] + eps);

    Tensor out = x->t;
    auto channel_of = [&](int64_t flat) { return rows ? flat % C : (flat / inner) % C; };
    for (int64_t i = 0; i < x->numel(); ++i) {
        const int64_t c = channel_of(i);
        out.v[static_cast<size_t>(i)] =
            scale_p->t.v[static_cast<size_t>(c)] *
                (out.v[static_cast<size_t>(i)] - mean_c->t.v[static_cast<size_t>(c)]) *
                inv_std[static_cast<size_t>(c)] +
            shift_p->t.v[static_cast<size_t>(c)];
    }
    (void)outer;
    return make_op(std::move(out), {x, scale_p, shift_p}, [x, scale_p, shift_p, mean_c, inv_std,
                                                           C, inner, rows](Node& node) {
        auto channel_of = [&](int64_t flat) { return rows ? flat % C : (flat / inner) % C; };
        if (x->requires_grad) x->t.ensure_grad();
        if (scale_p->requires_grad) scale_p->t.ensure_grad();
        if (shift_p->requires_grad) shift_p->t.ensure_grad();
        for (int64_t i = 0; i < static_cast<int64_t>(node.t.grad.size()); ++i) {
            const int64_t c = channel_of(i);
            const double g = node.t.grad[static_cast<size_t>(i)];
            const double xhat = (x->t.v[static_cast<size_t>(i)] - mean_c->t.v[static_cast<size_t>(c)]) *
                                inv_std[static_cast<size_t>(c)];
            if (x->requires_grad)
                x->t.grad[static_cast<size_t>(i)] +=
                    g * scale_p->t.v[static_cast<size_t>(c)] * inv_std[static_cast<size_t>(c)];
            if (scale_p->requires_grad) scale_p->t.grad[static_cast<size_t>(c)] += g * xhat;
            if (shift_p->requires_grad) shift_p->t.grad[static_cast<size_t>(c)] += g;
        }
    }, name);
}

// Batch-statistics normalization: per-channel mean/variance are computed from
// x and differentiated through. Channel axis as above. The statistics
// accumulate over sorted per-channel values, so the result is bit-exactly
// invariant to any reordering of the reduced axis (the VFE permutation
// contract relies on this).
inline Var batchnorm_train(const Var& x, const Var& scale_p, const Var& shift_p, double eps,
                           std::vector<double>* batch_mean_out, std::vector<double>* batch_var_out,
                           const std::string& name = "batchnorm") {
    const bool rows = x->t.rank() == 2;
    const int64_t C = rows ? x->t.dim(1) : x->t.dim(0);
    if (scale_p->numel() != C || shift_p->numel() != C)
        shape_fail(name, "channel parameter size mismatch for " + x->t.shape_str());
    const int64_t inner = rows ? 1 : x->numel() / C;
    const int64_t n_per_c = x->numel() / C;
    auto channel_of = [rows, C, inner](int64_t flat) { return rows ? flat % C : (flat / inner) % C; };

    std::vector<double> mu(static_cast<size_t>(C), 0.0), var(static_cast<size_t>(C), 0.0);
    {
        std::vector<double> column(static_cast<size_t>(n_per_c));
        for (int64_t c = 0; c < C; ++c) {
            if (rows) {
                for (int64_t r = 0; r < n_per_c; ++r)
                    column[static_cast<size_t>(r)] = x->t.v[static_cast<size_t>(r * C + c)];
            } else {
                const double* base = x->t.v.data() + c * inner;
                std::copy_n(base, inner, column.begin());
            }
            std::sort(column.begin(), column.end());
            double m = 0.0;
            for (double v : column) m += v;
            m /= static_cast<double>(n_per_c);
            double s = 0.0;
            for (double v : column) s += (v - m) * (v - m);
            mu[static_cast<size_t>(c)] = m;
            var[static_cast<size_t>(c)] = s / static_cast<double>(n_per_c);
        }
    }
    if (batch_mean_out) *batch_mean_out = mu;
    if (batch_var_out) *batch_var_out = var;

    std::vector<double> inv_std(static_cast<size_t>(C));
    for (int64_t c = 0; c < C; ++c)
        inv_std[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);

    Tensor out = x->t;
    for (int64_t i = 0; i < x->numel(); ++i) {
        const int64_t c = channel_of(i);
        out.v[static_cast<size_t>(i)] =
            scale_p->t.v[static_cast<size_t>(c)] *
                (out.v[static_cast<size_t>(i)] - mu[static_cast<size_t>(c)]) *
                inv_std[static_cast<size_t>(c)] +
            shift_p->t.v[static_cast<size_t>(c)];
    }
    return make_op(std::move(out), {x, scale_p, shift_p},
                   [x, scale_p, shift_p, mu, inv_std, C, inner, rows, n_per_c](Node& node) {
        auto channel_of = [rows, C, inner](int64_t flat) { return rows ? flat % C : (flat / inner) % C; };
        // per-channel reductions of g and g*xhat
        std::vector<double> sum_g(static_cast<size_t>(C), 0.0), sum_gx(static_cast<size_t>(C), 0.0);
        for (int64_t i = 0; i < static_cast<int64_t>(node.t.grad.size()); ++i) {
            const int64_t c = channel_of(i);
            const double g = node.t.grad[static_cast<size_t>(i)];
            const double xhat = (x->t.v[static_cast<size_t>(i)] - mu[static_cast<size_t>(c)]) *
                                inv_std[static_cast<size_t>(c)];
            sum_g[static_cast<size_t>(c)] += g;
            sum_gx[static_cast<size_t>(c)] += g * xhat;
        }
        if (scale_p->requires_grad) {
            scale_p->t.ensure_grad();
            for (int64_t c = 0; c < C; ++c)
                scale_p->t.grad[static_cast<size_t>(c)] += sum_gx[static_cast<size_t>(c)];
        }
        if (shift_p->requires_grad) {
            shift_p->t.ensure_grad();
            for (int64_t c = 0; c < C; ++c)
                shift_p->t.grad[static_cast<size_t>(c)] += sum_g[static_cast<size_t>(c)];
        }
        if (x->requires_grad) {
            x->t.ensure_grad();
            const double inv_n = 1.0 / static_cast<double>(n_per_c);
            for (int64_t i = 0; i < static_cast<int64_t>(node.t.grad.size()); ++i) {
                const int64_t c = channel_of(i);
                const double g = node.t.grad[static_cast<size_t>(i)];
                const double xhat = (x->t.v[static_cast<size_t>(i)] - mu[static_cast<size_t>(c)]) *
                                    inv_std[static_cast<size_t>(c)];
                x->t.grad[static_cast<size_t>(i)] +=
                    scale_p->t.v[static_cast<size_t>(c)] * inv_std[static_cast<size_t>(c)] *
                    (g - inv_n * sum_g[static_cast<size_t>(c)] -
                     xhat * inv_n * sum_gx[static_cast<size_t>(c)]);
            }
        }
    }, name);
}

// --- convolutions ------------------------------------------------------------

namespace detail {
inline int64_t conv_out(int64_t in, int64_t k, int64_t s, int64_t p) {
    const int64_t o = (in + 2 * p - k) / s + 1;
    return o > 0 ? o : 0;
}

// Dot product with a fixed 4-lane accumulation tree: deterministic (the
// reassociation is pinned by the code, not the optimizer) and vectorizable.
inline double dot_step(const double* a, const double* b, int64_t n, int64_t b_stride) {
    double acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0;
    int64_t i = 0;
    if (b_stride == 1) {
        for (; i + 4 <= n; i += 4) {
            acc0 += a[i] * b[i];
            acc1 += a[i + 1] * b[i + 1];
            acc2 += a[i + 2] * b[i + 2];
            acc3 += a[i + 3] * b[i + 3];
        }
        for (; i < n; ++i) acc0 += a[i] * b[i];
    } else {
        for (; i + 4 <= n; i += 4) {
            acc0 += a[i] * b[i * b_stride];
            acc1 += a[i + 1] * b[(i + 1) * b_stride];
            acc2 += a[i + 2] * b[(i + 2) * b_stride];
            acc3 += a[i + 3] * b[(i + 3) * b_stride];
        }
        for (; i < n; ++i) acc0 += a[i] * b[i * b_stride];
    }
    return (acc0 + acc1) + (acc2 + acc3);
}

inline int64_t floor_div(int64_t a, int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline int64_t ceil_div_i(int64_t a, int64_t b) { return a >= 0 ? (a + b - 1) / b : -(-a / b); }

// input range [lo, hi) such that 0 <= i*s + koff - crop < out
inline void deconv_range(int64_t in, int64_t out, int64_t s, int64_t koff, int64_t crop,
                         int64_t& lo, int64_t& hi) {
    lo = std::max<int64_t>(0, ceil_div_i(crop - koff, s));
    hi = std::min(in, floor_div(out - 1 + crop - koff, s) + 1);
    if (hi < lo) hi = lo;
}
// valid output range [lo, hi) such that 0 <= o*s - p + koff < in
inline void valid_range(int64_t in, int64_t out, int64_t s, int64_t p, int64_t koff, int64_t& lo,
                        int64_t& hi) {
    int64_t l = 0;
    if (koff < p) l = (p - koff + s - 1) / s;
    const int64_t num = in - 1 - koff + p;  // may be negative: then no valid tap
    const int64_t h = num < 0 ? 0 : num / s + 1;
    lo = std::max<int64_t>(0, l);
    hi = std::min(out, h);
    if (hi < lo) hi = lo;
}
}  // namespace detail

// x (C, D, H, W), w (F, C, kd, kh, kw), b (F) -> (F, D', H', W')
inline Var conv3d(const Var& x, const Var& w, const Var& b, std::array<int64_t, 3> stride,
                  std::array<int64_t, 3> pad, const std::string& name = "conv3d") {
    if (x->t.rank() != 4 || w->t.rank() != 5)
        shape_fail(name, "expected (C,D,H,W) input and (F,C,kd,kh,kw) kernel, got " +
                             x->t.shape_str() + " and " + w->t.shape_str());
    const int64_t C = x->t.dim(0), D = x->t.dim(1), H = x->t.dim(2), W = x->t.dim(3);
    const int64_t F = w->t.dim(0), kd = w->t.dim(2), kh = w->t.dim(3), kw = w->t.dim(4);
    if (w->t.dim(1) != C)
        shape_fail(name, "kernel channels " + w->t.shape_str() + " do not match input " + x->t.shape_str());
    if (b->numel() != F) shape_fail(name, "bias size does not match filter count");
    const auto [sd, sh, sw] = stride;
    const auto [pd, ph, pw] = pad;
    const int64_t OD = detail::conv_out(D, kd, sd, pd);
    const int64_t OH = detail::conv_out(H, kh, sh, ph);
    const int64_t OW = detail::conv_out(W, kw, sw, pw);
    if (OD <= 0 || OH <= 0 || OW <= 0) shape_fail(name, "empty output for input " + x->t.shape_str());

    Tensor out({F, OD, OH, OW});
    const int64_t ospatial = OD * OH * OW;
    for (int64_t f = 0; f < F; ++f)
        std::fill_n(out.v.begin() + f * ospatial, ospatial, b->t.v[static_cast<size_t>(f)]);

    const double* xv = x->t.v.data();
    const double* wv = w->t.v.data();
    for (int64_t f = 0; f < F; ++f) {
        double* ob = out.v.data() + f * ospatial;
        for (int64_t c = 0; c < C; ++c) {
            const double* xc = xv + c * D * H * W;
            for (int64_t zk = 0; zk < kd; ++zk) {
                int64_t od_lo, od_hi;
                detail::valid_range(D, OD, sd, pd, zk, od_lo, od_hi);
                for (int64_t yk = 0; yk < kh; ++yk) {
                    int64_t oh_lo, oh_hi;
                    detail::valid_range(H, OH, sh, ph, yk, oh_lo, oh_hi);
                    for (int64_t xk = 0; xk < kw; ++xk) {
                        int64_t ow_lo, ow_hi;
                        detail::valid_range(W, OW, sw, pw, xk, ow_lo, ow_hi);
                        const double wval =
                            wv[(((f * C + c) * kd + zk) * kh + yk) * kw + xk];
                        if (wval == 0.0) continue;
                        for (int64_t od = od_lo; od < od_hi; ++od) {
                            const int64_t id = od * sd - pd + zk;
                            for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                                const int64_t ih = oh * sh - ph + yk;
                                const double* xrow = xc + (id * H + ih) * W;
                                double* orow = ob + (od * OH + oh) * OW;
                                int64_t iw = ow_lo * sw - pw + xk;
                                for (int64_t ow = ow_lo; ow < ow_hi; ++ow, iw += sw)
                                    orow[ow] += wval * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }

    return make_op(std::move(out), {x, w, b},
                   [x, w, b, C, D, H, W, F, kd, kh, kw, sd, sh, sw, pd, ph, pw, OD, OH, OW](Node& node) {
        const double* g = node.t.grad.data();
        const int64_t ospatial = OD * OH * OW;
        if (b->requires_grad) {
            b->t.ensure_grad();
            for (int64_t f = 0; f < F; ++f) {
                double acc = 0.0;
                const double* gb = g + f * ospatial;
                for (int64_t i = 0; i < ospatial; ++i) acc += gb[i];
                b->t.grad[static_cast<size_t>(f)] += acc;
            }
        }
        // dW and dX run as separate sweeps so each inner loop vectorizes
        if (w->requires_grad) {
            w->t.ensure_grad();
            for (int64_t f = 0; f < F; ++f) {
                const double* gb = g + f * ospatial;
                for (int64_t c = 0; c < C; ++c) {
                    const double* xc = x->t.v.data() + c * D * H * W;
                    for (int64_t zk = 0; zk < kd; ++zk) {
                        int64_t od_lo, od_hi;
                        detail::valid_range(D, OD, sd, pd, zk, od_lo, od_hi);
                        for (int64_t yk = 0; yk < kh; ++yk) {
                            int64_t oh_lo, oh_hi;
                            detail::valid_range(H, OH, sh, ph, yk, oh_lo, oh_hi);
                            for (int64_t xk = 0; xk < kw; ++xk) {
                                int64_t ow_lo, ow_hi;
                                detail::valid_range(W, OW, sw, pw, xk, ow_lo, ow_hi);
                                double wacc = 0.0;
                                for (int64_t od = od_lo; od < od_hi; ++od) {
                                    const int64_t id = od * sd - pd + zk;
                                    for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        const int64_t ih = oh * sh - ph + yk;
                                        const double* xrow =
                                            xc + (id * H + ih) * W + ow_lo * sw - pw + xk;
                                        const double* grow = gb + (od * OH + oh) * OW + ow_lo;
                                        wacc += detail::dot_step(grow, xrow, ow_hi - ow_lo, sw);
                                    }
                                }
                                w->t.grad[static_cast<size_t>((((f * C + c) * kd + zk) * kh + yk) * kw +
                                                              xk)] += wacc;
                            }
                        }
                    }
                }
            }
        }
        if (x->requires_grad) {
            x->t.ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                double* dxc = x->t.grad.data() + c * D * H * W;
                for (int64_t f = 0; f < F; ++f) {
                    const double* gb = g + f * ospatial;
                    for (int64_t zk = 0; zk < kd; ++zk) {
                        int64_t od_lo, od_hi;
                        detail::valid_range(D, OD, sd, pd, zk, od_lo, od_hi);
                        for (int64_t yk = 0; yk < kh; ++yk) {
                            int64_t oh_lo, oh_hi;
                            detail::valid_range(H, OH, sh, ph, yk, oh_lo, oh_hi);
                            for (int64_t xk = 0; xk < kw; ++xk) {
                                int64_t ow_lo, ow_hi;
                                detail::valid_range(W, OW, sw, pw, xk, ow_lo, ow_hi);
                                const double wval =
                                    w->t.v[static_cast<size_t>((((f * C + c) * kd + zk) * kh + yk) * kw + xk)];
                                if (wval == 0.0) continue;
                                for (int64_t od = od_lo; od < od_hi; ++od) {
                                    const int64_t id = od * sd - pd + zk;
                                    for (int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        const int64_t ih = oh * sh - ph + yk;
                                        double* dxrow = dxc + (id * H + ih) * W;
                                        const double* grow = gb + (od * OH + oh) * OW;
                                        const int64_t off = xk - pw;
                                        if (sw == 1) {
                                            for (int64_t ow = ow_lo; ow < ow_hi; ++ow)
                                                dxrow[ow + off] += wval * grow[ow];
                                        } else {
                                            for (int64_t ow = ow_lo; ow < ow_hi; ++ow)
                                                dxrow[ow * sw + off] += wval * grow[ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }, name);
}

// x (C, H, W), w (F, C, kh, kw), b (F) -> (F, H', W')
inline Var conv2d(const Var& x, const Var& w, const Var& b, std::array<int64_t, 2> stride,
                  std::array<int64_t, 2> pad, const std::string& name = "conv2d") {
    if (x->t.rank() != 3 || w->t.rank() != 4)
        shape_fail(name, "expected (C,H,W) input and (F,C,kh,kw) kernel, got " + x->t.shape_str() +
                             " and " + w->t.shape_str());
    // reuse the 3-D kernel with a unit depth axis
    auto x4 = reshape(x, {x->t.dim(0), 1, x->t.dim(1), x->t.dim(2)});
    auto w5 = reshape(w, {w->t.dim(0), w->t.dim(1), 1, w->t.dim(2), w->t.dim(3)});
    auto y = conv3d(x4, w5, b, {1, stride[0], stride[1]}, {0, pad[0], pad[1]}, name);
    return reshape(y, {y->t.dim(0), y->t.dim(2), y->t.dim(3)});
}

// Transposed convolution. x (C, H, W), w (C, F, kh, kw), b (F); output is the
// full (H-1)*s + k map center-cropped to the declared shape.
inline Var deconv2d(const Var& x, const Var& w, const Var& b, std::array<int64_t, 2> stride,
                    std::array<int64_t, 2> out_shape, const std::string& name = "deconv2d") {
    if (x->t.rank() != 3 || w->t.rank() != 4)
        shape_fail(name, "expected (C,H,W) input and (C,F,kh,kw) kernel, got " + x->t.shape_str() +
                             " and " + w->t.shape_str());
    const int64_t C = x->t.dim(0), H = x->t.dim(1), W = x->t.dim(2);
    const int64_t F = w->t.dim(1), kh = w->t.dim(2), kw = w->t.dim(3);
    if (w->t.dim(0) != C)
        shape_fail(name, "kernel channels " + w->t.shape_str() + " do not match input " + x->t.shape_str());
    if (b->numel() != F) shape_fail(name, "bias size does not match filter count");
    const auto [sh, sw] = stride;
    const int64_t FH = (H - 1) * sh + kh;
    const int64_t FW = (W - 1) * sw + kw;
    const auto [OH, OW] = out_shape;
    if (OH > FH || OW > FW)
        shape_fail(name, "declared output exceeds full transposed-conv extent");
    const int64_t cy = (FH - OH) / 2;
    const int64_t cx = (FW - OW) / 2;

    Tensor out({F, OH, OW});
    for (int64_t f = 0; f < F; ++f)
        std::fill_n(out.v.begin() + f * OH * OW, OH * OW, b->t.v[static_cast<size_t>(f)]);
    for (int64_t c = 0; c < C; ++c) {
        const double* xc = x->t.v.data() + c * H * W;
        for (int64_t f = 0; f < F; ++f) {
            double* ob = out.v.data() + f * OH * OW;
            for (int64_t yk = 0; yk < kh; ++yk) {
                int64_t ih_lo, ih_hi;
                detail::deconv_range(H, OH, sh, yk, cy, ih_lo, ih_hi);
                for (int64_t xk = 0; xk < kw; ++xk) {
                    const double wval = w->t.v[static_cast<size_t>(((c * F + f) * kh + yk) * kw + xk)];
                    if (wval == 0.0) continue;
                    int64_t iw_lo, iw_hi;
                    detail::deconv_range(W, OW, sw, xk, cx, iw_lo, iw_hi);
                    for (int64_t ih = ih_lo; ih < ih_hi; ++ih) {
                        const int64_t oh = ih * sh + yk - cy;
                        const double* xrow = xc + ih * W;
                        double* orow = ob + oh * OW + iw_lo * sw + xk - cx;
                        if (sw == 1) {
                            for (int64_t i = 0; i < iw_hi - iw_lo; ++i)
                                orow[i] += wval * xrow[iw_lo + i];
                        } else {
                            for (int64_t i = 0; i < iw_hi - iw_lo; ++i)
                                orow[i * sw] += wval * xrow[iw_lo + i];
                        }
                    }
                }
            }
        }
    }

    return make_op(std::move(out), {x, w, b},
                   [x, w, b, C, H, W, F, kh, kw, sh, sw, OH, OW, cy, cx](Node& node) {
        const double* g = node.t.grad.data();
        if (b->requires_grad) {
            b->t.ensure_grad();
            for (int64_t f = 0; f < F; ++f) {
                double acc = 0.0;
                const double* gb = g + f * OH * OW;
                for (int64_t i = 0; i < OH * OW; ++i) acc += gb[i];
                b->t.grad[static_cast<size_t>(f)] += acc;
            }
        }
        if (w->requires_grad) w->t.ensure_grad();
        if (x->requires_grad) x->t.ensure_grad();
        for (int64_t c = 0; c < C; ++c) {
            const double* xc = x->t.v.data() + c * H * W;
            double* dxc = x->requires_grad ? x->t.grad.data() + c * H * W : nullptr;
            for (int64_t f = 0; f < F; ++f) {
                const double* gb = g + f * OH * OW;
                for (int64_t yk = 0; yk < kh; ++yk) {
                    int64_t ih_lo, ih_hi;
                    detail::deconv_range(H, OH, sh, yk, cy, ih_lo, ih_hi);
                    for (int64_t xk = 0; xk < kw; ++xk) {
                        const int64_t widx = ((c * F + f) * kh + yk) * kw + xk;
                        const double wval = w->t.v[static_cast<size_t>(widx)];
                        int64_t iw_lo, iw_hi;
                        detail::deconv_range(W, OW, sw, xk, cx, iw_lo, iw_hi);
                        const int64_t n = iw_hi - iw_lo;
                        double wacc = 0.0;
                        for (int64_t ih = ih_lo; ih < ih_hi; ++ih) {
                            const int64_t oh = ih * sh + yk - cy;
                            const double* xrow = xc + ih * W + iw_lo;
                            const double* grow = gb + oh * OW + iw_lo * sw + xk - cx;
                            if (w->requires_grad) {
                                // dot over x rows with strided gradient taps
                                double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
                                int64_t i = 0;
                                for (; i + 4 <= n; i += 4) {
                                    a0 += xrow[i] * grow[i * sw];
                                    a1 += xrow[i + 1] * grow[(i + 1) * sw];
                                    a2 += xrow[i + 2] * grow[(i + 2) * sw];
                                    a3 += xrow[i + 3] * grow[(i + 3) * sw];
                                }
                                for (; i < n; ++i) a0 += xrow[i] * grow[i * sw];
                                wacc += (a0 + a1) + (a2 + a3);
                            }
                            if (dxc) {
                                double* dxrow = dxc + ih * W + iw_lo;
                                if (sw == 1) {
                                    for (int64_t i = 0; i < n; ++i) dxrow[i] += wval * grow[i];
                                } else {
                                    for (int64_t i = 0; i < n; ++i) dxrow[i] += wval * grow[i * sw];
                                }
                            }
                        }
                        if (w->requires_grad) w->t.grad[static_cast<size_t>(widx)] += wacc;
                    }
                }
            }
        }
    }, name);
}

// --- segment ops (voxel feature encoding) -------------------------------------

// x (n, C) with V segments given by offsets (size V+1); elementwise max per
// segment -> (V, C). Gradient routes to the first row attaining the max.
inline Var segment_max(const Var& x, std::vector<int64_t> offsets, const std::string& name = "segment_max") {
    if (x->t.rank() != 2) shape_fail(name, "expected (n,C) rows, got " + x->t.shape_str());
    const int64_t C = x->t.dim(1);
    const int64_t V = static_cast<int64_t>(offsets.size()) - 1;
    if (V < 0 || offsets.front() != 0 || offsets.back() != x->t.dim(0))
        shape_fail(name, "bad segment offsets");
    Tensor out({V, C});
    std::vector<int64_t> arg(static_cast<size_t>(V * C));
    for (int64_t s = 0; s < V; ++s) {
        const int64_t lo = offsets[static_cast<size_t>(s)], hi = offsets[static_cast<size_t>(s) + 1];
        if (hi <= lo) shape_fail(name, "empty segment");
        for (int64_t c = 0; c < C; ++c) {
            double best = x->t.v[static_cast<size_t>(lo * C + c)];
            int64_t bi = lo;
            for (int64_t r = lo + 1; r < hi; ++r) {
                const double v = x->t.v[static_cast<size_t>(r * C + c)];
                if (v > best) {
                    best = v;
                    bi = r;
                }
            }
            out.v[static_cast<size_t>(s * C + c)] = best;
            arg[static_cast<size_t>(s * C + c)] = bi;
        }
    }
    return make_op(std::move(out), {x}, [x, C, V, arg = std::move(arg)](Node& node) {
        x->t.ensure_grad();
        for (int64_t i = 0; i < V * C; ++i)
            x->t.grad[static_cast<size_t>(arg[static_cast<size_t>(i)] * C + i % C)] +=
                node.t.grad[static_cast<size_t>(i)];
    }, name);
}

// v (V, C) broadcast back to rows (n, C) via the same offsets.
inline Var segment_broadcast(const Var& v, std::vector<int64_t> offsets, const std::string& name = "segment_broadcast") {
    if (v->t.rank() != 2) shape_fail(name, "expected (V,C) features");
    const int64_t C = v->t.dim(1);
    const int64_t V = static_cast<int64_t>(offsets.size()) - 1;
    if (V != v->t.dim(0)) shape_fail(name, "offsets do not match segment count");
    const int64_t n = offsets.back();
    Tensor out({n, C});
    for (int64_t s = 0; s < V; ++s)
        for (int64_t r = offsets[static_cast<size_t>(s)]; r < offsets[static_cast<size_t>(s) + 1]; ++r)
            for (int64_t c = 0; c < C; ++c)
                out.v[static_cast<size_t>(r * C + c)] = v->t.v[static_cast<size_t>(s * C + c)];
    return make_op(std::move(out), {v}, [v, C, V, offsets = std::move(offsets)](Node& node) {
        v->t.ensure_grad();
        for (int64_t s = 0; s < V; ++s)
            for (int64_t r = offsets[static_cast<size_t>(s)]; r < offsets[static_cast<size_t>(s) + 1]; ++r)
                for (int64_t c = 0; c < C; ++c)
                    v->t.grad[static_cast<size_t>(s * C + c)] +=
                        node.t.grad[static_cast<size_t>(r * C + c)];
    }, name);
}

inline Var concat_cols(const Var& a, const Var& b, const std::string& name = "concat_cols") {
    if (a->t.rank() != 2 || b->t.rank() != 2 || a->t.dim(0) != b->t.dim(0))
        shape_fail(name, "row mismatch " + a->t.shape_str() + " vs " + b->t.shape_str());
    const int64_t n = a->t.dim(0), ca = a->t.dim(1), cb = b->t.dim(1);
    Tensor out({n, ca + cb});
    for (int64_t i = 0; i < n; ++i) {
        std::copy_n(a->t.v.data() + i * ca, ca, out.v.data() + i * (ca + cb));
        std::copy_n(b->t.v.data() + i * cb, cb, out.v.data() + i * (ca + cb) + ca);
    }
    return make_op(std::move(out), {a, b}, [a, b, n, ca, cb](Node& node) {
        if (a->requires_grad) {
            a->t.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t c = 0; c < ca; ++c)
                    a->t.grad[static_cast<size_t>(i * ca + c)] +=
                        node.t.grad[static_cast<size_t>(i * (ca + cb) + c)];
        }
        if (b->requires_grad) {
            b->t.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t c = 0; c < cb; ++c)
                    b->t.grad[static_cast<size_t>(i * cb + c)] +=
                        node.t.grad[static_cast<size_t>(i * (ca + cb) + ca + c)];
        }
    }, name);
}

// Channel concatenation of (C, ...) maps with identical trailing dims.
inline Var concat_channels(const std::vector<Var>& parts, const std::string& name = "concat_channels") {
    if (parts.empty()) shape_fail(name, "no inputs");
    const auto& first = parts.front()->t;
    int64_t total_c = 0;
    const int64_t inner = first.numel() / first.dim(0);
    for (const auto& p : parts) {
        if (p->t.rank() != first.rank() || p->t.numel() / p->t.dim(0) != inner)
            shape_fail(name, "trailing dims mismatch");
        for (int i = 1; i < first.rank(); ++i)
            if (p->t.dim(i) != first.dim(i)) shape_fail(name, "trailing dims mismatch");
        total_c += p->t.dim(0);
    }
    std::vector<int64_t> shape = first.shape;
    shape[0] = total_c;
    Tensor out(std::move(shape));
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p->t.v.data(), p->t.numel(), out.v.data() + off);
        off += p->t.numel();
    }
    return make_op(std::move(out), parts, [parts](Node& node) {
        int64_t off = 0;
        for (const auto& p : parts) {
            if (p->requires_grad) {
                p->t.ensure_grad();
                for (int64_t i = 0; i < p->numel(); ++i)
                    p->t.grad[static_cast<size_t>(i)] += node.t.grad[static_cast<size_t>(off + i)];
            }
            off += p->numel();
        }
    }, name);
}

// Scatter per-voxel features (V, C) into a dense (C, D, H, W) map at the given
// flat cell indices. Backward is the exact gather.
inline Var scatter_voxels(const Var& v, std::vector<int64_t> flat_cells,
                          std::array<int64_t, 3> dims, const std::string& name = "scatter") {
    if (v->t.rank() != 2) shape_fail(name, "expected (V,C) features");
    const int64_t V = v->t.dim(0), C = v->t.dim(1);
    if (static_cast<int64_t>(flat_cells.size()) != V) shape_fail(name, "index count mismatch");
    const auto [D, H, W] = dims;
    const int64_t cells = D * H * W;
    Tensor out({C, D, H, W});
    for (int64_t s = 0; s < V; ++s) {
        const int64_t cell = flat_cells[static_cast<size_t>(s)];
        if (cell < 0 || cell >= cells) shape_fail(name, "cell index out of range");
        for (int64_t c = 0; c < C; ++c)
            out.v[static_cast<size_t>(c * cells + cell)] = v->t.v[static_cast<size_t>(s * C + c)];
    }
    return make_op(std::move(out), {v}, [v, C, V, cells, flat_cells = std::move(flat_cells)](Node& node) {
        v->t.ensure_grad();
        for (int64_t s = 0; s < V; ++s) {
            const int64_t cell = flat_cells[static_cast<size_t>(s)];
            for (int64_t c = 0; c < C; ++c)
                v->t.grad[static_cast<size_t>(s * C + c)] +=
                    node.t.grad[static_cast<size_t>(c * cells + cell)];
        }
    }, name);
}

}  // namespace focal3d::ad
