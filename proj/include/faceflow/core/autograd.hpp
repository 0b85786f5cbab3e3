#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace faceflow {

// Reverse-mode tape. Graphs are built per forward pass and freed when the
// root Var goes out of scope; parameters are long-lived leaf nodes.

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // undefined until a child deposits into it
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;
    bool requires_grad = false;
};

struct GradMode {
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> v, bool requires_grad = false) : node(std::make_shared<Node<T>>()) {
        node->value = std::move(v);
        node->requires_grad = requires_grad;
    }

    bool defined() const { return node != nullptr; }
    const Tensor<T>& value() const { return node->value; }
    Tensor<T>& value() { return node->value; }
    const Shape& shape() const { return node->value.shape(); }
    Tensor<T>& grad() { return node->grad; }
    bool requires_grad() const { return node && node->requires_grad; }

    void zero_grad() {
        if (node) node->grad = Tensor<T>();
    }

    void backward() const;

    std::shared_ptr<Node<T>> node;
};

template <typename T>
inline void accumulate_grad(const std::shared_ptr<Node<T>>& p, const Tensor<T>& g) {
    if (!p->requires_grad) return;
    if (!p->grad.defined()) p->grad = Tensor<T>::zeros(p->value.shape());
    T* dst = p->grad.data();
    const T* src = g.data();
    for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

// Returns a zeroed buffer to fill, registered for accumulation by the caller.
template <typename T>
inline Tensor<T>* grad_buffer(const std::shared_ptr<Node<T>>& p) {
    if (!p->requires_grad) return nullptr;
    if (!p->grad.defined()) p->grad = Tensor<T>::zeros(p->value.shape());
    return &p->grad;
}

template <typename T>
inline Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
    Var<T> out(std::move(value));
    bool need = false;
    if (GradMode::enabled())
        for (const auto& v : inputs)
            if (v.defined() && v.node->requires_grad) need = true;
    if (need) {
        out.node->requires_grad = true;
        for (auto& v : inputs) out.node->parents.push_back(v.node);
        out.node->backward_fn = std::move(backward_fn);
    }
    return out;
}

template <typename T>
void Var<T>::backward() const {
    if (node->value.numel() != 1) throw ShapeError("backward: root must be a scalar");
    // reverse post-order = every consumer runs before its producer
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.push_back({node.get(), 0});
    seen.insert(node.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node->grad = Tensor<T>::scalar(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape("add", a.value(), b.value());
    Tensor<T> y = a.value();
    const T* bd = b.value().data();
    T* yd = y.data();
    for (int64_t i = 0; i < y.numel(); ++i) yd[i] += bd[i];
    return make_op<T>(std::move(y), {a, b}, [](Node<T>& n) {
        accumulate_grad(n.parents[0], n.grad);
        accumulate_grad(n.parents[1], n.grad);
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape("sub", a.value(), b.value());
    Tensor<T> y = a.value();
    const T* bd = b.value().data();
    T* yd = y.data();
    for (int64_t i = 0; i < y.numel(); ++i) yd[i] -= bd[i];
    return make_op<T>(std::move(y), {a, b}, [](Node<T>& n) {
        accumulate_grad(n.parents[0], n.grad);
        if (auto* gb = grad_buffer(n.parents[1])) {
            const T* g = n.grad.data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*gb)[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape("mul", a.value(), b.value());
    Tensor<T> y = a.value();
    const T* bd = b.value().data();
    T* yd = y.data();
    for (int64_t i = 0; i < y.numel(); ++i) yd[i] *= bd[i];
    return make_op<T>(std::move(y), {a, b}, [](Node<T>& n) {
        const T* g = n.grad.data();
        const T* av = n.parents[0]->value.data();
        const T* bv = n.parents[1]->value.data();
        if (auto* ga = grad_buffer(n.parents[0]))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*ga)[i] += g[i] * bv[i];
        if (auto* gb = grad_buffer(n.parents[1]))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*gb)[i] += g[i] * av[i];
    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
    check_same_shape("div", a.value(), b.value());
    Tensor<T> y = a.value();
    const T* bd = b.value().data();
    T* yd = y.data();
    for (int64_t i = 0; i < y.numel(); ++i) yd[i] /= bd[i];
    Tensor<T> saved = y;
    return make_op<T>(std::move(y), {a, b}, [saved](Node<T>& n) {
        const T* g = n.grad.data();
        const T* bv = n.parents[1]->value.data();
        if (auto* ga = grad_buffer(n.parents[0]))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*ga)[i] += g[i] / bv[i];
        if (auto* gb = grad_buffer(n.parents[1]))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*gb)[i] -= g[i] * saved[i] / bv[i];
    });
}

template <typename T>
Var<T> neg(const Var<T>& a) {
    Tensor<T> y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = -y[i];
    return make_op<T>(std::move(y), {a}, [](Node<T>& n) {
        if (auto* ga = grad_buffer(n.parents[0]))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*ga)[i] -= n.grad[i];
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
    Tensor<T> y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] += s;
    return make_op<T>(std::move(y), {a}, [](Node<T>& n) { accumulate_grad(n.parents[0], n.grad); });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& a, T s) {
    Tensor<T> y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] *= s;
    return make_op<T>(std::move(y), {a}, [s](Node<T>& n) {
        if (auto* ga = grad_buffer(n.parents[0]))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*ga)[i] += s * n.grad[i];
    });
}

// s - x
template <typename T>
Var<T> rsub_scalar(T s, const Var<T>& a) {
    Tensor<T> y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = s - y[i];
    return make_op<T>(std::move(y), {a}, [](Node<T>& n) {
        if (auto* ga = grad_buffer(n.parents[0]))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*ga)[i] -= n.grad[i];
    });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) {
        T s = T(1) / (T(1) + std::exp(-y[i]));
        y[i] *= s;
    }
    return make_op<T>(std::move(y), {a}, [](Node<T>& n) {
        if (auto* ga = grad_buffer(n.parents[0])) {
            const T* x = n.parents[0]->value.data();
            const T* g = n.grad.data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) {
                T s = T(1) / (T(1) + std::exp(-x[i]));
                (*ga)[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
            }
        }
    });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    Tensor<T> y = a.value();
    const T inv_sqrt2 = T(0.7071067811865475244);
    for (int64_t i = 0; i < y.numel(); ++i)
        y[i] = T(0.5) * y[i] * (T(1) + std::erf(y[i] * inv_sqrt2));
    return make_op<T>(std::move(y), {a}, [inv_sqrt2](Node<T>& n) {
        if (auto* ga = grad_buffer(n.parents[0])) {
            const T inv_sqrt2pi = T(0.3989422804014326779);
            const T* x = n.parents[0]->value.data();
            const T* g = n.grad.data();
            for (int64_t i = 0; i < n.grad.numel(); ++i) {
                T cdf = T(0.5) * (T(1) + std::erf(x[i] * inv_sqrt2));
                T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x[i] * x[i]);
                (*ga)[i] += g[i] * (cdf + x[i] * pdf);
            }
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = T(1) / (T(1) + std::exp(-y[i]));
    Tensor<T> saved = y;
    return make_op<T>(std::move(y), {a}, [saved](Node<T>& n) {
        if (auto* ga = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            for (int64_t i = 0; i < n.grad.numel(); ++i)
                (*ga)[i] += g[i] * saved[i] * (T(1) - saved[i]);
        }
    });
}

template <typename T>
Var<T> tanh_(const Var<T>& a) {
    Tensor<T> y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::tanh(y[i]);
    Tensor<T> saved = y;
    return make_op<T>(std::move(y), {a}, [saved](Node<T>& n) {
        if (auto* ga = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            for (int64_t i = 0; i < n.grad.numel(); ++i)
                (*ga)[i] += g[i] * (T(1) - saved[i] * saved[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// [.., K] x [K, N] -> [.., N]; leading dims flattened into rows
template <typename T>
Var<T> matmul(const Var<T>& x, const Var<T>& w) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (ws.size() != 2 || xs.empty() || xs.back() != ws[0])
        throw ShapeError("matmul: " + shape_str(xs) + " x " + shape_str(ws));
    int64_t k = ws[0], n = ws[1];
    int64_t r = x.value().numel() / k;
    Shape out_shape(xs.begin(), xs.end() - 1);
    out_shape.push_back(n);
    Tensor<T> y(out_shape);
    gemm(false, false, r, n, k, T(1), x.value().data(), k, w.value().data(), n, T(0), y.data(), n);
    return make_op<T>(std::move(y), {x, w}, [r, k, n](Node<T>& n_) {
        const T* g = n_.grad.data();
        if (auto* gx = grad_buffer(n_.parents[0]))
            gemm(false, true, r, k, n, T(1), g, n, n_.parents[1]->value.data(), n, T(1), gx->data(), k);
        if (auto* gw = grad_buffer(n_.parents[1]))
            gemm(true, false, k, n, r, T(1), n_.parents[0]->value.data(), k, g, n, T(1), gw->data(), n);
    });
}

// batched matmul over flattened leading dims: [.., M, K] x [.., K, N] (-> trans_b: [.., N, K])
template <typename T>
Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_b = false) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() < 3 || as.size() != bs.size())
        throw ShapeError("bmm: " + shape_str(as) + " x " + shape_str(bs));
    for (size_t i = 0; i + 2 < as.size(); ++i)
        if (as[i] != bs[i]) throw ShapeError("bmm batch dims: " + shape_str(as) + " x " + shape_str(bs));
    int64_t m = as[as.size() - 2], k = as[as.size() - 1];
    int64_t kb = trans_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
    int64_t n = trans_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
    if (k != kb) throw ShapeError("bmm inner dim: " + shape_str(as) + " x " + shape_str(bs));
    int64_t groups = 1;
    for (size_t i = 0; i + 2 < as.size(); ++i) groups *= as[i];
    Shape out_shape(as.begin(), as.end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor<T> y(out_shape);
    const T* ad = a.value().data();
    const T* bd = b.value().data();
    int64_t bstride = k * n;
    for (int64_t gidx = 0; gidx < groups; ++gidx)
        gemm(false, trans_b, m, n, k, T(1), ad + gidx * m * k, k, bd + gidx * bstride,
             trans_b ? k : n, T(0), y.data() + gidx * m * n, n);
    return make_op<T>(std::move(y), {a, b}, [groups, m, k, n, trans_b](Node<T>& nd) {
        const T* g = nd.grad.data();
        const T* av = nd.parents[0]->value.data();
        const T* bv = nd.parents[1]->value.data();
        int64_t bstride = k * n;
        if (auto* ga = grad_buffer(nd.parents[0]))
            for (int64_t i = 0; i < groups; ++i)
                gemm(false, !trans_b, m, k, n, T(1), g + i * m * n, n, bv + i * bstride,
                     trans_b ? k : n, T(1), ga->data() + i * m * k, k);
        if (auto* gb = grad_buffer(nd.parents[1])) {
            for (int64_t i = 0; i < groups; ++i) {
                if (!trans_b)  // db = a^T g : [K,N]
                    gemm(true, false, k, n, m, T(1), av + i * m * k, k, g + i * m * n, n, T(1),
                         gb->data() + i * bstride, n);
                else  // db = g^T a : [N,K]
                    gemm(true, false, n, k, m, T(1), g + i * m * n, n, av + i * m * k, k, T(1),
                         gb->data() + i * bstride, k);
            }
        }
    });
}

template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
    const auto& xs = x.shape();
    const auto& bs = b.shape();
    if (bs.size() != 1 || xs.empty() || xs.back() != bs[0])
        throw ShapeError("add_bias: " + shape_str(xs) + " + " + shape_str(bs));
    int64_t d = bs[0];
    int64_t rows = x.value().numel() / d;
    Tensor<T> y = x.value();
    const T* bd = b.value().data();
    for (int64_t r = 0; r < rows; ++r) {
        T* row = y.data() + r * d;
        for (int64_t i = 0; i < d; ++i) row[i] += bd[i];
    }
    return make_op<T>(std::move(y), {x, b}, [rows, d](Node<T>& n) {
        accumulate_grad(n.parents[0], n.grad);
        if (auto* gb = grad_buffer(n.parents[1])) {
            const T* g = n.grad.data();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < d; ++i) (*gb)[i] += g[r * d + i];
        }
    });
}

template <typename T>
Var<T> mul_bias(const Var<T>& x, const Var<T>& w) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (ws.size() != 1 || xs.empty() || xs.back() != ws[0])
        throw ShapeError("mul_bias: " + shape_str(xs) + " * " + shape_str(ws));
    int64_t d = ws[0];
    int64_t rows = x.value().numel() / d;
    Tensor<T> y = x.value();
    const T* wd = w.value().data();
    for (int64_t r = 0; r < rows; ++r) {
        T* row = y.data() + r * d;
        for (int64_t i = 0; i < d; ++i) row[i] *= wd[i];
    }
    return make_op<T>(std::move(y), {x, w}, [rows, d](Node<T>& n) {
        const T* g = n.grad.data();
        const T* xv = n.parents[0]->value.data();
        const T* wv = n.parents[1]->value.data();
        if (auto* gx = grad_buffer(n.parents[0]))
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < d; ++i) (*gx)[r * d + i] += g[r * d + i] * wv[i];
        if (auto* gw = grad_buffer(n.parents[1]))
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t i = 0; i < d; ++i) (*gw)[i] += g[r * d + i] * xv[r * d + i];
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tensor<T> y = x.value().reshaped(std::move(shape));
    return make_op<T>(std::move(y), {x}, [](Node<T>& n) {
        accumulate_grad(n.parents[0], n.grad.reshaped(n.parents[0]->value.shape()));
    });
}

namespace detail {

template <typename T>
Tensor<T> permute_tensor(const Tensor<T>& x, const std::vector<int>& perm) {
    const auto& xs = x.shape();
    size_t r = xs.size();
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = xs[static_cast<size_t>(perm[i])];
    Tensor<T> y(out_shape);
    std::vector<int64_t> in_strides(r, 1), out_strides(r, 1);
    for (size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * xs[i];
    for (size_t i = r - 1; i > 0; --i) out_strides[i - 1] = out_strides[i] * out_shape[i];
    std::vector<int64_t> src_stride_for_out(r);
    for (size_t i = 0; i < r; ++i) src_stride_for_out[i] = in_strides[static_cast<size_t>(perm[i])];
    const T* xd = x.data();
    T* yd = y.data();
    std::vector<int64_t> idx(r, 0);
    int64_t src = 0;
    for (int64_t o = 0; o < y.numel(); ++o) {
        yd[o] = xd[src];
        for (size_t i = r; i-- > 0;) {
            idx[i]++;
            src += src_stride_for_out[i];
            if (idx[i] < out_shape[i]) break;
            src -= src_stride_for_out[i] * out_shape[i];
            idx[i] = 0;
        }
    }
    return y;
}

}  // namespace detail

template <typename T>
Var<T> permute(const Var<T>& x, std::vector<int> perm) {
    if (perm.size() != x.shape().size()) throw ShapeError("permute: rank mismatch");
    Tensor<T> y = detail::permute_tensor(x.value(), perm);
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
    return make_op<T>(std::move(y), {x}, [inv](Node<T>& n) {
        accumulate_grad(n.parents[0], detail::permute_tensor(n.grad, inv));
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int dim) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    const auto& s0 = xs[0].shape();
    size_t r = s0.size();
    size_t d = static_cast<size_t>(dim < 0 ? dim + static_cast<int>(r) : dim);
    Shape out_shape = s0;
    int64_t total = 0;
    for (const auto& x : xs) {
        const auto& s = x.shape();
        if (s.size() != r) throw ShapeError("concat: rank mismatch");
        for (size_t i = 0; i < r; ++i)
            if (i != d && s[i] != s0[i]) throw ShapeError("concat: shape mismatch at dim " + std::to_string(i));
        total += s[d];
    }
    out_shape[d] = total;
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < d; ++i) outer *= s0[i];
    for (size_t i = d + 1; i < r; ++i) inner *= s0[i];
    Tensor<T> y(out_shape);
    int64_t out_row = total * inner;
    int64_t off = 0;
    for (const auto& x : xs) {
        int64_t len = x.shape()[d] * inner;
        const T* xd = x.value().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(y.data() + o * out_row + off, xd + o * len, sizeof(T) * static_cast<size_t>(len));
        off += len;
    }
    std::vector<int64_t> lens;
    for (const auto& x : xs) lens.push_back(x.shape()[d] * inner);
    return make_op<T>(std::move(y), xs, [outer, out_row, lens](Node<T>& n) {
        const T* g = n.grad.data();
        int64_t off = 0;
        for (size_t p = 0; p < n.parents.size(); ++p) {
            if (auto* gp = grad_buffer(n.parents[p])) {
                for (int64_t o = 0; o < outer; ++o) {
                    const T* src = g + o * out_row + off;
                    T* dst = gp->data() + o * lens[p];
                    for (int64_t i = 0; i < lens[p]; ++i) dst[i] += src[i];
                }
            }
            off += lens[p];
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& x, int dim, int64_t start, int64_t len) {
    const auto& s = x.shape();
    size_t d = static_cast<size_t>(dim < 0 ? dim + static_cast<int>(s.size()) : dim);
    if (start < 0 || len < 0 || start + len > s[d]) throw ShapeError("slice: out of range");
    int64_t outer = 1, inner = 1;
    for (size_t i = 0; i < d; ++i) outer *= s[i];
    for (size_t i = d + 1; i < s.size(); ++i) inner *= s[i];
    Shape out_shape = s;
    out_shape[d] = len;
    Tensor<T> y(out_shape);
    const T* xd = x.value().data();
    int64_t in_row = s[d] * inner, out_row = len * inner, off = start * inner;
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(y.data() + o * out_row, xd + o * in_row + off, sizeof(T) * static_cast<size_t>(out_row));
    return make_op<T>(std::move(y), {x}, [outer, in_row, out_row, off](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            for (int64_t o = 0; o < outer; ++o) {
                T* dst = gx->data() + o * in_row + off;
                const T* src = g + o * out_row;
                for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
            }
        }
    });
}

// gather along dim 0; used for embeddings and batch regrouping
template <typename T>
Var<T> rows(const Var<T>& x, std::vector<int64_t> idx) {
    const auto& s = x.shape();
    if (s.empty()) throw ShapeError("rows: rank-0 input");
    int64_t stride = x.value().numel() / s[0];
    for (int64_t i : idx)
        if (i < 0 || i >= s[0]) throw LookupError("rows: index " + std::to_string(i) + " out of range");
    Shape out_shape = s;
    out_shape[0] = static_cast<int64_t>(idx.size());
    Tensor<T> y(out_shape);
    const T* xd = x.value().data();
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(y.data() + static_cast<int64_t>(r) * stride, xd + idx[r] * stride,
                    sizeof(T) * static_cast<size_t>(stride));
    return make_op<T>(std::move(y), {x}, [idx, stride](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            for (size_t r = 0; r < idx.size(); ++r) {
                T* dst = gx->data() + idx[r] * stride;
                const T* src = g + static_cast<int64_t>(r) * stride;
                for (int64_t i = 0; i < stride; ++i) dst[i] += src[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// normalization / softmax
// ---------------------------------------------------------------------------

// last-dim layer norm, no affine terms
template <typename T>
Var<T> layer_norm(const Var<T>& x, T eps = T(1e-6)) {
    const auto& s = x.shape();
    if (s.empty()) throw ShapeError("layer_norm: rank-0 input");
    int64_t d = s.back();
    int64_t rows_n = x.value().numel() / d;
    Tensor<T> y(s);
    Tensor<T> rstd({rows_n});
    const T* xd = x.value().data();
    for (int64_t r = 0; r < rows_n; ++r) {
        const T* row = xd + r * d;
        T mean = 0;
        for (int64_t i = 0; i < d; ++i) mean += row[i];
        mean /= static_cast<T>(d);
        T var = 0;
        for (int64_t i = 0; i < d; ++i) var += (row[i] - mean) * (row[i] - mean);
        var /= static_cast<T>(d);
        T rs = T(1) / std::sqrt(var + eps);
        rstd[r] = rs;
        T* out = y.data() + r * d;
        for (int64_t i = 0; i < d; ++i) out[i] = (row[i] - mean) * rs;
    }
    Tensor<T> xhat = y;
    return make_op<T>(std::move(y), {x}, [xhat, rstd, rows_n, d](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            for (int64_t r = 0; r < rows_n; ++r) {
                const T* gr = g + r * d;
                const T* xh = xhat.data() + r * d;
                T gmean = 0, gxmean = 0;
                for (int64_t i = 0; i < d; ++i) {
                    gmean += gr[i];
                    gxmean += gr[i] * xh[i];
                }
                gmean /= static_cast<T>(d);
                gxmean /= static_cast<T>(d);
                T* dst = gx->data() + r * d;
                for (int64_t i = 0; i < d; ++i)
                    dst[i] += rstd[r] * (gr[i] - gmean - xh[i] * gxmean);
            }
        }
    });
}

template <typename T>
Var<T> softmax_last(const Var<T>& x) {
    const auto& s = x.shape();
    int64_t d = s.back();
    int64_t rows_n = x.value().numel() / d;
    Tensor<T> y(s);
    const T* xd = x.value().data();
    for (int64_t r = 0; r < rows_n; ++r) {
        const T* row = xd + r * d;
        T m = row[0];
        for (int64_t i = 1; i < d; ++i) m = std::max(m, row[i]);
        T sum = 0;
        T* out = y.data() + r * d;
        for (int64_t i = 0; i < d; ++i) {
            out[i] = std::exp(row[i] - m);
            sum += out[i];
        }
        for (int64_t i = 0; i < d; ++i) out[i] /= sum;
    }
    Tensor<T> saved = y;
    return make_op<T>(std::move(y), {x}, [saved, rows_n, d](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            for (int64_t r = 0; r < rows_n; ++r) {
                const T* gr = g + r * d;
                const T* yr = saved.data() + r * d;
                T dot = 0;
                for (int64_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
                T* dst = gx->data() + r * d;
                for (int64_t i = 0; i < d; ++i) dst[i] += yr[i] * (gr[i] - dot);
            }
        }
    });
}

// y = x / max(||x||_2, eps), rowwise over the last dim
template <typename T>
Var<T> normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
    const auto& s = x.shape();
    int64_t d = s.back();
    int64_t rows_n = x.value().numel() / d;
    Tensor<T> y(s);
    Tensor<T> norms({rows_n});
    const T* xd = x.value().data();
    for (int64_t r = 0; r < rows_n; ++r) {
        const T* row = xd + r * d;
        T nrm = 0;
        for (int64_t i = 0; i < d; ++i) nrm += row[i] * row[i];
        nrm = std::max(std::sqrt(nrm), eps);
        norms[r] = nrm;
        T* out = y.data() + r * d;
        for (int64_t i = 0; i < d; ++i) out[i] = row[i] / nrm;
    }
    Tensor<T> saved = y;
    return make_op<T>(std::move(y), {x}, [saved, norms, rows_n, d, eps](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            const T* xv = n.parents[0]->value.data();
            for (int64_t r = 0; r < rows_n; ++r) {
                const T* gr = g + r * d;
                const T* yr = saved.data() + r * d;
                T* dst = gx->data() + r * d;
                T raw = 0;
                for (int64_t i = 0; i < d; ++i) raw += xv[r * d + i] * xv[r * d + i];
                raw = std::sqrt(raw);
                if (raw < eps) {  // clamped region: y = x / eps
                    for (int64_t i = 0; i < d; ++i) dst[i] += gr[i] / eps;
                } else {
                    T dot = 0;
                    for (int64_t i = 0; i < d; ++i) dot += gr[i] * yr[i];
                    for (int64_t i = 0; i < d; ++i) dst[i] += (gr[i] - yr[i] * dot) / norms[r];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// broadcast modulation (per-sample vectors over a token axis)
// ---------------------------------------------------------------------------

// y[b,l,:] = x[b,l,:] * (1 + s[b,:]) + t[b,:]
template <typename T>
Var<T> scale_shift(const Var<T>& x, const Var<T>& s, const Var<T>& t) {
    const auto& xs = x.shape();
    if (xs.size() != 3 || s.shape() != Shape{xs[0], xs[2]} || t.shape() != Shape{xs[0], xs[2]})
        throw ShapeError("scale_shift: " + shape_str(xs) + " with " + shape_str(s.shape()));
    int64_t b = xs[0], l = xs[1], d = xs[2];
    Tensor<T> y = x.value();
    const T* sd = s.value().data();
    const T* td = t.value().data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t li = 0; li < l; ++li) {
            T* row = y.data() + (bi * l + li) * d;
            const T* sr = sd + bi * d;
            const T* tr = td + bi * d;
            for (int64_t i = 0; i < d; ++i) row[i] = row[i] * (T(1) + sr[i]) + tr[i];
        }
    return make_op<T>(std::move(y), {x, s, t}, [b, l, d](Node<T>& n) {
        const T* g = n.grad.data();
        const T* xv = n.parents[0]->value.data();
        const T* sv = n.parents[1]->value.data();
        if (auto* gx = grad_buffer(n.parents[0]))
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t li = 0; li < l; ++li)
                    for (int64_t i = 0; i < d; ++i)
                        (*gx)[(bi * l + li) * d + i] +=
                            g[(bi * l + li) * d + i] * (T(1) + sv[bi * d + i]);
        if (auto* gs = grad_buffer(n.parents[1]))
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t li = 0; li < l; ++li)
                    for (int64_t i = 0; i < d; ++i)
                        (*gs)[bi * d + i] += g[(bi * l + li) * d + i] * xv[(bi * l + li) * d + i];
        if (auto* gt = grad_buffer(n.parents[2]))
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t li = 0; li < l; ++li)
                    for (int64_t i = 0; i < d; ++i) (*gt)[bi * d + i] += g[(bi * l + li) * d + i];
    });
}

// y[b,l,:] = x[b,l,:] * v[b,:]
template <typename T>
Var<T> gate_mul(const Var<T>& x, const Var<T>& v) {
    const auto& xs = x.shape();
    if (xs.size() != 3 || v.shape() != Shape{xs[0], xs[2]})
        throw ShapeError("gate_mul: " + shape_str(xs) + " with " + shape_str(v.shape()));
    int64_t b = xs[0], l = xs[1], d = xs[2];
    Tensor<T> y = x.value();
    const T* vd = v.value().data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t li = 0; li < l; ++li) {
            T* row = y.data() + (bi * l + li) * d;
            for (int64_t i = 0; i < d; ++i) row[i] *= vd[bi * d + i];
        }
    return make_op<T>(std::move(y), {x, v}, [b, l, d](Node<T>& n) {
        const T* g = n.grad.data();
        const T* xv = n.parents[0]->value.data();
        const T* vv = n.parents[1]->value.data();
        if (auto* gx = grad_buffer(n.parents[0]))
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t li = 0; li < l; ++li)
                    for (int64_t i = 0; i < d; ++i)
                        (*gx)[(bi * l + li) * d + i] += g[(bi * l + li) * d + i] * vv[bi * d + i];
        if (auto* gv = grad_buffer(n.parents[1]))
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t li = 0; li < l; ++li)
                    for (int64_t i = 0; i < d; ++i)
                        (*gv)[bi * d + i] += g[(bi * l + li) * d + i] * xv[(bi * l + li) * d + i];
    });
}

// y[b] = x[b] + c[b] * v[b] over row blocks; coefficients are constants
template <typename T>
Var<T> axpy_rows(const Var<T>& x, const Var<T>& v, std::vector<T> coef) {
    check_same_shape("axpy_rows", x.value(), v.value());
    const auto& s = x.shape();
    if (s.empty() || s[0] != static_cast<int64_t>(coef.size()))
        throw ShapeError("axpy_rows: coefficient count mismatch");
    int64_t stride = x.value().numel() / s[0];
    Tensor<T> y = x.value();
    const T* vd = v.value().data();
    for (int64_t b = 0; b < s[0]; ++b) {
        T* row = y.data() + b * stride;
        const T* vr = vd + b * stride;
        for (int64_t i = 0; i < stride; ++i) row[i] += coef[static_cast<size_t>(b)] * vr[i];
    }
    return make_op<T>(std::move(y), {x, v}, [coef, stride](Node<T>& n) {
        accumulate_grad(n.parents[0], n.grad);
        if (auto* gv = grad_buffer(n.parents[1])) {
            const T* g = n.grad.data();
            for (size_t b = 0; b < coef.size(); ++b) {
                T* dst = gv->data() + static_cast<int64_t>(b) * stride;
                const T* src = g + static_cast<int64_t>(b) * stride;
                for (int64_t i = 0; i < stride; ++i) dst[i] += coef[b] * src[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& x) {
    T s = 0;
    const T* xd = x.value().data();
    for (int64_t i = 0; i < x.value().numel(); ++i) s += xd[i];
    return make_op<T>(Tensor<T>::scalar(s), {x}, [](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            T g = n.grad[0];
            for (int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g;
        }
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
    int64_t n = x.value().numel();
    T s = 0;
    const T* xd = x.value().data();
    for (int64_t i = 0; i < n; ++i) s += xd[i];
    s /= static_cast<T>(n);
    return make_op<T>(Tensor<T>::scalar(s), {x}, [n](Node<T>& nd) {
        if (auto* gx = grad_buffer(nd.parents[0])) {
            T g = nd.grad[0] / static_cast<T>(n);
            for (int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += g;
        }
    });
}

template <typename T>
Var<T> mse_loss(const Var<T>& a, const Var<T>& b) {
    check_same_shape("mse_loss", a.value(), b.value());
    int64_t n = a.value().numel();
    const T* ad = a.value().data();
    const T* bd = b.value().data();
    T s = 0;
    for (int64_t i = 0; i < n; ++i) {
        T d = ad[i] - bd[i];
        s += d * d;
    }
    s /= static_cast<T>(n);
    return make_op<T>(Tensor<T>::scalar(s), {a, b}, [n](Node<T>& nd) {
        const T* av = nd.parents[0]->value.data();
        const T* bv = nd.parents[1]->value.data();
        T g = nd.grad[0] * T(2) / static_cast<T>(n);
        if (auto* ga = grad_buffer(nd.parents[0]))
            for (int64_t i = 0; i < n; ++i) (*ga)[i] += g * (av[i] - bv[i]);
        if (auto* gb = grad_buffer(nd.parents[1]))
            for (int64_t i = 0; i < n; ++i) (*gb)[i] -= g * (av[i] - bv[i]);
    });
}

// per-row cosine similarity: [R,d] x [R,d] -> [R]
template <typename T>
Var<T> cosine_sim_rows(const Var<T>& a, const Var<T>& b, T eps = T(1e-12)) {
    check_same_shape("cosine_sim_rows", a.value(), b.value());
    const auto& s = a.shape();
    if (s.size() != 2) throw ShapeError("cosine_sim_rows: expected rank-2 input");
    int64_t r = s[0], d = s[1];
    Tensor<T> y({r});
    const T* ad = a.value().data();
    const T* bd = b.value().data();
    for (int64_t i = 0; i < r; ++i) {
        T dot = 0, na = 0, nb = 0;
        for (int64_t j = 0; j < d; ++j) {
            dot += ad[i * d + j] * bd[i * d + j];
            na += ad[i * d + j] * ad[i * d + j];
            nb += bd[i * d + j] * bd[i * d + j];
        }
        y[i] = dot / std::max(std::sqrt(na) * std::sqrt(nb), eps);
    }
    Tensor<T> saved = y;
    return make_op<T>(std::move(y), {a, b}, [saved, r, d, eps](Node<T>& n) {
        const T* av = n.parents[0]->value.data();
        const T* bv = n.parents[1]->value.data();
        const T* g = n.grad.data();
        for (int64_t i = 0; i < r; ++i) {
            T na2 = 0, nb2 = 0;
            for (int64_t j = 0; j < d; ++j) {
                na2 += av[i * d + j] * av[i * d + j];
                nb2 += bv[i * d + j] * bv[i * d + j];
            }
            T na = std::sqrt(na2), nb = std::sqrt(nb2);
            T denom = std::max(na * nb, eps);
            bool clamped = na * nb < eps;
            if (auto* ga = grad_buffer(n.parents[0]))
                for (int64_t j = 0; j < d; ++j)
                    (*ga)[i * d + j] += g[i] * (bv[i * d + j] / denom -
                                                (clamped ? T(0) : saved[i] * av[i * d + j] / na2));
            if (auto* gb = grad_buffer(n.parents[1]))
                for (int64_t j = 0; j < d; ++j)
                    (*gb)[i * d + j] += g[i] * (av[i * d + j] / denom -
                                                (clamped ? T(0) : saved[i] * bv[i * d + j] / nb2));
        }
    });
}

// mean cross-entropy from logits: [B,K] with integer labels
template <typename T>
Var<T> cross_entropy_logits(const Var<T>& x, std::vector<int64_t> labels) {
    const auto& s = x.shape();
    if (s.size() != 2 || s[0] != static_cast<int64_t>(labels.size()))
        throw ShapeError("cross_entropy_logits: " + shape_str(s));
    int64_t b = s[0], k = s[1];
    const T* xd = x.value().data();
    T total = 0;
    for (int64_t i = 0; i < b; ++i) {
        const T* row = xd + i * k;
        T m = row[0];
        for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
        T lse = 0;
        for (int64_t j = 0; j < k; ++j) lse += std::exp(row[j] - m);
        lse = m + std::log(lse);
        total += lse - row[labels[static_cast<size_t>(i)]];
    }
    total /= static_cast<T>(b);
    return make_op<T>(Tensor<T>::scalar(total), {x}, [labels, b, k](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            const T* xv = n.parents[0]->value.data();
            T g = n.grad[0] / static_cast<T>(b);
            for (int64_t i = 0; i < b; ++i) {
                const T* row = xv + i * k;
                T m = row[0];
                for (int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
                T sum = 0;
                for (int64_t j = 0; j < k; ++j) sum += std::exp(row[j] - m);
                for (int64_t j = 0; j < k; ++j) {
                    T p = std::exp(row[j] - m) / sum;
                    (*gx)[i * k + j] += g * (p - (j == labels[static_cast<size_t>(i)] ? T(1) : T(0)));
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// conv / pooling (NHWC; weights [kh, kw, C, OC])
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int64_t k, int64_t stride, int64_t pad, int64_t oh, int64_t ow,
            Tensor<T>& cols) {
    int64_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
    const T* xd = x.data();
    T* cd = cols.data();
    int64_t patch = k * k * c;
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                T* dst = cd + ((bi * oh + oy) * ow + ox) * patch;
                for (int64_t ky = 0; ky < k; ++ky) {
                    int64_t iy = oy * stride + ky - pad;
                    for (int64_t kx = 0; kx < k; ++kx) {
                        int64_t ix = ox * stride + kx - pad;
                        T* cell = dst + (ky * k + kx) * c;
                        if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                            for (int64_t ci = 0; ci < c; ++ci) cell[ci] = 0;
                        } else {
                            const T* src = xd + ((bi * h + iy) * w + ix) * c;
                            for (int64_t ci = 0; ci < c; ++ci) cell[ci] = src[ci];
                        }
                    }
                }
            }
}

template <typename T>
void col2im(const Tensor<T>& cols, int64_t k, int64_t stride, int64_t pad, int64_t oh, int64_t ow,
            Tensor<T>& dx) {
    int64_t b = dx.shape()[0], h = dx.shape()[1], w = dx.shape()[2], c = dx.shape()[3];
    const T* cd = cols.data();
    T* xd = dx.data();
    int64_t patch = k * k * c;
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                const T* src = cd + ((bi * oh + oy) * ow + ox) * patch;
                for (int64_t ky = 0; ky < k; ++ky) {
                    int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int64_t kx = 0; kx < k; ++kx) {
                        int64_t ix = ox * stride + kx - pad;
                        if (ix < 0 || ix >= w) continue;
                        T* dst = xd + ((bi * h + iy) * w + ix) * c;
                        const T* cell = src + (ky * k + kx) * c;
                        for (int64_t ci = 0; ci < c; ++ci) dst[ci] += cell[ci];
                    }
                }
            }
}

}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, int64_t stride, int64_t pad) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[0] != ws[1] || ws[2] != xs[3])
        throw ShapeError("conv2d: " + shape_str(xs) + " with " + shape_str(ws));
    int64_t b = xs[0], h = xs[1], wd = xs[2];
    int64_t k = ws[0], oc = ws[3];
    if (bias.shape() != Shape{oc}) throw ShapeError("conv2d: bias shape");
    int64_t oh = (h + 2 * pad - k) / stride + 1;
    int64_t ow = (wd + 2 * pad - k) / stride + 1;
    int64_t patch = k * k * xs[3];
    Tensor<T> cols({b * oh * ow, patch});
    detail::im2col(x.value(), k, stride, pad, oh, ow, cols);
    Tensor<T> y({b, oh, ow, oc});
    gemm(false, false, b * oh * ow, oc, patch, T(1), cols.data(), patch, w.value().data(), oc, T(0),
         y.data(), oc);
    const T* bd = bias.value().data();
    for (int64_t r = 0; r < b * oh * ow; ++r)
        for (int64_t i = 0; i < oc; ++i) y[r * oc + i] += bd[i];
    return make_op<T>(std::move(y), {x, w, bias},
                      [cols, k, stride, pad, oh, ow, patch, oc, b](Node<T>& n) {
        int64_t rows_n = b * oh * ow;
        const T* g = n.grad.data();
        if (auto* gw = grad_buffer(n.parents[1]))
            gemm(true, false, patch, oc, rows_n, T(1), cols.data(), patch, g, oc, T(1), gw->data(), oc);
        if (auto* gb = grad_buffer(n.parents[2]))
            for (int64_t r = 0; r < rows_n; ++r)
                for (int64_t i = 0; i < oc; ++i) (*gb)[i] += g[r * oc + i];
        if (auto* gx = grad_buffer(n.parents[0])) {
            Tensor<T> dcols({rows_n, patch});
            gemm(false, true, rows_n, patch, oc, T(1), g, oc, n.parents[1]->value.data(), oc, T(0),
                 dcols.data(), patch);
            detail::col2im(dcols, k, stride, pad, oh, ow, *gx);
        }
    });
}

// [B,H,W,C] -> [B,C]
template <typename T>
Var<T> avg_pool_all(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("avg_pool_all: expected rank-4 input");
    int64_t b = s[0], hw = s[1] * s[2], c = s[3];
    Tensor<T> y({b, c});
    const T* xd = x.value().data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t p = 0; p < hw; ++p)
            for (int64_t ci = 0; ci < c; ++ci) y[bi * c + ci] += xd[(bi * hw + p) * c + ci];
    for (int64_t i = 0; i < y.numel(); ++i) y[i] /= static_cast<T>(hw);
    return make_op<T>(std::move(y), {x}, [b, hw, c](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t p = 0; p < hw; ++p)
                    for (int64_t ci = 0; ci < c; ++ci)
                        (*gx)[(bi * hw + p) * c + ci] += g[bi * c + ci] / static_cast<T>(hw);
        }
    });
}

// nearest-neighbour 2x upsample, NHWC
template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("upsample2x: expected rank-4 input");
    int64_t b = s[0], h = s[1], w = s[2], c = s[3];
    Tensor<T> y({b, 2 * h, 2 * w, c});
    const T* xd = x.value().data();
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t oy = 0; oy < 2 * h; ++oy)
            for (int64_t ox = 0; ox < 2 * w; ++ox) {
                const T* src = xd + ((bi * h + oy / 2) * w + ox / 2) * c;
                T* dst = y.data() + ((bi * 2 * h + oy) * 2 * w + ox) * c;
                for (int64_t ci = 0; ci < c; ++ci) dst[ci] = src[ci];
            }
    return make_op<T>(std::move(y), {x}, [b, h, w, c](Node<T>& n) {
        if (auto* gx = grad_buffer(n.parents[0])) {
            const T* g = n.grad.data();
            for (int64_t bi = 0; bi < b; ++bi)
                for (int64_t oy = 0; oy < 2 * h; ++oy)
                    for (int64_t ox = 0; ox < 2 * w; ++ox) {
                        const T* src = g + ((bi * 2 * h + oy) * 2 * w + ox) * c;
                        T* dst = gx->data() + ((bi * h + oy / 2) * w + ox / 2) * c;
                        for (int64_t ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                    }
        }
    });
}

}  // namespace faceflow
