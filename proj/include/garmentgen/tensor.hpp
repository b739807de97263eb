#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "garmentgen/errors.hpp"
#include "garmentgen/rng.hpp"

namespace ggen {

template <typename T>
class Tape;

// Dense row-major tensor. Value semantics: copies share the immutable payload.
// `node` links the tensor to the active gradient tape; -1 means untracked.
// `no_grad` marks tensors that terminate gradient flow (frozen parameters,
// raw data inputs).
template <typename T>
struct TensorT {
    std::vector<int> shape;
    std::shared_ptr<std::vector<T>> data;
    int node = -1;
    bool no_grad = false;

    TensorT() : data(std::make_shared<std::vector<T>>()) {}

    TensorT(std::vector<int> s, std::vector<T> v)
        : shape(std::move(s)), data(std::make_shared<std::vector<T>>(std::move(v))) {
        if (numel_of(shape) != static_cast<long long>(data->size()))
            throw DimensionError("tensor value count " + std::to_string(data->size()) +
                                 " does not match shape " + shape_str(shape));
    }

    static TensorT zeros(std::vector<int> s) {
        TensorT t;
        t.shape = std::move(s);
        t.data = std::make_shared<std::vector<T>>(numel_of(t.shape), T(0));
        return t;
    }

    static TensorT full(std::vector<int> s, T v) {
        TensorT t = zeros(std::move(s));
        std::fill(t.data->begin(), t.data->end(), v);
        return t;
    }

    static TensorT scalar(T v) { return TensorT({1}, {v}); }

    int numel() const { return static_cast<int>(data->size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool is_scalar() const { return numel() == 1; }

    const T* ptr() const { return data->data(); }
    T* ptr() { return data->data(); }
    T at(int i) const { return (*data)[static_cast<size_t>(i)]; }
    T at(int r, int c) const { return (*data)[static_cast<size_t>(r) * shape[1] + c]; }
    T& at(int i) { return (*data)[static_cast<size_t>(i)]; }
    T& at(int r, int c) { return (*data)[static_cast<size_t>(r) * shape[1] + c]; }

    static long long numel_of(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

// ---------------------------------------------------------------------------
// Matmul kernels. Row-streaming loop orders so the inner loops vectorize;
// every Tensor op and every matmul backward reduces to one of these three.
// ---------------------------------------------------------------------------

namespace kernels {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        T* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x k] += G[m x n] * B^T where B is [k x n]
template <typename T>
void mm_nt(const T* g, const T* b, T* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const T* grow = g + static_cast<size_t>(i) * n;
        T* crow = c + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const T* brow = b + static_cast<size_t>(p) * n;
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            crow[p] += acc;
        }
    }
}

// C[k x n] += A^T * G where A is [m x k], G is [m x n]
template <typename T>
void mm_tn(const T* a, const T* g, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + static_cast<size_t>(i) * k;
        const T* grow = g + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            T* crow = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Reverse-mode tape. Nodes are recorded in forward order, which is already a
// topological order, so backward() is a single reverse sweep. Gradient
// buffers allocate lazily: nodes never reached from the loss stay empty and
// their backward closures are skipped.
// ---------------------------------------------------------------------------

template <typename T>
class Tape {
public:
    using BackFn = std::function<void(Tape&, int self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active() {
        thread_local Tape* t = nullptr;
        return t;
    }

    int record(size_t out_numel, BackFn back) {
        nodes_.push_back(Node{std::move(back), out_numel});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Node id for a tensor used as an op input. Tensors already on the tape
    // keep their id; fresh non-constant tensors become leaves, memoized by
    // payload identity so every copy of a parameter maps to one leaf.
    int node_of(const TensorT<T>& t) {
        if (t.node >= 0) return t.node;
        if (t.no_grad) return -1;
        const void* key = t.data.get();
        auto it = leaf_ids_.find(key);
        if (it != leaf_ids_.end()) return it->second;
        int id = record(t.data->size(), nullptr);
        leaf_ids_.emplace(key, id);
        return id;
    }

    // Gradient buffer, allocated on first touch.
    std::vector<T>& grad(int id) {
        auto& g = grads_[static_cast<size_t>(id)];
        if (g.empty()) g.assign(nodes_[static_cast<size_t>(id)].numel, T(0));
        return g;
    }

    bool has_grad(int id) const { return !grads_[static_cast<size_t>(id)].empty(); }

    // Gradient of a leaf/parameter tensor after backward(); nullptr when the
    // tensor never joined the tape (its gradient is identically zero).
    const std::vector<T>* grad_of(const TensorT<T>& t) const {
        int id = t.node;
        if (id < 0) {
            auto it = leaf_ids_.find(t.data.get());
            if (it == leaf_ids_.end()) return nullptr;
            id = it->second;
        }
        const auto& g = grads_[static_cast<size_t>(id)];
        return g.empty() ? nullptr : &g;
    }

    void backward(const TensorT<T>& loss) {
        if (!loss.is_scalar())
            throw ContractError("backward needs a scalar loss, got shape " +
                                TensorT<T>::shape_str(loss.shape));
        if (loss.node < 0)
            throw ContractError("loss tensor was not computed on this tape");
        grads_.assign(nodes_.size(), {});
        grad(loss.node)[0] = T(1);
        for (int i = loss.node; i >= 0; --i) {
            if (grads_[static_cast<size_t>(i)].empty()) continue;
            if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this, i);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        BackFn back;  // null for leaves
        size_t numel;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
    std::unordered_map<const void*, int> leaf_ids_;
};

// RAII activation: ops record onto the tape while a scope is alive. Scopes
// are thread-confined and nest (inner scope shadows the outer tape).
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active()) { Tape<T>::active() = &tape; }
    ~TapeScope() { Tape<T>::active() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_2d(const TensorT<T>& t, const char* what) {
    if (t.rank() != 2)
        throw DimensionError(std::string(what) + " expects a 2-d tensor, got " +
                             TensorT<T>::shape_str(t.shape));
}

template <typename T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
    if (a.shape != b.shape)
        throw DimensionError(std::string(what) + ": shape mismatch " +
                             TensorT<T>::shape_str(a.shape) + " vs " +
                             TensorT<T>::shape_str(b.shape));
}

template <typename T>
void axpy(std::vector<T>& dst, const T* src, size_t n, T s = T(1)) {
    for (size_t i = 0; i < n; ++i) dst[i] += s * src[i];
}

}  // namespace detail

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_2d(a, "matmul lhs");
    detail::check_2d(b, "matmul rhs");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner dimensions disagree, " +
                             TensorT<T>::shape_str(a.shape) + " * " +
                             TensorT<T>::shape_str(b.shape));
    TensorT<T> out = TensorT<T>::zeros({m, n});
    kernels::mm_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n);

    if (auto* tape = Tape<T>::active()) {
        const int pa = tape->node_of(a), pb = tape->node_of(b);
        if (pa >= 0 || pb >= 0) {
            auto ad = a.data, bd = b.data;
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                if (pa >= 0) kernels::mm_nt(g.data(), bd->data(), tp.grad(pa).data(), m, n, k);
                if (pb >= 0) kernels::mm_tn(ad->data(), g.data(), tp.grad(pb).data(), m, k, n);
            });
        }
    }
    return out;
}

namespace detail {

// Shared skeleton for elementwise binary ops with per-element backward scale.
template <typename T, typename FwdFn, typename BackFn>
TensorT<T> binary_op(const TensorT<T>& a, const TensorT<T>& b, const char* name, FwdFn fwd,
                     BackFn back) {
    check_same_shape(a, b, name);
    TensorT<T> out = TensorT<T>::zeros(a.shape);
    const size_t n = a.data->size();
    for (size_t i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i], (*b.data)[i]);
    if (auto* tape = Tape<T>::active()) {
        const int pa = tape->node_of(a), pb = tape->node_of(b);
        if (pa >= 0 || pb >= 0) {
            auto ad = a.data, bd = b.data;
            out.node = tape->record(n, [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                back(g, *ad, *bd, pa >= 0 ? &tp.grad(pa) : nullptr,
                     pb >= 0 ? &tp.grad(pb) : nullptr);
            });
        }
    }
    return out;
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(
        a, b, "add", [](T x, T y) { return x + y; },
        [](const std::vector<T>& g, const std::vector<T>&, const std::vector<T>&,
           std::vector<T>* ga, std::vector<T>* gb) {
            if (ga) detail::axpy(*ga, g.data(), g.size());
            if (gb) detail::axpy(*gb, g.data(), g.size());
        });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(
        a, b, "sub", [](T x, T y) { return x - y; },
        [](const std::vector<T>& g, const std::vector<T>&, const std::vector<T>&,
           std::vector<T>* ga, std::vector<T>* gb) {
            if (ga) detail::axpy(*ga, g.data(), g.size());
            if (gb) detail::axpy(*gb, g.data(), g.size(), T(-1));
        });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_op(
        a, b, "mul", [](T x, T y) { return x * y; },
        [](const std::vector<T>& g, const std::vector<T>& av, const std::vector<T>& bv,
           std::vector<T>* ga, std::vector<T>* gb) {
            for (size_t i = 0; i < g.size(); ++i) {
                if (ga) (*ga)[i] += g[i] * bv[i];
                if (gb) (*gb)[i] += g[i] * av[i];
            }
        });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
    TensorT<T> out = TensorT<T>::zeros(a.shape);
    for (size_t i = 0; i < a.data->size(); ++i) (*out.data)[i] = (*a.data)[i] * s;
    if (auto* tape = Tape<T>::active()) {
        const int pa = tape->node_of(a);
        if (pa >= 0)
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                detail::axpy(tp.grad(pa), tp.grad(self).data(), tp.grad(self).size(), s);
            });
    }
    return out;
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& a, T s) {
    TensorT<T> out = TensorT<T>::zeros(a.shape);
    for (size_t i = 0; i < a.data->size(); ++i) (*out.data)[i] = (*a.data)[i] + s;
    if (auto* tape = Tape<T>::active()) {
        const int pa = tape->node_of(a);
        if (pa >= 0)
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                detail::axpy(tp.grad(pa), tp.grad(self).data(), tp.grad(self).size());
            });
    }
    return out;
}

// x[n x d] + v broadcast over rows; v must hold d values.
template <typename T>
TensorT<T> add_rowvec(const TensorT<T>& x, const TensorT<T>& v) {
    detail::check_2d(x, "add_rowvec");
    const int n = x.dim(0), d = x.dim(1);
    if (v.numel() != d)
        throw DimensionError("add_rowvec: vector length " + std::to_string(v.numel()) +
                             " != row width " + std::to_string(d));
    TensorT<T> out = TensorT<T>::zeros(x.shape);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            (*out.data)[static_cast<size_t>(i) * d + j] =
                (*x.data)[static_cast<size_t>(i) * d + j] + (*v.data)[static_cast<size_t>(j)];
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x), pv = tape->node_of(v);
        if (px >= 0 || pv >= 0) {
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                if (px >= 0) detail::axpy(tp.grad(px), g.data(), g.size());
                if (pv >= 0) {
                    std::vector<T>& gv = tp.grad(pv);
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < d; ++j) gv[static_cast<size_t>(j)] += g[static_cast<size_t>(i) * d + j];
                }
            });
        }
    }
    return out;
}

template <typename T>
TensorT<T> transpose(const TensorT<T>& a) {
    detail::check_2d(a, "transpose");
    const int m = a.dim(0), n = a.dim(1);
    TensorT<T> out = TensorT<T>::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
    if (auto* tape = Tape<T>::active()) {
        const int pa = tape->node_of(a);
        if (pa >= 0)
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                std::vector<T>& ga = tp.grad(pa);
                for (int j = 0; j < n; ++j)
                    for (int i = 0; i < m; ++i)
                        ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
            });
    }
    return out;
}

// Same payload, new shape; gradient passes straight through.
template <typename T>
TensorT<T> reshape(const TensorT<T>& a, std::vector<int> shape) {
    if (TensorT<T>::numel_of(shape) != a.numel())
        throw DimensionError("reshape: cannot view " + TensorT<T>::shape_str(a.shape) + " as " +
                             TensorT<T>::shape_str(shape));
    TensorT<T> out;
    out.shape = std::move(shape);
    out.data = a.data;
    out.no_grad = a.no_grad;
    if (auto* tape = Tape<T>::active()) {
        const int pa = tape->node_of(a);
        if (pa >= 0)
            out.node = tape->record(a.data->size(), [=](Tape<T>& tp, int self) {
                detail::axpy(tp.grad(pa), tp.grad(self).data(), tp.grad(self).size());
            });
    }
    return out;
}

// Row-wise softmax with max subtraction; rows sum to 1 on any finite input.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& x) {
    detail::check_2d(x, "softmax_rows");
    const int n = x.dim(0), d = x.dim(1);
    TensorT<T> out = TensorT<T>::zeros(x.shape);
    for (int i = 0; i < n; ++i) {
        const T* row = x.ptr() + static_cast<size_t>(i) * d;
        T* orow = out.ptr() + static_cast<size_t>(i) * d;
        T mx = row[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int j = 0; j < d; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < d; ++j) orow[j] *= inv;
    }
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x);
        if (px >= 0) {
            auto yd = out.data;
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                std::vector<T>& gx = tp.grad(px);
                for (int i = 0; i < n; ++i) {
                    const T* y = yd->data() + static_cast<size_t>(i) * d;
                    const T* gr = g.data() + static_cast<size_t>(i) * d;
                    T dot = T(0);
                    for (int j = 0; j < d; ++j) dot += gr[j] * y[j];
                    T* gxr = gx.data() + static_cast<size_t>(i) * d;
                    for (int j = 0; j < d; ++j) gxr[j] += y[j] * (gr[j] - dot);
                }
            });
        }
    }
    return out;
}

// Row layer norm with affine: y = (x - mean) / sqrt(var + eps) * gain + bias.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gain, const TensorT<T>& bias,
                      T eps = T(1e-5)) {
    detail::check_2d(x, "layer_norm");
    const int n = x.dim(0), d = x.dim(1);
    if (gain.numel() != d || bias.numel() != d)
        throw DimensionError("layer_norm: affine params must have width " + std::to_string(d));
    TensorT<T> out = TensorT<T>::zeros(x.shape);
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(n) * d);
    auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const T* row = x.ptr() + static_cast<size_t>(i) * d;
        T mu = T(0);
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= T(d);
        T var = T(0);
        for (int j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<size_t>(i)] = is;
        T* xh = xhat->data() + static_cast<size_t>(i) * d;
        T* orow = out.ptr() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) {
            xh[j] = (row[j] - mu) * is;
            orow[j] = xh[j] * (*gain.data)[static_cast<size_t>(j)] + (*bias.data)[static_cast<size_t>(j)];
        }
    }
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x), pg = tape->node_of(gain), pb = tape->node_of(bias);
        if (px >= 0 || pg >= 0 || pb >= 0) {
            auto gd = gain.data;
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                for (int i = 0; i < n; ++i) {
                    const T* gr = g.data() + static_cast<size_t>(i) * d;
                    const T* xh = xhat->data() + static_cast<size_t>(i) * d;
                    if (pb >= 0) {
                        std::vector<T>& gb = tp.grad(pb);
                        for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += gr[j];
                    }
                    if (pg >= 0) {
                        std::vector<T>& gg = tp.grad(pg);
                        for (int j = 0; j < d; ++j) gg[static_cast<size_t>(j)] += gr[j] * xh[j];
                    }
                    if (px >= 0) {
                        // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) / sigma
                        T m1 = T(0), m2 = T(0);
                        std::vector<T>& gx = tp.grad(px);
                        T* gxr = gx.data() + static_cast<size_t>(i) * d;
                        for (int j = 0; j < d; ++j) {
                            const T dxh = gr[j] * (*gd)[static_cast<size_t>(j)];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= T(d);
                        m2 /= T(d);
                        const T is = (*inv_sigma)[static_cast<size_t>(i)];
                        for (int j = 0; j < d; ++j) {
                            const T dxh = gr[j] * (*gd)[static_cast<size_t>(j)];
                            gxr[j] += (dxh - m1 - xh[j] * m2) * is;
                        }
                    }
                }
            });
        }
    }
    return out;
}

// x * sigmoid(x)
template <typename T>
TensorT<T> silu(const TensorT<T>& x) {
    TensorT<T> out = TensorT<T>::zeros(x.shape);
    for (size_t i = 0; i < x.data->size(); ++i) {
        const T v = (*x.data)[i];
        (*out.data)[i] = v / (T(1) + std::exp(-v));
    }
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x);
        if (px >= 0) {
            auto xd = x.data;
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                std::vector<T>& gx = tp.grad(px);
                for (size_t i = 0; i < g.size(); ++i) {
                    const T v = (*xd)[i];
                    const T s = T(1) / (T(1) + std::exp(-v));
                    gx[i] += g[i] * s * (T(1) + v * (T(1) - s));
                }
            });
        }
    }
    return out;
}

// Select rows of x by index; backward scatter-adds into the source rows.
template <typename T>
TensorT<T> gather_rows(const TensorT<T>& x, const std::vector<int>& idx) {
    detail::check_2d(x, "gather_rows");
    const int m = x.dim(0), d = x.dim(1);
    for (int r : idx)
        if (r < 0 || r >= m)
            throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range [0," +
                                 std::to_string(m) + ")");
    const int k = static_cast<int>(idx.size());
    TensorT<T> out = TensorT<T>::zeros({k, d});
    for (int i = 0; i < k; ++i)
        std::copy_n(x.ptr() + static_cast<size_t>(idx[static_cast<size_t>(i)]) * d, d,
                    out.ptr() + static_cast<size_t>(i) * d);
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x);
        if (px >= 0) {
            auto indices = idx;
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                std::vector<T>& gx = tp.grad(px);
                for (int i = 0; i < k; ++i) {
                    const T* gr = g.data() + static_cast<size_t>(i) * d;
                    T* dst = gx.data() + static_cast<size_t>(indices[static_cast<size_t>(i)]) * d;
                    for (int j = 0; j < d; ++j) dst[j] += gr[j];
                }
            });
        }
    }
    return out;
}

// y.flat[i] = x.flat[idx[i]] with an arbitrary output shape; the inverse of a
// permutation is its scatter. Used for patch/token reorderings.
template <typename T>
TensorT<T> permute_elements(const TensorT<T>& x, const std::vector<int>& idx,
                            std::vector<int> out_shape) {
    if (TensorT<T>::numel_of(out_shape) != static_cast<long long>(idx.size()))
        throw DimensionError("permute_elements: index count does not match output shape");
    TensorT<T> out = TensorT<T>::zeros(std::move(out_shape));
    for (size_t i = 0; i < idx.size(); ++i) (*out.data)[i] = (*x.data)[static_cast<size_t>(idx[i])];
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x);
        if (px >= 0) {
            auto indices = idx;
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                std::vector<T>& gx = tp.grad(px);
                for (size_t i = 0; i < indices.size(); ++i)
                    gx[static_cast<size_t>(indices[i])] += g[i];
            });
        }
    }
    return out;
}

// Columns [start, start+count) of a 2-d tensor.
template <typename T>
TensorT<T> slice_cols(const TensorT<T>& x, int start, int count) {
    detail::check_2d(x, "slice_cols");
    const int n = x.dim(0), d = x.dim(1);
    if (start < 0 || count <= 0 || start + count > d)
        throw DimensionError("slice_cols: [" + std::to_string(start) + "," +
                             std::to_string(start + count) + ") out of width " + std::to_string(d));
    TensorT<T> out = TensorT<T>::zeros({n, count});
    for (int i = 0; i < n; ++i)
        std::copy_n(x.ptr() + static_cast<size_t>(i) * d + start, count,
                    out.ptr() + static_cast<size_t>(i) * count);
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x);
        if (px >= 0)
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                std::vector<T>& gx = tp.grad(px);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < count; ++j)
                        gx[static_cast<size_t>(i) * d + start + j] += g[static_cast<size_t>(i) * count + j];
            });
    }
    return out;
}

// Horizontal concat of equally-tall 2-d tensors.
template <typename T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input list");
    const int n = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        detail::check_2d(p, "concat_cols");
        if (p.dim(0) != n) throw DimensionError("concat_cols: row counts differ");
        total += p.dim(1);
    }
    TensorT<T> out = TensorT<T>::zeros({n, total});
    int off = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < n; ++i)
            std::copy_n(p.ptr() + static_cast<size_t>(i) * w, w,
                        out.ptr() + static_cast<size_t>(i) * total + off);
        off += w;
    }
    if (auto* tape = Tape<T>::active()) {
        std::vector<int> pids;
        std::vector<int> widths;
        bool any = false;
        for (const auto& p : parts) {
            pids.push_back(tape->node_of(p));
            widths.push_back(p.dim(1));
            any = any || pids.back() >= 0;
        }
        if (any)
            out.node = tape->record(out.data->size(), [=](Tape<T>& tp, int self) {
                const std::vector<T>& g = tp.grad(self);
                int o = 0;
                for (size_t pi = 0; pi < pids.size(); ++pi) {
                    const int w = widths[pi];
                    if (pids[pi] >= 0) {
                        std::vector<T>& gp = tp.grad(pids[pi]);
                        for (int i = 0; i < n; ++i)
                            for (int j = 0; j < w; ++j)
                                gp[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i) * total + o + j];
                    }
                    o += w;
                }
            });
    }
    return out;
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
    const size_t n = x.data->size();
    if (n == 0) throw ContractError("mean_all: empty tensor");
    // Two-pass compensated accumulation keeps the reduction stable in float32.
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += static_cast<double>((*x.data)[i]);
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x);
        if (px >= 0)
            out.node = tape->record(1, [=](Tape<T>& tp, int self) {
                const T g = tp.grad(self)[0] / static_cast<T>(n);
                std::vector<T>& gx = tp.grad(px);
                for (size_t i = 0; i < n; ++i) gx[i] += g;
            });
    }
    return out;
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
    const size_t n = x.data->size();
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) acc += static_cast<double>((*x.data)[i]);
    TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc));
    if (auto* tape = Tape<T>::active()) {
        const int px = tape->node_of(x);
        if (px >= 0)
            out.node = tape->record(1, [=](Tape<T>& tp, int self) {
                const T g = tp.grad(self)[0];
                std::vector<T>& gx = tp.grad(px);
                for (size_t i = 0; i < n; ++i) gx[i] += g;
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Random tensors
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> randn(std::vector<int> shape, SeededRng& rng, double stddev = 1.0) {
    TensorT<T> t = TensorT<T>::zeros(std::move(shape));
    for (auto& v : *t.data) v = static_cast<T>(rng.normal() * stddev);
    return t;
}

template <typename T>
TensorT<T> rand_uniform(std::vector<int> shape, SeededRng& rng, double lo = 0.0, double hi = 1.0) {
    TensorT<T> t = TensorT<T>::zeros(std::move(shape));
    for (auto& v : *t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
bool all_finite(const TensorT<T>& t) {
    for (T v : *t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

// ---------------------------------------------------------------------------
// ParameterStore: ordered name -> tensor map with per-parameter gradient
// accumulators. Single-writer: gradient accumulation and optimizer steps
// mutate in place; forward passes only read.
// ---------------------------------------------------------------------------

template <typename T>
class ParameterStore {
public:
    TensorT<T>& add(const std::string& name, TensorT<T> value) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        index_.emplace(name, params_.size());
        names_.push_back(name);
        params_.push_back(std::move(value));
        grads_.emplace_back(params_.back().data->size(), T(0));
        return params_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    // Copy handle for use in a forward pass. Frozen stores hand out no_grad
    // tensors, so no tape node is ever created for them.
    TensorT<T> get(const std::string& name) const {
        TensorT<T> t = params_[idx(name)];
        t.no_grad = frozen_;
        return t;
    }

    TensorT<T>& param(const std::string& name) { return params_[idx(name)]; }
    const TensorT<T>& param(const std::string& name) const { return params_[idx(name)]; }

    std::vector<T>& grad(const std::string& name) { return grads_[idx(name)]; }
    const std::vector<T>& grad(const std::string& name) const { return grads_[idx(name)]; }

    const std::vector<std::string>& names() const { return names_; }
    size_t size() const { return params_.size(); }

    void set_frozen(bool f) { frozen_ = f; }
    bool frozen() const { return frozen_; }

    void zero_grad() {
        for (auto& g : grads_) std::fill(g.begin(), g.end(), T(0));
    }

    // Pull gradients off a tape after backward(). Parameters that never
    // joined the tape accumulate nothing (their gradient is zero).
    void accumulate_from(const Tape<T>& tape) {
        for (size_t i = 0; i < params_.size(); ++i) {
            const std::vector<T>* g = tape.grad_of(params_[i]);
            if (!g) continue;
            if (g->size() != grads_[i].size())
                throw DimensionError("gradient size mismatch for parameter " + names_[i]);
            for (size_t j = 0; j < g->size(); ++j) grads_[i][j] += (*g)[j];
        }
    }

    // Deep copy with fresh payloads; mutating the clone never touches *this.
    ParameterStore clone() const {
        ParameterStore out;
        for (size_t i = 0; i < params_.size(); ++i) {
            TensorT<T> t;
            t.shape = params_[i].shape;
            t.data = std::make_shared<std::vector<T>>(*params_[i].data);
            out.add(names_[i], std::move(t));
        }
        return out;
    }

    long long total_scalars() const {
        long long n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

private:
    size_t idx(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }

    std::vector<std::string> names_;
    std::unordered_map<std::string, size_t> index_;
    std::vector<TensorT<T>> params_;
    std::vector<std::vector<T>> grads_;
    bool frozen_ = false;
};

// Run reverse-mode accumulation from a scalar loss and collect the gradients
// into the store. The tape must be the one the loss was recorded on.
template <typename T>
void backward(const TensorT<T>& loss, Tape<T>& tape, ParameterStore<T>& store) {
    tape.backward(loss);
    store.accumulate_from(tape);
}

}  // namespace ggen
