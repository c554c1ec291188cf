#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gsaflow/common.hpp"
#include "gsaflow/rng.hpp"

namespace gsaflow {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape &s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape &s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated lazily, same length as value
    bool requires_grad = false;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }
};

// ---------------------------------------------------------------------------
// Tensor: a cheap handle onto shared storage. Copies alias the same payload;
// ops never mutate inputs, so results behave like values. clone() deep-copies.
// ---------------------------------------------------------------------------
template <typename T>
class Tensor {
  public:
    std::shared_ptr<TensorData<T>> node;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData<T>> n) : node(std::move(n)) {}

    static Tensor zeros(const Shape &shape) { return full(shape, T(0)); }

    static Tensor full(const Shape &shape, T v) {
        auto n = make_node(shape);
        std::fill(n->value.begin(), n->value.end(), v);
        return Tensor(std::move(n));
    }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from_vec(const Shape &shape, std::vector<T> data) {
        auto n = make_node(shape);
        check_shape(static_cast<int64_t>(data.size()) == shape_numel(shape),
                    "from_vec: data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
        n->value = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor randn(const Shape &shape, Rng &rng, T stddev = T(1)) {
        auto n = make_node(shape);
        for (auto &v : n->value) v = static_cast<T>(rng.normal()) * stddev;
        return Tensor(std::move(n));
    }

    static Tensor uniform(const Shape &shape, Rng &rng, T lo, T hi) {
        auto n = make_node(shape);
        for (auto &v : n->value) v = static_cast<T>(rng.uniform(lo, hi));
        return Tensor(std::move(n));
    }

    bool defined() const { return node != nullptr; }
    const Shape &shape() const { return node->shape; }
    int ndim() const { return static_cast<int>(node->shape.size()); }
    int dim(int i) const { return node->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return node->numel(); }

    std::vector<T> &value() { return node->value; }
    const std::vector<T> &value() const { return node->value; }
    std::vector<T> &grad() { return node->grad; }
    const std::vector<T> &grad() const { return node->grad; }
    bool has_grad() const { return !node->grad.empty(); }

    bool requires_grad() const { return node->requires_grad; }
    Tensor &set_requires_grad(bool rg) {
        node->requires_grad = rg;
        return *this;
    }

    T item() const {
        check_contract(numel() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
        return node->value[0];
    }

    T at(int i) const { return node->value[static_cast<size_t>(i)]; }
    T at(int i, int j) const {
        return node->value[static_cast<size_t>(i) * dim(ndim() - 1) + static_cast<size_t>(j)];
    }

    Tensor clone() const {
        auto n = make_node(node->shape);
        n->value = node->value;
        return Tensor(std::move(n));
    }

    /// Same values, fresh node, no history.
    Tensor detach() const { return clone(); }

    static std::shared_ptr<TensorData<T>> make_node(const Shape &shape) {
        for (int d : shape)
            check_shape(d >= 1, "tensor dimensions must be positive, got " + shape_str(shape));
        auto n = std::make_shared<TensorData<T>>();
        n->shape = shape;
        n->value.assign(static_cast<size_t>(shape_numel(shape)), T(0));
        return n;
    }
};

// ---------------------------------------------------------------------------
// Tape: ordered record of executed ops. Replayed strictly in reverse, which is
// a valid reverse topological order because execution order is forward
// topological. A tape belongs to one logical thread.
// ---------------------------------------------------------------------------
template <typename T>
class Tape {
  public:
    void record(std::function<void()> backward_fn,
                const std::vector<std::shared_ptr<TensorData<T>>> &touched) {
        entries_.push_back(std::move(backward_fn));
        for (const auto &n : touched)
            if (n && n->requires_grad) touched_.push_back(n);
    }

    void run_backward(const Tensor<T> &loss) {
        check_contract(loss.numel() == 1,
                       "backward: loss must be scalar, shape " + shape_str(loss.shape()));
        if (!loss.requires_grad()) return;  // nothing reachable
        for (auto &n : touched_) n->grad.assign(n->value.size(), T(0));
        loss.node->grad.assign(1, T(1));
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    }

    size_t size() const { return entries_.size(); }

  private:
    std::vector<std::function<void()>> entries_;
    std::vector<std::shared_ptr<TensorData<T>>> touched_;
};

template <typename T>
inline thread_local Tape<T> *tl_active_tape = nullptr;

/// RAII scope that makes a fresh tape active on this thread.
template <typename T>
class TapeScope {
  public:
    TapeScope() : prev_(tl_active_tape<T>) { tl_active_tape<T> = &tape_; }
    ~TapeScope() { tl_active_tape<T> = prev_; }
    TapeScope(const TapeScope &) = delete;
    TapeScope &operator=(const TapeScope &) = delete;
    Tape<T> &tape() { return tape_; }

  private:
    Tape<T> tape_;
    Tape<T> *prev_;
};

/// RAII scope that suspends recording (forwards become constants).
template <typename T>
class NoGradScope {
  public:
    NoGradScope() : prev_(tl_active_tape<T>) { tl_active_tape<T> = nullptr; }
    ~NoGradScope() { tl_active_tape<T> = prev_; }
    NoGradScope(const NoGradScope &) = delete;
    NoGradScope &operator=(const NoGradScope &) = delete;

  private:
    Tape<T> *prev_;
};

template <typename T>
inline bool grad_enabled() {
    return tl_active_tape<T> != nullptr;
}

/// Populate grad of every requires_grad tensor reachable from `loss` on the
/// active tape. Grads of touched tensors are reset first, so each call
/// produces exactly one accumulation pass.
template <typename T>
inline void backward(const Tensor<T> &loss) {
    check_contract(tl_active_tape<T> != nullptr, "backward: no active tape");
    tl_active_tape<T>->run_backward(loss);
}

namespace detail {

template <typename T>
inline void ensure_grad(const std::shared_ptr<TensorData<T>> &n) {
    if (n->grad.empty()) n->grad.assign(n->value.size(), T(0));
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
inline void mm_nn(const T *a, const T *b, T *c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T *ai = a + static_cast<size_t>(i) * k;
        T *ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            T av = ai[p];
            const T *bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
inline void mm_nt(const T *a, const T *b, T *c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T *ai = a + static_cast<size_t>(i) * k;
        T *ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const T *bj = b + static_cast<size_t>(j) * k;
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
inline void mm_tn(const T *a, const T *b, T *c, int m, int k, int n) {
    for (int p = 0; p < k; ++p) {
        const T *ap = a + static_cast<size_t>(p) * m;
        const T *bp = b + static_cast<size_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            T av = ap[i];
            T *ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

template <typename T>
inline T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T, typename Fn>
inline Tensor<T> unary_op(const Tensor<T> &x, Fn &&fn_value_and_dvalue) {
    auto out = Tensor<T>::make_node(x.shape());
    std::vector<T> dvalue;  // local derivative, captured by the closure
    const bool rec = grad_enabled<T>() && x.requires_grad();
    if (rec) dvalue.resize(x.value().size());
    for (size_t i = 0; i < x.value().size(); ++i) {
        auto [v, d] = fn_value_and_dvalue(x.value()[i]);
        out->value[i] = v;
        if (rec) dvalue[i] = d;
    }
    Tensor<T> result(out);
    if (rec) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, on, d = std::move(dvalue)]() {
                ensure_grad(xn);
                for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i] * d[i];
            },
            {x.node, result.node});
    }
    return result;
}

}  // namespace detail

// --------------------------- elementwise ops -------------------------------

template <typename T>
inline Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b) {
    check_shape(a.shape() == b.shape(),
                "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = Tensor<T>::make_node(a.shape());
    for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.value()[i] + b.value()[i];
    Tensor<T> result(out);
    if (grad_enabled<T>() && (a.requires_grad() || b.requires_grad())) {
        result.set_requires_grad(true);
        auto an = a.node, bn = b.node, on = result.node;
        tl_active_tape<T>->record(
            [an, bn, on]() {
                if (an->requires_grad) {
                    detail::ensure_grad(an);
                    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(bn);
                    for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += on->grad[i];
                }
            },
            {a.node, b.node, result.node});
    }
    return result;
}

template <typename T>
inline Tensor<T> sub(const Tensor<T> &a, const Tensor<T> &b) {
    check_shape(a.shape() == b.shape(),
                "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = Tensor<T>::make_node(a.shape());
    for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.value()[i] - b.value()[i];
    Tensor<T> result(out);
    if (grad_enabled<T>() && (a.requires_grad() || b.requires_grad())) {
        result.set_requires_grad(true);
        auto an = a.node, bn = b.node, on = result.node;
        tl_active_tape<T>->record(
            [an, bn, on]() {
                if (an->requires_grad) {
                    detail::ensure_grad(an);
                    for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(bn);
                    for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= on->grad[i];
                }
            },
            {a.node, b.node, result.node});
    }
    return result;
}

template <typename T>
inline Tensor<T> mul(const Tensor<T> &a, const Tensor<T> &b) {
    check_shape(a.shape() == b.shape(),
                "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = Tensor<T>::make_node(a.shape());
    for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.value()[i] * b.value()[i];
    Tensor<T> result(out);
    if (grad_enabled<T>() && (a.requires_grad() || b.requires_grad())) {
        result.set_requires_grad(true);
        auto an = a.node, bn = b.node, on = result.node;
        tl_active_tape<T>->record(
            [an, bn, on]() {
                if (an->requires_grad) {
                    detail::ensure_grad(an);
                    for (size_t i = 0; i < an->grad.size(); ++i)
                        an->grad[i] += on->grad[i] * bn->value[i];
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(bn);
                    for (size_t i = 0; i < bn->grad.size(); ++i)
                        bn->grad[i] += on->grad[i] * an->value[i];
                }
            },
            {a.node, b.node, result.node});
    }
    return result;
}

template <typename T>
inline Tensor<T> add_scalar(const Tensor<T> &x, T s) {
    return detail::unary_op(x, [s](T v) { return std::pair<T, T>(v + s, T(1)); });
}

template <typename T>
inline Tensor<T> mul_scalar(const Tensor<T> &x, T s) {
    return detail::unary_op(x, [s](T v) { return std::pair<T, T>(v * s, s); });
}

template <typename T>
inline Tensor<T> neg(const Tensor<T> &x) {
    return mul_scalar(x, T(-1));
}

template <typename T>
inline Tensor<T> operator+(const Tensor<T> &a, const Tensor<T> &b) { return add(a, b); }
template <typename T>
inline Tensor<T> operator-(const Tensor<T> &a, const Tensor<T> &b) { return sub(a, b); }
template <typename T>
inline Tensor<T> operator*(const Tensor<T> &a, const Tensor<T> &b) { return mul(a, b); }
template <typename T>
inline Tensor<T> operator+(const Tensor<T> &a, T s) { return add_scalar(a, s); }
template <typename T>
inline Tensor<T> operator*(const Tensor<T> &a, T s) { return mul_scalar(a, s); }
template <typename T>
inline Tensor<T> operator*(T s, const Tensor<T> &a) { return mul_scalar(a, s); }
template <typename T>
inline Tensor<T> operator-(const Tensor<T> &a) { return neg(a); }

// ----------------------------- matmul family -------------------------------

template <typename T>
inline Tensor<T> matmul(const Tensor<T> &a, const Tensor<T> &b) {
    check_shape(a.ndim() == 2 && b.ndim() == 2,
                "matmul: operands must be 2-D, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
    check_shape(a.dim(1) == b.dim(0),
                "matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                    shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<T>::make_node({m, n});
    detail::mm_nn(a.value().data(), b.value().data(), out->value.data(), m, k, n);
    Tensor<T> result(out);
    if (grad_enabled<T>() && (a.requires_grad() || b.requires_grad())) {
        result.set_requires_grad(true);
        auto an = a.node, bn = b.node, on = result.node;
        tl_active_tape<T>->record(
            [an, bn, on, m, k, n]() {
                if (an->requires_grad) {
                    detail::ensure_grad(an);
                    detail::mm_nt(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(bn);
                    detail::mm_tn(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n);
                }
            },
            {a.node, b.node, result.node});
    }
    return result;
}

template <typename T>
inline Tensor<T> transpose(const Tensor<T> &x) {
    check_shape(x.ndim() == 2, "transpose: expects 2-D, got " + shape_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    auto out = Tensor<T>::make_node({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->value[static_cast<size_t>(j) * m + i] = x.value()[static_cast<size_t>(i) * n + j];
    Tensor<T> result(out);
    if (grad_enabled<T>() && x.requires_grad()) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, on, m, n]() {
                detail::ensure_grad(xn);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        xn->grad[static_cast<size_t>(i) * n + j] +=
                            on->grad[static_cast<size_t>(j) * m + i];
            },
            {x.node, result.node});
    }
    return result;
}

template <typename T>
inline Tensor<T> reshape(const Tensor<T> &x, const Shape &shape) {
    check_shape(shape_numel(shape) == x.numel(),
                "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto out = Tensor<T>::make_node(shape);
    out->value = x.value();
    Tensor<T> result(out);
    if (grad_enabled<T>() && x.requires_grad()) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, on]() {
                detail::ensure_grad(xn);
                for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
            },
            {x.node, result.node});
    }
    return result;
}

// ------------------------------ concat/slice -------------------------------

template <typename T>
inline Tensor<T> concat(const std::vector<Tensor<T>> &parts, int axis) {
    check_contract(!parts.empty(), "concat: empty part list");
    check_contract(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
    for (const auto &p : parts)
        check_shape(p.ndim() == 2, "concat: expects 2-D parts, got " + shape_str(p.shape()));
    const int other = axis == 0 ? 1 : 0;
    const int fixed = parts[0].dim(other);
    int total = 0;
    for (const auto &p : parts) {
        check_shape(p.dim(other) == fixed,
                    "concat: mismatched dimension, " + shape_str(parts[0].shape()) + " vs " +
                        shape_str(p.shape()));
        total += p.dim(axis);
    }
    Shape out_shape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
    auto out = Tensor<T>::make_node(out_shape);
    bool any_rg = false;
    int offset = 0;
    for (const auto &p : parts) {
        any_rg = any_rg || p.requires_grad();
        if (axis == 0) {
            std::copy(p.value().begin(), p.value().end(),
                      out->value.begin() + static_cast<size_t>(offset) * fixed);
        } else {
            const int rows = fixed, cols = p.dim(1);
            for (int i = 0; i < rows; ++i)
                std::copy(p.value().begin() + static_cast<size_t>(i) * cols,
                          p.value().begin() + static_cast<size_t>(i + 1) * cols,
                          out->value.begin() + static_cast<size_t>(i) * total + offset);
        }
        offset += p.dim(axis);
    }
    Tensor<T> result(out);
    if (grad_enabled<T>() && any_rg) {
        result.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorData<T>>> nodes;
        for (const auto &p : parts) nodes.push_back(p.node);
        auto on = result.node;
        auto fn = [nodes, on, axis, fixed, total]() {
            int off = 0;
            for (const auto &pn : nodes) {
                const Shape &ps = pn->shape;
                const int len = axis == 0 ? ps[0] : ps[1];
                if (pn->requires_grad) {
                    detail::ensure_grad(pn);
                    if (axis == 0) {
                        for (size_t i = 0; i < pn->grad.size(); ++i)
                            pn->grad[i] += on->grad[static_cast<size_t>(off) * fixed + i];
                    } else {
                        const int cols = ps[1];
                        for (int i = 0; i < fixed; ++i)
                            for (int j = 0; j < cols; ++j)
                                pn->grad[static_cast<size_t>(i) * cols + j] +=
                                    on->grad[static_cast<size_t>(i) * total + off + j];
                    }
                }
                off += len;
            }
        };
        auto touched = nodes;
        touched.push_back(result.node);
        tl_active_tape<T>->record(fn, touched);
    }
    return result;
}

/// Order-preserving concatenation along the sequence (row) axis.
template <typename T>
inline Tensor<T> concat_seq(const std::vector<Tensor<T>> &parts) {
    return concat(parts, 0);
}

template <typename T>
inline Tensor<T> slice_rows(const Tensor<T> &x, int r0, int r1) {
    check_shape(x.ndim() == 2, "slice_rows: expects 2-D, got " + shape_str(x.shape()));
    check_contract(0 <= r0 && r0 < r1 && r1 <= x.dim(0),
                   "slice_rows: invalid range [" + std::to_string(r0) + "," + std::to_string(r1) +
                       ") for " + shape_str(x.shape()));
    const int n = x.dim(1);
    auto out = Tensor<T>::make_node({r1 - r0, n});
    std::copy(x.value().begin() + static_cast<size_t>(r0) * n,
              x.value().begin() + static_cast<size_t>(r1) * n, out->value.begin());
    Tensor<T> result(out);
    if (grad_enabled<T>() && x.requires_grad()) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, on, r0, n]() {
                detail::ensure_grad(xn);
                for (size_t i = 0; i < on->grad.size(); ++i)
                    xn->grad[static_cast<size_t>(r0) * n + i] += on->grad[i];
            },
            {x.node, result.node});
    }
    return result;
}

template <typename T>
inline Tensor<T> slice_cols(const Tensor<T> &x, int c0, int c1) {
    check_shape(x.ndim() == 2, "slice_cols: expects 2-D, got " + shape_str(x.shape()));
    check_contract(0 <= c0 && c0 < c1 && c1 <= x.dim(1),
                   "slice_cols: invalid range [" + std::to_string(c0) + "," + std::to_string(c1) +
                       ") for " + shape_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1), w = c1 - c0;
    auto out = Tensor<T>::make_node({m, w});
    for (int i = 0; i < m; ++i)
        std::copy(x.value().begin() + static_cast<size_t>(i) * n + c0,
                  x.value().begin() + static_cast<size_t>(i) * n + c1,
                  out->value.begin() + static_cast<size_t>(i) * w);
    Tensor<T> result(out);
    if (grad_enabled<T>() && x.requires_grad()) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, on, m, n, c0, w]() {
                detail::ensure_grad(xn);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j)
                        xn->grad[static_cast<size_t>(i) * n + c0 + j] +=
                            on->grad[static_cast<size_t>(i) * w + j];
            },
            {x.node, result.node});
    }
    return result;
}

/// Gather by flat index: out.value[i] = x.value[index[i]]. Backward
/// scatter-adds, so the index may repeat entries.
template <typename T>
inline Tensor<T> permute_flat(const Tensor<T> &x, const std::vector<int64_t> &index,
                              const Shape &out_shape) {
    check_shape(static_cast<int64_t>(index.size()) == shape_numel(out_shape),
                "permute_flat: index length does not match output shape");
    auto out = Tensor<T>::make_node(out_shape);
    for (size_t i = 0; i < index.size(); ++i) {
        check_contract(index[i] >= 0 && index[i] < x.numel(), "permute_flat: index out of range");
        out->value[i] = x.value()[static_cast<size_t>(index[i])];
    }
    Tensor<T> result(out);
    if (grad_enabled<T>() && x.requires_grad()) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, on, index]() {
                detail::ensure_grad(xn);
                for (size_t i = 0; i < index.size(); ++i)
                    xn->grad[static_cast<size_t>(index[i])] += on->grad[i];
            },
            {x.node, result.node});
    }
    return result;
}

// ------------------------------ activations --------------------------------

template <typename T>
inline Tensor<T> sigmoid(const Tensor<T> &x) {
    return detail::unary_op(x, [](T v) {
        T s = detail::stable_sigmoid(v);
        return std::pair<T, T>(s, s * (T(1) - s));
    });
}

template <typename T>
inline Tensor<T> log_sigmoid(const Tensor<T> &x) {
    return detail::unary_op(x, [](T v) {
        T y = v >= T(0) ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
        return std::pair<T, T>(y, detail::stable_sigmoid(-v));
    });
}

template <typename T>
inline Tensor<T> silu(const Tensor<T> &x) {
    return detail::unary_op(x, [](T v) {
        T s = detail::stable_sigmoid(v);
        return std::pair<T, T>(v * s, s * (T(1) + v * (T(1) - s)));
    });
}

template <typename T>
inline Tensor<T> gelu(const Tensor<T> &x) {
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return detail::unary_op(x, [](T v) {
        const T c = static_cast<T>(kC), a = static_cast<T>(kA);
        T u = c * (v + a * v * v * v);
        T th = std::tanh(u);
        T y = T(0.5) * v * (T(1) + th);
        T d = T(0.5) * (T(1) + th) +
              T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * a * v * v);
        return std::pair<T, T>(y, d);
    });
}

// ----------------------------- normalization -------------------------------

inline constexpr double kNormEps = 1e-6;

/// Softmax over the last dimension, stabilized by row-max subtraction.
template <typename T>
inline Tensor<T> softmax_rows(const Tensor<T> &x) {
    check_shape(x.ndim() >= 1, "softmax_rows: expects rank >= 1");
    const int n = x.dim(x.ndim() - 1);
    const int64_t rows = x.numel() / n;
    auto out = Tensor<T>::make_node(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const T *xr = x.value().data() + r * n;
        T *yr = out->value.data() + r * n;
        T mx = xr[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        T sum = T(0);
        for (int j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        for (int j = 0; j < n; ++j) yr[j] /= sum;
    }
    Tensor<T> result(out);
    if (grad_enabled<T>() && x.requires_grad()) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, on, rows, n]() {
                detail::ensure_grad(xn);
                for (int64_t r = 0; r < rows; ++r) {
                    const T *y = on->value.data() + r * n;
                    const T *go = on->grad.data() + r * n;
                    T *gx = xn->grad.data() + r * n;
                    T dot = T(0);
                    for (int j = 0; j < n; ++j) dot += go[j] * y[j];
                    for (int j = 0; j < n; ++j) gx[j] += y[j] * (go[j] - dot);
                }
            },
            {x.node, result.node});
    }
    return result;
}

/// Layer normalization over the last dimension with optional learnable scale.
template <typename T>
inline Tensor<T> layer_norm(const Tensor<T> &x, const Tensor<T> *gain = nullptr) {
    check_shape(x.ndim() >= 1, "layer_norm: expects rank >= 1");
    const int n = x.dim(x.ndim() - 1);
    if (gain)
        check_shape(gain->ndim() == 1 && gain->dim(0) == n,
                    "layer_norm: gain shape " + shape_str(gain->shape()) + " does not match last dim " +
                        std::to_string(n));
    const int64_t rows = x.numel() / n;
    auto out = Tensor<T>::make_node(x.shape());
    std::vector<T> inv_std(static_cast<size_t>(rows));
    std::vector<T> norm(x.value().size());  // pre-gain normalized values
    for (int64_t r = 0; r < rows; ++r) {
        const T *xr = x.value().data() + r * n;
        T mu = T(0);
        for (int j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<T>(n);
        T var = T(0);
        for (int j = 0; j < n; ++j) {
            T d = xr[j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(n);
        T inv = T(1) / std::sqrt(var + static_cast<T>(kNormEps));
        inv_std[static_cast<size_t>(r)] = inv;
        for (int j = 0; j < n; ++j) {
            T y = (xr[j] - mu) * inv;
            norm[static_cast<size_t>(r * n + j)] = y;
            out->value[static_cast<size_t>(r * n + j)] = gain ? y * gain->value()[static_cast<size_t>(j)] : y;
        }
    }
    Tensor<T> result(out);
    const bool gain_rg = gain && gain->requires_grad();
    if (grad_enabled<T>() && (x.requires_grad() || gain_rg)) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        auto gn = gain ? gain->node : nullptr;
        tl_active_tape<T>->record(
            [xn, on, gn, rows, n, inv = std::move(inv_std), norm = std::move(norm)]() {
                if (xn->requires_grad) detail::ensure_grad(xn);
                if (gn && gn->requires_grad) detail::ensure_grad(gn);
                for (int64_t r = 0; r < rows; ++r) {
                    const T *go = on->grad.data() + r * n;
                    const T *y = norm.data() + r * n;
                    if (gn && gn->requires_grad)
                        for (int j = 0; j < n; ++j) gn->grad[static_cast<size_t>(j)] += go[j] * y[j];
                    if (!xn->requires_grad) continue;
                    T *gx = xn->grad.data() + r * n;
                    T mean_g = T(0), mean_gy = T(0);
                    for (int j = 0; j < n; ++j) {
                        T gj = gn ? go[j] * gn->value[static_cast<size_t>(j)] : go[j];
                        mean_g += gj;
                        mean_gy += gj * y[j];
                    }
                    mean_g /= static_cast<T>(n);
                    mean_gy /= static_cast<T>(n);
                    for (int j = 0; j < n; ++j) {
                        T gj = gn ? go[j] * gn->value[static_cast<size_t>(j)] : go[j];
                        gx[j] += inv[static_cast<size_t>(r)] * (gj - mean_g - y[j] * mean_gy);
                    }
                }
            },
            gn ? std::vector<std::shared_ptr<TensorData<T>>>{x.node, gn, result.node}
               : std::vector<std::shared_ptr<TensorData<T>>>{x.node, result.node});
    }
    return result;
}

/// RMS normalization over the last dimension with learnable scale.
template <typename T>
inline Tensor<T> rms_norm(const Tensor<T> &x, const Tensor<T> &gain) {
    check_shape(x.ndim() >= 1, "rms_norm: expects rank >= 1");
    const int n = x.dim(x.ndim() - 1);
    check_shape(gain.ndim() == 1 && gain.dim(0) == n,
                "rms_norm: gain shape " + shape_str(gain.shape()) + " does not match last dim " +
                    std::to_string(n));
    const int64_t rows = x.numel() / n;
    auto out = Tensor<T>::make_node(x.shape());
    std::vector<T> inv_rms(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const T *xr = x.value().data() + r * n;
        T ms = T(0);
        for (int j = 0; j < n; ++j) ms += xr[j] * xr[j];
        ms /= static_cast<T>(n);
        T inv = T(1) / std::sqrt(ms + static_cast<T>(kNormEps));
        inv_rms[static_cast<size_t>(r)] = inv;
        for (int j = 0; j < n; ++j)
            out->value[static_cast<size_t>(r * n + j)] = xr[j] * inv * gain.value()[static_cast<size_t>(j)];
    }
    Tensor<T> result(out);
    if (grad_enabled<T>() && (x.requires_grad() || gain.requires_grad())) {
        result.set_requires_grad(true);
        auto xn = x.node, gn = gain.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, gn, on, rows, n, inv = std::move(inv_rms)]() {
                if (xn->requires_grad) detail::ensure_grad(xn);
                if (gn->requires_grad) detail::ensure_grad(gn);
                for (int64_t r = 0; r < rows; ++r) {
                    const T *go = on->grad.data() + r * n;
                    const T *xv = xn->value.data() + r * n;
                    const T ir = inv[static_cast<size_t>(r)];
                    if (gn->requires_grad)
                        for (int j = 0; j < n; ++j)
                            gn->grad[static_cast<size_t>(j)] += go[j] * xv[j] * ir;
                    if (!xn->requires_grad) continue;
                    T *gx = xn->grad.data() + r * n;
                    T mean_gy = T(0);
                    for (int j = 0; j < n; ++j)
                        mean_gy += go[j] * gn->value[static_cast<size_t>(j)] * xv[j] * ir;
                    mean_gy /= static_cast<T>(n);
                    for (int j = 0; j < n; ++j) {
                        T gj = go[j] * gn->value[static_cast<size_t>(j)];
                        gx[j] += ir * (gj - xv[j] * ir * mean_gy);
                    }
                }
            },
            {x.node, gain.node, result.node});
    }
    return result;
}

// ------------------------------- reductions --------------------------------

template <typename T>
inline Tensor<T> sum(const Tensor<T> &x) {
    auto out = Tensor<T>::make_node({1});
    T acc = T(0);
    for (T v : x.value()) acc += v;
    out->value[0] = acc;
    Tensor<T> result(out);
    if (grad_enabled<T>() && x.requires_grad()) {
        result.set_requires_grad(true);
        auto xn = x.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, on]() {
                detail::ensure_grad(xn);
                for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
            },
            {x.node, result.node});
    }
    return result;
}

template <typename T>
inline Tensor<T> mean(const Tensor<T> &x) {
    return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean squared error over all elements.
template <typename T>
inline Tensor<T> mse(const Tensor<T> &a, const Tensor<T> &b) {
    check_shape(a.shape() == b.shape(),
                "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = Tensor<T>::make_node({1});
    const int64_t n = a.numel();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        T d = a.value()[static_cast<size_t>(i)] - b.value()[static_cast<size_t>(i)];
        acc += d * d;
    }
    out->value[0] = acc / static_cast<T>(n);
    Tensor<T> result(out);
    if (grad_enabled<T>() && (a.requires_grad() || b.requires_grad())) {
        result.set_requires_grad(true);
        auto an = a.node, bn = b.node, on = result.node;
        tl_active_tape<T>->record(
            [an, bn, on, n]() {
                T g = on->grad[0] * T(2) / static_cast<T>(n);
                if (an->requires_grad) {
                    detail::ensure_grad(an);
                    for (int64_t i = 0; i < n; ++i)
                        an->grad[static_cast<size_t>(i)] +=
                            g * (an->value[static_cast<size_t>(i)] - bn->value[static_cast<size_t>(i)]);
                }
                if (bn->requires_grad) {
                    detail::ensure_grad(bn);
                    for (int64_t i = 0; i < n; ++i)
                        bn->grad[static_cast<size_t>(i)] -=
                            g * (an->value[static_cast<size_t>(i)] - bn->value[static_cast<size_t>(i)]);
                }
            },
            {a.node, b.node, result.node});
    }
    return result;
}

// --------------------------- row-vector broadcast ---------------------------

// x is [rows x n]; v is [n] and broadcasts over the leading axis.
template <typename T>
inline Tensor<T> mul_rowvec(const Tensor<T> &x, const Tensor<T> &v) {
    check_shape(x.ndim() == 2 && v.ndim() == 1 && v.dim(0) == x.dim(1),
                "mul_rowvec: incompatible shapes " + shape_str(x.shape()) + " and " +
                    shape_str(v.shape()));
    const int m = x.dim(0), n = x.dim(1);
    auto out = Tensor<T>::make_node(x.shape());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->value[static_cast<size_t>(i) * n + j] =
                x.value()[static_cast<size_t>(i) * n + j] * v.value()[static_cast<size_t>(j)];
    Tensor<T> result(out);
    if (grad_enabled<T>() && (x.requires_grad() || v.requires_grad())) {
        result.set_requires_grad(true);
        auto xn = x.node, vn = v.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, vn, on, m, n]() {
                if (xn->requires_grad) {
                    detail::ensure_grad(xn);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                            xn->grad[static_cast<size_t>(i) * n + j] +=
                                on->grad[static_cast<size_t>(i) * n + j] * vn->value[static_cast<size_t>(j)];
                }
                if (vn->requires_grad) {
                    detail::ensure_grad(vn);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                            vn->grad[static_cast<size_t>(j)] +=
                                on->grad[static_cast<size_t>(i) * n + j] * xn->value[static_cast<size_t>(i) * n + j];
                }
            },
            {x.node, v.node, result.node});
    }
    return result;
}

template <typename T>
inline Tensor<T> add_rowvec(const Tensor<T> &x, const Tensor<T> &v) {
    check_shape(x.ndim() == 2 && v.ndim() == 1 && v.dim(0) == x.dim(1),
                "add_rowvec: incompatible shapes " + shape_str(x.shape()) + " and " +
                    shape_str(v.shape()));
    const int m = x.dim(0), n = x.dim(1);
    auto out = Tensor<T>::make_node(x.shape());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out->value[static_cast<size_t>(i) * n + j] =
                x.value()[static_cast<size_t>(i) * n + j] + v.value()[static_cast<size_t>(j)];
    Tensor<T> result(out);
    if (grad_enabled<T>() && (x.requires_grad() || v.requires_grad())) {
        result.set_requires_grad(true);
        auto xn = x.node, vn = v.node, on = result.node;
        tl_active_tape<T>->record(
            [xn, vn, on, m, n]() {
                if (xn->requires_grad) {
                    detail::ensure_grad(xn);
                    for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
                }
                if (vn->requires_grad) {
                    detail::ensure_grad(vn);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j)
                            vn->grad[static_cast<size_t>(j)] += on->grad[static_cast<size_t>(i) * n + j];
                }
            },
            {x.node, v.node, result.node});
    }
    return result;
}

// ------------------------------- embedding ---------------------------------

/// Row gather from an embedding table; backward scatter-adds into rows.
template <typename T>
inline Tensor<T> embedding(const Tensor<T> &table, const std::vector<int> &ids) {
    check_shape(table.ndim() == 2, "embedding: table must be 2-D");
    check_contract(!ids.empty(), "embedding: empty id list");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        check_contract(0 <= id && id < v,
                       "embedding: id " + std::to_string(id) + " out of range [0," + std::to_string(v) + ")");
    auto out = Tensor<T>::make_node({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.value().begin() + static_cast<size_t>(ids[i]) * d,
                  table.value().begin() + static_cast<size_t>(ids[i] + 1) * d,
                  out->value.begin() + i * d);
    Tensor<T> result(out);
    if (grad_enabled<T>() && table.requires_grad()) {
        result.set_requires_grad(true);
        auto tn = table.node, on = result.node;
        tl_active_tape<T>->record(
            [tn, on, ids, d]() {
                detail::ensure_grad(tn);
                for (size_t i = 0; i < ids.size(); ++i)
                    for (int j = 0; j < d; ++j)
                        tn->grad[static_cast<size_t>(ids[i]) * d + j] += on->grad[i * d + j];
            },
            {table.node, result.node});
    }
    return result;
}

// ------------------------------- grad check --------------------------------

/// Max relative error between the analytic gradient of f at x and central
/// finite differences. Meant to run on the double instantiation.
template <typename T>
inline T grad_check(const std::function<Tensor<T>(const Tensor<T> &)> &f, Tensor<T> x, T eps) {
    check_contract(eps >= T(1e-6) && eps <= T(1e-3), "grad_check: eps out of [1e-6, 1e-3]");
    std::vector<T> analytic;
    {
        TapeScope<T> scope;
        x.set_requires_grad(true);
        Tensor<T> loss = f(x);
        check_contract(loss.numel() == 1, "grad_check: f must be scalar-valued");
        backward(loss);
        analytic = x.grad();
        if (analytic.empty()) analytic.assign(x.value().size(), T(0));
    }
    T worst = T(0);
    {
        NoGradScope<T> no_grad;
        for (size_t i = 0; i < x.value().size(); ++i) {
            T orig = x.value()[i];
            x.value()[i] = orig + eps;
            T up = f(x).item();
            x.value()[i] = orig - eps;
            T down = f(x).item();
            x.value()[i] = orig;
            T numeric = (up - down) / (T(2) * eps);
            T a = analytic[i];
            T denom = std::max(T(1), std::max(std::abs(a), std::abs(numeric)));
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace gsaflow
