#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace camf {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

template <class T>
struct GradTape;

// Dense row-major tensor. Values are immutable once an op has produced the
// tensor; only the grad buffer is written afterwards. Copies alias the same
// storage. The grad slot is a shared vector that starts empty and is resized
// in place on first use, so a backward closure that captured the tensor
// before tracking was decided still sees the same buffer.
template <class T>
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<T>> store;
    std::shared_ptr<std::vector<T>> grad_store;
    bool requires_grad = false;
    int node = -1;  // index of the tape record that produced this tensor

    Tensor() = default;

    static Tensor zeros(Shape s) {
        Tensor t;
        t.shape = std::move(s);
        t.store = std::make_shared<std::vector<T>>(shape_numel(t.shape), T(0));
        t.grad_store = std::make_shared<std::vector<T>>();
        return t;
    }
    static Tensor full(Shape s, T v) {
        Tensor t = zeros(std::move(s));
        for (auto& x : *t.store) x = v;
        return t;
    }
    static Tensor from(Shape s, std::vector<T> values) {
        if (shape_numel(s) != values.size())
            throw std::invalid_argument("tensor shape " + shape_str(s) + " does not match " +
                                        std::to_string(values.size()) + " values");
        Tensor t;
        t.shape = std::move(s);
        t.store = std::make_shared<std::vector<T>>(std::move(values));
        t.grad_store = std::make_shared<std::vector<T>>();
        return t;
    }
    static Tensor scalar(T v) { return from({1}, {v}); }

    // Learnable leaf: grad buffer lives as long as any alias does, so
    // optimizer steps and accumulation all see one buffer.
    static Tensor param(Shape s) {
        Tensor t = zeros(std::move(s));
        t.set_requires_grad();
        return t;
    }

    std::size_t numel() const { return store ? store->size() : 0; }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    T* data() { return store->data(); }
    const T* data() const { return store->data(); }
    bool has_grad() const { return grad_store && grad_store->size() == numel() && numel() > 0; }
    T* grad() { return grad_store->data(); }
    const T* grad() const { return grad_store->data(); }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape));
        return (*store)[0];
    }

    bool tracked() const { return requires_grad || node >= 0; }

    void ensure_grad() {
        if (!grad_store) grad_store = std::make_shared<std::vector<T>>();
        if (grad_store->size() != numel()) grad_store->assign(numel(), T(0));
    }

    void set_requires_grad(bool on = true) {
        requires_grad = on;
        if (on) ensure_grad();
    }

    void zero_grad() {
        if (grad_store)
            for (auto& g : *grad_store) g = T(0);
    }

    Tensor detached() const {
        Tensor t;
        t.shape = shape;
        t.store = store;
        t.grad_store = std::make_shared<std::vector<T>>();
        return t;
    }

    Tensor clone(bool as_param = false) const {
        Tensor t;
        t.shape = shape;
        t.store = std::make_shared<std::vector<T>>(*store);
        t.grad_store = std::make_shared<std::vector<T>>();
        if (as_param) t.set_requires_grad();
        return t;
    }
};

// Ordered log of performed operations. Single-owner: one tape per training
// step, never shared across threads. Record order is a topological order of
// the computation DAG, so one reverse sweep visits each node exactly once.
template <class T>
struct GradTape {
    struct Record {
        std::vector<int> parents;    // tape nodes feeding this op
        std::function<void()> pull;  // accumulates into the captured grads
    };
    std::vector<Record> records;

    int emit(std::vector<int> parents, std::function<void()> pull) {
        records.push_back(Record{std::move(parents), std::move(pull)});
        return int(records.size()) - 1;
    }
    std::size_t size() const { return records.size(); }
};

namespace detail {

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
#if !defined(NDEBUG)
    for (std::size_t i = 0; i < t.numel(); ++i)
        assert(std::isfinite(double(t.data()[i])) && op);
#else
    (void)t;
    (void)op;
#endif
}

// Registers `out` on the tape when tracking applies. The pull closure must
// capture the tensors it touches by value and guard writes with has_grad().
template <class T>
inline void record(GradTape<T>* tape, Tensor<T>& out, std::initializer_list<const Tensor<T>*> ins,
                   std::function<void()> pull) {
    if (!tape) return;
    bool need = false;
    for (const Tensor<T>* t : ins) need = need || t->tracked();
    if (!need) return;
    // The grad slot must predate the closure's capture of `out`.
    assert(out.grad_store && "op output built without a grad slot");
    out.requires_grad = true;
    out.ensure_grad();
    std::vector<int> parents;
    for (const Tensor<T>* t : ins)
        if (t->node >= 0) parents.push_back(t->node);
    out.node = tape->emit(std::move(parents), std::move(pull));
}

template <class T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape != b.shape)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops (same shape; scalar variants are separate, no broadcasting)
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, GradTape<T>* tape = nullptr) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    detail::check_finite(out, "add");
    detail::record(tape, out, {&a, &b}, [a, b, out]() {
        const T* g = out.grad();
        if (a.has_grad()) {
            T* ga = const_cast<Tensor<T>&>(a).grad();
            for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
        }
        if (b.has_grad()) {
            T* gb = const_cast<Tensor<T>&>(b).grad();
            for (std::size_t i = 0; i < out.numel(); ++i) gb[i] += g[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b, GradTape<T>* tape = nullptr) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    detail::check_finite(out, "sub");
    detail::record(tape, out, {&a, &b}, [a, b, out]() {
        const T* g = out.grad();
        if (a.has_grad()) {
            T* ga = const_cast<Tensor<T>&>(a).grad();
            for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
        }
        if (b.has_grad()) {
            T* gb = const_cast<Tensor<T>&>(b).grad();
            for (std::size_t i = 0; i < out.numel(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b, GradTape<T>* tape = nullptr) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::check_finite(out, "mul");
    detail::record(tape, out, {&a, &b}, [a, b, out]() {
        const T* g = out.grad();
        if (a.has_grad()) {
            T* ga = const_cast<Tensor<T>&>(a).grad();
            for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.has_grad()) {
            T* gb = const_cast<Tensor<T>&>(b).grad();
            for (std::size_t i = 0; i < out.numel(); ++i) gb[i] += g[i] * a.data()[i];
        }
    });
    return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s, GradTape<T>* tape = nullptr) {
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * s;
    detail::check_finite(out, "scale");
    detail::record(tape, out, {&a}, [a, out, s]() {
        if (!a.has_grad()) return;
        const T* g = out.grad();
        T* ga = const_cast<Tensor<T>&>(a).grad();
        for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i] * s;
    });
    return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s, GradTape<T>* tape = nullptr) {
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + s;
    detail::record(tape, out, {&a}, [a, out]() {
        if (!a.has_grad()) return;
        const T* g = out.grad();
        T* ga = const_cast<Tensor<T>&>(a).grad();
        for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
    });
    return out;
}

enum class EwKind { add, sub, mul, scale };

// Dispatcher form used where the op kind is data, e.g. fusion recipes.
template <class T>
Tensor<T> elementwise(EwKind kind, const Tensor<T>& a, const Tensor<T>& b, GradTape<T>* tape = nullptr) {
    switch (kind) {
        case EwKind::add: return add(a, b, tape);
        case EwKind::sub: return sub(a, b, tape);
        case EwKind::mul: return mul(a, b, tape);
        case EwKind::scale:
            if (b.numel() != 1) throw std::invalid_argument("elementwise scale expects a scalar second operand");
            return scale(a, b.item(), tape);
    }
    throw std::invalid_argument("unknown elementwise kind");
}

// ---------------------------------------------------------------------------
// matmul and friends
// ---------------------------------------------------------------------------

namespace detail {
// C[m x n] += A[m x k] * B[k x n], ikj order for contiguous inner loops
template <class T>
inline void gemm_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* a_row = A + i * k;
        T* c_row = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            T a = a_row[p];
            const T* b_row = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}
// C[m x n] += A[m x k] * B^T where B is [n x k]
template <class T>
inline void gemm_nt_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* a_row = A + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* b_row = B + j * k;
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) acc += a_row[p] * b_row[p];
            C[i * n + j] += acc;
        }
    }
}
// C[m x n] += A^T * B where A is [k x m], B is [k x n]
template <class T>
inline void gemm_tn_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const T* a_row = A + p * m;
        const T* b_row = B + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            T a = a_row[i];
            T* c_row = C + i * n;
            for (std::size_t j = 0; j < n; ++j) c_row[j] += a * b_row[j];
        }
    }
}
}  // namespace detail

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, GradTape<T>* tape = nullptr) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul expects rank-2 tensors, got " + shape_str(a.shape) + " and " +
                                    shape_str(b.shape));
    if (a.shape[1] != b.shape[0])
        throw std::invalid_argument("matmul inner dimensions disagree: " + shape_str(a.shape) + " vs " +
                                    shape_str(b.shape));
    std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
    detail::check_finite(out, "matmul");
    detail::record(tape, out, {&a, &b}, [a, b, out, m, k, n]() {
        const T* g = out.grad();
        if (a.has_grad())  // dA += dC * B^T
            detail::gemm_nt_acc(g, b.data(), const_cast<Tensor<T>&>(a).grad(), m, n, k);
        if (b.has_grad())  // dB += A^T * dC
            detail::gemm_tn_acc(a.data(), g, const_cast<Tensor<T>&>(b).grad(), k, m, n);
    });
    return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a, GradTape<T>* tape = nullptr) {
    if (a.rank() != 2) throw std::invalid_argument("transpose2d expects rank-2, got " + shape_str(a.shape));
    std::size_t m = a.shape[0], n = a.shape[1];
    Tensor<T> out = Tensor<T>::zeros({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    detail::record(tape, out, {&a}, [a, out, m, n]() {
        if (!a.has_grad()) return;
        const T* g = out.grad();
        T* ga = const_cast<Tensor<T>&>(a).grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
    return out;
}

// Materialized copy with a new shape; gradient flows back flat.
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape, GradTape<T>* tape = nullptr) {
    if (shape_numel(new_shape) != a.numel())
        throw std::invalid_argument("reshape " + shape_str(a.shape) + " -> " + shape_str(new_shape) +
                                    " changes element count");
    Tensor<T> out;
    out.shape = std::move(new_shape);
    out.store = std::make_shared<std::vector<T>>(*a.store);
    out.grad_store = std::make_shared<std::vector<T>>();
    detail::record(tape, out, {&a}, [a, out]() {
        if (!a.has_grad()) return;
        const T* g = out.grad();
        T* ga = const_cast<Tensor<T>&>(a).grad();
        for (std::size_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
    });
    return out;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a, GradTape<T>* tape = nullptr) {
    double acc = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += double(a.data()[i]);
    Tensor<T> out = Tensor<T>::scalar(T(acc));
    detail::record(tape, out, {&a}, [a, out]() {
        if (!a.has_grad()) return;
        T g = out.grad()[0];
        T* ga = const_cast<Tensor<T>&>(a).grad();
        for (std::size_t i = 0; i < a.numel(); ++i) ga[i] += g;
    });
    return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a, GradTape<T>* tape = nullptr) {
    return scale(sum_all(a, tape), T(1) / T(a.numel()), tape);
}

// ---------------------------------------------------------------------------
// structural ops: concat / slice / stack / token layout
// ---------------------------------------------------------------------------

// Concatenate along axis 1 (channel or feature axis); all other extents equal.
template <class T>
Tensor<T> concat_axis1(const std::vector<Tensor<T>>& xs, GradTape<T>* tape = nullptr) {
    if (xs.empty()) throw std::invalid_argument("concat of zero tensors");
    const Shape& s0 = xs[0].shape;
    if (s0.size() < 2) throw std::invalid_argument("concat_axis1 needs rank >= 2");
    std::size_t outer = s0[0], inner = 1;
    for (std::size_t i = 2; i < s0.size(); ++i) inner *= s0[i];
    std::size_t total_axis = 0;
    for (const auto& x : xs) {
        if (x.rank() != s0.size() || x.shape[0] != outer)
            throw std::invalid_argument("concat_axis1: incompatible " + shape_str(x.shape) + " vs " + shape_str(s0));
        for (std::size_t i = 2; i < s0.size(); ++i)
            if (x.shape[i] != s0[i])
                throw std::invalid_argument("concat_axis1: incompatible " + shape_str(x.shape) + " vs " +
                                            shape_str(s0));
        total_axis += x.shape[1];
    }
    Shape os = s0;
    os[1] = total_axis;
    Tensor<T> out = Tensor<T>::zeros(os);
    std::size_t offset = 0;
    for (const auto& x : xs) {
        std::size_t ax = x.shape[1];
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t c = 0; c < ax; ++c) {
                const T* src = x.data() + (o * ax + c) * inner;
                T* dst = out.data() + (o * total_axis + offset + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i];
            }
        offset += ax;
    }
    std::vector<const Tensor<T>*> ins;
    for (const auto& x : xs) ins.push_back(&x);
    if (tape) {
        bool need = false;
        for (auto* t : ins) need = need || t->tracked();
        if (need) {
            out.requires_grad = true;
            out.ensure_grad();
            std::vector<int> parents;
            for (auto* t : ins)
                if (t->node >= 0) parents.push_back(t->node);
            std::vector<Tensor<T>> kept = xs;
            Tensor<T> kept_out = out;
            out.node = tape->emit(std::move(parents), [kept, kept_out, outer, inner, total_axis]() {
                const T* g = kept_out.grad();
                std::size_t offset = 0;
                for (const auto& x : kept) {
                    std::size_t ax = x.shape[1];
                    if (x.has_grad()) {
                        T* gx = const_cast<Tensor<T>&>(x).grad();
                        for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t c = 0; c < ax; ++c) {
                                const T* src = g + (o * total_axis + offset + c) * inner;
                                T* dst = gx + (o * ax + c) * inner;
                                for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                            }
                    }
                    offset += ax;
                }
            });
        }
    }
    detail::check_finite(out, "concat");
    return out;
}

// Contiguous slice along axis 1.
template <class T>
Tensor<T> slice_axis1(const Tensor<T>& x, std::size_t start, std::size_t len, GradTape<T>* tape = nullptr) {
    if (x.rank() < 2) throw std::invalid_argument("slice_axis1 needs rank >= 2");
    if (start + len > x.shape[1]) throw std::invalid_argument("slice_axis1 out of range");
    std::size_t outer = x.shape[0], axis = x.shape[1], inner = 1;
    for (std::size_t i = 2; i < x.rank(); ++i) inner *= x.shape[i];
    Shape os = x.shape;
    os[1] = len;
    Tensor<T> out = Tensor<T>::zeros(os);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t c = 0; c < len; ++c) {
            const T* src = x.data() + (o * axis + start + c) * inner;
            T* dst = out.data() + (o * len + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] = src[i];
        }
    detail::record(tape, out, {&x}, [x, out, outer, axis, inner, start, len]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t c = 0; c < len; ++c) {
                const T* src = g + (o * len + c) * inner;
                T* dst = gx + (o * axis + start + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
    return out;
}

// Select one index along axis 0, dropping that axis.
template <class T>
Tensor<T> select0(const Tensor<T>& x, std::size_t n, GradTape<T>* tape = nullptr) {
    if (x.rank() < 2) throw std::invalid_argument("select0 needs rank >= 2");
    if (n >= x.shape[0]) throw std::invalid_argument("select0 index out of range");
    Shape os(x.shape.begin() + 1, x.shape.end());
    std::size_t inner = shape_numel(os);
    Tensor<T> out = Tensor<T>::zeros(os);
    for (std::size_t i = 0; i < inner; ++i) out.data()[i] = x.data()[n * inner + i];
    detail::record(tape, out, {&x}, [x, out, n, inner]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t i = 0; i < inner; ++i) gx[n * inner + i] += g[i];
    });
    return out;
}

// Stack same-shape tensors along a new leading axis.
template <class T>
Tensor<T> stack0(const std::vector<Tensor<T>>& xs, GradTape<T>* tape = nullptr) {
    if (xs.empty()) throw std::invalid_argument("stack of zero tensors");
    for (const auto& x : xs) detail::require_same_shape(xs[0], x, "stack0");
    std::size_t inner = xs[0].numel();
    Shape os;
    os.push_back(xs.size());
    for (auto e : xs[0].shape) os.push_back(e);
    Tensor<T> out = Tensor<T>::zeros(os);
    for (std::size_t n = 0; n < xs.size(); ++n)
        for (std::size_t i = 0; i < inner; ++i) out.data()[n * inner + i] = xs[n].data()[i];
    if (tape) {
        bool need = false;
        for (const auto& x : xs) need = need || x.tracked();
        if (need) {
            out.requires_grad = true;
            out.ensure_grad();
            std::vector<int> parents;
            for (const auto& x : xs)
                if (x.node >= 0) parents.push_back(x.node);
            std::vector<Tensor<T>> kept = xs;
            Tensor<T> kept_out = out;
            out.node = tape->emit(std::move(parents), [kept, kept_out, inner]() {
                const T* g = kept_out.grad();
                for (std::size_t n = 0; n < kept.size(); ++n)
                    if (kept[n].has_grad()) {
                        T* gx = const_cast<Tensor<T>&>(kept[n]).grad();
                        for (std::size_t i = 0; i < inner; ++i) gx[i] += g[n * inner + i];
                    }
            });
        }
    }
    return out;
}

// [C x D x H x W] -> [T x C] with T = D*H*W (token per voxel, channel-last).
template <class T>
Tensor<T> to_tokens(const Tensor<T>& x, GradTape<T>* tape = nullptr) {
    if (x.rank() != 4) throw std::invalid_argument("to_tokens expects [CxDxHxW], got " + shape_str(x.shape));
    std::size_t C = x.shape[0], V = x.numel() / C;
    Tensor<T> out = Tensor<T>::zeros({V, C});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t v = 0; v < V; ++v) out.data()[v * C + c] = x.data()[c * V + v];
    detail::record(tape, out, {&x}, [x, out, C, V]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t v = 0; v < V; ++v) gx[c * V + v] += g[v * C + c];
    });
    return out;
}

template <class T>
Tensor<T> from_tokens(const Tensor<T>& t, Shape vol_shape, GradTape<T>* tape = nullptr) {
    if (t.rank() != 2 || vol_shape.size() != 4)
        throw std::invalid_argument("from_tokens expects [TxC] and a [CxDxHxW] target");
    std::size_t C = vol_shape[0], V = shape_numel(vol_shape) / C;
    if (t.shape[0] != V || t.shape[1] != C)
        throw std::invalid_argument("from_tokens: " + shape_str(t.shape) + " does not fill " + shape_str(vol_shape));
    Tensor<T> out = Tensor<T>::zeros(vol_shape);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t v = 0; v < V; ++v) out.data()[c * V + v] = t.data()[v * C + c];
    detail::record(tape, out, {&t}, [t, out, C, V]() {
        if (!t.has_grad()) return;
        const T* g = out.grad();
        T* gt = const_cast<Tensor<T>&>(t).grad();
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t v = 0; v < V; ++v) gt[v * C + c] += g[c * V + v];
    });
    return out;
}

// Mean over axis 0: [N x rest] -> [rest].
template <class T>
Tensor<T> mean_axis0(const Tensor<T>& x, GradTape<T>* tape = nullptr) {
    if (x.rank() < 2) throw std::invalid_argument("mean_axis0 needs rank >= 2");
    std::size_t N = x.shape[0];
    Shape os(x.shape.begin() + 1, x.shape.end());
    std::size_t inner = shape_numel(os);
    Tensor<T> out = Tensor<T>::zeros(os);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < inner; ++i) out.data()[i] += x.data()[n * inner + i];
    for (std::size_t i = 0; i < inner; ++i) out.data()[i] /= T(N);
    detail::record(tape, out, {&x}, [x, out, N, inner]() {
        if (!x.has_grad()) return;
        const T* g = out.grad();
        T* gx = const_cast<Tensor<T>&>(x).grad();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < inner; ++i) gx[n * inner + i] += g[i] / T(N);
    });
    return out;
}

// Adaptive average over the token axis: [T x C] -> [G x C]. Group g covers
// rows [floor(gT/G), ceil((g+1)T/G)), the adaptive-pooling convention, which
// also upsamples by repetition when T < G.
template <class T>
Tensor<T> adaptive_avg_tokens(const Tensor<T>& t, std::size_t groups, GradTape<T>* tape = nullptr) {
    if (t.rank() != 2) throw std::invalid_argument("adaptive_avg_tokens expects [TxC]");
    if (groups == 0) throw std::invalid_argument("adaptive_avg_tokens: zero groups");
    std::size_t Tn = t.shape[0], C = t.shape[1];
    Tensor<T> out = Tensor<T>::zeros({groups, C});
    for (std::size_t g = 0; g < groups; ++g) {
        std::size_t lo = (g * Tn) / groups;
        std::size_t hi = ((g + 1) * Tn + groups - 1) / groups;
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0;
            for (std::size_t r = lo; r < hi; ++r) acc += double(t.data()[r * C + c]);
            out.data()[g * C + c] = T(acc / double(hi - lo));
        }
    }
    detail::record(tape, out, {&t}, [t, out, groups, Tn, C]() {
        if (!t.has_grad()) return;
        const T* g = out.grad();
        T* gt = const_cast<Tensor<T>&>(t).grad();
        for (std::size_t gi = 0; gi < groups; ++gi) {
            std::size_t lo = (gi * Tn) / groups;
            std::size_t hi = ((gi + 1) * Tn + groups - 1) / groups;
            T inv = T(1) / T(hi - lo);
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t r = lo; r < hi; ++r) gt[r * C + c] += g[gi * C + c] * inv;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse sweep from a scalar root. Leaf gradients accumulate additively;
// the caller zeroes them between optimizer steps.
template <class T>
void backward(const Tensor<T>& root, GradTape<T>& tape) {
    if (root.numel() != 1)
        throw std::invalid_argument("backward root must be scalar, got " + shape_str(root.shape));
    if (root.node < 0) throw std::invalid_argument("backward on a tensor not produced under this tape");
    if (std::size_t(root.node) >= tape.size()) throw std::invalid_argument("root node id out of tape range");

    std::vector<char> reach(tape.size(), 0);
    std::vector<int> stack{root.node};
    reach[root.node] = 1;
    while (!stack.empty()) {
        int u = stack.back();
        stack.pop_back();
        for (int p : tape.records[u].parents)
            if (!reach[p]) {
                reach[p] = 1;
                stack.push_back(p);
            }
    }
    const_cast<Tensor<T>&>(root).grad()[0] += T(1);
    for (int i = root.node; i >= 0; --i)
        if (reach[i]) tape.records[i].pull();
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

// f builds a scalar from the given leaves, recording on the tape when one is
// supplied. Central differences at the inputs' own precision; callers use
// double tensors for meaningful tolerances.
template <class T>
using TensorFn = std::function<Tensor<T>(GradTape<T>*, std::vector<Tensor<T>>&)>;

template <class T>
double gradcheck(const TensorFn<T>& f, const std::vector<Tensor<T>>& inputs, T eps) {
    auto eval = [&](const std::vector<Tensor<T>>& ins) {
        std::vector<Tensor<T>> copy;
        copy.reserve(ins.size());
        for (const auto& t : ins) copy.push_back(t.detached());
        Tensor<T> y = f(nullptr, copy);
        if (y.numel() != 1) throw std::invalid_argument("gradcheck function must return a scalar");
        return y.item();
    };

    T y0 = eval(inputs);
    T y1 = eval(inputs);
    if (std::memcmp(&y0, &y1, sizeof(T)) != 0)
        throw std::runtime_error("gradcheck: function is not deterministic across two calls");

    // analytic pass
    GradTape<T> tape;
    std::vector<Tensor<T>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& t : inputs) leaves.push_back(t.clone(/*as_param=*/true));
    Tensor<T> y = f(&tape, leaves);
    if (y.numel() != 1) throw std::invalid_argument("gradcheck function must return a scalar");
    backward(y, tape);

    double max_err = 0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        for (std::size_t i = 0; i < inputs[t].numel(); ++i) {
            std::vector<Tensor<T>> plus, minus;
            for (const auto& in : inputs) plus.push_back(in.clone());
            for (const auto& in : inputs) minus.push_back(in.clone());
            plus[t].data()[i] += eps;
            minus[t].data()[i] -= eps;
            double numeric = (double(eval(plus)) - double(eval(minus))) / (2.0 * double(eps));
            double analytic = double(leaves[t].grad()[i]);
            double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
            if (err > max_err) max_err = err;
        }
    }
    return max_err;
}

template <class T>
void zero_grads(const std::vector<Tensor<T>*>& params) {
    for (auto* p : params) p->zero_grad();
}

}  // namespace camf
