#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "errors.hpp"
#include "sparse.hpp"

/// Minimal reverse-mode tape over row-major 2-D tensors. Every op records a
/// closure that accumulates into its parents' gradients; backward() walks
/// the graph in reverse topological order.
namespace dismesh::ag {

template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Buffer<T> value;
    Buffer<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::size_t size() const { return rows * cols; }
    Buffer<T>& grad_buffer() {
        if (grad.empty()) grad.assign(size(), T(0));
        return grad;
    }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// While alive, ops on this thread record no backward closures.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<T> values, bool requires_grad = false) {
        if (values.size() != rows * cols)
            throw ValidationError("tensor of shape " + shape_str(rows, cols) + " given " + std::to_string(values.size()) + " values");
        auto n = std::make_shared<Node<T>>();
        n->rows = rows;
        n->cols = cols;
        n->value.assign(values.begin(), values.end());
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }
    static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
        return from_values(rows, cols, std::vector<T>(rows * cols, T(0)), requires_grad);
    }
    static Tensor scalar(T v) { return from_values(1, 1, {v}); }

    bool defined() const { return static_cast<bool>(n_); }
    std::size_t rows() const { return n_->rows; }
    std::size_t cols() const { return n_->cols; }
    std::size_t size() const { return n_->size(); }
    std::string shape() const { return shape_str(rows(), cols()); }
    bool requires_grad() const { return n_->requires_grad; }

    std::span<const T> value() const { return n_->value; }
    /// Direct write access for optimizers and tests; invalidates nothing.
    std::span<T> mutable_value() const { return n_->value; }
    T operator()(std::size_t r, std::size_t c) const { return n_->value[r * cols() + c]; }
    T item() const {
        if (size() != 1) throw ValidationError("item() on tensor of shape " + shape());
        return n_->value[0];
    }

    /// Empty span until a backward pass reached this tensor.
    std::span<const T> grad() const { return n_->grad; }
    void zero_grad() const { n_->grad.clear(); }

    const std::shared_ptr<Node<T>>& node() const { return n_; }

    /// Seeds d(self)/d(self) = 1; self must be 1x1.
    void backward() const {
        if (size() != 1) throw ValidationError("backward() needs a scalar, got shape " + shape());
        std::vector<Node<T>*> order;
        std::unordered_set<Node<T>*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{n_.get(), 0}};
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                auto* p = node->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        n_->grad_buffer()[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node<T>* node = *it;
            if (node->backward && !node->grad.empty()) node->backward(*node);
        }
    }

    static std::string shape_str(std::size_t r, std::size_t c) {
        return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
    }

private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

/// Exponent-bits test; written as an integer reduction so it vectorizes.
template <typename T>
bool all_finite(const Buffer<T>& v) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
    Bits bad = 0;
    for (const T& x : v) {
        Bits b;
        std::memcpy(&b, &x, sizeof b);
        bad |= Bits((b & exp_mask) == exp_mask);
    }
    return bad == 0;
}

}  // namespace detail

/// Builds an op result. `backward` runs only if some parent requires grad
/// and grad recording is enabled. Throws NonFiniteError naming `op` if any
/// output value is NaN or Inf.
template <typename T>
Tensor<T> make_result(const char* op, std::size_t rows, std::size_t cols, Buffer<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents, std::function<void(Node<T>&)> backward) {
    if (!detail::all_finite(value)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(value);
    n->op = op;
    const bool needs = grad_enabled() && std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(backward);
    }
    return Tensor<T>(std::move(n));
}

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>, Eigen::AlignedMax>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>, Eigen::AlignedMax>;

template <typename T>
ConstMapMat<T> cmap(const Buffer<T>& v, std::size_t r, std::size_t c) {
    return ConstMapMat<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
template <typename T>
MapMat<T> map(Buffer<T>& v, std::size_t r, std::size_t c) {
    return MapMat<T>(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

[[noreturn]] inline void shape_mismatch(const char* op, const std::string& a, const std::string& b) {
    throw ValidationError(std::string(op) + ": shape mismatch " + a + " vs " + b);
}

/// dst[i] += w * src[i]; the buffers never overlap.
template <typename T>
inline void axpy(std::size_t n, T w, const T* __restrict src, T* __restrict dst) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += w * src[i];
}

template <typename T>
void accumulate(Node<T>& target, std::span<const T> g) {
    if (!target.requires_grad) return;
    auto& buf = target.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

// Elementwise binary op where b is either the same shape as a or a 1 x cols row broadcast.
template <typename T, typename Fwd, typename Da, typename Db>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
    const bool same = a.rows() == b.rows() && a.cols() == b.cols();
    const bool row_bcast = b.rows() == 1 && b.cols() == a.cols();
    if (!same && !row_bcast) shape_mismatch(op, a.shape(), b.shape());
    const auto rows = a.rows(), cols = a.cols();
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    Buffer<T> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
            const auto i = r * cols + c;
            out[i] = fwd(av[i], bv[same ? i : c]);
        }
    auto an = a.node(), bn = b.node();
    return make_result<T>(op, rows, cols, std::move(out), {an, bn}, [an, bn, same, rows, cols, da, db](Node<T>& self) {
        const auto& g = self.grad;
        const auto& av = an->value;
        const auto& bv = bn->value;
        if (an->requires_grad) {
            auto& ga = an->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const auto i = r * cols + c;
                    ga[i] += g[i] * da(av[i], bv[same ? i : c]);
                }
        }
        if (bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    const auto i = r * cols + c;
                    gb[same ? i : c] += g[i] * db(av[i], bv[same ? i : c]);
                }
        }
    });
}

template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const char* op, const Tensor<T>& a, Fwd fwd, Deriv deriv) {
    const auto& av = a.node()->value;
    Buffer<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    auto an = a.node();
    return make_result<T>(op, a.rows(), a.cols(), std::move(out), {an}, [an, deriv](Node<T>& self) {
        auto& ga = an->grad_buffer();
        const auto& av = an->value;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv(av[i], self.value[i]);
    });
}

}  // namespace detail

/// a + b; b may be a 1 x cols row that broadcasts over a's rows.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

/// Elementwise product.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::unary<T>("scale", a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

/// ELU with alpha = 1.
template <typename T>
Tensor<T> elu(const Tensor<T>& a) {
    return detail::unary<T>(
        "elu", a, [](T x) { return x > T(0) ? x : std::expm1(x); }, [](T x, T y) { return x > T(0) ? T(1) : y + T(1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
    return detail::unary<T>(
        "abs", a, [](T x) { return std::abs(x); }, [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    return detail::unary<T>(
        "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
        [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

namespace detail {

/// out (+)= op(a) * op(b). Buffers are over-aligned so Eigen's kernel choice,
/// and with it the rounding, does not depend on where the allocator put them.
template <typename T>
void product_into(Buffer<T>& out, bool accumulate, const Buffer<T>& a, std::size_t m, std::size_t k, bool ta,
                  const Buffer<T>& b, std::size_t n, bool tb) {
    auto dst = map(out, m, n);
    const auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate)
            dst.noalias() += lhs * rhs;
        else
            dst.noalias() = lhs * rhs;
    };
    if (ta && tb) run(cmap(a, k, m).transpose(), cmap(b, n, k).transpose());
    else if (ta) run(cmap(a, k, m).transpose(), cmap(b, k, n));
    else if (tb) run(cmap(a, m, k), cmap(b, n, k).transpose());
    else run(cmap(a, m, k), cmap(b, k, n));
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows()) detail::shape_mismatch("matmul", a.shape(), b.shape());
    const auto m = a.rows(), k = a.cols(), n = b.cols();
    Buffer<T> out(m * n);
    detail::product_into(out, false, a.node()->value, m, k, false, b.node()->value, n, false);
    auto an = a.node(), bn = b.node();
    return make_result<T>("matmul", m, n, std::move(out), {an, bn}, [an, bn, m, k, n](Node<T>& self) {
        // dA = G B^T, dB = A^T G
        if (an->requires_grad) detail::product_into(an->grad_buffer(), true, self.grad, m, n, false, bn->value, k, true);
        if (bn->requires_grad) detail::product_into(bn->grad_buffer(), true, an->value, k, m, true, self.grad, n, false);
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    const auto r = a.rows(), c = a.cols();
    Buffer<T> out(r * c);
    detail::map(out, c, r) = detail::cmap(a.node()->value, r, c).transpose();
    auto an = a.node();
    return make_result<T>("transpose", c, r, std::move(out), {an}, [an, r, c](Node<T>& self) {
        detail::map(an->grad_buffer(), r, c) += detail::cmap(self.grad, c, r).transpose();
    });
}

/// S * x where S is a constant sparse matrix. When x has B * S.cols() rows,
/// S is applied to each consecutive block of S.cols() rows (a batch of B
/// graph signals stacked vertically).
template <typename T>
Tensor<T> spmm(const SparseMatrix& s, const Tensor<T>& x) {
    if (s.cols() == 0 || x.rows() % s.cols() != 0)
        detail::shape_mismatch("spmm", Tensor<T>::shape_str(s.rows(), s.cols()), x.shape());
    const auto batch = x.rows() / s.cols();
    const auto C = x.cols();
    const auto in_rows = s.cols(), out_rows = s.rows();
    const auto rp = s.row_ptr();
    const auto ci = s.col_indices();
    const auto sv = s.values();
    const auto& xv = x.node()->value;
    Buffer<T> out(batch * out_rows * C, T(0));
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t r = 0; r < out_rows; ++r)
            for (auto k = rp[r]; k < rp[r + 1]; ++k)
                detail::axpy(C, static_cast<T>(sv[k]), xv.data() + (b * in_rows + ci[k]) * C,
                             out.data() + (b * out_rows + r) * C);
    auto xn = x.node();
    return make_result<T>("spmm", batch * out_rows, C, std::move(out), {xn},
                          [xn, &s, batch, C, in_rows, out_rows](Node<T>& self) {
                              auto& gx = xn->grad_buffer();
                              const auto rp = s.row_ptr();
                              const auto ci = s.col_indices();
                              const auto sv = s.values();
                              for (std::size_t b = 0; b < batch; ++b)
                                  for (std::size_t r = 0; r < out_rows; ++r)
                                      for (auto k = rp[r]; k < rp[r + 1]; ++k)
                                          detail::axpy(C, static_cast<T>(sv[k]), self.grad.data() + (b * out_rows + r) * C,
                                                       gx.data() + (b * in_rows + ci[k]) * C);
                          });
}

/// Same data, new shape (row-major order preserved).
template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::size_t rows, std::size_t cols) {
    if (rows * cols != a.size()) detail::shape_mismatch("reshape", a.shape(), Tensor<T>::shape_str(rows, cols));
    auto an = a.node();
    return make_result<T>("reshape", rows, cols, an->value, {an},
                          [an](Node<T>& self) { detail::accumulate<T>(*an, self.grad); });
}

/// Horizontal concatenation: all parts share the row count.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no inputs");
    const auto rows = parts[0].rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.rows() != rows) detail::shape_mismatch("concat_cols", parts[0].shape(), p.shape());
        cols += p.cols();
    }
    Buffer<T> out(rows * cols);
    std::vector<std::shared_ptr<Node<T>>> nodes;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const auto pc = p.cols();
        const auto& pv = p.node()->value;
        for (std::size_t r = 0; r < rows; ++r) std::copy_n(pv.data() + r * pc, pc, out.data() + r * cols + offset);
        offset += pc;
        nodes.push_back(p.node());
    }
    return make_result<T>("concat_cols", rows, cols, std::move(out), nodes, [nodes, rows, cols](Node<T>& self) {
        std::size_t offset = 0;
        for (const auto& n : nodes) {
            const auto pc = n->cols;
            if (n->requires_grad) {
                auto& g = n->grad_buffer();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += self.grad[r * cols + offset + c];
            }
            offset += pc;
        }
    });
}

/// Vertical concatenation: all parts share the column count.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ValidationError("concat_rows: no inputs");
    const auto cols = parts[0].cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.cols() != cols) detail::shape_mismatch("concat_rows", parts[0].shape(), p.shape());
        rows += p.rows();
    }
    Buffer<T> out;
    out.reserve(rows * cols);
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.node()->value.begin(), p.node()->value.end());
        nodes.push_back(p.node());
    }
    return make_result<T>("concat_rows", rows, cols, std::move(out), nodes, [nodes](Node<T>& self) {
        std::size_t offset = 0;
        for (const auto& n : nodes) {
            detail::accumulate<T>(*n, std::span<const T>(self.grad).subspan(offset, n->size()));
            offset += n->size();
        }
    });
}

/// Columns [begin, end).
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.cols())
        throw ValidationError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + a.shape());
    const auto rows = a.rows(), cols = a.cols(), w = end - begin;
    Buffer<T> out(rows * w);
    const auto& av = a.node()->value;
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(av.data() + r * cols + begin, w, out.data() + r * w);
    auto an = a.node();
    return make_result<T>("slice_cols", rows, w, std::move(out), {an}, [an, rows, cols, begin, w](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) g[r * cols + begin + c] += self.grad[r * w + c];
    });
}

/// Rows [begin, end).
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
    if (begin > end || end > a.rows())
        throw ValidationError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) + ") outside " + a.shape());
    const auto cols = a.cols();
    Buffer<T> out(a.node()->value.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                       a.node()->value.begin() + static_cast<std::ptrdiff_t>(end * cols));
    auto an = a.node();
    return make_result<T>("slice_rows", end - begin, cols, std::move(out), {an}, [an, begin, cols](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
    });
}

/// Gathers rows by index (repeats allowed; gradients add up).
template <typename T>
Tensor<T> select_rows(const Tensor<T>& a, std::vector<std::size_t> index) {
    const auto cols = a.cols();
    Buffer<T> out(index.size() * cols);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= a.rows()) throw ValidationError("select_rows: index " + std::to_string(index[i]) + " outside " + a.shape());
        std::copy_n(a.node()->value.data() + index[i] * cols, cols, out.data() + i * cols);
    }
    auto an = a.node();
    const auto rows = index.size();
    return make_result<T>("select_rows", rows, cols, std::move(out), {an},
                          [an, index = std::move(index), cols](Node<T>& self) {
                              auto& g = an->grad_buffer();
                              for (std::size_t i = 0; i < index.size(); ++i)
                                  for (std::size_t c = 0; c < cols; ++c) g[index[i] * cols + c] += self.grad[i * cols + c];
                          });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (const T& v : a.node()->value) s += v;
    auto an = a.node();
    return make_result<T>("sum", 1, 1, {s}, {an}, [an](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.size() == 0) throw ValidationError("mean of empty tensor");
    const T inv = T(1) / static_cast<T>(a.size());
    T s = T(0);
    for (const T& v : a.node()->value) s += v;
    auto an = a.node();
    return make_result<T>("mean", 1, 1, {s * inv}, {an}, [an, inv](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (auto& v : g) v += self.grad[0] * inv;
    });
}

/// Column means as a 1 x cols row.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    const auto rows = a.rows(), cols = a.cols();
    if (rows == 0) throw ValidationError("mean_rows of empty tensor");
    const T inv = T(1) / static_cast<T>(rows);
    Buffer<T> out(cols, T(0));
    const auto& av = a.node()->value;
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[c] += av[r * cols + c];
    for (auto& v : out) v *= inv;
    auto an = a.node();
    return make_result<T>("mean_rows", 1, cols, std::move(out), {an}, [an, rows, cols, inv](Node<T>& self) {
        auto& g = an->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c] * inv;
    });
}

/// Copies values into a tensor of another scalar type (no gradient link).
template <typename To, typename From>
Tensor<To> cast_constant(const Tensor<From>& a) {
    std::vector<To> v(a.value().begin(), a.value().end());
    return Tensor<To>::from_values(a.rows(), a.cols(), std::move(v));
}

}  // namespace dismesh::ag
