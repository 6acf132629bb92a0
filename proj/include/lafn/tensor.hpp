#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Every primitive below computes its reductions in a fixed left-to-right
// order, so results are bit-reproducible for identical inputs. When a tape
// is active on the calling thread and any input requires gradients, the
// primitive appends one record holding its inputs, output and backward rule.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lafn/error.hpp"

namespace lafn {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

enum class Activation { relu, silu, gelu };

inline const char* to_string(Activation act) {
    switch (act) {
        case Activation::relu: return "relu";
        case Activation::silu: return "silu";
        case Activation::gelu: return "gelu";
    }
    return "relu";
}

inline Activation activation_from_string(std::string_view s) {
    if (s == "relu") return Activation::relu;
    if (s == "silu") return Activation::silu;
    if (s == "gelu") return Activation::gelu;
    fail(ErrorKind::validation, "unknown activation '" + std::string(s) + "'");
}

namespace detail {

template <typename T>
struct Node {
    std::uint64_t id = 0;
    Shape shape;
    std::vector<T> value;
    bool requires_grad = false;
};

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

template <typename T>
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (shape_numel(shape) != values.size()) {
            fail(ErrorKind::shape, "tensor: shape " + shape_str(shape) + " holds " +
                                       std::to_string(shape_numel(shape)) + " values, got " +
                                       std::to_string(values.size()));
        }
        node_->id = detail::next_node_id();
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<T> v(shape_numel(shape), T(0));
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

    static Tensor vector(std::vector<T> v, bool requires_grad = false) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v), requires_grad);
    }

    bool defined() const noexcept { return node_ != nullptr; }
    std::uint64_t id() const { return node_->id; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    std::span<const T> values() const { return node_->value; }

    // Parameters are the only tensors mutated after construction (by optimizers
    // and finite-difference probes), never while a forward is in flight.
    std::span<T> mutable_values() { return node_->value; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    T item() const {
        if (numel() != 1) fail(ErrorKind::shape, "item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    T at(std::size_t i) const { return node_->value.at(i); }
    T at(std::size_t r, std::size_t c) const { return node_->value.at(r * dim(1) + c); }

    // Deep copy that does not share storage with this tensor.
    Tensor clone(bool requires_grad = false) const { return Tensor(shape(), node_->value, requires_grad); }

    const std::shared_ptr<detail::Node<T>>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node<T>> node_;
};

// Gradient buffers produced by Tape::backward, keyed by tensor id.
template <typename T>
class Gradients {
public:
    bool contains(const Tensor<T>& t) const { return grads_.count(t.id()) != 0; }

    // Zero tensor when `t` did not lie on a path to the loss.
    Tensor<T> of(const Tensor<T>& t) const {
        auto it = grads_.find(t.id());
        if (it == grads_.end()) return Tensor<T>::zeros(t.shape());
        return Tensor<T>(t.shape(), it->second);
    }

    std::span<const T> view(const Tensor<T>& t) const {
        auto it = grads_.find(t.id());
        if (it == grads_.end()) return {};
        return it->second;
    }

    std::size_t size() const { return grads_.size(); }

    std::unordered_map<std::uint64_t, std::vector<T>>& raw() { return grads_; }

private:
    std::unordered_map<std::uint64_t, std::vector<T>> grads_;
};

// Handed to backward rules; returns the accumulation buffer for an input, or
// an empty span when the input does not require gradients.
template <typename T>
class GradSink {
public:
    explicit GradSink(std::unordered_map<std::uint64_t, std::vector<T>>& grads) : grads_(grads) {}

    std::span<T> slot(const detail::Node<T>& node) {
        if (!node.requires_grad) return {};
        auto [it, inserted] = grads_.try_emplace(node.id);
        if (inserted) it->second.assign(node.value.size(), T(0));
        return it->second;
    }

private:
    std::unordered_map<std::uint64_t, std::vector<T>>& grads_;
};

template <typename T>
class Tape {
public:
    using NodePtr = std::shared_ptr<detail::Node<T>>;
    using BackwardFn = std::function<void(std::span<const T>, GradSink<T>&)>;

    struct Record {
        std::string_view op;
        std::vector<NodePtr> inputs;
        NodePtr output;
        BackwardFn backward;
    };

    void record(std::string_view op, std::vector<NodePtr> inputs, NodePtr output, BackwardFn fn) {
        records_.push_back(Record{op, std::move(inputs), std::move(output), std::move(fn)});
    }

    std::size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }
    void clear() { records_.clear(); }

    Gradients<T> backward(const Tensor<T>& loss) const {
        if (loss.numel() != 1 || loss.rank() > 1) {
            fail(ErrorKind::shape, "backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        Gradients<T> out;
        auto& grads = out.raw();
        if (!loss.requires_grad()) return out;
        grads[loss.id()] = {T(1)};
        GradSink<T> sink(grads);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            auto found = grads.find(it->output->id);
            if (found == grads.end()) continue;
            // try_emplace may rehash; element references stay valid but the
            // span must be taken after the lookup.
            std::span<const T> gout = found->second;
            it->backward(gout, sink);
        }
        return out;
    }

private:
    std::vector<Record> records_;
};

template <typename T>
Tape<T>*& active_tape() {
    thread_local Tape<T>* tape = nullptr;
    return tape;
}

// Makes `tape` the recording target for the current thread until destruction.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
    ~TapeScope() { active_tape<T>() = previous_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* previous_;
};

// Disables recording for the current thread until destruction.
template <typename T>
class NoGradScope {
public:
    NoGradScope() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
    ~NoGradScope() { active_tape<T>() = previous_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape<T>* previous_;
};

namespace detail {

template <typename T>
Tensor<T> emit(std::string_view op, Shape shape, std::vector<T> values,
               std::initializer_list<const Tensor<T>*> inputs,
               typename Tape<T>::BackwardFn backward) {
    Tape<T>* tape = active_tape<T>();
    bool record = false;
    if (tape) {
        for (const Tensor<T>* in : inputs) record = record || in->requires_grad();
    }
    Tensor<T> out(std::move(shape), std::move(values), record);
    if (record) {
        std::vector<std::shared_ptr<Node<T>>> nodes;
        nodes.reserve(inputs.size());
        for (const Tensor<T>* in : inputs) nodes.push_back(in->node());
        tape->record(op, std::move(nodes), out.node(), std::move(backward));
    }
    return out;
}

[[noreturn]] inline void shape_error(std::string_view op, const std::string& detail) {
    fail(ErrorKind::shape, std::string(op) + ": " + detail);
}

template <typename T>
void require_rank(std::string_view op, const Tensor<T>& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        shape_error(op, std::string(what) + " must be rank " + std::to_string(rank) + ", got " +
                            shape_str(t.shape()));
    }
}

// out[m,n] += a[m,k] * b[k,n]; accumulation over k in ascending order.
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* orow = out + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
template <typename T>
void gemm_tn(const T* a, const T* g, T* out, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            T* orow = out + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
        }
    }
}

template <typename T>
std::vector<T> transpose_buffer(std::span<const T> b, std::size_t rows, std::size_t cols) {
    std::vector<T> t(b.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = b[r * cols + c];
    return t;
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T apply_activation(Activation act, T x) {
    switch (act) {
        case Activation::relu: return x > T(0) ? x : T(0);
        case Activation::silu: return x * sigmoid(x);
        case Activation::gelu: return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
    }
    return x;
}

template <typename T>
T activation_derivative(Activation act, T x) {
    switch (act) {
        case Activation::relu: return x > T(0) ? T(1) : T(0);
        case Activation::silu: {
            const T s = sigmoid(x);
            return s * (T(1) + x * (T(1) - s));
        }
        case Activation::gelu: {
            const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
            const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * T(3.14159265358979323846));
            return cdf + x * pdf;
        }
    }
    return T(1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    constexpr std::string_view op = "matmul";
    detail::require_rank(op, a, 2, "lhs");
    detail::require_rank(op, b, 2, "rhs");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        detail::shape_error(op, "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    auto an = a.node();
    auto bn = b.node();
    return detail::emit<T>(op, {m, n}, std::move(out), {&a, &b},
                           [an, bn, m, k, n](std::span<const T> g, GradSink<T>& sink) {
                               if (auto ga = sink.slot(*an); !ga.empty()) {
                                   // ga[m,k] += g[m,n] * b^T[n,k]
                                   auto bt = detail::transpose_buffer<T>(bn->value, k, n);
                                   detail::gemm_nn(g.data(), bt.data(), ga.data(), m, n, k);
                               }
                               if (auto gb = sink.slot(*bn); !gb.empty()) {
                                   detail::gemm_tn(an->value.data(), g.data(), gb.data(), m, k, n);
                               }
                           });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    constexpr std::string_view op = "transpose";
    detail::require_rank(op, a, 2, "input");
    const std::size_t r = a.dim(0), c = a.dim(1);
    auto an = a.node();
    return detail::emit<T>(op, {c, r}, detail::transpose_buffer<T>(a.values(), r, c), {&a},
                           [an, r, c](std::span<const T> g, GradSink<T>& sink) {
                               auto ga = sink.slot(*an);
                               if (ga.empty()) return;
                               for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
                           });
}

// Elementwise sum. `b` may also be a vector broadcast over the rows of a
// rank-2 `a`.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    constexpr std::string_view op = "add";
    const bool broadcast = a.rank() == 2 && b.rank() == 1 && b.dim(0) == a.dim(1);
    if (!broadcast && a.shape() != b.shape()) {
        detail::shape_error(op, "cannot add " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    std::vector<T> out(a.values().begin(), a.values().end());
    auto bv = b.values();
    const std::size_t n = b.numel();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[broadcast ? i % n : i];
    auto an = a.node();
    auto bn = b.node();
    return detail::emit<T>(op, a.shape(), std::move(out), {&a, &b},
                           [an, bn, broadcast, n](std::span<const T> g, GradSink<T>& sink) {
                               if (auto ga = sink.slot(*an); !ga.empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               if (auto gb = sink.slot(*bn); !gb.empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[broadcast ? i % n : i] += g[i];
                           });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    constexpr std::string_view op = "mul";
    if (a.shape() != b.shape()) {
        detail::shape_error(op, "cannot multiply " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    std::vector<T> out(a.numel());
    auto av = a.values();
    auto bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node();
    auto bn = b.node();
    return detail::emit<T>(op, a.shape(), std::move(out), {&a, &b},
                           [an, bn](std::span<const T> g, GradSink<T>& sink) {
                               if (auto ga = sink.slot(*an); !ga.empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
                               if (auto gb = sink.slot(*bn); !gb.empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
                           });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.values().begin(), a.values().end());
    for (T& v : out) v *= factor;
    auto an = a.node();
    return detail::emit<T>("scale", a.shape(), std::move(out), {&a},
                           [an, factor](std::span<const T> g, GradSink<T>& sink) {
                               auto ga = sink.slot(*an);
                               if (ga.empty()) return;
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                           });
}

template <typename T>
Tensor<T> activation(const Tensor<T>& a, Activation act) {
    std::vector<T> out(a.numel());
    auto av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::apply_activation(act, av[i]);
    auto an = a.node();
    return detail::emit<T>(to_string(act), a.shape(), std::move(out), {&a},
                           [an, act](std::span<const T> g, GradSink<T>& sink) {
                               auto ga = sink.slot(*an);
                               if (ga.empty()) return;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   ga[i] += g[i] * detail::activation_derivative(act, an->value[i]);
                           });
}

// Row-wise softmax over the last axis. A rank-1 input is one row. With
// `causal`, entry (i, j) of a square matrix is masked out when j > i.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, bool causal = false) {
    constexpr std::string_view op = "softmax";
    if (a.rank() != 1 && a.rank() != 2) detail::shape_error(op, "input must be rank 1 or 2, got " + shape_str(a.shape()));
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.numel() / std::max<std::size_t>(cols, 1);
    if (causal && (a.rank() != 2 || rows != cols)) {
        detail::shape_error(op, "causal mask needs a square matrix, got " + shape_str(a.shape()));
    }
    std::vector<T> out(a.numel(), T(0));
    auto av = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t limit = causal ? r + 1 : cols;
        const T* x = av.data() + r * cols;
        T* y = out.data() + r * cols;
        T mx = x[0];
        for (std::size_t c = 1; c < limit; ++c) mx = std::max(mx, x[c]);
        T total = T(0);
        for (std::size_t c = 0; c < limit; ++c) {
            y[c] = std::exp(x[c] - mx);
            total += y[c];
        }
        for (std::size_t c = 0; c < limit; ++c) y[c] /= total;
    }
    auto an = a.node();
    std::vector<T> probs = out;
    return detail::emit<T>(op, a.shape(), std::move(out), {&a},
                           [an, probs = std::move(probs), rows, cols](std::span<const T> g, GradSink<T>& sink) {
                               auto ga = sink.slot(*an);
                               if (ga.empty()) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const T* y = probs.data() + r * cols;
                                   const T* gy = g.data() + r * cols;
                                   T dot = T(0);
                                   for (std::size_t c = 0; c < cols; ++c) dot += gy[c] * y[c];
                                   for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += y[c] * (gy[c] - dot);
                               }
                           });
}

// Row-wise log-softmax over the last axis.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
    constexpr std::string_view op = "log_softmax";
    if (a.rank() != 1 && a.rank() != 2) detail::shape_error(op, "input must be rank 1 or 2, got " + shape_str(a.shape()));
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.numel() / std::max<std::size_t>(cols, 1);
    std::vector<T> out(a.numel());
    auto av = a.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* x = av.data() + r * cols;
        T mx = x[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        T total = T(0);
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(x[c] - mx);
        const T lse = mx + std::log(total);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[c] - lse;
    }
    auto an = a.node();
    std::vector<T> logp = out;
    return detail::emit<T>(op, a.shape(), std::move(out), {&a},
                           [an, logp = std::move(logp), rows, cols](std::span<const T> g, GradSink<T>& sink) {
                               auto ga = sink.slot(*an);
                               if (ga.empty()) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const T* gy = g.data() + r * cols;
                                   T total = T(0);
                                   for (std::size_t c = 0; c < cols; ++c) total += gy[c];
                                   for (std::size_t c = 0; c < cols; ++c)
                                       ga[r * cols + c] += gy[c] - std::exp(logp[r * cols + c]) * total;
                               }
                           });
}

// Gathers rows of `table` [V,d] -> [ids.size(), d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
    constexpr std::string_view op = "embedding";
    detail::require_rank(op, table, 2, "table");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<T> out(ids.size() * d);
    auto tv = table.values();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            detail::shape_error(op, "id " + std::to_string(ids[i]) + " outside table " + shape_str(table.shape()));
        }
        std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    auto tn = table.node();
    std::vector<int> idx(ids.begin(), ids.end());
    return detail::emit<T>(op, {ids.size(), d}, std::move(out), {&table},
                           [tn, idx = std::move(idx), d](std::span<const T> g, GradSink<T>& sink) {
                               auto gt = sink.slot(*tn);
                               if (gt.empty()) return;
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                   for (std::size_t c = 0; c < d; ++c) gt[idx[i] * d + c] += g[i * d + c];
                           });
}

// Row-wise RMS normalisation with a learned gain: y = x / rms(x) * gain.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& gain, T eps = T(1e-5)) {
    constexpr std::string_view op = "rmsnorm";
    detail::require_rank(op, x, 2, "input");
    detail::require_rank(op, gain, 1, "gain");
    const std::size_t rows = x.dim(0), n = x.dim(1);
    if (gain.dim(0) != n) detail::shape_error(op, "gain " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
    std::vector<T> out(x.numel());
    std::vector<T> inv(rows);
    auto xv = x.values();
    auto gv = gain.values();
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = T(0);
        for (std::size_t c = 0; c < n; ++c) ss += xv[r * n + c] * xv[r * n + c];
        inv[r] = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = xv[r * n + c] * inv[r] * gv[c];
    }
    auto xn = x.node();
    auto gn = gain.node();
    return detail::emit<T>(op, x.shape(), std::move(out), {&x, &gain},
                           [xn, gn, inv = std::move(inv), rows, n](std::span<const T> g, GradSink<T>& sink) {
                               auto gx = sink.slot(*xn);
                               auto gg = sink.slot(*gn);
                               const auto& xv = xn->value;
                               const auto& gv = gn->value;
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const T ir = inv[r];
                                   if (!gx.empty()) {
                                       T dot = T(0);
                                       for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * gv[c] * xv[r * n + c];
                                       const T coeff = ir * ir * ir * dot / static_cast<T>(n);
                                       for (std::size_t c = 0; c < n; ++c)
                                           gx[r * n + c] += g[r * n + c] * gv[c] * ir - xv[r * n + c] * coeff;
                                   }
                                   if (!gg.empty()) {
                                       for (std::size_t c = 0; c < n; ++c) gg[c] += g[r * n + c] * xv[r * n + c] * ir;
                                   }
                               }
                           });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
    constexpr std::string_view op = "slice_rows";
    detail::require_rank(op, a, 2, "input");
    const std::size_t cols = a.dim(1);
    if (start + count > a.dim(0)) {
        detail::shape_error(op, "rows [" + std::to_string(start) + "," + std::to_string(start + count) +
                                    ") outside " + shape_str(a.shape()));
    }
    auto av = a.values();
    std::vector<T> out(av.begin() + static_cast<std::ptrdiff_t>(start * cols),
                       av.begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
    auto an = a.node();
    return detail::emit<T>(op, {count, cols}, std::move(out), {&a},
                           [an, start, cols](std::span<const T> g, GradSink<T>& sink) {
                               auto ga = sink.slot(*an);
                               if (ga.empty()) return;
                               for (std::size_t i = 0; i < g.size(); ++i) ga[start * cols + i] += g[i];
                           });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
    constexpr std::string_view op = "slice_cols";
    detail::require_rank(op, a, 2, "input");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    if (start + count > cols) {
        detail::shape_error(op, "cols [" + std::to_string(start) + "," + std::to_string(start + count) +
                                    ") outside " + shape_str(a.shape()));
    }
    std::vector<T> out(rows * count);
    auto av = a.values();
    for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(av.begin() + static_cast<std::ptrdiff_t>(r * cols + start), count,
                    out.begin() + static_cast<std::ptrdiff_t>(r * count));
    auto an = a.node();
    return detail::emit<T>(op, {rows, count}, std::move(out), {&a},
                           [an, rows, cols, start, count](std::span<const T> g, GradSink<T>& sink) {
                               auto ga = sink.slot(*an);
                               if (ga.empty()) return;
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t c = 0; c < count; ++c) ga[r * cols + start + c] += g[r * count + c];
                           });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    constexpr std::string_view op = "concat_cols";
    if (parts.empty()) detail::shape_error(op, "no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t cols = 0;
    for (const auto& p : parts) {
        detail::require_rank(op, p, 2, "input");
        if (p.dim(0) != rows) detail::shape_error(op, "row mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        cols += p.dim(1);
    }
    std::vector<T> out(rows * cols);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t pc = p.dim(1);
        auto pv = p.values();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(r * pc), pc,
                        out.begin() + static_cast<std::ptrdiff_t>(r * cols + offset));
        offset += pc;
    }
    Tape<T>* tape = active_tape<T>();
    bool record = false;
    if (tape)
        for (const auto& p : parts) record = record || p.requires_grad();
    Tensor<T> result({rows, cols}, std::move(out), record);
    if (record) {
        std::vector<std::shared_ptr<detail::Node<T>>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        auto captured = nodes;
        tape->record(op, std::move(nodes), result.node(),
                     [captured, rows, cols](std::span<const T> g, GradSink<T>& sink) {
                         std::size_t off = 0;
                         for (const auto& node : captured) {
                             const std::size_t pc = node->shape[1];
                             auto gp = sink.slot(*node);
                             if (!gp.empty())
                                 for (std::size_t r = 0; r < rows; ++r)
                                     for (std::size_t c = 0; c < pc; ++c) gp[r * pc + c] += g[r * cols + off + c];
                             off += pc;
                         }
                     });
    }
    return result;
}

// Picks entries (row, col) of a rank-2 tensor into a vector.
template <typename T>
Tensor<T> pick(const Tensor<T>& a, const std::vector<std::pair<std::size_t, std::size_t>>& at) {
    constexpr std::string_view op = "pick";
    detail::require_rank(op, a, 2, "input");
    const std::size_t rows = a.dim(0), cols = a.dim(1);
    std::vector<T> out(at.size());
    auto av = a.values();
    for (std::size_t i = 0; i < at.size(); ++i) {
        if (at[i].first >= rows || at[i].second >= cols) {
            detail::shape_error(op, "index (" + std::to_string(at[i].first) + "," + std::to_string(at[i].second) +
                                        ") outside " + shape_str(a.shape()));
        }
        out[i] = av[at[i].first * cols + at[i].second];
    }
    auto an = a.node();
    return detail::emit<T>(op, {at.size()}, std::move(out), {&a},
                           [an, at, cols](std::span<const T> g, GradSink<T>& sink) {
                               auto ga = sink.slot(*an);
                               if (ga.empty()) return;
                               for (std::size_t i = 0; i < at.size(); ++i) ga[at[i].first * cols + at[i].second] += g[i];
                           });
}

// Returns `base` with `delta[k]` added at (row, cols[k]). Zero deltas leave
// the corresponding entries bit-identical.
template <typename T>
Tensor<T> scatter_add(const Tensor<T>& base, std::size_t row, const std::vector<std::size_t>& cols,
                      const Tensor<T>& delta) {
    constexpr std::string_view op = "scatter_add";
    detail::require_rank(op, base, 2, "base");
    detail::require_rank(op, delta, 1, "delta");
    if (delta.dim(0) != cols.size()) {
        detail::shape_error(op, "delta " + shape_str(delta.shape()) + " vs " + std::to_string(cols.size()) + " indices");
    }
    const std::size_t width = base.dim(1);
    if (row >= base.dim(0)) detail::shape_error(op, "row " + std::to_string(row) + " outside " + shape_str(base.shape()));
    std::vector<T> out(base.values().begin(), base.values().end());
    auto dv = delta.values();
    for (std::size_t k = 0; k < cols.size(); ++k) {
        if (cols[k] >= width) detail::shape_error(op, "column " + std::to_string(cols[k]) + " outside " + shape_str(base.shape()));
        if (dv[k] != T(0)) out[row * width + cols[k]] += dv[k];
    }
    auto bn = base.node();
    auto dn = delta.node();
    return detail::emit<T>(op, base.shape(), std::move(out), {&base, &delta},
                           [bn, dn, row, cols, width](std::span<const T> g, GradSink<T>& sink) {
                               if (auto gb = sink.slot(*bn); !gb.empty())
                                   for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                               if (auto gd = sink.slot(*dn); !gd.empty())
                                   for (std::size_t k = 0; k < cols.size(); ++k) gd[k] += g[row * width + cols[k]];
                           });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = T(0);
    for (T v : a.values()) total += v;
    auto an = a.node();
    return detail::emit<T>("sum", {}, {total}, {&a}, [an](std::span<const T> g, GradSink<T>& sink) {
        auto ga = sink.slot(*an);
        if (ga.empty()) return;
        for (T& v : ga) v += g[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.numel() == 0) detail::shape_error("mean", "empty input");
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

// Maximum over all parameter entries of |analytic - numeric| /
// max(|analytic|, |numeric|, 1e-12), with numeric gradients from central
// differences (fourth-order stencil). `f` maps the parameters to a scalar tensor.
template <typename T, typename F>
T finite_diff_check(F&& f, std::vector<Tensor<T>>& params, T eps) {
    if (!(eps > T(0))) fail(ErrorKind::validation, "finite_diff_check: eps must be positive");
    for (auto& p : params) p.set_requires_grad(true);
    Gradients<T> grads;
    {
        Tape<T> tape;
        TapeScope<T> scope(tape);
        Tensor<T> loss = f(params);
        if (!std::isfinite(static_cast<double>(loss.item()))) fail(ErrorKind::numeric, "finite_diff_check: non-finite loss");
        grads = tape.backward(loss);
    }
    auto evaluate = [&]() {
        NoGradScope<T> off;
        const T v = f(params).item();
        if (!std::isfinite(static_cast<double>(v))) fail(ErrorKind::numeric, "finite_diff_check: non-finite loss under perturbation");
        return v;
    };
    T worst = T(0);
    for (auto& p : params) {
        auto analytic = grads.of(p);
        auto values = p.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T saved = values[i];
            auto at = [&](T offset) {
                values[i] = saved + offset;
                return evaluate();
            };
            // Fourth-order central stencil: truncation O(eps^4) lets eps be
            // large enough that roundoff stays far below the tolerance.
            const T d1 = at(eps) - at(-eps);
            const T d2 = at(T(2) * eps) - at(T(-2) * eps);
            values[i] = saved;
            const T numeric = (T(8) * d1 - d2) / (T(12) * eps);
            const T a = analytic.at(i);
            if (!std::isfinite(static_cast<double>(a))) fail(ErrorKind::numeric, "finite_diff_check: non-finite analytic gradient");
            const T denom = std::max({std::abs(a), std::abs(numeric), T(1e-12)});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace lafn
