// Dense row-major tensor with reverse-mode automatic differentiation.
//
// The graph is taped eagerly during the forward pass: every op that needs
// gradients records its parents and a backward closure on the result. A
// backward() call walks the tape once in reverse topological order and then
// releases it. Tensors share storage through shared_ptr, so a value stays
// alive as long as anything (including the tape) references it.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "vaedet/rng.hpp"

namespace vaedet {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("tensor: negative dimension");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << "]";
    return os.str();
}

// Global (thread-local) switch: when disabled, ops run forward-only and no
// tape is recorded. Scoring and validation run under NoGradGuard.
class GradMode {
public:
    static bool enabled() { return enabled_; }
    static void set_enabled(bool on) { enabled_ = on; }

private:
    static thread_local bool enabled_;
};

inline thread_local bool GradMode::enabled_ = true;

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Finite checks run after every forward op; NaN/Inf is an error state, never
// propagated silently. Benchmarks may switch the scan off.
class FiniteCheck {
public:
    static bool enabled() { return enabled_; }
    static void set_enabled(bool on) { enabled_ = on; }

private:
    static thread_local bool enabled_;
};

inline thread_local bool FiniteCheck::enabled_ = true;

namespace detail {

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until touched; empty means all-zero
    bool requires_grad = false;

    // Tape node. Parents are the op inputs; backward_fn reads this->grad and
    // accumulates into the parents' grads.
    std::vector<std::shared_ptr<TensorData>> parents;
    std::function<void(TensorData&)> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
    }
};

}  // namespace detail

template <typename T>
class Tensor {
public:
    using Data = detail::TensorData<T>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw std::invalid_argument("tensor: shape " + shape_str(shape) +
                                        " does not match data length " +
                                        std::to_string(values.size()));
        d_ = std::make_shared<Data>();
        d_->shape = std::move(shape);
        d_->value = std::move(values);
        d_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(static_cast<size_t>(n), T(0)),
                      requires_grad);
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(static_cast<size_t>(n), fill),
                      requires_grad);
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    static Tensor randn(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0,
                        bool requires_grad = false) {
        const auto n = shape_numel(shape);
        std::vector<T> v(static_cast<size_t>(n));
        for (auto& x : v) x = static_cast<T>(rng.normal(mean, stddev));
        return Tensor(std::move(shape), std::move(v), requires_grad);
    }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    int ndim() const { return static_cast<int>(d_->shape.size()); }
    int dim(int i) const { return d_->shape.at(static_cast<size_t>(i)); }
    int64_t numel() const { return d_->numel(); }

    std::span<const T> values() const { return {d_->value.data(), d_->value.size()}; }
    // Direct mutation is for leaves (parameters, buffers); mutating an
    // interior tape node would desynchronize saved state.
    std::span<T> mutable_values() { return {d_->value.data(), d_->value.size()}; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool on) { d_->requires_grad = on; }

    std::span<T> grad_span() {
        d_->ensure_grad();
        return {d_->grad.data(), d_->grad.size()};
    }

    std::vector<T> grad_vector() const {
        if (d_->grad.empty()) return std::vector<T>(d_->value.size(), T(0));
        return d_->grad;
    }

    void zero_grad() { d_->grad.assign(d_->value.size(), T(0)); }

    T item() const {
        if (numel() != 1)
            throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
        return d_->value[0];
    }

    // Reverse-mode sweep from a scalar. Visits each tape node exactly once in
    // reverse topological order, then frees the tape.
    void backward() {
        if (numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(shape()));
        // The order vector holds shared ownership: releasing a node's
        // parents mid-sweep must not free nodes still waiting their turn.
        std::vector<std::shared_ptr<Data>> order;
        std::unordered_set<Data*> visited;
        std::vector<std::pair<std::shared_ptr<Data>, size_t>> stack;
        stack.emplace_back(d_, 0);
        visited.insert(d_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                std::shared_ptr<Data> parent = node->parents[next++];
                if (visited.insert(parent.get()).second)
                    stack.emplace_back(std::move(parent), 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        d_->ensure_grad();
        d_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Data* node = it->get();
            if (node->backward_fn) node->backward_fn(*node);
            node->backward_fn = nullptr;
            node->parents.clear();
        }
    }

    std::shared_ptr<Data> impl() const { return d_; }

private:
    std::shared_ptr<Data> d_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

namespace detail {

template <typename T>
inline void check_finite(const std::vector<T>& v, const char* op) {
    if (!FiniteCheck::enabled()) return;
    for (const T x : v) {
        if (!std::isfinite(static_cast<double>(x)))
            throw std::runtime_error(std::string("non-finite value produced by op '") + op +
                                     "'");
    }
}

// Builds the result tensor of an op and records the tape node when gradients
// are required. `parents` supplies the inputs, `backward` the closure.
template <typename T>
Tensor<T> make_op_result(Shape shape, std::vector<T> value, const char* op,
                         std::vector<std::shared_ptr<TensorData<T>>> parents,
                         std::function<void(TensorData<T>&)> backward) {
    check_finite(value, op);
    Tensor<T> out(std::move(shape), std::move(value));
    bool needs = false;
    if (GradMode::enabled()) {
        for (const auto& p : parents)
            if (p->requires_grad) needs = true;
    }
    if (needs) {
        auto impl = out.impl();
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(backward);
    }
    return out;
}

}  // namespace detail

}  // namespace vaedet
