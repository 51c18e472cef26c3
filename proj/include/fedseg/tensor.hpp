#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fedseg/errors.hpp"

namespace fedseg {

// All tensors are dense row-major (batch, channels, height, width) of
// 64-bit floats. Values must stay finite through every forward/backward
// pass; ops that can produce non-finite values check and throw NumericError.
struct Shape {
    int n = 1, c = 1, h = 1, w = 1;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape& o) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}

// Disables graph construction in scope (eval forward, finite differences).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_enabled) { detail::grad_mode_enabled = false; }
    ~NoGradGuard() { detail::grad_mode_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_enabled; }

class Tensor : public std::enable_shared_from_this<Tensor> {
  public:
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    // Autodiff graph edges; populated only while grad mode is on.
    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;

    static TensorPtr create(Shape s, bool needs_grad = false) {
        auto t = std::make_shared<Tensor>();
        t->shape = s;
        t->data.assign(static_cast<std::size_t>(s.numel()), 0.0);
        t->requires_grad = needs_grad;
        return t;
    }

    static TensorPtr from_vector(Shape s, std::vector<double> values, bool needs_grad = false) {
        if (static_cast<std::int64_t>(values.size()) != s.numel())
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + s.str());
        auto t = std::make_shared<Tensor>();
        t->shape = s;
        t->data = std::move(values);
        t->requires_grad = needs_grad;
        return t;
    }

    static TensorPtr full(Shape s, double v, bool needs_grad = false) {
        auto t = create(s, needs_grad);
        std::fill(t->data.begin(), t->data.end(), v);
        return t;
    }

    static TensorPtr scalar(double v) { return full(Shape{1, 1, 1, 1}, v); }

    std::int64_t numel() const { return shape.numel(); }

    double item() const {
        if (numel() != 1) throw DimensionError("item() on non-scalar tensor " + shape.str());
        return data[0];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
    }

    void accumulate_grad(const double* g, std::int64_t count) {
        ensure_grad();
        for (std::int64_t i = 0; i < count; ++i) grad[static_cast<std::size_t>(i)] += g[i];
    }

    double& at(int n_, int c_, int h_, int w_) {
        return data[((static_cast<std::size_t>(n_) * shape.c + c_) * shape.h + h_) * shape.w + w_];
    }
    double at(int n_, int c_, int h_, int w_) const {
        return data[((static_cast<std::size_t>(n_) * shape.c + c_) * shape.h + h_) * shape.w + w_];
    }
};

namespace detail {

// Output node wiring; the graph edge exists only if some input needs grad.
inline TensorPtr make_node(Shape s, std::vector<TensorPtr> inputs) {
    auto out = Tensor::create(s);
    if (grad_enabled()) {
        for (const auto& in : inputs) {
            if (in->requires_grad) {
                out->requires_grad = true;
                break;
            }
        }
        if (out->requires_grad) out->parents = std::move(inputs);
    }
    return out;
}

inline void check_finite(const Tensor& t, const char* op) {
    for (double v : t.data) {
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. Nodes are visited in reverse
// topological order; each node's backward_fn pushes into its parents' grads.
inline void backward(const TensorPtr& root) {
    if (root->numel() != 1)
        throw DimensionError("backward() requires a scalar root, got " + root->shape.str());
    if (!root->requires_grad)
        throw StateError("backward() on a tensor that does not require grad");

    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> seen;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Tensor* parent = node->parents[idx++].get();
            if (parent->requires_grad && seen.insert(parent).second)
                stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
}

}  // namespace fedseg
