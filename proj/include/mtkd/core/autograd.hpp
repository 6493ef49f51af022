#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mtkd/core/tensor.hpp"

namespace mtkd {

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const noexcept { return !backward_fn; }

    /// Gradient buffer, zero-initialised on first use.
    Tensor<T>& grad_buffer() {
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a node of the autograd tape. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }
    void zero_grad() {
        if (!node_->grad.empty()) node_->grad.fill(T{0});
    }

    /// Leaf holding a copy of the value; gradients stop here.
    Var detach() const { return Var(node_->value, false); }

    /// Scalar value of a one-element tensor.
    T item() const {
        if (node_->value.numel() != 1) {
            throw ShapeError("item() on tensor of shape " + to_string(shape()));
        }
        return node_->value[0];
    }

    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Creates the output node of an op. The backward function is recorded only when
/// grad mode is on and at least one input requires a gradient.
template <typename T>
Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (auto& in : inputs) node->parents.push_back(in.node());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Var<T>(std::move(node));
}

/// Reverse-mode sweep from `root`. A scalar root is seeded with 1; otherwise pass `seed`.
/// Leaf gradients accumulate; interior gradients are released after use.
template <typename T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
    if (!root.requires_grad()) return;
    if (seed == nullptr && root.value().numel() != 1) {
        throw ShapeError("backward() without a seed needs a scalar root, got " + to_string(root.shape()));
    }

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.push_back({parent, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    Node<T>* r = root.node().get();
    Tensor<T>& g = r->grad_buffer();
    if (seed) {
        require_same_shape(seed->shape(), r->value.shape(), "backward seed");
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += (*seed)[i];
    } else {
        g[0] += T{1};
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* node = *it;
        if (node->is_leaf()) continue;
        if (!node->grad.empty()) node->backward_fn(*node);
        node->grad = Tensor<T>();
    }
}

/// Gradient buffer of parent `i`, or null when that parent does not track gradients.
template <typename T>
inline Tensor<T>* parent_grad(Node<T>& self, std::size_t i) {
    auto& p = self.parents[i];
    return p->requires_grad ? &p->grad_buffer() : nullptr;
}

} // namespace mtkd
