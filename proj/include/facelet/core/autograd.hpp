#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "facelet/core/tensor.hpp"

namespace facelet {

/// A trainable tensor with its accumulated gradient.
template <class T>
struct BasicParameter {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool trainable = true;

    BasicParameter() = default;
    explicit BasicParameter(BasicTensor<T> v, bool trainable_ = true)
        : value(std::move(v)), grad(BasicTensor<T>::zeros(value.shape())), trainable(trainable_) {}

    void zero_grad() { grad.fill(T(0)); }
};

using Parameter = BasicParameter<float>;

namespace detail {

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

template <class T>
struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    BasicParameter<T>* param = nullptr;

    BasicTensor<T>& grad_buffer() {
        if (grad.empty()) grad = BasicTensor<T>::zeros(value.shape());
        return grad;
    }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Handle to a node of the reverse-mode graph.
template <class T>
class BasicVar {
public:
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    BasicVar() = default;
    explicit BasicVar(NodePtr n) : node_(std::move(n)) {}

    static BasicVar constant(BasicTensor<T> v) {
        auto n = std::make_shared<detail::Node<T>>();
        n->value = std::move(v);
        return BasicVar(std::move(n));
    }

    /// Leaf whose gradient is kept on the node (inputs under test, etc).
    static BasicVar leaf(BasicTensor<T> v, bool requires_grad = true) {
        auto n = std::make_shared<detail::Node<T>>();
        n->value = std::move(v);
        n->requires_grad = requires_grad && grad_enabled();
        return BasicVar(std::move(n));
    }

    static BasicVar param(BasicParameter<T>& p) {
        auto n = std::make_shared<detail::Node<T>>();
        n->value = p.value;
        n->requires_grad = p.trainable && grad_enabled();
        if (n->requires_grad) n->param = &p;
        return BasicVar(std::move(n));
    }

    const BasicTensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Gradient held on the node; zeros if backward never reached it.
    BasicTensor<T> grad() const {
        if (node_->grad.empty()) return BasicTensor<T>::zeros(value().shape());
        return node_->grad;
    }

    const NodePtr& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

using Var = BasicVar<float>;

namespace detail {

/// Builds the result node, recording parents only when some parent needs a gradient.
template <class T>
BasicVar<T> make_result(BasicTensor<T> value, std::vector<BasicVar<T>> inputs,
                        std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    bool any = false;
    for (auto& in : inputs) any = any || in.requires_grad();
    if (any && grad_enabled()) {
        n->requires_grad = true;
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backward = std::move(backward);
    }
    return BasicVar<T>(std::move(n));
}

template <class T>
void accumulate(Node<T>& target, const BasicTensor<T>& g) {
    if (!target.requires_grad) return;
    auto& buf = target.grad_buffer();
    for (std::size_t i = 0; i < g.numel(); ++i) buf[i] += g[i];
}

}  // namespace detail

/// Reverse pass from a scalar. Parameter gradients accumulate across calls.
template <class T>
void backward(const BasicVar<T>& loss) {
    if (!loss) throw Error("backward on empty variable");
    if (loss.value().numel() != 1)
        throw ShapeError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    using NodeT = detail::Node<T>;
    std::vector<NodeT*> order;
    std::unordered_set<NodeT*> seen;
    std::vector<std::pair<NodeT*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            NodeT* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (NodeT* n : order)
        if (n->backward || n->param) n->grad = BasicTensor<T>();
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT* n = *it;
        if (n->grad.empty()) continue;
        if (n->backward) n->backward(*n);
        if (n->param) {
            auto& pg = n->param->grad;
            for (std::size_t i = 0; i < pg.numel(); ++i) pg[i] += n->grad[i];
        }
    }
    for (NodeT* n : order)
        if (n->backward || n->param) n->grad = BasicTensor<T>();
}

}  // namespace facelet
