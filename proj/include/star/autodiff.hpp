#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "star/tensor.hpp"

namespace star {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One recorded value in the differentiation graph. Leaves have no backward
// function; interior nodes push their gradient into `parents`.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward;

    bool has_grad() const noexcept { return !grad.empty(); }

    Tensor& grad_buffer() {
        if (grad.empty()) grad = Tensor(value.shape(), 0.0);
        return grad;
    }

    void accumulate(const Tensor& g) {
        Tensor& buf = grad_buffer();
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
    }
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Handle to a Node. Copies share the node.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t rows() const { return node_->value.rows(); }
    std::size_t cols() const { return node_->value.cols(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_->has_grad(); }
    const Tensor& grad() const { return node_->grad_buffer(); }
    void zero_grad() { node_->grad = Tensor(); }

    const NodePtr& node() const noexcept { return node_; }
    bool defined() const noexcept { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

// Builds the result of an op. When recording is off or no input needs a
// gradient the result is a plain constant and `backward` is dropped.
inline Var record(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    bool needs = false;
    if (grad_enabled())
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (auto& in : inputs) node->parents.push_back(in.node());
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

// Reverse pass from a scalar. Each reachable node is visited once, in
// reverse topological order.
inline void backward(const Var& root) {
    if (root.value().size() != 1)
        throw DimensionError("backward() needs a scalar root, got " + shape_string(root.shape()));
    if (!root.requires_grad()) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->has_grad()) n->backward(*n);
    }
}

// A named trainable tensor.
struct Parameter {
    std::string name;
    Var var;
    bool trainable = true;
};

} // namespace star
