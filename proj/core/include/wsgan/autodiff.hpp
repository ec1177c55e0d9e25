#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "wsgan/tensor.hpp"

namespace wsgan {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the backward tape.
struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    int64_t seq = 0;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward;

    Tensor& ensure_grad();
    void accumulate(const Tensor& g);
};

/// Handle to a tape node. Leaf vars (parameters) persist across steps; op
/// results hold their parents alive until the graph is dropped.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Tensor& val() const { return node_->value; }
    Tensor& val() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    int64_t size() const { return node_->value.size(); }
    Scalar item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& grad() { return node_->ensure_grad(); }
    bool has_grad() const { return node_ && node_->grad.defined(); }
    void zero_grad();

    const NodePtr& node() const { return node_; }

private:
    NodePtr node_;
};

/// Constant (never tracked).
Var constant(Tensor value);

bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Create an op result node. Backward runs only if some parent requires grad
/// and grads are enabled; otherwise parents are not retained.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Reverse pass from a scalar root; accumulates into every reachable
/// requires_grad node.
void backward(const Var& root);

}  // namespace wsgan
