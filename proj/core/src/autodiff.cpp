#include "wsgan/autodiff.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

namespace wsgan {

namespace {
std::atomic<int64_t> g_seq{1};
thread_local bool g_grad_enabled = true;
}  // namespace

Tensor& Node::ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
}

void Node::accumulate(const Tensor& g) {
    Tensor& dst = ensure_grad();
    WSGAN_CHECK(dst.size() == g.size(), "gradient numel mismatch");
    Scalar* d = dst.data();
    const Scalar* s = g.data();
    for (int64_t i = 0; i < g.size(); ++i) d[i] += s[i];
}

Var::Var(Tensor value, bool requires_grad) {
    node_ = std::make_shared<Node>();
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
}

Scalar Var::item() const {
    WSGAN_CHECK(defined() && node_->value.size() == 1, "item() needs a scalar");
    return node_->value[0];
}

void Var::zero_grad() {
    if (node_ && node_->grad.defined()) node_->grad.fill(0.0);
}

Var constant(Tensor value) { return Var(std::move(value), false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    bool track = false;
    if (g_grad_enabled) {
        for (const Var& p : parents)
            if (p.requires_grad()) {
                track = true;
                break;
            }
    }
    Var out(std::move(value), track);
    if (track) {
        auto& node = *out.node();
        node.parents.reserve(parents.size());
        for (Var& p : parents) node.parents.push_back(p.node());
        node.backward = std::move(backward);
    }
    return out;
}

void backward(const Var& root) {
    WSGAN_CHECK(root.defined() && root.size() == 1, "backward needs a scalar root");
    WSGAN_CHECK(root.requires_grad(), "backward root does not require grad");

    // Collect the reachable grad-requiring subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const NodePtr& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    // Creation order is a topological order; walk it backwards.
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

    root.node()->ensure_grad().fill(1.0);
    for (Node* n : order) {
        if (n->backward && n->grad.defined()) n->backward(*n);
    }
}

}  // namespace wsgan
