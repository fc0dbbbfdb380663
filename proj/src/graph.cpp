#include "gem/graph.hpp"

#include <unordered_set>

namespace gem::nn {
namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var constant(Tensor value) { return Var(std::move(value), false); }
Var parameter(Tensor value) { return Var(std::move(value), true); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var make_result(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const Var& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (const Var& p : parents) node->parents.push_back(p.ptr());
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined()) throw Error("backward: undefined root");
  if (root.numel() != 1) throw Error("backward: root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a reverse topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  // Drop interior gradients so a retained graph does not pin memory.
  for (Node* n : order) {
    if (!n->parents.empty()) n->grad = Tensor();
  }
}

void zero_grads(ParamList& params) {
  for (auto& p : params) p.var.zero_grad();
}

}  // namespace gem::nn
