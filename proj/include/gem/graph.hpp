#pragma once

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "gem/tensor.hpp"

namespace gem::nn {

struct Node;
using BackwardFn = std::function<void(Node&)>;

// One vertex of the reverse-mode tape. `backward` reads `grad` and
// accumulates into the parents' grads.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  // Lazily allocated gradient buffer.
  Tensor& grad_buffer() {
    if (grad.empty() && value.numel() > 0) grad = Tensor(value.shape());
    return grad;
  }
};

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int axis) const { return node_->value.dim(axis); }
  int64_t numel() const { return node_->value.numel(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

/// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds the result node of an op. The backward closure is attached only
// when grad mode is on and some parent requires a gradient.
Var make_result(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

/// Reverse sweep from a scalar root; seeds d(root)/d(root) = 1.
void backward(const Var& root);

/// Named parameter handles owned by a model.
struct NamedParam {
  std::string name;
  Var var;
};
using ParamList = std::vector<NamedParam>;

void zero_grads(ParamList& params);

}  // namespace gem::nn
