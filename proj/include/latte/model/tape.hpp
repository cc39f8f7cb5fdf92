#pragma once

#include "latte/tensor.hpp"

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace latte::model {

// Reverse-mode tape at tensor granularity. Ops push a value node together
// with a closure that scatters the node's cotangent into its inputs' grads.
// backward() seeds the loss with 1 and runs closures in reverse push order.
template <typename ScalarT>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int push(Tensor<ScalarT> value, BackwardFn backward = nullptr) {
    nodes_.push_back(Node{std::move(value), Tensor<ScalarT>(), std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // For ops that need the node id inside their own backward closure.
  void set_backward(int id, BackwardFn backward) { nodes_.at(id).backward = std::move(backward); }

  const Tensor<ScalarT>& value(int id) const { return nodes_.at(id).value; }
  Tensor<ScalarT>& mutable_value(int id) { return nodes_.at(id).value; }

  // Grad tensors are materialized (zeroed) on first touch.
  Tensor<ScalarT>& grad(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() == 0) n.grad = Tensor<ScalarT>::zeros(n.value.shape());
    return n.grad;
  }

  bool has_grad(int id) const { return nodes_.at(id).grad.size() != 0; }

  void backward(int loss_id) {
    if (value(loss_id).size() != 1)
      throw std::invalid_argument("backward expects a scalar loss node");
    grad(loss_id)[0] = ScalarT(1);
    for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward && n.grad.size() != 0) n.backward();
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<ScalarT> value;
    Tensor<ScalarT> grad;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

}  // namespace latte::model
