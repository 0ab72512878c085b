#ifndef CMAMBA_AUTOGRAD_HPP
#define CMAMBA_AUTOGRAD_HPP

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cmamba/tensor.hpp"

namespace cmamba {

struct Node;
using Var = std::shared_ptr<Node>;

// One value in the computation graph. Interior nodes keep their inputs alive
// and know how to push their output gradient back to them.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into inputs

  explicit Node(Tensor v) : value(std::move(v)) {}

  Tensor& ensure_grad() {
    if (grad.numel() == 0 && value.numel() > 0) grad = Tensor::zeros(value.shape());
    if (grad.numel() == 0 && value.rank() == 0) grad = Tensor::zeros({});
    return grad;
  }

  void accumulate(const Tensor& g) {
    if (!requires_grad) return;
    Tensor& dst = ensure_grad();
    for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += g[i];
  }

  void zero_grad() {
    for (int64_t i = 0; i < grad.numel(); ++i) grad[i] = 0.0;
  }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph construction in its scope (inference / metric evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

inline Var constant(Tensor v) { return std::make_shared<Node>(std::move(v)); }

inline Var make_param(Tensor v) {
  Var n = std::make_shared<Node>(std::move(v));
  n->requires_grad = true;
  return n;
}

// Builds an interior node unless grad mode is off or no input needs gradients,
// in which case the result is a detached leaf and the tape is not extended.
inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop) {
  bool need = false;
  if (grad_enabled()) {
    for (const Var& v : inputs) {
      if (v && v->requires_grad) {
        need = true;
        break;
      }
    }
  }
  Var n = std::make_shared<Node>(std::move(value));
  if (need) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backprop = std::move(backprop);
  }
  return n;
}

// Reverse-mode sweep from a scalar root. Iterative topological order.
inline void backward(const Var& root) {
  if (!root) throw std::invalid_argument("backward: null root");
  if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx == 0 && visited.count(node)) {
      stack.pop_back();
      continue;
    }
    if (idx < node->inputs.size()) {
      Node* child = node->inputs[idx].get();
      ++idx;
      if (child && child->requires_grad && !visited.count(child)) {
        stack.emplace_back(child, 0);
      }
    } else {
      visited.insert(node);
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.numel() > 0) n->backprop(*n);
  }
}

}  // namespace cmamba

#endif  // CMAMBA_AUTOGRAD_HPP
