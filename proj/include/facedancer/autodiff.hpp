// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over Tensor values.
//
// Every backward rule is written in terms of recorded operations, so when
// grad() is asked to create a graph the returned gradients are themselves
// differentiable. The discriminator's gradient penalty relies on this.
#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "facedancer/tensor.hpp"

namespace facedancer {

template <typename T>
class Var;

template <typename T>
struct BackwardContext {
  const Var<T>& grad;  // gradient flowing into the node's output
  const Var<T>& out;   // the node's own output
  const std::vector<bool>& need;
  bool needs(std::size_t i) const { return need[i]; }
};

template <typename T>
struct Node {
  Tensor<T> value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Var<T>> inputs;
  std::function<std::vector<Var<T>>(const BackwardContext<T>&)> backward;
};

namespace detail {
inline bool& recording_flag() {
  thread_local bool on = true;
  return on;
}
}  // namespace detail

inline bool grad_recording() { return detail::recording_flag(); }

// Scoped override of graph recording.
class GradMode {
 public:
  explicit GradMode(bool enabled) : prev_(detail::recording_flag()) {
    detail::recording_flag() = enabled;
  }
  ~GradMode() { detail::recording_flag() = prev_; }
  GradMode(const GradMode&) = delete;
  GradMode& operator=(const GradMode&) = delete;

 private:
  bool prev_;
};

class NoGrad : public GradMode {
 public:
  NoGrad() : GradMode(false) {}
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return Var(std::move(n));
  }
  // A leaf that gradients can be taken with respect to.
  static Var leaf(Tensor<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const& { return node_->value; }
  // Copies, so chained calls on temporaries never dangle.
  Tensor<T> value() && { return node_->value; }
  // Mutable access for optimizers; never use on a node inside a live graph.
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::int64_t size() const { return node_->value.size(); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  T item() const { return node_->value.item(); }
  const char* op() const { return node_->op; }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

template <typename T>
Var<T> detach(const Var<T>& v) {
  return Var<T>::constant(v.value());
}

// Creates an operation result. Inputs and the backward rule are retained only
// when recording is on and some input requires a gradient.
template <typename T, typename Backward>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                   Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  const bool req = grad_recording() &&
                   std::any_of(inputs.begin(), inputs.end(),
                               [](const Var<T>& v) { return v.requires_grad(); });
  if (req) {
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::forward<Backward>(backward);
  }
  return Var<T>(std::move(n));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> zeros_like_var(const Var<T>& v) {
  return Var<T>::constant(Tensor<T>(v.shape()));
}

// Gradients of a scalar output with respect to `wrt`. Unreachable inputs get
// zero gradients. With create_graph the result can be differentiated again.
template <typename T>
std::vector<Var<T>> grad(const Var<T>& output, const std::vector<Var<T>>& wrt,
                         bool create_graph = false) {
  if (output.size() != 1)
    throw ShapeMismatch("grad() needs a scalar output, got " + to_string(output.shape()));
  std::vector<Var<T>> result;
  result.reserve(wrt.size());
  if (!output.requires_grad()) {
    for (const auto& w : wrt) result.push_back(zeros_like_var(w));
    return result;
  }

  // Topological order (inputs before outputs) over nodes that require grad.
  std::vector<Node<T>*> order;
  std::unordered_map<Node<T>*, std::shared_ptr<Node<T>>> owner;
  {
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(output.node(), 0);
    visited.insert(output.node());
    owner[output.node()] = output.node_ptr();
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->inputs.size()) {
        const Var<T>& in = n->inputs[idx++];
        if (in.requires_grad() && visited.insert(in.node()).second) {
          owner[in.node()] = in.node_ptr();
          stack.emplace_back(in.node(), 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::unordered_set<Node<T>*> targets;
  for (const auto& w : wrt)
    if (w.defined()) targets.insert(w.node());
  std::unordered_map<Node<T>*, bool> needed;
  for (Node<T>* n : order) {
    bool need = targets.count(n) > 0;
    for (const auto& in : n->inputs)
      if (in.requires_grad() && needed[in.node()]) need = true;
    needed[n] = need;
  }

  GradMode mode(create_graph);
  std::unordered_map<Node<T>*, Var<T>> grads;
  grads[output.node()] = Var<T>::constant(Tensor<T>(output.shape(), T(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (!needed[n] || !n->backward) continue;
    auto git = grads.find(n);
    if (git == grads.end()) continue;
    std::vector<bool> need(n->inputs.size());
    for (std::size_t i = 0; i < n->inputs.size(); ++i)
      need[i] = n->inputs[i].requires_grad() && needed[n->inputs[i].node()];
    const Var<T> g = git->second;
    const Var<T> self(owner[n]);
    BackwardContext<T> ctx{g, self, need};
    std::vector<Var<T>> gs = n->backward(ctx);
    for (std::size_t i = 0; i < n->inputs.size(); ++i) {
      if (!need[i] || !gs[i].defined()) continue;
      Node<T>* in = n->inputs[i].node();
      auto ex = grads.find(in);
      if (ex == grads.end())
        grads.emplace(in, std::move(gs[i]));
      else
        ex->second = add(ex->second, gs[i]);
    }
    // Intermediate gradients are no longer needed once propagated.
    if (!targets.count(n)) grads.erase(git);
  }

  for (const auto& w : wrt) {
    auto it = w.defined() ? grads.find(w.node()) : grads.end();
    result.push_back(it == grads.end() ? zeros_like_var(w) : it->second);
  }
  return result;
}

}  // namespace facedancer
