#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace encdiff::ag {

using Shape = std::vector<int>;

inline Eigen::Index numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Eigen::Index{1}, [](Eigen::Index a, int b) { return a * b; });
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
struct Node {
  Shape shape;
  Array<Scalar> value;
  Array<Scalar> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Node* input(std::size_t i) const { return inputs[i].get(); }
  bool input_needs_grad(std::size_t i) const { return inputs[i] && inputs[i]->requires_grad; }
};

/// Recording switch. Ops built while disabled carry no graph.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Shared handle to a graph node. Copies alias the same storage.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<Scalar>> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, Array<Scalar> value) {
    if (numel(shape) != value.size())
      throw std::invalid_argument("tensor value size does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<Scalar>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape) {
    const auto sz = numel(shape);
    return constant(std::move(shape), Array<Scalar>::Zero(sz));
  }
  /// Trainable leaf; its gradient accumulates across backward calls until zeroed.
  static Tensor parameter(Shape shape, Array<Scalar> value) {
    Tensor t = constant(std::move(shape), std::move(value));
    t.node_->requires_grad = true;
    t.node_->grad = Array<Scalar>::Zero(t.node_->value.size());
    return t;
  }

  explicit operator bool() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  Eigen::Index size() const { return node_->value.size(); }
  Array<Scalar>& value() { return node_->value; }
  const Array<Scalar>& value() const { return node_->value; }
  Array<Scalar>& grad() { return node_->grad; }
  const Array<Scalar>& grad() const { return node_->grad; }
  Scalar* data() { return node_->value.data(); }
  const Scalar* data() const { return node_->value.data(); }
  bool requires_grad() const { return node_->requires_grad; }
  Node<Scalar>* node() const { return node_.get(); }
  const std::shared_ptr<Node<Scalar>>& shared() const { return node_; }
  Scalar item() const {
    if (size() != 1) throw std::logic_error("item() on a non-scalar tensor");
    return node_->value[0];
  }
  void zero_grad() {
    if (node_->requires_grad) node_->grad.setZero(node_->value.size());
  }

 private:
  std::shared_ptr<Node<Scalar>> node_;
};

/// Creates an op result. Graph edges are kept only when recording is on and
/// some input needs a gradient.
template <typename Scalar>
Tensor<Scalar> make_result(Shape shape, Array<Scalar> value, std::vector<Tensor<Scalar>> inputs,
                           std::function<void(Node<Scalar>&)> backward_fn) {
  auto out = Tensor<Scalar>::constant(std::move(shape), std::move(value));
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in && in.requires_grad());
  if (!any) return out;
  Node<Scalar>* n = out.node();
  n->requires_grad = true;
  n->is_leaf = false;
  for (auto& in : inputs) n->inputs.push_back(in ? in.shared() : nullptr);
  n->backward_fn = std::move(backward_fn);
  return out;
}

/// Reverse sweep from `root`; a non-scalar root needs an explicit seed.
template <typename Scalar>
void backward(const Tensor<Scalar>& root, const Array<Scalar>* seed = nullptr) {
  if (!root.requires_grad()) return;
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->inputs.size()) {
      Node<Scalar>* child = n->inputs[i++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (Node<Scalar>* n : order) {
    if (!n->is_leaf || n->grad.size() != n->value.size()) n->grad.setZero(n->value.size());
  }
  if (seed) {
    root.node()->grad = *seed;
  } else {
    if (root.size() != 1) throw std::logic_error("backward on non-scalar tensor needs a seed");
    root.node()->grad.setOnes(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

}  // namespace encdiff::ag
