#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "spikegpt/errors.hpp"

namespace spikegpt {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// One node of the define-by-run graph. Value tensors are immutable once built;
// grad buffers are filled during a single backward pass. Leaf nodes (parameters)
// keep their grad across backward calls so per-sequence gradients can accumulate
// within a training step.
template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = false;
  std::string name;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
};

template <class T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value.assign(static_cast<size_t>(shape_numel(shape)), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    n->leaf = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.node_->value) x = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    n->leaf = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T v) { return from({1, 1}, {v}); }

  static Tensor param(std::string name, Shape shape, std::vector<T> data) {
    Tensor t = from(std::move(shape), std::move(data), true);
    t.node_->name = std::move(name);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  Node<T>* node() const { return node_.get(); }
  NodePtr node_ptr() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  int64_t numel() const { return node_->numel(); }
  int64_t rows() const { return node_->shape.at(0); }
  int64_t cols() const { return node_->shape.at(1); }

  const std::vector<T>& value() const { return node_->value; }
  // Direct mutation is only legitimate for leaves between graph builds
  // (optimizer updates, state resets).
  std::vector<T>& raw_value() { return node_->value; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& raw_grad() { return node_->grad; }
  const std::string& name() const { return node_->name; }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  // Value copy with no graph history.
  Tensor detach() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->value = node_->value;
    return Tensor(std::move(n));
  }

  bool all_finite() const {
    for (T v : node_->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  // Reverse-mode sweep from a scalar. Interior grads are (re)zeroed, leaf grads
  // accumulate; `seed` scales the whole pass (used for batch averaging).
  void backward(T seed = T(1)) const {
    if (numel() != 1) throw ShapeError("backward: root must be scalar");
    if (!node_->requires_grad)
      throw Error("backward: root does not require grad");

    std::vector<Node<T>*> order;
    topo_order(node_.get(), order);

    for (Node<T>* nd : order) {
      if (!nd->requires_grad) continue;
      if (nd->leaf) {
        if (nd->grad.empty()) nd->grad.assign(nd->value.size(), T(0));
      } else {
        nd->grad.assign(nd->value.size(), T(0));
      }
    }
    node_->grad.assign(1, seed);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* nd = *it;
      if (nd->requires_grad && nd->backward_fn) nd->backward_fn(*nd);
    }
  }

 private:
  static void topo_order(Node<T>* root, std::vector<Node<T>*>& out) {
    // Iterative post-order DFS: graphs from long recurrences are too deep for
    // the call stack.
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [nd, idx] = stack.back();
      if (idx < nd->parents.size()) {
        Node<T>* p = nd->parents[idx++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        out.push_back(nd);
        stack.pop_back();
      }
    }
  }

  NodePtr node_;
};

// Builds an op result node. Parents and the backward closure are only retained
// when some input actually requires grad, so inference builds no history.
template <class T>
Tensor<T> make_op(Shape shape, std::vector<T> value, std::vector<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backward_fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& in : inputs) n->parents.push_back(in.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor<T>(std::move(n));
}

}  // namespace spikegpt
