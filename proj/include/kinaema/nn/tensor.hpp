#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kinaema/util/errors.hpp"
#include "kinaema/util/rng.hpp"

namespace kinaema::nn {

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

// Scoped switch that disables graph construction (inference / benchmarks).
struct NoGradGuard {
  NoGradGuard() : prev(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = prev; }
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
  bool prev;
};

template <class S>
struct Node {
  std::vector<int> shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

// Value-semantics handle over a shared graph node. Copies alias the node.
template <class S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

  static Tensor from(std::vector<S> data, std::vector<int> shape, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    auto n = std::make_shared<Node<S>>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    int64_t ne = shape_numel(shape);
    return from(std::vector<S>(static_cast<size_t>(ne), S(0)), std::move(shape), requires_grad);
  }

  static Tensor full(std::vector<int> shape, S fill, bool requires_grad = false) {
    int64_t ne = shape_numel(shape);
    return from(std::vector<S>(static_cast<size_t>(ne), fill), std::move(shape), requires_grad);
  }

  static Tensor uniform(std::vector<int> shape, RngStream& rng, double lo, double hi,
                        bool requires_grad = false) {
    int64_t ne = shape_numel(shape);
    std::vector<S> d(static_cast<size_t>(ne));
    for (auto& v : d) v = static_cast<S>(rng.uniform(lo, hi));
    return from(std::move(d), std::move(shape), requires_grad);
  }

  static Tensor normal(std::vector<int> shape, RngStream& rng, double stddev,
                       bool requires_grad = false) {
    int64_t ne = shape_numel(shape);
    std::vector<S> d(static_cast<size_t>(ne));
    for (auto& v : d) v = static_cast<S>(rng.normal() * stddev);
    return from(std::move(d), std::move(shape), requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int rows() const { return n_->shape.size() == 1 ? 1 : n_->shape[0]; }
  int cols() const { return n_->shape.empty() ? 0 : n_->shape.back(); }
  int64_t numel() const { return static_cast<int64_t>(n_->value.size()); }
  bool requires_grad() const { return n_->requires_grad; }

  const std::vector<S>& values() const { return n_->value; }
  std::vector<S>& values() { return n_->value; }
  const std::vector<S>& grad() const { return n_->grad; }
  std::vector<S>& grad_mut() {
    n_->ensure_grad();
    return n_->grad;
  }

  S item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return n_->value[0];
  }

  // Same values, no history, no gradient.
  Tensor detach() const {
    auto n = std::make_shared<Node<S>>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->requires_grad = false;
    return Tensor(std::move(n));
  }

  Node<S>* node() const { return n_.get(); }
  const std::shared_ptr<Node<S>>& node_ptr() const { return n_; }

 private:
  std::shared_ptr<Node<S>> n_;
};

// Builds a graph node. Parents and the backprop lambda are only recorded when
// gradients are both enabled and needed, so inference runs graph-free.
template <class S, class F>
Tensor<S> make_op(std::vector<int> shape, std::vector<S> value,
                  std::initializer_list<Tensor<S>> parents, F&& backprop_fn) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs && NoGradGuard::enabled()) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backprop = std::forward<F>(backprop_fn);
  }
  return Tensor<S>(std::move(n));
}

// Reverse-mode sweep from a scalar loss. Iterative topological order; only
// nodes that require grad are visited.
template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() expects a scalar loss");
  if (!loss.requires_grad()) return;

  std::vector<Node<S>*> order;
  std::unordered_set<Node<S>*> visited;
  struct Frame {
    Node<S>* n;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node(), 0});
  visited.insert(loss.node());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.n->parents.size()) {
      Node<S>* p = f.n->parents[f.next_parent++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.n);
      stack.pop_back();
    }
  }

  for (Node<S>* n : order) n->ensure_grad();
  loss.node()->grad[0] = S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// Named trainable tensors of one model. Names are unique and stable; they key
// the checkpoint format and the optimizer state.
template <class S>
class ParamSet {
 public:
  Tensor<S> add(const std::string& name, Tensor<S> t) {
    for (const auto& e : entries_)
      if (e.name == name) throw ConfigError("duplicate parameter name: " + name);
    t.node()->requires_grad = true;
    entries_.push_back({name, t});
    return t;
  }

  struct Entry {
    std::string name;
    Tensor<S> tensor;
  };

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  size_t size() const { return entries_.size(); }

  const Tensor<S>* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }

  Tensor<S>* find(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }

  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  // Sum over parameters whose name starts with the prefix.
  int64_t count_prefix(const std::string& prefix) const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) {
      auto* node = e.tensor.node();
      if (!node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), S(0));
    }
  }

 private:
  std::vector<Entry> entries_;
};

}  // namespace kinaema::nn
