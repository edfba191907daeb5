#pragma once

// Tape-based reverse-mode differentiation.
//
// A Graph records every primitive applied to tracked values in creation order,
// which is a topological order by construction. Leaves bound with param() refer
// to caller-owned tensors; backward() adds into their `grad` field, so using a
// parameter in several graphs (or twice in one) accumulates.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "patentret/tensor.hpp"

namespace patentret {

enum class OpKind {
  leaf,
  constant,
  matmul,
  add,
  add_bias,
  mul,
  scale,
  relu,
  batchnorm,
  l2_normalize,
  reshape,
  sum,
  mean,
  power,
  log,
  exp,
  max_pool,
  conv2d,
  conv_bias_relu,
  permute,
  gem_pool,
  cross_entropy,
  arcface_margin,
};

template <class T>
class Graph;

template <class T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape; }
};

template <class T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::span<const T> grad_out)>;

  struct Node {
    OpKind kind = OpKind::constant;
    Tensor<T> owned;
    Tensor<T>* external = nullptr;
    std::vector<std::size_t> inputs;
    bool tracked = false;
    std::vector<T> grad;
    BackwardFn backward;
  };

  /// With grad disabled nothing is tracked and no backward closures are kept.
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Binds a caller-owned tensor. Gradients flow into `t.grad` when
  /// `t.requires_grad` is set. The tensor must outlive the graph.
  Var<T> param(Tensor<T>& t) {
    Node n;
    n.kind = OpKind::leaf;
    n.external = &t;
    n.tracked = grad_enabled_ && t.requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> t) {
    Node n;
    n.kind = OpKind::constant;
    n.owned = std::move(t);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Records an op result. `fn` is only kept when some input is tracked.
  Var<T> record(OpKind kind, Tensor<T> out, std::vector<std::size_t> inputs, BackwardFn fn) {
    Node n;
    n.kind = kind;
    n.owned = std::move(out);
    for (std::size_t in : inputs) n.tracked = n.tracked || nodes_.at(in).tracked;
    n.inputs = std::move(inputs);
    if (n.tracked) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// For ops whose backward needs the node's own output.
  void set_backward(std::size_t id, BackwardFn fn) {
    if (nodes_.at(id).tracked) nodes_[id].backward = std::move(fn);
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
  }

  bool tracked(std::size_t id) const { return nodes_.at(id).tracked; }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated on first use. Empty span for
  /// untracked nodes, so backward functions can skip them.
  std::span<T> grad_of(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.tracked) return {};
    if (n.grad.empty()) n.grad.assign(value(id).size(), T{0});
    return n.grad;
  }

  /// Gradient accumulated on an intermediate node during the last backward().
  const std::vector<T>& node_grad(std::size_t id) const { return nodes_.at(id).grad; }

  void backward(Var<T> loss) {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to another graph");
    if (value(loss.id).size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + to_string(value(loss.id).shape));
    if (!nodes_[loss.id].tracked) return;
    for (Node& n : nodes_) n.grad.clear();
    grad_of(loss.id)[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.tracked || n.grad.empty()) continue;
      if (n.kind == OpKind::leaf) {
        Tensor<T>& t = *n.external;
        if (!t.grad) t.grad.emplace(t.size(), T{0});
        for (std::size_t k = 0; k < n.grad.size(); ++k) (*t.grad)[k] += n.grad[k];
        continue;
      }
      // Allocating input grads never touches nodes_ itself, so n.grad stays put.
      if (n.backward) n.backward(*this, std::span<const T>(n.grad.data(), n.grad.size()));
    }
  }

 private:
  bool grad_enabled_ = true;
  std::vector<Node> nodes_;
};

}  // namespace patentret
