#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fewshot/error.hpp"
#include "fewshot/tensor.hpp"

namespace fewshot {

enum class OpTag : std::uint8_t {
  kLeaf,
  kConv2d,
  kBatchNorm,
  kRelu,
  kMaxPool2d,
  kLinear,
  kLogSoftmax,
  kReshape,
  kAdd,
  kMul,
  kScale,
  kSum,
  kSegmentSum,
  kPairFeatures,
  kNllMean,
};

template <typename S>
class Graph;

// Handle into a graph's node arena. Cheap to copy; valid as long as the
// graph lives.
template <typename S>
class Var {
 public:
  Var() = default;
  Var(Graph<S>* g, std::int32_t id) : graph_(g), id_(id) {}

  bool valid() const { return graph_ != nullptr; }
  std::int32_t id() const { return id_; }
  Graph<S>& graph() const { return *graph_; }

  const Tensor<S>& value() const;
  const Tensor<S>& grad() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Graph<S>* graph_ = nullptr;
  std::int32_t id_ = -1;
};

// Reverse-mode tape over an arena of nodes. Nodes are created in topological
// order by construction (every parent id is smaller than the child id), so
// the backward sweep is simply descending creation order, which makes the
// accumulation order fixed and runs bit-identical.
template <typename S>
class Graph {
 public:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;  // same shape, zero-initialized
    OpTag op = OpTag::kLeaf;
    std::vector<std::int32_t> parents;
    // Reads self grad/value and scatters into parent grads via the graph.
    std::function<void(Graph&, const Node&)> backward;
    bool trainable = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<S> leaf(Tensor<S> value, bool trainable = false) {
    return create(std::move(value), OpTag::kLeaf, {}, nullptr, trainable);
  }

  Var<S> create(Tensor<S> value, OpTag op, std::vector<std::int32_t> parents,
                std::function<void(Graph&, const Node&)> backward,
                bool trainable = false) {
    const std::int32_t id = std::int32_t(nodes_.size());
    for (auto p : parents)
      if (p < 0 || p >= id)
        throw ShapeError("graph parent id out of order; graph must stay acyclic");
    Node n;
    n.grad = Tensor<S>(value.shape());  // zeros
    n.value = std::move(value);
    n.op = op;
    n.parents = std::move(parents);
    n.backward = std::move(backward);
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return Var<S>(this, id);
  }

  const Node& node(std::int32_t id) const { return nodes_[std::size_t(id)]; }
  Node& node(std::int32_t id) { return nodes_[std::size_t(id)]; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor<S>& value(std::int32_t id) const { return nodes_[std::size_t(id)].value; }
  Tensor<S>& grad(std::int32_t id) { return nodes_[std::size_t(id)].grad; }

  void zero_grad() {
    for (auto& n : nodes_) n.grad.set_zero();
  }

  // Reverse sweep from a scalar loss. By default every grad is zeroed
  // first; with accumulate=true leaf grads are kept and the new gradient
  // adds onto them (intermediate grads still reset).
  void backward(const Var<S>& loss, bool accumulate = false) {
    if (!loss.valid() || &loss.graph() != this)
      throw ShapeError("backward: loss var does not belong to this graph");
    Node& root = node(loss.id());
    if (root.value.numel() != 1)
      throw ShapeError("backward requires a scalar loss, got shape " +
                       shape_str(root.value.shape()));
    for (auto& n : nodes_)
      if (!accumulate || n.op != OpTag::kLeaf) n.grad.set_zero();

    // Mark the subgraph reachable from the loss so untouched branches cost
    // nothing and unreachable parameters keep zero grads.
    std::vector<char> reachable(nodes_.size(), 0);
    reachable[std::size_t(loss.id())] = 1;
    for (std::int32_t i = loss.id(); i >= 0; --i) {
      if (!reachable[std::size_t(i)]) continue;
      for (auto p : nodes_[std::size_t(i)].parents) reachable[std::size_t(p)] = 1;
    }

    root.grad[0] += S(1);
    for (std::int32_t i = loss.id(); i >= 0; --i) {
      const Node& n = nodes_[std::size_t(i)];
      if (reachable[std::size_t(i)] && n.backward) n.backward(*this, n);
    }
  }

 private:
  std::vector<Node> nodes_;
};

template <typename S>
const Tensor<S>& Var<S>::value() const {
  return graph_->value(id_);
}

template <typename S>
const Tensor<S>& Var<S>::grad() const {
  return graph_->node(id_).grad;
}

}  // namespace fewshot
