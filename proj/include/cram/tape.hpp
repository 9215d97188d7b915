#pragma once
// Reverse-mode gradient tape. Nodes are appended in forward order, which is
// a topological order by construction; backward() walks them once in
// reverse. Gradients of leaves bound to a Parameter accumulate into the
// parameter's persistent buffer (never zeroed implicitly); gradients of
// free leaves stay readable on the tape until the next backward call.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cram/common.hpp"
#include "cram/tensor.hpp"

namespace cram {

// A named, trainable (or buffer) tensor living outside any tape.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  std::vector<S> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<S> v, bool train = true)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.size(), S(0)),
        trainable(train) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
  void assign(Tensor<S> v) {
    if (v.shape() != value.shape())
      throw ShapeError("parameter " + name + " shape mismatch on assign");
    value = std::move(v);
  }
};

template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<S>&)>;

  struct Node {
    const char* op;
    std::vector<int> inputs;
    std::size_t size;
    BackwardFn backward;           // empty for leaves
    Parameter<S>* param = nullptr; // set for parameter leaves
  };

  int add_node(const char* op, std::vector<int> inputs, std::size_t size,
               BackwardFn backward) {
    nodes_.push_back(Node{op, std::move(inputs), size, std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  // Registers a tracked leaf for an input tensor; its gradient is readable
  // via grad() after backward().
  Tensor<S> leaf(const Tensor<S>& t) {
    const int id = add_node("leaf", {}, t.size(), BackwardFn{});
    return t.with_node(id);
  }

  // Registers a leaf bound to a parameter. The parameter must outlive the
  // backward pass; its grad buffer accumulates across calls.
  Tensor<S> use(Parameter<S>& p) {
    const int id = add_node("param", {}, p.value.size(), BackwardFn{});
    nodes_.back().param = &p;
    return p.value.with_node(id);
  }

  std::size_t node_count() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  // Accumulation buffer for a node, allocated on first touch.
  std::vector<S>& acc(int id) {
    auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(nodes_[static_cast<std::size_t>(id)].size, S(0));
    return g;
  }

  void add_grad(int id, const S* g, std::size_t n) {
    if (id < 0) return;
    auto& buf = acc(id);
    for (std::size_t i = 0; i < n; ++i) buf[i] += g[i];
  }

  // Reverse pass from a scalar loss. Each backward call starts from fresh
  // node-gradient buffers, so repeated calls add one full gradient each to
  // the bound parameters.
  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1)
      throw UsageError(strformat("backward requires a scalar loss, got %s",
                                 shape_str(loss.shape()).c_str()));
    if (loss.node() < 0)
      throw UsageError("backward requires a loss tracked on the tape");
    grads_.assign(nodes_.size(), {});
    acc(loss.node())[0] = S(1);
    for (int id = loss.node(); id >= 0; --id) {
      auto& g = grads_[static_cast<std::size_t>(id)];
      if (g.empty()) continue;  // node does not influence the loss
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.param) {
        auto& pg = n.param->grad;
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      } else if (n.backward) {
        n.backward(*this, g);
      }
    }
  }

  // Gradient of the last backward pass w.r.t. a tracked tensor; null if the
  // tensor did not influence that loss.
  const std::vector<S>* grad(const Tensor<S>& t) const {
    if (t.node() < 0 || static_cast<std::size_t>(t.node()) >= grads_.size())
      return nullptr;
    const auto& g = grads_[static_cast<std::size_t>(t.node())];
    return g.empty() ? nullptr : &g;
  }

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<S>> grads_;
};

// True when at least one operand participates in a graph.
template <typename S>
inline bool tracked(const Tensor<S>& a) {
  return a.node() >= 0;
}
template <typename S, typename... Ts>
inline bool tracked(const Tensor<S>& a, const Ts&... rest) {
  return a.node() >= 0 || tracked(rest...);
}

}  // namespace cram
