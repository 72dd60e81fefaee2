#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "dseg/errors.hpp"
#include "dseg/tensor.hpp"

namespace dseg {

template <class T>
class GraphT;

// Handle to a node in a GraphT. Invalid handles (id < 0) mark absent
// optional inputs, e.g. a deformable conv without modulation.
template <class T>
struct VarT {
  int id = -1;
  bool valid() const { return id >= 0; }
};

using Var = VarT<float>;

// Computation record for one forward pass. Nodes are appended in execution
// order, so reverse iteration is a valid topological order for backward.
template <class T>
class GraphT {
 public:
  using Ten = TensorT<T>;
  using value_type = T;

  GraphT() = default;
  GraphT(const GraphT&) = delete;
  GraphT& operator=(const GraphT&) = delete;

  VarT<T> leaf(Ten value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, nullptr, nullptr});
    return VarT<T>{int(nodes_.size()) - 1};
  }

  VarT<T> constant(Ten value) { return leaf(std::move(value), false); }

  // Registers an externally owned parameter. After backward(), the tensor's
  // grad buffer holds this pass's gradient (zeros if the loss never used it).
  VarT<T> param(Ten* external) {
    nodes_.push_back(Node{*external, {}, true, nullptr, external});
    param_ids_.push_back(int(nodes_.size()) - 1);
    return VarT<T>{int(nodes_.size()) - 1};
  }

  // Extension point for ops: value plus a closure that routes the node's
  // output gradient into its inputs' buffers. The closure receives the
  // graph and the node's own id (to read its output gradient).
  VarT<T> make_node(Ten value, const std::vector<int>& inputs,
                    std::function<void(GraphT&, int)> bwd) {
    bool rg = false;
    for (int id : inputs) rg = rg || nodes_[size_t(id)].requires_grad;
    nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(bwd) : nullptr, nullptr});
    return VarT<T>{int(nodes_.size()) - 1};
  }

  const Ten& val(VarT<T> v) const { return nodes_[size_t(v.id)].value; }
  const Ten& val(int id) const { return nodes_[size_t(id)].value; }

  bool needs_grad(int id) const { return nodes_[size_t(id)].requires_grad; }
  bool has_grad(int id) const { return !nodes_[size_t(id)].grad.empty(); }

  // Accumulation buffer for a node, zero-initialized on first touch.
  std::vector<T>& grad_buf(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.empty()) n.grad.assign(n.value.data.size(), T(0));
    return n.grad;
  }

  const std::vector<T>& grad(VarT<T> v) const { return nodes_[size_t(v.id)].grad; }
  const std::vector<T>& grad(int id) const { return nodes_[size_t(id)].grad; }

  void backward(VarT<T> loss) {
    if (backward_done_) throw StateError("backward called twice on the same record");
    const Ten& lv = val(loss);
    if (!lv.is_scalar()) throw RankError("backward requires a 0-dimensional loss");
    backward_done_ = true;

    grad_buf(loss.id)[0] = T(1);
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[size_t(id)];
      if (!n.grad.empty() && n.bwd) n.bwd(*this, id);
    }
    for (int id : param_ids_) {
      Node& n = nodes_[size_t(id)];
      Ten* ext = n.writeback;
      ext->ensure_grad();
      if (!n.grad.empty())
        std::copy(n.grad.begin(), n.grad.end(), ext->grad.begin());
      else
        ext->zero_grad();
    }
  }

  size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    param_ids_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Ten value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::function<void(GraphT&, int)> bwd;
    Ten* writeback = nullptr;
  };

  std::vector<Node> nodes_;
  std::vector<int> param_ids_;
  bool backward_done_ = false;
};

using Graph = GraphT<float>;

}  // namespace dseg
