#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "mtl/error.h"
#include "mtl/tensor.h"

namespace mtl {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid only while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Eager reverse-mode tape. Each op computes its value immediately and records
// a closure that scatters the output gradient into its parents. Nodes are in
// creation order, which is a valid topological order for backward().
class Tape {
 public:
  struct Node {
    Tensor value;              // owned value (unused for external leaves)
    const Tensor* external = nullptr;  // leaf backed by caller storage
    Tensor grad;               // allocated lazily, zero-initialized
    bool requires_grad = false;
    std::function<void()> backward;
  };

  // Leaf backed by external storage (a parameter). The storage must outlive
  // the tape and must not be reallocated while the tape is alive.
  Var leaf(const Tensor& t, bool requires_grad) {
    Node n;
    n.external = &t;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  // Owned constant (no gradient).
  Var constant(Tensor t) {
    Node n;
    n.value = std::move(t);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  Var make_node(Tensor value, bool requires_grad, std::function<void()> backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& val(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].requires_grad; }

  // Gradient accumulator for a node; allocates zeros on first touch.
  Tensor& grad_buf(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.data.empty()) {
      const Tensor& v = n.external ? *n.external : n.value;
      n.grad = Tensor::zeros(v.shape);
    }
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[static_cast<size_t>(id)].grad.data.empty(); }

  // Gradient of a var after backward(); zeros if it never received one.
  Tensor grad_of(Var v) const {
    const Node& n = nodes_[static_cast<size_t>(v.id)];
    if (!n.grad.data.empty()) return n.grad;
    const Tensor& val = n.external ? *n.external : n.value;
    return Tensor::zeros(val.shape);
  }

  void backward(Var loss) {
    const Tensor& lv = val(loss);
    check_model(lv.numel() == 1, "backward: loss must be scalar, got " + lv.shape_str());
    grad_buf(loss.id).data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<size_t>(i)];
      if (n.requires_grad && !n.grad.data.empty() && n.backward) n.backward();
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  // deque: references to node values stay valid while the tape grows
  std::deque<Node> nodes_;
};

inline const Tensor& V(Var v) { return v.tape->val(v); }

}  // namespace mtl
