#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "occforge/tensor.hpp"

namespace occ::ad {

class Tape;

/// Handle to a node recorded on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const;
  double item() const;
  bool requires_grad() const;
  /// Gradient after backward(); zeros for nodes the output does not depend on.
  const Tensor& grad() const;
};

/// Linear record of a forward computation. Nodes are appended in execution
/// order, so every input id is smaller than the id of the node consuming it.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);

  /// Appends an op output. Throws NumericError (naming `op`) if the value has a
  /// non-finite entry. The backward rule is dropped when no input needs a gradient.
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }

  /// Gradient of `id`, allocated as zeros on first access.
  Tensor& grad_buffer(std::size_t id);
  const Tensor& grad(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

  void backward(Var output);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

/// Seeds d(output)/d(output) = 1 and propagates to every reachable node.
void backward(Var output);

}  // namespace occ::ad
