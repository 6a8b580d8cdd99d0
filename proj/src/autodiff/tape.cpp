#include "occforge/tape.hpp"

#include <cmath>

#include "occforge/errors.hpp"

namespace occ::ad {

const Tensor& Var::value() const { return tape->value(id); }
const Shape& Var::shape() const { return tape->value(id).shape(); }
double Var::item() const { return tape->value(id).item(); }
bool Var::requires_grad() const { return tape->requires_grad(id); }
const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf tensor contains a non-finite value");
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  const std::size_t id = nodes_.size();
  bool needs_grad = false;
  for (std::size_t in : inputs) {
    if (in >= id) throw Error(std::string("tape order violated by op ") + op);
    needs_grad = needs_grad || nodes_[in].requires_grad;
  }
  for (std::size_t i = 0; i < value.numel(); ++i) {
    if (!std::isfinite(value[i])) {
      throw NumericError(std::string("op '") + op + "' produced a non-finite value at flat index " +
                         std::to_string(i) + " (shape " + shape_str(value.shape()) + ")");
    }
  }
  Node node;
  node.value = std::move(value);
  node.requires_grad = needs_grad;
  node.op = op;
  node.inputs = std::move(inputs);
  if (needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, id};
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.numel() != n.value.numel()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

const Tensor& Tape::grad(std::size_t id) { return grad_buffer(id); }

void Tape::backward(Var output) {
  if (output.tape != this) throw Error("backward: output belongs to a different tape");
  if (value(output.id).numel() != 1) {
    throw ShapeError("backward: output must be scalar, got shape " + shape_str(value(output.id).shape()));
  }
  for (Node& n : nodes_) n.grad = Tensor();
  grad_buffer(output.id)[0] = 1.0;
  for (std::size_t id = output.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.backward || n.grad.numel() == 0) continue;
    n.backward(*this, id);
  }
}

void backward(Var output) { output.tape->backward(output); }

}  // namespace occ::ad
