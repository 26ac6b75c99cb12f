#include "attnlr/tensor.hpp"

#include <cmath>

#include "attnlr/error.hpp"

namespace attnlr::nn {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) {
    if (s == 0) fail(ErrorCategory::Domain, "tensor dimensions must be positive");
    n *= s;
  }
  return n;
}

Tensor::Tensor(std::vector<std::size_t> s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size()) fail(ErrorCategory::DimMismatch, "tensor data length differs from shape");
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Var Tape::constant(Tensor value) { return record(std::move(value), false, {}); }

Var Tape::leaf(Tensor value) { return record(std::move(value), true, {}); }

Var Tape::record(Tensor value, bool requires_grad, Backward fn) {
  Node node;
  node.value = std::move(value);
  node.value.requires_grad = requires_grad;
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

std::vector<double>& Tape::grad_buffer(Var v) {
  Node& node = nodes_[v.id];
  if (node.grad.empty()) node.grad.assign(node.value.numel(), 0.0);
  return node.grad;
}

void Tape::backward(Var loss) {
  if (!loss.valid() || loss.id >= nodes_.size()) fail(ErrorCategory::Domain, "backward: loss is not on this tape");
  if (nodes_[loss.id].value.numel() != 1) fail(ErrorCategory::Domain, "backward: loss must be a scalar");
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || !node.backward || node.grad.empty()) continue;
    node.backward(*this, node.grad);
  }
}

}  // namespace attnlr::nn
