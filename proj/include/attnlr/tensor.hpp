#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

namespace attnlr::nn {

// Dense row-major 64-bit tensor. Most ops treat it as a matrix of
// rows() = shape[0] by cols() = numel / shape[0].
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  std::size_t cols() const { return rows() ? numel() / rows() : 0; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  bool all_finite() const;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

// Each op appends one node holding its value and a closure that pushes the
// node's gradient to its inputs. backward() replays closures in reverse
// record order, which is a valid topological order.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const std::vector<double>& grad_out)>;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  Var record(Tensor value, bool requires_grad, Backward fn);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient buffer of v, zero-initialised on first use.
  std::vector<double>& grad_buffer(Var v);
  // Empty when no gradient reached v.
  const std::vector<double>& grad(Var v) const { return nodes_[v.id].grad; }

  // Seeds d(loss)/d(loss) = 1; loss must be a single-element tensor.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  // The Var the next record() call will return.
  Var next() const { return Var{static_cast<std::uint32_t>(nodes_.size())}; }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    Backward backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

}  // namespace attnlr::nn
