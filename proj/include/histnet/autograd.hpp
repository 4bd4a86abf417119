#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every op records a backward rule that is itself written in terms of
// recorded ops, so gradients can be differentiated again when requested
// (`create_graph`). This is what the critic's gradient penalty relies on.
// Smooth elementwise ops (tanh, softmax, log, sqrt) record their local
// derivative as a constant: first derivatives are exact everywhere, second
// derivatives are exact for the linear and piecewise-linear ops only.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "histnet/tensor.hpp"

namespace histnet {

class Var;

using BackwardFn =
    std::function<std::vector<Var>(const Var& grad_out, std::span<const Var> inputs, const std::vector<bool>& need)>;

struct Node {
  Tensor value;
  std::vector<Var> inputs;
  BackwardFn backward;
  bool requires_grad = false;
  const char* op = "leaf";
};

/// Handle to a node in the computation graph. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  /// Leaf that gradients can be taken with respect to.
  static Var param(Tensor value) { return Var(std::move(value), true); }
  static Var constant(Tensor value) { return Var(std::move(value), false); }

  const Tensor& value() const { return node_->value; }
  /// In-place access for optimizers. Only valid on leaves.
  Tensor& mutable_value();
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const Node* node() const { return node_.get(); }
  double item() const { return node_->value.item(); }

  /// Same value, cut from the graph.
  Var detach() const { return Var(node_->value, false); }

  static Var make(Tensor value, const char* op, std::vector<Var> inputs, BackwardFn backward);

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Sets whether ops record the graph for the guard's lifetime.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled);
  ~GradModeGuard();
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

/// d(output)/d(wrt[i]) for a scalar output. Inputs that the output does not
/// depend on get a zero tensor. With create_graph the returned gradients are
/// themselves differentiable.
std::vector<Var> grad(const Var& output, std::span<const Var> wrt, bool create_graph = false);

/// Convenience: plain gradient tensors.
std::vector<Tensor> grad_values(const Var& output, std::span<const Var> wrt);

namespace ops {

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double k);
Var add_scalar(const Var& a, double k);
/// Multiply by a constant tensor of the same shape (not differentiated).
Var mul_const(const Var& a, const Tensor& k);
Var square(const Var& a);

// Numpy-style broadcasting between shapes of equal rank whose dims are 1 or equal.
Var broadcast_to(const Var& a, const Shape& shape);
Var reduce_to(const Var& a, const Shape& shape);

Var reshape(const Var& a, const Shape& shape);
Var sum(const Var& a);
Var mean(const Var& a);
/// Sum over all dims but the first: [N,...] -> [N].
Var sum_per_sample(const Var& a);
/// Mean over all dims but the first: [N,...] -> [N].
Var mean_per_sample(const Var& a);
/// [N] scaled per sample onto [N,...]: out[n,...] = a[n,...] * k[n].
Var scale_per_sample(const Var& a, const Var& k);

/// C = op(A) * op(B) for rank-2 operands.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);

struct ConvGeometry {
  int stride = 1;
  int pad = 0;
};

/// x [N,C,H,W], w [O,C,k,k] -> [N,O,Ho,Wo].
Var conv2d(const Var& x, const Var& w, ConvGeometry geo);
/// Gradient of conv2d with respect to its input, as a function of (grad, w).
Var conv2d_input_grad(const Var& g, const Var& w, const Shape& x_shape, ConvGeometry geo);
/// Gradient of conv2d with respect to its weight, as a function of (x, grad).
Var conv2d_weight_grad(const Var& x, const Var& g, const Shape& w_shape, ConvGeometry geo);

/// 2x2 stride-2 max pooling (H, W even).
Var max_pool2(const Var& x);
/// 2x nearest-neighbour upsampling.
Var upsample2(const Var& x);
/// 2x2 block sum (adjoint of upsample2).
Var sum_pool2(const Var& x);
/// out[index[i]] += g[i], with out a zero tensor shaped `shape`.
Var scatter(const Var& g, std::vector<std::size_t> index, const Shape& shape);
/// out[i] = a[index[i]] with out shaped `shape`.
Var gather(const Var& a, std::vector<std::size_t> index, const Shape& shape);

Var concat_channels(std::span<const Var> parts);
Var slice_channels(const Var& a, int begin, int end);
Var pad_channels(const Var& a, int begin, int total);

Var leaky_relu(const Var& x, double slope);
Var tanh(const Var& x);
Var sqrt(const Var& x);
/// log(max(x, floor)); zero gradient below the floor.
Var log_floor(const Var& x, double floor);
/// Row-wise softmax of a rank-2 tensor.
Var softmax_rows(const Var& x);

}  // namespace ops
}  // namespace histnet
