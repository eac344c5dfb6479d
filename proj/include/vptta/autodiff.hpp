// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "vptta/tensor.hpp"

namespace vptta::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;
};

/// Handle to a value in the computation graph. Values built only from
/// constants carry no graph and cost nothing extra.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  /// Gradient buffer; zeros of the value's shape if nothing flowed back.
  Tensor grad() const;
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool valid() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds a node from `value`. Parents that do not require grad are
/// dropped; if none remain the result is a constant and `backward_fn` is
/// discarded.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Accumulates into a node's grad, allocating it on first use.
Tensor& grad_buffer(Node& node);

/// Reverse pass from a scalar (single-element) value. Gradients accumulate
/// into every reachable node that requires grad.
void backward(const Var& loss);

// Element-wise, same shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var sqrt(const Var& a);
Var abs(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);

// Reductions to shape (1).
Var sum(const Var& a);
Var mean(const Var& a);

// Per-channel ops; the channel axis is the last one.
Var channel_mean(const Var& x);
Var add_c(const Var& x, const Var& v);
Var sub_c(const Var& x, const Var& v);
Var mul_c(const Var& x, const Var& v);
Var div_c(const Var& x, const Var& v);
/// Biased per-channel variance of x about the given per-channel mean.
Var channel_var(const Var& x, const Var& mean);
/// Fused (x - mean) / sigma * gamma + beta with per-channel vectors.
Var normalize(const Var& x, const Var& mean, const Var& sigma, const Var& gamma, const Var& beta);

Var reshape(const Var& a, Shape shape);

/// NHWC convolution; kernel (kh, kw, Cin, Cout), optional bias (Cout).
Var conv2d(const Var& x, const Var& kernel, const Var* bias, std::size_t stride, std::size_t pad);
/// Nearest-neighbour x2 upsampling of NHWC.
Var upsample2x(const Var& x);

/// Mean binary cross-entropy between sigmoid(logits) and a fixed target.
Var bce_with_logits(const Var& logits, const Tensor& target);

// Spectral ops on (H, W, C) planes and (H, W, C, 2) complex tensors.
Var fft2(const Var& plane);
Var ifft2_real(const Var& spectrum);
Var fftshift(const Var& spectrum, bool inverse);
std::pair<Var, Var> amplitude_phase(const Var& spectrum);
Var recompose(const Var& amplitude, const Var& phase);

/// Places a (h', w', C) patch into an (H, W, C) plane of ones, window
/// rows starting at H/2 - h'/2 (columns analogous).
Var one_pad(const Var& patch, std::size_t height, std::size_t width);

/// Per-channel matrix product of (H, r, C) and (r, W, C) giving (H, W, C).
Var channel_matmul(const Var& b, const Var& a);

}  // namespace vptta::ad
