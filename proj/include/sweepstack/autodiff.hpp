/*
 * Copyright 2026 The sweepstack Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Reverse-mode differentiation on an explicit tape.
//
// Every differentiable value lives in a Tape node; a Var is a (tape, index)
// handle. Operations append nodes in evaluation order, so the node vector is
// already topologically sorted and backward() is a single reverse sweep.
// Nodes whose inputs do not require gradients store no closure at all.

#include <sweepstack/tensor.hpp>

#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sweepstack {

template <typename T>
class ParameterStore;
template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool defined() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  int dim(int i) const { return value().dim(i); }
  std::size_t size() const { return value().size(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// A value that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  /// A differentiable input (ignored when the tape has gradients disabled).
  Var<T> leaf(Tensor<T> value);
  /// Binds a named parameter; repeated requests for the same name share one node.
  Var<T> param(const ParameterStore<T>& store, const std::string& name);

  /// Appends the result of an operation. `fn` is kept only if some input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, std::string_view op,
                BackwardFn fn);
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, std::string_view op,
                BackwardFn fn);

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }
  /// Gradient buffer of node `id`, allocated as zeros on first access.
  Tensor<T>& grad(int id);
  bool has_grad(int id) const { return !nodes_[static_cast<std::size_t>(id)].grad.empty(); }

  /// Runs the reverse sweep from `out`. The seed must have out's shape.
  void backward(Var<T> out, const Tensor<T>& seed);
  /// Scalar output, seed 1.
  void backward(Var<T> out);

  /// Gradients of every bound parameter by name; untouched parameters get zeros.
  std::map<std::string, Tensor<T>> parameter_gradients() const;

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::string_view op;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
};

/// Elementwise and structural primitives. All of them validate shapes and
/// report the op name with both shapes on mismatch.
namespace ad {

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_scalar(Var<T> a, T s);
/// a * s with s a differentiable one-element tensor.
template <typename T> Var<T> scale_by(Var<T> a, Var<T> s);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> clamp(Var<T> a, T lo, T hi);
/// Copies the value into a constant node; no gradient flows through.
template <typename T> Var<T> detach(Var<T> a);

template <typename T> Var<T> reshape(Var<T> a, Shape shape);
/// 2-D transpose.
template <typename T> Var<T> transpose(Var<T> a);
/// Columns [start, start + len) of a 2-D tensor.
template <typename T> Var<T> slice_cols(Var<T> a, int start, int len);
template <typename T> Var<T> concat_cols(std::span<const Var<T>> parts);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
/// Reduces the leading axis: [N, ...] -> [...].
template <typename T> Var<T> sum_axis0(Var<T> a);
template <typename T> Var<T> mean_axis0(Var<T> a);

/// op(a) * op(b) for 2-D tensors.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b, bool trans_a = false, bool trans_b = false);
/// x [N, Cin] * w[Cout, Cin]^T + b[Cout].
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

template <typename T> Var<T> softmax(Var<T> a, int axis);
/// Row-wise layer normalization of [N, C] with affine gamma/beta of shape [C].
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-8));

/// x [Cin,H,W], w [Cout,Cin,k,k], optional b [Cout].
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad);
/// x [Cin,H,W], w [Cin,Cout,k,k], optional b [Cout]; output [(H-1)*stride+k, ...].
template <typename T> Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> b, int stride);
/// x [Cin,D,H,W], w [Cout,Cin,k,k,k] with odd k and same padding.
template <typename T> Var<T> conv3d(Var<T> x, Var<T> w, Var<T> b);

/// Samples feat [C,H,W] at pixel coordinates coords [..., 2] = (u, v). Integer
/// coordinates are pixel centers; samples outside [0,W-1]x[0,H-1] or with a
/// zero entry in `valid` (shape [...], optional) are zero. Output [C, ...].
template <typename T>
Var<T> bilinear_sample(Var<T> feat, Var<T> coords, const Tensor<T>* valid = nullptr);
/// Half-pixel-center bilinear resize of [C,H,W] to [C,out_h,out_w], edges clamped.
template <typename T> Var<T> resize_bilinear(Var<T> x, int out_h, int out_w);

/// Mean negative log-likelihood over pixels whose label != ignore.
/// logits [K, P], labels of length P. Zero when every pixel is ignored.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels, int ignore);
/// Mean smooth-L1 of (pred - target) over mask != 0. Zero for an empty mask.
template <typename T>
Var<T> smooth_l1(Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask, T beta);

}  // namespace ad

/// Half-pixel-center source coordinate for output index `i` when resizing n_in -> n_out.
inline double resize_source_coord(int i, int n_in, int n_out) {
  const double c = (i + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
  return std::clamp(c, 0.0, static_cast<double>(n_in - 1));
}

}  // namespace sweepstack
