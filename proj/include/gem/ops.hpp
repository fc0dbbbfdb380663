#pragma once

#include <cstdint>
#include <vector>

#include "gem/graph.hpp"

// Differentiable tensor ops. Layout is channels-last throughout: the last
// axis is the feature axis, leading axes are positions.
namespace gem::nn {

// Elementwise on equal shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);
Var one_minus(const Var& x);
Var square(const Var& x);
Var abs(const Var& x);

// Broadcast a [C] vector over the last axis of x.
Var add_bias(const Var& x, const Var& bias);
Var mul_channel(const Var& x, const Var& s);

// x[..., K] times w[K, N] -> [..., N].
Var matmul(const Var& x, const Var& w);
// Same with an optional bias (undefined Var means none).
Var linear(const Var& x, const Var& w, const Var& b);

Var relu(const Var& x);
Var silu(const Var& x);
Var gelu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var softplus(const Var& x);
Var exp(const Var& x);
// log(clamp(x, eps, 1 - eps)); gradient is zero where clamped.
Var log_clamped(const Var& x, double eps);

Var sum(const Var& x);
Var mean(const Var& x);
// Mean over all leading axes: [..., C] -> [C].
Var mean_rows(const Var& x);
// Mean over axis 0 restricted to rows [begin, end) then over remaining
// leading axes, i.e. a pooled [C] vector over a time range of [T, ..., C].
Var mean_time_range(const Var& x, int64_t begin, int64_t end);

Var reshape(const Var& x, Shape shape);
Var concat_last(const std::vector<Var>& xs);
Var concat0(const std::vector<Var>& xs);
Var slice0(const Var& x, int64_t begin, int64_t end);
Var slice_last(const Var& x, int64_t begin, int64_t end);
Var reverse0(const Var& x);
Var detach(const Var& x);

// [H, W, C] <-> [H/sv, W/sh, C*sv*sh].
Var space_to_depth(const Var& x, int64_t sv, int64_t sh);
Var depth_to_space(const Var& x, int64_t sv, int64_t sh);

// Per-position normalization over the last axis with affine [C] params.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Group normalization without affine: statistics over every leading
// position and the channels of each group.
Var group_norm(const Var& x, int64_t groups, double eps = 1e-5);

// x[T, H, W, Ci], w[kt, kh, kw, Ci, Co] with odd kernel sizes, zero "same"
// padding, stride 1.
Var conv3d(const Var& x, const Var& w, const Var& b);
// x[H, W, Ci], w[kh, kw, Ci, Co], explicit stride and zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride, int64_t pad);
// Depthwise causal conv along axis 0: x[L, D], w[K, D], b[D];
// y[t] = b + sum_k w[k] * x[t - (K-1) + k].
Var causal_conv1d(const Var& x, const Var& w, const Var& b);

// Rows of table[K, C] selected by index -> [n, C].
Var gather_rows(const Var& table, const std::vector<int64_t>& index);
// Forward value is `replacement`, backward passes the gradient to x
// unchanged.
Var straight_through(const Var& x, const Tensor& replacement);

Var mse(const Var& a, const Var& b);
// Mean |a - b| over entries where mask != 0; zero when the mask is empty.
Var l1_masked(const Var& a, const Tensor& target, const Tensor& mask);
// Mean binary cross-entropy on logits.
Var bce_with_logits(const Var& logits, const Tensor& target);

}  // namespace gem::nn
