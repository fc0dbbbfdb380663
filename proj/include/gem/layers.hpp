#pragma once

#include <string>

#include "gem/ops.hpp"
#include "gem/rng.hpp"

// Small parameter containers shared by every model. Each exposes
// `collect` so owners can enumerate named parameters for optimizers and
// checkpoints.
namespace gem::nn {

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out], undefined when bias-free

  Linear() = default;
  Linear(int64_t in, int64_t out, Rng& rng, bool with_bias = true);

  Var operator()(const Var& x) const { return linear(x, weight, bias); }
  int64_t in_features() const { return weight.dim(0); }
  int64_t out_features() const { return weight.dim(1); }
  void zero_init();
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  LayerNorm() = default;
  explicit LayerNorm(int64_t dim);

  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Conv3d {
  Var weight;  // [kt, kh, kw, in, out]
  Var bias;

  Conv3d() = default;
  Conv3d(int64_t in, int64_t out, int64_t kernel, Rng& rng);

  Var operator()(const Var& x) const { return conv3d(x, weight, bias); }
  void zero_init();
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Conv2d {
  Var weight;  // [kh, kw, in, out]
  Var bias;
  int64_t stride = 1;
  int64_t pad = 0;

  Conv2d() = default;
  Conv2d(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t pad, Rng& rng);

  Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, pad); }
  void collect(ParamList& out, const std::string& prefix) const;
};

// Two-layer perceptron with a SiLU hidden activation.
struct Mlp {
  Linear fc1;
  Linear fc2;

  Mlp() = default;
  Mlp(int64_t in, int64_t hidden, int64_t out, Rng& rng);

  Var operator()(const Var& x) const { return fc2(silu(fc1(x))); }
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace gem::nn
