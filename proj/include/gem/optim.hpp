#pragma once

#include <vector>

#include "gem/graph.hpp"

namespace gem::nn {

struct AdamOptions {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW) when > 0
  double grad_clip = 0.0;     // global-norm clip, disabled at 0
};

/// Adam with optional decoupled weight decay.
class Adam {
 public:
  Adam(ParamList params, AdamOptions options);

  // Applies one update from the accumulated grads, then clears them.
  // Returns the global gradient norm before clipping.
  double step();
  void zero_grad();
  int64_t steps() const { return t_; }
  AdamOptions& options() { return opt_; }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
  AdamOptions opt_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  int64_t t_ = 0;
};

/// Cosine decay from `base` at step 0 to `base * final_fraction` at `total`.
double cosine_lr(double base, int64_t step, int64_t total, double final_fraction);

}  // namespace gem::nn
