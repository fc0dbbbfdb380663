#include "gem/layers.hpp"

#include <cmath>

namespace gem::nn {

Linear::Linear(int64_t in, int64_t out, Rng& rng, bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  weight = parameter(rng.uniform_tensor({in, out}, -bound, bound));
  if (with_bias) bias = parameter(rng.uniform_tensor({out}, -bound, bound));
}

void Linear::zero_init() {
  weight.mutable_value().fill(0.0);
  if (bias.defined()) bias.mutable_value().fill(0.0);
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

LayerNorm::LayerNorm(int64_t dim)
    : gamma(parameter(Tensor({dim}, 1.0))), beta(parameter(Tensor({dim}, 0.0))) {}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

Conv3d::Conv3d(int64_t in, int64_t out, int64_t kernel, Rng& rng) {
  const double fan_in = static_cast<double>(kernel * kernel * kernel * in);
  const double bound = 1.0 / std::sqrt(fan_in);
  weight = parameter(rng.uniform_tensor({kernel, kernel, kernel, in, out}, -bound, bound));
  bias = parameter(rng.uniform_tensor({out}, -bound, bound));
}

void Conv3d::zero_init() {
  weight.mutable_value().fill(0.0);
  bias.mutable_value().fill(0.0);
}

void Conv3d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Conv2d::Conv2d(int64_t in, int64_t out, int64_t kernel, int64_t stride_, int64_t pad_, Rng& rng)
    : stride(stride_), pad(pad_) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(kernel * kernel * in));
  weight = parameter(rng.uniform_tensor({kernel, kernel, in, out}, -bound, bound));
  bias = parameter(rng.uniform_tensor({out}, -bound, bound));
}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Mlp::Mlp(int64_t in, int64_t hidden, int64_t out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

void Mlp::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

}  // namespace gem::nn
