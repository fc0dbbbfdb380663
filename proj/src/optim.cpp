#include "gem/optim.hpp"

#include <algorithm>
#include <cmath>

namespace gem::nn {

Adam::Adam(ParamList params, AdamOptions options) : params_(std::move(params)), opt_(options) {
  for (auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void Adam::zero_grad() { zero_grads(params_); }

double Adam::step() {
  double sq = 0.0;
  for (auto& p : params_)
    for (double g : p.var.grad().values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error("Adam: non-finite gradient norm");
  const double clip = (opt_.grad_clip > 0 && norm > opt_.grad_clip) ? opt_.grad_clip / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
  for (size_t k = 0; k < params_.size(); ++k) {
    Var& var = params_[k].var;
    const Tensor& g = var.grad();
    if (g.empty()) continue;
    Tensor& w = var.mutable_value();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (int64_t i = 0; i < w.numel(); ++i) {
      const double gi = g[i] * clip;
      m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * gi;
      v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * gi * gi;
      if (opt_.weight_decay > 0) w[i] -= opt_.lr * opt_.weight_decay * w[i];
      w[i] -= opt_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
    }
  }
  zero_grad();
  return norm;
}

double cosine_lr(double base, int64_t step, int64_t total, double final_fraction) {
  if (total <= 1) return base;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total - 1), 0.0, 1.0);
  const double k = 0.5 * (1.0 + std::cos(M_PI * progress));
  return base * (final_fraction + (1.0 - final_fraction) * k);
}

}  // namespace gem::nn
