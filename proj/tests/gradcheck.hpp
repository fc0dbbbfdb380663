#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gem/graph.hpp"

namespace gem::testing {

struct GradReport {
  std::string worst;   // name of the worst parameter
  double rel_err = 0;  // ||analytic - numeric|| / max(||analytic|| + ||numeric||, floor)
};

// Central differences on every entry (or a strided subset when `max_entries`
// is exceeded) of every parameter. The loss closure rebuilds the graph.
inline GradReport grad_check(const std::function<nn::Var()>& loss, nn::ParamList params, double step = 1e-5,
                             int64_t max_entries = 400) {
  for (auto& p : params) p.var.zero_grad();
  nn::backward(loss());
  GradReport rep;
  for (auto& p : params) {
    Tensor& v = p.var.mutable_value();
    const Tensor analytic = p.var.grad().empty() ? Tensor(v.shape()) : p.var.grad();
    const int64_t n = v.numel();
    const int64_t stride = std::max<int64_t>(1, n / max_entries);
    double diff2 = 0, a2 = 0, n2 = 0;
    for (int64_t i = 0; i < n; i += stride) {
      const double orig = v[i];
      double up, down;
      {
        nn::NoGradGuard ng;
        v[i] = orig + step;
        up = loss().value()[0];
        v[i] = orig - step;
        down = loss().value()[0];
      }
      v[i] = orig;
      const double num = (up - down) / (2 * step);
      diff2 += (num - analytic[i]) * (num - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += num * num;
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-8);
    if (rel >= rep.rel_err) rep = {p.name, rel};
  }
  return rep;
}

}  // namespace gem::testing
