#include "gem/vecmath.hpp"

#include <algorithm>
#include <cmath>

namespace gem::vec {

void exp(const double* __restrict x, double* __restrict y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
}

void sigmoid(const double* __restrict x, double* __restrict y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = 1.0 / (1.0 + std::exp(-std::clamp(x[i], -700.0, 700.0)));
}

}  // namespace gem::vec
