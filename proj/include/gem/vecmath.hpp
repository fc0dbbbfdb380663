#pragma once

#include <cstdint>

// Vectorized transcendental kernels for finite inputs. Built with relaxed
// floating-point flags so the compiler can call the SIMD math library.
namespace gem::vec {

void exp(const double* x, double* y, int64_t n);
// 1 / (1 + exp(-x)), inputs clamped to +-700.
void sigmoid(const double* x, double* y, int64_t n);

}  // namespace gem::vec
