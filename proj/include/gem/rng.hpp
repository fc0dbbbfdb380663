#pragma once

#include <cstdint>
#include <random>

#include "gem/tensor.hpp"

namespace gem {

uint64_t splitmix64(uint64_t x);

// Counter-based stream derivation: the seed of (stream, index) never depends
// on how many other streams were drawn before it.
uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index = 0);

// Stable stream ids for the components that draw randomness.
enum class Stream : uint64_t {
  kScene = 1,
  kRender = 2,
  kInit = 3,
  kTokenizerData = 4,
  kWorldModelData = 5,
  kNoise = 6,
  kSampler = 7,
  kEval = 8,
  kCodebookRestart = 9,
};

inline uint64_t derive_seed(uint64_t base, Stream stream, uint64_t index = 0) {
  return derive_seed(base, static_cast<uint64_t>(stream), index);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  // Inclusive bounds.
  int64_t uniform_int(int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(engine_); }

  Tensor normal_tensor(const Shape& shape, double stddev = 1.0);
  Tensor uniform_tensor(const Shape& shape, double lo, double hi);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace gem
