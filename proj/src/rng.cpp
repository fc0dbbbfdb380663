#include "gem/rng.hpp"

namespace gem {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index) {
  return splitmix64(splitmix64(splitmix64(base) ^ stream) + index);
}

Tensor Rng::normal_tensor(const Shape& shape, double stddev) {
  Tensor t(shape);
  for (double& v : t.values()) v = stddev * normal();
  return t;
}

Tensor Rng::uniform_tensor(const Shape& shape, double lo, double hi) {
  Tensor t(shape);
  for (double& v : t.values()) v = uniform(lo, hi);
  return t;
}

}  // namespace gem
