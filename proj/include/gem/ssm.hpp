#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "gem/layers.hpp"

// Selective state-space scan and the Mamba block built on it.
//
// Per channel d and state n, with A = -exp(a_log):
//   h_t = exp(delta_t[d] * A[d,n]) * h_{t-1} + delta_t[d] * B_t[n] * x_t[d]
//   y_t[d] = sum_n C_t[n] * h_t[d,n] + D[d] * x_t[d]
namespace gem::ssm {

template <typename T>
struct ScanInputs {
  int64_t length = 0;    // L
  int64_t channels = 0;  // D
  int64_t states = 0;    // N
  std::span<const T> x;      // [L, D]
  std::span<const T> delta;  // [L, D], positive
  std::span<const T> a_log;  // [D, N]
  std::span<const T> B;      // [L, N]
  std::span<const T> C;      // [L, N]
  std::span<const T> d_skip; // [D]

  void validate() const;
};

/// Reference recurrence. `h0` (size D*N, optional) is the initial state;
/// the final state is written to `h_final` when given.
template <typename T>
std::vector<T> selective_scan_sequential(const ScanInputs<T>& in, std::span<const T> h0 = {},
                                         std::vector<T>* h_final = nullptr);

/// Chunked associative scan over (decay, increment) pairs; same contract as
/// the sequential path. Chunks run on up to GEM_NUM_WORKERS threads.
template <typename T>
std::vector<T> selective_scan_parallel(const ScanInputs<T>& in, std::span<const T> h0 = {},
                                       std::vector<T>* h_final = nullptr);

/// Differentiable scan: x[L,D], delta[L,D], a_log[D,N], B[L,N], C[L,N], d_skip[D].
nn::Var selective_scan(const nn::Var& x, const nn::Var& delta, const nn::Var& a_log, const nn::Var& B,
                       const nn::Var& C, const nn::Var& d_skip);

/// Ordered tokens plus the lattice index each token was read from.
struct TokenSequence {
  nn::Var tokens;              // [L, D]
  std::vector<int64_t> order;  // size L
};

// Ring-major ordering of an [H, W, C] grid: laser row 0 left to right, then
// row 1, and so on.
TokenSequence ring_major(const nn::Var& grid);

struct MambaConfig {
  int64_t d_model = 16;
  int64_t d_state = 8;
  int64_t expand = 2;
  int64_t conv_width = 4;
  int64_t dt_rank = 0;  // 0 selects ceil(d_model / 16)
  bool bidirectional = false;
};

/// Residual Mamba block: x + out(scan(silu(conv(in_x(norm(x))))) * silu(in_z(norm(x)))).
struct MambaBlock {
  MambaConfig cfg;
  nn::LayerNorm norm;
  nn::Linear in_x, in_z;
  nn::Var conv_w, conv_b;  // [K, E], [E]
  nn::Linear x_dt, x_B, x_C;
  nn::Linear dt_proj;
  nn::Var a_log;   // [E, N]
  nn::Var d_skip;  // [E]
  nn::Linear out;

  MambaBlock() = default;
  MambaBlock(const MambaConfig& cfg, Rng& rng);

  int64_t inner() const { return cfg.expand * cfg.d_model; }

  // x: [L, d_model] -> [L, d_model].
  nn::Var operator()(const nn::Var& x) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  nn::Var mix(const nn::Var& u) const;
};

}  // namespace gem::ssm
