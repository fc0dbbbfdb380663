#pragma once

#include <cstdint>
#include <string>

#include "gem/layers.hpp"

// Label-free dynamic/static split of a latent sequence [T, h, w, C] and the
// gated fusion shared with the tri-path blocks.
namespace gem::sep {

/// Frame 0 is zero; frame i is Z[i] - Z[i-1].
nn::Var dynamic_pattern(const nn::Var& z);

/// Frame i is the mean of Z over [max(0, i - n/2), min(T, i + n/2 + 1)).
nn::Var static_pattern(const nn::Var& z, int64_t window);

// Branch switches for ablations; `true` keeps the component.
struct Ablation {
  bool dynamic_extractor = true;  // DE
  bool static_extractor = true;   // SE
  bool dynamic_branch = true;     // DDM
  bool static_branch = true;      // SDM
  bool adaptive_gates = true;     // AGA

  // Parses a comma-separated list of disabled components, e.g. "DE,AGA".
  static Ablation disabled(const std::string& list);
  std::string describe() const;
  bool operator==(const Ablation&) const = default;
};

/// Conv + sigmoid gate producing per-element weights in [0, 1].
struct GateNet {
  nn::Conv3d conv;

  GateNet() = default;
  GateNet(int64_t in, int64_t out, int64_t kernel, Rng& rng);

  nn::Var operator()(const nn::Var& x) const { return nn::sigmoid(conv(x)); }
  void collect(nn::ParamList& out, const std::string& prefix) const { conv.collect(out, prefix + ".conv"); }
};

/// Two 3x3x3 convolutions with a SiLU between them.
struct Extractor {
  nn::Conv3d c1, c2;

  Extractor() = default;
  Extractor(int64_t in, int64_t out, Rng& rng);

  nn::Var operator()(const nn::Var& x) const { return c2(nn::silu(c1(x))); }
  void zero_init();
  void collect(nn::ParamList& out, const std::string& prefix) const;
};

/// Adaptive fusion of a generic feature with optional dynamic and static
/// features:
///   F' = (1 - g1) F_d + g1 F_s,  g1 = G1([F_d, F_s])
///   F_g = (1 - g2) F + g2 F',    g2 = G2(F')
/// With one side feature B missing, F' = B. With both missing, F_g = F.
/// Without adaptive gates every gate is the constant 0.5.
struct GatedFuse {
  GateNet g1, g2;
  bool adaptive = true;

  GatedFuse() = default;
  GatedFuse(int64_t channels, int64_t kernel, bool adaptive, Rng& rng);

  // Undefined Vars mark absent branches.
  nn::Var operator()(const nn::Var& f, const nn::Var& f_d, const nn::Var& f_s) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
};

// Eq.-level fusion with explicit gate tensors (used by tests and by
// GatedFuse once gates are computed).
nn::Var fuse_with_gates(const nn::Var& f, const nn::Var& f_d, const nn::Var& f_s, const nn::Var& g1,
                        const nn::Var& g2);

struct SeparatorConfig {
  int64_t window = 5;  // static-pattern window n
  int64_t channels = 64;      // C' (output features)
  int64_t gate_kernel = 3;

  void validate() const;
};

struct Features {
  nn::Var f;    // generic
  nn::Var f_d;  // undefined when the dynamic extractor is ablated
  nn::Var f_s;  // undefined when the static extractor is ablated
  nn::Var f_g;  // fused
};

class Separator {
 public:
  Separator() = default;
  Separator(const SeparatorConfig& cfg, int64_t in_channels, const Ablation& ablation, Rng& rng);

  // z: [T, h, w, C] -> features with C' channels.
  Features operator()(const nn::Var& z) const;
  const SeparatorConfig& config() const { return cfg_; }
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  SeparatorConfig cfg_;
  Ablation ablation_;
  Extractor generic_, dynamic_, static_;
  GatedFuse fuse_;
};

}  // namespace gem::sep
