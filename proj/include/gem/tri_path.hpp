#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gem/separator.hpp"
#include "gem/ssm.hpp"

// Tri-path deformable selective-scan blocks over a latent lattice
// [T, h, w, C]: a standard raster path plus dynamic and static paths whose
// per-token offsets are predicted from the separator features.
namespace gem::tri {

struct Lattice {
  int64_t t = 1, h = 1, w = 1;
  int64_t size() const { return t * h * w; }
  bool operator==(const Lattice&) const = default;
};

Lattice lattice_of(const Tensor& grid);

/// Integer coordinates (t, y, x) in t-major, then y, then x order: [T*h*w, 3].
Tensor generic_path(const Lattice& lat);

/// Per-axis clamp of path coordinates to [0, dim - 1]; zero gradient where clamped.
nn::Var clamp_path(const nn::Var& p, const Lattice& lat);

/// Trilinear interpolation of f[T, h, w, C] at the rows of p[L, 3] -> [L, C].
/// Differentiable in both f and p. Coordinates must lie inside the lattice.
nn::Var sample_along_path(const nn::Var& f, const nn::Var& p);

/// Linear -> ReLU -> Linear(3) -> Tanh; the final layer starts at zero.
struct PathOffsetNet {
  nn::Linear fc1, fc2;

  PathOffsetNet() = default;
  PathOffsetNet(int64_t channels, int64_t hidden, Rng& rng);

  // f: [T, h, w, C] -> raw offsets in (-1, 1), [T*h*w, 3].
  nn::Var operator()(const nn::Var& f) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
};

/// p_g + scale * net(f), clamped to the lattice.
nn::Var deform_path(const Tensor& p_g, const nn::Var& f, const PathOffsetNet& net, double scale,
                    const Lattice& lat);

/// Group norm followed by a per-frame affine modulation predicted from the
/// condition: y[t] = gn(x)[t] * (1 + gamma(c[t])) + beta(c[t]).
struct Agn {
  int64_t groups = 8;
  nn::Linear gamma, beta;

  Agn() = default;
  Agn(int64_t cond_dim, int64_t channels, int64_t groups, Rng& rng);

  // x: [T, h, w, C]; c: [T, cond_dim] or [1, cond_dim] (shared by all frames).
  nn::Var operator()(const nn::Var& x, const nn::Var& c) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
};

/// y[t, ..., k] = x[t, ..., k] * (1 + scale[t, k]) + shift[t, k]. Rows of
/// scale/shift broadcast over frames when they have a single row.
nn::Var frame_modulate(const nn::Var& x, const nn::Var& scale, const nn::Var& shift);

struct TriPathConfig {
  int64_t blocks = 4;
  double offset_scale = 1.0;  // lattice cells per axis
  int64_t offset_hidden = 16;
  int64_t d_state = 8;
  int64_t expand = 2;
  bool bidirectional = false;
  int64_t groups = 8;
  int64_t gate_kernel = 3;

  void validate(int64_t channels) const;
};

// Raw offsets of one block (values only), each [T*h*w, 3]; empty when the
// branch is absent.
struct BlockTrace {
  Tensor offset_d, offset_s;
};

class TriPathBlock {
 public:
  TriPathBlock() = default;
  TriPathBlock(const TriPathConfig& cfg, int64_t channels, int64_t cond_dim, const sep::Ablation& ablation,
               Rng& rng);

  // Undefined f_d / f_s make the corresponding paths use the modulated
  // generic features for guidance. An undefined c skips the modulation
  // and uses plain group norm.
  nn::Var operator()(const nn::Var& f_g, const nn::Var& f_d, const nn::Var& f_s, const nn::Var& c,
                     BlockTrace* trace = nullptr) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  const sep::GatedFuse& fuse() const { return fuse_; }
  sep::GatedFuse& fuse() { return fuse_; }
  PathOffsetNet& offsets_d() { return off_d_; }
  PathOffsetNet& offsets_s() { return off_s_; }
  ssm::MambaBlock& mamba_g() { return mamba_g_; }

 private:
  TriPathConfig cfg_;
  sep::Ablation ablation_;
  Agn agn_;
  PathOffsetNet off_d_, off_s_;
  ssm::MambaBlock mamba_g_, mamba_d_, mamba_s_;
  sep::GatedFuse fuse_;
};

class TriPathStack {
 public:
  TriPathStack() = default;
  TriPathStack(const TriPathConfig& cfg, int64_t channels, int64_t cond_dim, const sep::Ablation& ablation,
               Rng& rng);

  nn::Var operator()(const nn::Var& f_g, const nn::Var& f_d, const nn::Var& f_s, const nn::Var& c,
                     std::vector<BlockTrace>* traces = nullptr) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;
  std::vector<TriPathBlock>& blocks() { return blocks_; }
  const std::vector<TriPathBlock>& blocks() const { return blocks_; }

 private:
  std::vector<TriPathBlock> blocks_;
};

// Mean |offset| over the three axes, scaled to lattice cells, averaged over
// blocks: one float [T, h, w] grid per branch.
struct DeformHeatmap {
  Lattice lattice;
  std::vector<float> dynamic, stat;  // empty when the branch is absent
};

DeformHeatmap deform_heatmap(const std::vector<BlockTrace>& traces, const Lattice& lat, double scale);

}  // namespace gem::tri
