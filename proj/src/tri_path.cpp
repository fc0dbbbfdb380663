#include "gem/tri_path.hpp"

#include <array>
#include <cmath>

namespace gem::tri {

using nn::Var;

namespace {

Tensor* parent_grad(nn::Node& self, size_t i) {
  auto& p = self.parents[i];
  return p->requires_grad ? &p->grad_buffer() : nullptr;
}

// Lower knot and fraction along one axis; a singleton axis never interpolates.
struct Axis {
  int64_t i0 = 0, i1 = 0;
  double fr = 0.0;
  bool active = false;
};

Axis axis_of(double c, int64_t n) {
  Axis a;
  if (n == 1) return a;
  a.active = true;
  a.i0 = std::min<int64_t>(static_cast<int64_t>(std::floor(c)), n - 2);
  a.i0 = std::max<int64_t>(a.i0, 0);
  a.i1 = a.i0 + 1;
  a.fr = c - static_cast<double>(a.i0);
  return a;
}

constexpr double kBoundsSlack = 1e-9;

}  // namespace

Lattice lattice_of(const Tensor& grid) {
  if (grid.rank() != 4) throw Error("tri_path: expected a [T, h, w, C] grid, got " + shape_str(grid.shape()));
  return {grid.dim(0), grid.dim(1), grid.dim(2)};
}

Tensor generic_path(const Lattice& lat) {
  if (lat.t < 1 || lat.h < 1 || lat.w < 1) throw Error("generic_path: dimensions must be positive");
  Tensor p({lat.size(), 3});
  int64_t k = 0;
  for (int64_t t = 0; t < lat.t; ++t)
    for (int64_t y = 0; y < lat.h; ++y)
      for (int64_t x = 0; x < lat.w; ++x, ++k) {
        p[3 * k] = static_cast<double>(t);
        p[3 * k + 1] = static_cast<double>(y);
        p[3 * k + 2] = static_cast<double>(x);
      }
  return p;
}

Var clamp_path(const Var& p, const Lattice& lat) {
  require_shape(p.value(), {lat.size(), 3}, "clamp_path");
  const std::array<double, 3> hi{static_cast<double>(lat.t - 1), static_cast<double>(lat.h - 1),
                                 static_cast<double>(lat.w - 1)};
  Tensor y = p.value();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::clamp(y[i], 0.0, hi[static_cast<size_t>(i % 3)]);
  return nn::make_result(std::move(y), {p}, [hi](nn::Node& self) {
    Tensor* g = parent_grad(self, 0);
    if (!g) return;
    const Tensor& pv = self.parents[0]->value;
    for (int64_t i = 0; i < g->numel(); ++i)
      if (pv[i] >= 0.0 && pv[i] <= hi[static_cast<size_t>(i % 3)]) (*g)[i] += self.grad[i];
  });
}

Var sample_along_path(const Var& f, const Var& p) {
  const Lattice lat = lattice_of(f.value());
  const int64_t C = f.dim(3);
  if (p.value().rank() != 2 || p.dim(1) != 3) throw Error("sample_along_path: path must be [L, 3]");
  const int64_t L = p.dim(0);
  const std::array<int64_t, 3> dims{lat.t, lat.h, lat.w};
  const Tensor& pv = p.value();
  for (int64_t i = 0; i < pv.numel(); ++i) {
    const double n = static_cast<double>(dims[static_cast<size_t>(i % 3)]);
    if (!(pv[i] >= -kBoundsSlack && pv[i] <= n - 1.0 + kBoundsSlack))
      throw Error("sample_along_path: coordinate outside the lattice");
  }

  // Visits the eight corners of point l: fn(offset, weight, dweight[3]).
  auto corners = [dims, lat, C](const Tensor& path, int64_t l, auto&& fn) {
    std::array<Axis, 3> ax;
    for (size_t a = 0; a < 3; ++a) ax[a] = axis_of(path[3 * l + static_cast<int64_t>(a)], dims[a]);
    for (int bits = 0; bits < 8; ++bits) {
      std::array<int64_t, 3> idx{};
      std::array<double, 3> w{};
      std::array<double, 3> dw{};
      bool skip = false;
      for (size_t a = 0; a < 3; ++a) {
        const bool up = (bits >> a) & 1;
        if (!ax[a].active) {
          if (up) skip = true;
          idx[a] = 0;
          w[a] = 1.0;
          dw[a] = 0.0;
          continue;
        }
        idx[a] = up ? ax[a].i1 : ax[a].i0;
        w[a] = up ? ax[a].fr : 1.0 - ax[a].fr;
        dw[a] = up ? 1.0 : -1.0;
      }
      if (skip) continue;
      const double weight = w[0] * w[1] * w[2];
      const std::array<double, 3> dweight{dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]};
      const int64_t off = ((idx[0] * lat.h + idx[1]) * lat.w + idx[2]) * C;
      fn(off, weight, dweight);
    }
  };

  Tensor y({L, C});
  const double* fv = f.value().data();
  for (int64_t l = 0; l < L; ++l) {
    double* yr = y.data() + l * C;
    corners(pv, l, [&](int64_t off, double wgt, const std::array<double, 3>&) {
      if (wgt == 0.0) return;
      for (int64_t c = 0; c < C; ++c) yr[c] += wgt * fv[off + c];
    });
  }
  return nn::make_result(std::move(y), {f, p}, [corners, L, C](nn::Node& self) {
    const Tensor& fv = self.parents[0]->value;
    const Tensor& pv = self.parents[1]->value;
    Tensor* gf = parent_grad(self, 0);
    Tensor* gp = parent_grad(self, 1);
    for (int64_t l = 0; l < L; ++l) {
      const double* gy = self.grad.data() + l * C;
      corners(pv, l, [&](int64_t off, double wgt, const std::array<double, 3>& dwgt) {
        if (gf && wgt != 0.0)
          for (int64_t c = 0; c < C; ++c) (*gf)[off + c] += wgt * gy[c];
        if (gp) {
          double dot = 0.0;
          for (int64_t c = 0; c < C; ++c) dot += fv[off + c] * gy[c];
          for (int64_t a = 0; a < 3; ++a) (*gp)[3 * l + a] += dwgt[static_cast<size_t>(a)] * dot;
        }
      });
    }
  });
}

PathOffsetNet::PathOffsetNet(int64_t channels, int64_t hidden, Rng& rng)
    : fc1(channels, hidden, rng), fc2(hidden, 3, rng) {
  fc2.zero_init();
}

Var PathOffsetNet::operator()(const Var& f) const {
  const int64_t C = f.shape().back();
  return nn::tanh(fc2(nn::relu(fc1(nn::reshape(f, {f.numel() / C, C})))));
}

void PathOffsetNet::collect(nn::ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

Var deform_path(const Tensor& p_g, const Var& f, const PathOffsetNet& net, double scale, const Lattice& lat) {
  if (lattice_of(f.value()) != lat) throw Error("deform_path: feature grid does not match the lattice");
  require_shape(p_g, {lat.size(), 3}, "deform_path");
  return clamp_path(nn::add(nn::constant(p_g), nn::scale(net(f), scale)), lat);
}

Var frame_modulate(const Var& x, const Var& scale, const Var& shift) {
  const Lattice lat = lattice_of(x.value());
  const int64_t C = x.dim(3);
  const int64_t rows = scale.dim(0);
  if (scale.shape() != shift.shape() || scale.value().rank() != 2 || scale.dim(1) != C ||
      (rows != 1 && rows != lat.t))
    throw Error("frame_modulate: scale/shift must be [T, C] or [1, C]");
  const int64_t per_frame = lat.h * lat.w;
  Tensor y(x.shape());
  const double* xv = x.value().data();
  const double* sv = scale.value().data();
  const double* bv = shift.value().data();
  for (int64_t t = 0; t < lat.t; ++t) {
    const int64_t r = rows == 1 ? 0 : t;
    for (int64_t s = 0; s < per_frame; ++s) {
      const int64_t base = (t * per_frame + s) * C;
      for (int64_t c = 0; c < C; ++c) y[base + c] = xv[base + c] * (1.0 + sv[r * C + c]) + bv[r * C + c];
    }
  }
  return nn::make_result(std::move(y), {x, scale, shift}, [lat, C, rows, per_frame](nn::Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& sv = self.parents[1]->value;
    Tensor* gx = parent_grad(self, 0);
    Tensor* gs = parent_grad(self, 1);
    Tensor* gb = parent_grad(self, 2);
    for (int64_t t = 0; t < lat.t; ++t) {
      const int64_t r = rows == 1 ? 0 : t;
      for (int64_t s = 0; s < per_frame; ++s) {
        const int64_t base = (t * per_frame + s) * C;
        for (int64_t c = 0; c < C; ++c) {
          const double g = self.grad[base + c];
          if (gx) (*gx)[base + c] += g * (1.0 + sv[r * C + c]);
          if (gs) (*gs)[r * C + c] += g * xv[base + c];
          if (gb) (*gb)[r * C + c] += g;
        }
      }
    }
  });
}

Agn::Agn(int64_t cond_dim, int64_t channels, int64_t groups_, Rng& rng)
    : groups(groups_), gamma(cond_dim, channels, rng), beta(cond_dim, channels, rng) {
  if (groups < 1 || channels % groups) throw Error("agn: channel count not divisible by group count");
}

Var Agn::operator()(const Var& x, const Var& c) const {
  Var n = nn::group_norm(x, groups);
  if (!c.defined()) return n;
  return frame_modulate(n, gamma(c), beta(c));
}

void Agn::collect(nn::ParamList& out, const std::string& prefix) const {
  gamma.collect(out, prefix + ".gamma");
  beta.collect(out, prefix + ".beta");
}

void TriPathConfig::validate(int64_t channels) const {
  if (blocks < 1) throw Error("tri_path: blocks must be positive");
  if (!(offset_scale >= 0.0) || !std::isfinite(offset_scale)) throw Error("tri_path: offset_scale must be >= 0");
  if (offset_hidden < 1 || d_state < 1 || expand < 1) throw Error("tri_path: sizes must be positive");
  if (groups < 1 || channels % groups) throw Error("tri_path: channels not divisible by groups");
  if (gate_kernel < 1 || gate_kernel % 2 == 0) throw Error("tri_path: gate_kernel must be odd");
}

TriPathBlock::TriPathBlock(const TriPathConfig& cfg, int64_t channels, int64_t cond_dim,
                           const sep::Ablation& ablation, Rng& rng)
    : cfg_(cfg), ablation_(ablation) {
  cfg_.validate(channels);
  agn_ = Agn(cond_dim, channels, cfg_.groups, rng);
  ssm::MambaConfig mc;
  mc.d_model = channels;
  mc.d_state = cfg_.d_state;
  mc.expand = cfg_.expand;
  mc.bidirectional = cfg_.bidirectional;
  mamba_g_ = ssm::MambaBlock(mc, rng);
  if (ablation_.dynamic_branch) {
    off_d_ = PathOffsetNet(channels, cfg_.offset_hidden, rng);
    mamba_d_ = ssm::MambaBlock(mc, rng);
  }
  if (ablation_.static_branch) {
    off_s_ = PathOffsetNet(channels, cfg_.offset_hidden, rng);
    mamba_s_ = ssm::MambaBlock(mc, rng);
  }
  fuse_ = sep::GatedFuse(channels, cfg_.gate_kernel, ablation_.adaptive_gates, rng);
}

Var TriPathBlock::operator()(const Var& f_g, const Var& f_d, const Var& f_s, const Var& c,
                             BlockTrace* trace) const {
  const Lattice lat = lattice_of(f_g.value());
  for (const Var* v : {&f_d, &f_s})
    if (v->defined() && v->shape() != f_g.shape()) throw Error("tri_path: feature triple shapes differ");
  const int64_t C = f_g.dim(3);
  const Shape grid = f_g.shape();
  const Var g = agn_(f_g, c);
  const Tensor p_g = generic_path(lat);

  auto branch = [&](const ssm::MambaBlock& mamba, const PathOffsetNet& net, const Var& guide, Tensor* raw) {
    Var off = net(guide);
    if (raw) *raw = off.value();
    Var p = clamp_path(nn::add(nn::constant(p_g), nn::scale(off, cfg_.offset_scale)), lat);
    return nn::reshape(mamba(sample_along_path(g, p)), grid);
  };

  // Integer raster path: sampling is an exact gather in lattice order.
  Var out_g = nn::reshape(mamba_g_(nn::reshape(g, {lat.size(), C})), grid);
  Var out_d, out_s;
  if (ablation_.dynamic_branch)
    out_d = branch(mamba_d_, off_d_, f_d.defined() ? f_d : g, trace ? &trace->offset_d : nullptr);
  if (ablation_.static_branch)
    out_s = branch(mamba_s_, off_s_, f_s.defined() ? f_s : g, trace ? &trace->offset_s : nullptr);
  return nn::add(f_g, fuse_(out_g, out_d, out_s));
}

void TriPathBlock::collect(nn::ParamList& out, const std::string& prefix) const {
  agn_.collect(out, prefix + ".agn");
  mamba_g_.collect(out, prefix + ".mamba_g");
  if (ablation_.dynamic_branch) {
    off_d_.collect(out, prefix + ".offset_d");
    mamba_d_.collect(out, prefix + ".mamba_d");
  }
  if (ablation_.static_branch) {
    off_s_.collect(out, prefix + ".offset_s");
    mamba_s_.collect(out, prefix + ".mamba_s");
  }
  fuse_.collect(out, prefix + ".fuse");
}

TriPathStack::TriPathStack(const TriPathConfig& cfg, int64_t channels, int64_t cond_dim,
                           const sep::Ablation& ablation, Rng& rng) {
  cfg.validate(channels);
  for (int64_t b = 0; b < cfg.blocks; ++b) blocks_.emplace_back(cfg, channels, cond_dim, ablation, rng);
}

Var TriPathStack::operator()(const Var& f_g, const Var& f_d, const Var& f_s, const Var& c,
                             std::vector<BlockTrace>* traces) const {
  if (traces) traces->assign(blocks_.size(), BlockTrace{});
  Var x = f_g;
  for (size_t b = 0; b < blocks_.size(); ++b) x = blocks_[b](x, f_d, f_s, c, traces ? &(*traces)[b] : nullptr);
  return x;
}

void TriPathStack::collect(nn::ParamList& out, const std::string& prefix) const {
  for (size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, prefix + ".block" + std::to_string(b));
}

DeformHeatmap deform_heatmap(const std::vector<BlockTrace>& traces, const Lattice& lat, double scale) {
  DeformHeatmap hm;
  hm.lattice = lat;
  auto accumulate = [&](const Tensor BlockTrace::*member, std::vector<float>& dst) {
    std::vector<double> acc(static_cast<size_t>(lat.size()), 0.0);
    int64_t used = 0;
    for (const BlockTrace& tr : traces) {
      const Tensor& off = tr.*member;
      if (off.empty()) continue;
      require_shape(off, {lat.size(), 3}, "deform_heatmap");
      ++used;
      for (int64_t k = 0; k < lat.size(); ++k)
        acc[static_cast<size_t>(k)] +=
            scale * (std::abs(off[3 * k]) + std::abs(off[3 * k + 1]) + std::abs(off[3 * k + 2])) / 3.0;
    }
    if (used == 0) return;
    dst.resize(acc.size());
    for (size_t k = 0; k < acc.size(); ++k) dst[k] = static_cast<float>(acc[k] / static_cast<double>(used));
  };
  accumulate(&BlockTrace::offset_d, hm.dynamic);
  accumulate(&BlockTrace::offset_s, hm.stat);
  return hm;
}

}  // namespace gem::tri
