#include "gem/separator.hpp"

#include <algorithm>
#include <sstream>

namespace gem::sep {

using nn::Var;

namespace {

int64_t frame_size(const Tensor& z) { return z.numel() / z.dim(0); }

void require_sequence(const Var& z, const char* what) {
  if (!z.defined() || z.value().rank() != 4) throw Error(std::string(what) + ": expected [T, h, w, C]");
}

Var lerp(const Var& a, const Var& b, const Var& g) { return nn::add(a, nn::mul(g, nn::sub(b, a))); }

Var lerp_half(const Var& a, const Var& b) { return nn::scale(nn::add(a, b), 0.5); }

}  // namespace

Var dynamic_pattern(const Var& z) {
  require_sequence(z, "dynamic_pattern");
  const int64_t T = z.dim(0), F = frame_size(z.value());
  Tensor y(z.shape());
  const Tensor& zv = z.value();
  for (int64_t t = 1; t < T; ++t)
    for (int64_t i = 0; i < F; ++i) y[t * F + i] = zv[t * F + i] - zv[(t - 1) * F + i];
  return nn::make_result(std::move(y), {z}, [T, F](nn::Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (int64_t t = 1; t < T; ++t)
      for (int64_t i = 0; i < F; ++i) {
        g[t * F + i] += self.grad[t * F + i];
        g[(t - 1) * F + i] -= self.grad[t * F + i];
      }
  });
}

Var static_pattern(const Var& z, int64_t window) {
  require_sequence(z, "static_pattern");
  if (window < 1 || window % 2 == 0) throw Error("static_pattern: window must be odd and positive");
  const int64_t T = z.dim(0), F = frame_size(z.value()), half = window / 2;
  Tensor y(z.shape());
  const Tensor& zv = z.value();
  for (int64_t t = 0; t < T; ++t) {
    const int64_t lo = std::max<int64_t>(0, t - half), hi = std::min<int64_t>(T, t + half + 1);
    // Sum first, then divide: the mean is exact whenever the sum is.
    for (int64_t s = lo; s < hi; ++s)
      for (int64_t i = 0; i < F; ++i) y[t * F + i] += zv[s * F + i];
    const double n = static_cast<double>(hi - lo);
    for (int64_t i = 0; i < F; ++i) y[t * F + i] /= n;
  }
  return nn::make_result(std::move(y), {z}, [T, F, half](nn::Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (int64_t t = 0; t < T; ++t) {
      const int64_t lo = std::max<int64_t>(0, t - half), hi = std::min<int64_t>(T, t + half + 1);
      const double inv = 1.0 / static_cast<double>(hi - lo);
      for (int64_t s = lo; s < hi; ++s)
        for (int64_t i = 0; i < F; ++i) g[s * F + i] += inv * self.grad[t * F + i];
    }
  });
}

Ablation Ablation::disabled(const std::string& list) {
  Ablation a;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    std::transform(item.begin(), item.end(), item.begin(), ::toupper);
    if (item.empty()) continue;
    if (item == "DE") a.dynamic_extractor = false;
    else if (item == "SE") a.static_extractor = false;
    else if (item == "DDM") a.dynamic_branch = false;
    else if (item == "SDM") a.static_branch = false;
    else if (item == "AGA") a.adaptive_gates = false;
    else throw Error("unknown ablation component '" + item + "' (expected DE, SE, DDM, SDM, AGA)");
  }
  return a;
}

std::string Ablation::describe() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (on) return;
    if (!out.empty()) out += ",";
    out += name;
  };
  add(dynamic_extractor, "DE");
  add(static_extractor, "SE");
  add(dynamic_branch, "DDM");
  add(static_branch, "SDM");
  add(adaptive_gates, "AGA");
  return out.empty() ? "full" : out;
}

GateNet::GateNet(int64_t in, int64_t out, int64_t kernel, Rng& rng) : conv(in, out, kernel, rng) {}

Extractor::Extractor(int64_t in, int64_t out, Rng& rng) : c1(in, out, 3, rng), c2(out, out, 3, rng) {}

void Extractor::zero_init() {
  c1.zero_init();
  c2.zero_init();
}

void Extractor::collect(nn::ParamList& out, const std::string& prefix) const {
  c1.collect(out, prefix + ".c1");
  c2.collect(out, prefix + ".c2");
}

Var fuse_with_gates(const Var& f, const Var& f_d, const Var& f_s, const Var& g1, const Var& g2) {
  Var side;
  if (f_d.defined() && f_s.defined()) side = g1.defined() ? lerp(f_d, f_s, g1) : lerp_half(f_d, f_s);
  else if (f_d.defined()) side = f_d;
  else if (f_s.defined()) side = f_s;
  else return f;
  return g2.defined() ? lerp(f, side, g2) : lerp_half(f, side);
}

GatedFuse::GatedFuse(int64_t channels, int64_t kernel, bool adaptive_, Rng& rng) : adaptive(adaptive_) {
  if (adaptive) {
    g1 = GateNet(2 * channels, channels, kernel, rng);
    g2 = GateNet(channels, channels, kernel, rng);
  }
}

Var GatedFuse::operator()(const Var& f, const Var& f_d, const Var& f_s) const {
  if (!adaptive) return fuse_with_gates(f, f_d, f_s, Var(), Var());
  Var side, gate1;
  if (f_d.defined() && f_s.defined()) {
    gate1 = g1(nn::concat_last({f_d, f_s}));
    side = lerp(f_d, f_s, gate1);
  } else if (f_d.defined()) {
    side = f_d;
  } else if (f_s.defined()) {
    side = f_s;
  } else {
    return f;
  }
  return lerp(f, side, g2(side));
}

void GatedFuse::collect(nn::ParamList& out, const std::string& prefix) const {
  if (!adaptive) return;
  g1.collect(out, prefix + ".g1");
  g2.collect(out, prefix + ".g2");
}

void SeparatorConfig::validate() const {
  if (window < 1 || window % 2 == 0) throw Error("separator: window must be odd and positive");
  if (channels < 1) throw Error("separator: channels must be positive");
  if (gate_kernel < 1 || gate_kernel % 2 == 0) throw Error("separator: gate_kernel must be odd and positive");
}

Separator::Separator(const SeparatorConfig& cfg, int64_t in_channels, const Ablation& ablation, Rng& rng)
    : cfg_(cfg), ablation_(ablation) {
  cfg_.validate();
  generic_ = Extractor(in_channels, cfg_.channels, rng);
  if (ablation_.dynamic_extractor) dynamic_ = Extractor(in_channels, cfg_.channels, rng);
  if (ablation_.static_extractor) static_ = Extractor(in_channels, cfg_.channels, rng);
  fuse_ = GatedFuse(cfg_.channels, cfg_.gate_kernel, ablation_.adaptive_gates, rng);
}

Features Separator::operator()(const Var& z) const {
  require_sequence(z, "separator");
  Features out;
  out.f = generic_(z);
  if (ablation_.dynamic_extractor) out.f_d = dynamic_(dynamic_pattern(z));
  if (ablation_.static_extractor) out.f_s = static_(static_pattern(z, cfg_.window));
  out.f_g = fuse_(out.f, out.f_d, out.f_s);
  return out;
}

void Separator::collect(nn::ParamList& out, const std::string& prefix) const {
  generic_.collect(out, prefix + ".generic");
  if (ablation_.dynamic_extractor) dynamic_.collect(out, prefix + ".dynamic");
  if (ablation_.static_extractor) static_.collect(out, prefix + ".static");
  fuse_.collect(out, prefix + ".fuse");
}

}  // namespace gem::sep
