// Acceptance suite: one PASS/FAIL line per criterion. Oracle, gradient, and
// shape checks run in seconds; the toy-training checks share one trained
// tokenizer and world model, cached under --work.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "acceptance_toy.hpp"
#include "gem/diffusion_wm.hpp"
#include "gem/metrics.hpp"
#include "gem/separator.hpp"
#include "gem/ssm.hpp"
#include "gem/synth_world.hpp"
#include "gem/tokenizer.hpp"
#include "gem/tri_path.hpp"
#include "gradcheck.hpp"

using namespace gem;
using gem::testing::grad_check;
using toy::Outcome;

namespace {

// Pinned tolerances.
constexpr double kScanTol64 = 1e-10;
constexpr double kScanTol32 = 1e-5;
constexpr double kTrilinearTol = 1e-6;
constexpr double kMetricTol = 1e-9;
constexpr double kFdStep = 1e-5;
constexpr double kGradTol = 1e-4;

// ---------------------------------------------------------------- A1

template <typename T>
struct ScanCase {
  int64_t L, D, N;
  std::vector<T> x, delta, a_log, B, C, skip;
  ssm::ScanInputs<T> inputs() const { return {L, D, N, x, delta, a_log, B, C, skip}; }
};

template <typename T>
ScanCase<T> scan_case(Rng& rng, int64_t L, int64_t D, int64_t N) {
  ScanCase<T> c{L, D, N, {}, {}, {}, {}, {}, {}};
  auto fill = [&](std::vector<T>& v, int64_t n, double lo, double hi) {
    v.resize(static_cast<size_t>(n));
    for (auto& e : v) e = static_cast<T>(rng.uniform(lo, hi));
  };
  fill(c.x, L * D, -1, 1);
  fill(c.delta, L * D, 0.01, 0.5);
  fill(c.a_log, D * N, -1, 1);
  fill(c.B, L * N, -1, 1);
  fill(c.C, L * N, -1, 1);
  fill(c.skip, D, -1, 1);
  return c;
}

// max |a - b| / max |b|
template <typename T>
double max_rel(const std::vector<T>& a, const std::vector<T>& b) {
  double num = 0, den = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    den = std::max(den, std::abs(static_cast<double>(b[i])));
  }
  return num / std::max(den, 1e-12);
}

Outcome a1_scan() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst64 = 0, worst32 = 0;
  for (int i = 0; i < 200; ++i) {
    const int64_t L = rng.uniform_int(1, 512), D = rng.uniform_int(1, 8), N = rng.uniform_int(1, 16);
    const auto c64 = scan_case<double>(rng, L, D, N);
    worst64 = std::max(worst64, max_rel(ssm::selective_scan_parallel(c64.inputs()),
                                        ssm::selective_scan_sequential(c64.inputs())));
    const auto c32 = scan_case<float>(rng, L, D, N);
    worst32 = std::max(worst32, max_rel(ssm::selective_scan_parallel(c32.inputs()),
                                        ssm::selective_scan_sequential(c32.inputs())));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream os;
  os << "200 cases, rel64 " << worst64 << " rel32 " << worst32 << ", " << secs << " s";
  return {worst64 < kScanTol64 && worst32 < kScanTol32 && secs < 60.0, os.str()};
}

// ---------------------------------------------------------------- A2

Outcome a2_quantize() {
  Rng rng(102);
  const int64_t K = 64, C = 8, sites = 1000;
  const Tensor cb = rng.normal_tensor({K, C});
  const Tensor z = rng.normal_tensor({sites, C}, 1.3);
  const auto got = tok::nearest_codes(z, cb);
  int64_t agree = 0;
  for (int64_t s = 0; s < sites; ++s) {
    int64_t best = 0;
    double best_d = INFINITY;
    for (int64_t k = 0; k < K; ++k) {
      double d = 0;
      for (int64_t c = 0; c < C; ++c) d += std::pow(z[s * C + c] - cb[k * C + c], 2);
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    agree += got[static_cast<size_t>(s)] == best;
  }
  // The tokenizer's quantize must route through the same assignment.
  tok::TokenizerConfig tc;
  tc.codebook_size = K;
  tc.latent_channels = C;
  tc.down_v = 4;
  tc.down_h = 16;
  tc.width = 8;
  tc.blocks = 2;
  tc.d_state = 2;
  tc.full_res_mamba = false;
  tok::Tokenizer model(tc, {.n_lasers = 8, .n_azimuth = 64}, 5);
  model.codebook().mutable_value() = cb;
  const auto q = model.quantize(nn::constant(z.reshaped({10, 100, C})));
  const bool same = q.indices == got;
  std::ostringstream os;
  os << agree << "/" << sites << " sites agree" << (same ? "" : ", tokenizer quantize disagrees");
  return {agree == sites && same, os.str()};
}

// ---------------------------------------------------------------- A3

std::vector<double> corner_oracle(const Tensor& f, const double coord[3]) {
  const int64_t dims[3] = {f.dim(0), f.dim(1), f.dim(2)};
  const int64_t C = f.dim(3);
  int64_t lo[3];
  double frac[3];
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::min<int64_t>(static_cast<int64_t>(std::floor(coord[a])), std::max<int64_t>(dims[a] - 2, 0));
    frac[a] = dims[a] == 1 ? 0.0 : coord[a] - static_cast<double>(lo[a]);
  }
  std::vector<double> out(static_cast<size_t>(C), 0.0);
  for (int corner = 0; corner < 8; ++corner) {
    int64_t idx[3];
    double w = 1.0;
    for (int a = 0; a < 3; ++a) {
      const int bit = (corner >> a) & 1;
      idx[a] = std::min(lo[a] + bit, dims[a] - 1);
      w *= bit ? frac[a] : 1.0 - frac[a];
    }
    for (int64_t c = 0; c < C; ++c) out[static_cast<size_t>(c)] += w * f.at({idx[0], idx[1], idx[2], c});
  }
  return out;
}

Outcome a3_trilinear() {
  Rng rng(103);
  double worst = 0;
  int64_t points = 0;
  for (Shape s : {Shape{3, 4, 5, 3}, Shape{2, 4, 4, 8}, Shape{1, 3, 7, 2}, Shape{5, 1, 6, 4}}) {
    const Tensor f = rng.normal_tensor(s);
    const int64_t n = 400;
    Tensor p({n, 3});
    for (int64_t i = 0; i < n; ++i)
      for (int a = 0; a < 3; ++a) p[3 * i + a] = rng.uniform(0.0, static_cast<double>(s[static_cast<size_t>(a)] - 1));
    for (int a = 0; a < 3; ++a) p[a] = static_cast<double>(s[static_cast<size_t>(a)] - 1);  // upper faces
    const Tensor got = tri::sample_along_path(nn::constant(f), nn::constant(p)).value();
    for (int64_t i = 0; i < n; ++i) {
      const double coord[3] = {p[3 * i], p[3 * i + 1], p[3 * i + 2]};
      const auto o = corner_oracle(f, coord);
      for (int64_t c = 0; c < s[3]; ++c) worst = std::max(worst, std::abs(o[static_cast<size_t>(c)] - got[i * s[3] + c]));
    }
    points += n;
  }
  std::ostringstream os;
  os << points << " points, max abs diff " << worst;
  return {worst < kTrilinearTol, os.str()};
}

// ---------------------------------------------------------------- A4

double dist3(const geom::Point3& a, const geom::Point3& b) {
  return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z));
}

geom::PointCloud random_cloud(Rng& rng, int n) {
  geom::PointCloud c;
  for (int i = 0; i < n; ++i) c.points.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-2, 2)});
  return c;
}

metrics::BEVHistogram random_hist(Rng& rng, int64_t bins) {
  metrics::BEVHistogram h{bins, 10.0, std::vector<double>(static_cast<size_t>(bins * bins))};
  for (auto& c : h.counts) c = rng.uniform(0, 1) < 0.3 ? 0.0 : std::floor(rng.uniform(0, 10));
  h.counts[0] += 1;
  return h;
}

Outcome a4_metrics() {
  Rng rng(104);
  double chamfer_err = 0, emd_err = 0, jsd_err = 0, mmd_err = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_cloud(rng, static_cast<int>(rng.uniform_int(1, 50)));
    const auto q = random_cloud(rng, static_cast<int>(rng.uniform_int(1, 50)));
    auto side = [](const geom::PointCloud& a, const geom::PointCloud& b) {
      double s = 0;
      for (const auto& x : a.points) {
        double best = INFINITY;
        for (const auto& y : b.points) best = std::min(best, dist3(x, y));
        s += best;
      }
      return s / static_cast<double>(a.size());
    };
    chamfer_err = std::max(chamfer_err, std::abs(metrics::chamfer(p, q).value() - 0.5 * (side(p, q) + side(q, p))));
  }
  for (int trial = 0; trial < 5; ++trial) {
    const auto p = random_cloud(rng, 8), q = random_cloud(rng, 8);
    std::vector<int> perm(8);
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
      double s = 0;
      for (int i = 0; i < 8; ++i) s += dist3(p.points[static_cast<size_t>(i)], q.points[static_cast<size_t>(perm[static_cast<size_t>(i)])]);
      best = std::min(best, s / 8);
    } while (std::next_permutation(perm.begin(), perm.end()));
    emd_err = std::max(emd_err, std::abs(metrics::emd_small(p, q).value().value - best));
  }
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_hist(rng, 5), b = random_hist(rng, 5);
    const auto pa = a.normalized(), pb = b.normalized();
    double ref = 0;
    for (size_t i = 0; i < pa.size(); ++i) {
      const double m = 0.5 * (pa[i] + pb[i]);
      if (pa[i] > 0) ref += 0.5 * pa[i] * std::log2(pa[i] / m);
      if (pb[i] > 0) ref += 0.5 * pb[i] * std::log2(pb[i] / m);
    }
    jsd_err = std::max(jsd_err, std::abs(metrics::jsd(a, b).value() - ref));
  }
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<metrics::BEVHistogram> gen, ref;
    for (int i = 0; i < 5; ++i) {
      gen.push_back(random_hist(rng, 5));
      ref.push_back(random_hist(rng, 5));
    }
    double acc = 0;
    for (const auto& r : ref) {
      double best = INFINITY;
      for (const auto& g : gen) {
        const auto x = r.normalized(), y = g.normalized();
        double d = 0;
        for (size_t i = 0; i < x.size(); ++i) d += (x[i] - y[i]) * (x[i] - y[i]);
        best = std::min(best, d);
      }
      acc += best;
    }
    mmd_err = std::max(mmd_err, std::abs(metrics::mmd(gen, ref).value() - acc / 5));
  }
  std::ostringstream os;
  os << "chamfer " << chamfer_err << " emd " << emd_err << " jsd " << jsd_err << " mmd " << mmd_err;
  const double worst = std::max({chamfer_err, emd_err, jsd_err, mmd_err});
  return {worst < kMetricTol, os.str()};
}

// ---------------------------------------------------------------- B5

void randomize_offsets(tri::PathOffsetNet& net, Rng& rng) {
  net.fc2.weight.mutable_value() = rng.normal_tensor(net.fc2.weight.shape(), 0.7);
  net.fc2.bias.mutable_value() = rng.normal_tensor(net.fc2.bias.shape(), 0.3);
}

nn::Var weighted_sum(const nn::Var& y, const Tensor& w) { return nn::sum(nn::mul(y, nn::constant(w))); }

// Straight-through oracle: the encoder output receives the downstream
// gradient at the quantized value plus the commitment term; codewords receive
// only the beta-weighted codebook term.
double vq_straight_through_error(Rng& rng) {
  tok::TokenizerConfig tc;
  tc.codebook_size = 8;
  tc.latent_channels = 4;
  tc.down_v = 4;
  tc.down_h = 16;
  tc.width = 8;
  tc.blocks = 2;
  tc.d_state = 2;
  tc.full_res_mamba = false;
  const geom::SensorConfig sensor{.n_lasers = 8, .n_azimuth = 64};
  tok::Tokenizer model(tc, sensor, 11);
  synth::SceneSpec spec;
  spec.sensor = sensor;
  spec.frames = 2;
  spec.seed = 3;
  const auto sweep = synth::generate_sequence(spec)[0].range;
  const Tensor x = tok::normalized_input(sweep, sensor);
  const Tensor mask = tok::valid_mask(sweep);
  auto z = nn::parameter(rng.normal_tensor({2, 4, 4}));
  auto& cb = model.codebook();
  z.zero_grad();
  cb.zero_grad();
  {
    const auto q = model.quantize(z);
    nn::backward(tok::vq_loss(x, mask, model.decode(q.z_q).range, z, q.codes, tc.beta).total);
  }
  const Tensor gz = z.grad(), gcb = cb.grad();
  const auto indices = model.quantize(z).indices;
  const Tensor zq = model.quantize(z).z_q.value();
  const Tensor z0 = z.value(), codes0 = nn::gather_rows(cb, indices).value();

  nn::NoGradGuard ng;
  auto fd = [&](Tensor& v, int64_t i, const std::function<double()>& f) {
    const double orig = v[i];
    v[i] = orig + kFdStep;
    const double up = f();
    v[i] = orig - kFdStep;
    const double down = f();
    v[i] = orig;
    return (up - down) / (2 * kFdStep);
  };
  auto mean_sq = [](const Tensor& a, const Tensor& b) {
    double s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<double>(a.numel());
  };
  double diff2 = 0, a2 = 0, n2 = 0;
  auto acc = [&](double analytic, double numeric) {
    diff2 += (analytic - numeric) * (analytic - numeric);
    a2 += analytic * analytic;
    n2 += numeric * numeric;
  };
  Tensor y = zq;
  Tensor zz = z0;
  for (int64_t i = 0; i < y.numel(); ++i) {
    const double down = fd(y, i, [&] {
      const auto d = model.decode(nn::constant(y));
      return nn::l1_masked(d.range, x, mask).value()[0];
    });
    const double commit = fd(zz, i, [&] { return mean_sq(zz, codes0); });
    acc(gz[i], down + commit);
  }
  Tensor table = cb.value();
  for (int64_t i = 0; i < table.numel(); ++i) {
    const double num = fd(table, i, [&] {
      Tensor gathered(codes0.shape());
      for (size_t r = 0; r < indices.size(); ++r)
        for (int64_t c = 0; c < 4; ++c) gathered[static_cast<int64_t>(r) * 4 + c] = table[indices[r] * 4 + c];
      return tc.beta * mean_sq(z0.reshaped(codes0.shape()), gathered);
    });
    acc(gcb[i], num);
  }
  return std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-8);
}

Outcome b5_gradients() {
  std::map<std::string, double> err;
  Rng rng(105);
  {
    ssm::MambaBlock block({.d_model = 8, .d_state = 4, .bidirectional = true}, rng);
    auto x = nn::parameter(rng.normal_tensor({6, 8}));
    const Tensor w = rng.normal_tensor({6, 8});
    nn::ParamList ps{{"x", x}};
    block.collect(ps, "mamba");
    err["mamba_block"] = grad_check([&] { return weighted_sum(block(x), w); }, ps, kFdStep, 80).rel_err;
  }
  {
    sep::Extractor ex(4, 8, rng);
    auto z = nn::parameter(rng.normal_tensor({2, 4, 4, 4}));
    const Tensor w = rng.normal_tensor({2, 4, 4, 8});
    nn::ParamList ps{{"z", z}};
    ex.collect(ps, "extract");
    // Pattern operators feed the extractors.
    err["extract"] = grad_check(
        [&] {
          return nn::add(weighted_sum(ex(sep::dynamic_pattern(z)), w), weighted_sum(ex(sep::static_pattern(z, 3)), w));
        },
        ps, kFdStep, 80).rel_err;
  }
  {
    sep::GatedFuse fuse(8, 3, true, rng);
    const Shape s{2, 4, 4, 8};
    auto f = nn::parameter(rng.normal_tensor(s)), fd = nn::parameter(rng.normal_tensor(s)),
         fs = nn::parameter(rng.normal_tensor(s));
    const Tensor w = rng.normal_tensor(s);
    nn::ParamList ps{{"f", f}, {"fd", fd}, {"fs", fs}};
    fuse.collect(ps, "fuse");
    err["gated_fuse"] = grad_check([&] { return weighted_sum(fuse(f, fd, fs), w); }, ps, kFdStep, 80).rel_err;
  }
  {
    const tri::Lattice lat{2, 4, 4};
    tri::PathOffsetNet net(8, 6, rng);
    randomize_offsets(net, rng);
    auto f = nn::parameter(rng.normal_tensor({2, 4, 4, 8}));
    auto g = nn::parameter(rng.normal_tensor({2, 4, 4, 8}));
    const Tensor pg = tri::generic_path(lat);
    const Tensor w = rng.normal_tensor({32, 8});
    nn::ParamList ps{{"f", f}, {"g", g}};
    net.collect(ps, "offset");
    // Offsets are kept inside the lattice by a small scale so the clamp stays inactive
    // away from the faces; the composite still crosses cell boundaries.
    err["deform_path+sample"] = grad_check(
        [&] { return weighted_sum(tri::sample_along_path(g, tri::deform_path(pg, f, net, 0.45, lat)), w); }, ps,
        kFdStep, 80).rel_err;
  }
  {
    tri::TriPathConfig cfg{.blocks = 1, .offset_hidden = 6, .d_state = 3, .groups = 4, .gate_kernel = 3};
    tri::TriPathBlock block(cfg, 8, 5, {}, rng);
    randomize_offsets(block.offsets_d(), rng);
    randomize_offsets(block.offsets_s(), rng);
    const Shape s{2, 4, 4, 8};
    auto f = nn::parameter(rng.normal_tensor(s)), fd = nn::parameter(rng.normal_tensor(s)),
         fs = nn::parameter(rng.normal_tensor(s));
    auto c = nn::parameter(rng.normal_tensor({2, 5}));
    const Tensor w = rng.normal_tensor(s);
    nn::ParamList ps{{"f", f}, {"fd", fd}, {"fs", fs}, {"c", c}};
    block.collect(ps, "block");
    err["block_forward"] = grad_check([&] { return weighted_sum(block(f, fd, fs, c), w); }, ps, kFdStep, 60).rel_err;
  }
  {
    tri::Agn agn(5, 8, 4, rng);
    agn.gamma.weight.mutable_value() = rng.normal_tensor(agn.gamma.weight.shape(), 0.5);
    agn.beta.weight.mutable_value() = rng.normal_tensor(agn.beta.weight.shape(), 0.5);
    auto x = nn::parameter(rng.normal_tensor({2, 4, 4, 8}, 2.0));
    auto c = nn::parameter(rng.normal_tensor({2, 5}));
    const Tensor w = rng.normal_tensor({2, 4, 4, 8});
    nn::ParamList ps{{"x", x}, {"c", c}};
    agn.collect(ps, "agn");
    err["agn_modulate"] = grad_check([&] { return weighted_sum(agn(x, c), w); }, ps, kFdStep, 80).rel_err;
  }
  err["vq_straight_through"] = vq_straight_through_error(rng);

  std::ostringstream os;
  double worst = 0;
  for (const auto& [name, e] : err) {
    os << name << " " << e << "; ";
    worst = std::max(worst, e);
  }
  return {worst < kGradTol, os.str()};
}

// ---------------------------------------------------------------- C6

Outcome c6_shapes() {
  Rng rng(106);
  std::vector<std::string> failed;
  auto need = [&](bool ok, const char* what) {
    if (!ok) failed.push_back(what);
  };

  // A static sequence has no dynamic pattern.
  const Tensor frame = rng.normal_tensor({1, 2, 3, 4});
  Tensor still({4, 2, 3, 4});
  for (int64_t i = 0; i < still.numel(); ++i) still[i] = frame[i % frame.numel()];
  const Tensor dyn = sep::dynamic_pattern(nn::constant(still)).value();
  need(std::all_of(dyn.values().begin(), dyn.values().end(), [](double v) { return v == 0.0; }), "static->zero dynamic");

  // Window-3 average of [a, b, c] over the realized window.
  const double a = 2.0, b = 5.0, c = 11.0;
  Tensor abc({3, 1, 1, 1}, std::vector<double>{a, b, c});
  const Tensor st = sep::static_pattern(nn::constant(abc), 3).value();
  need(st[0] == (a + b) / 2 && st[1] == (a + b + c) / 3 && st[2] == (b + c) / 2, "static pattern hand case");

  // Fusion stays inside the convex hull of F and the side blend.
  sep::GatedFuse fuse(4, 3, true, rng);
  const Shape s{3, 2, 4, 4};
  bool convex = true;
  for (int rep = 0; rep < 5; ++rep) {
    auto f = nn::constant(rng.normal_tensor(s, 3.0)), fd = nn::constant(rng.normal_tensor(s, 3.0)),
         fs = nn::constant(rng.normal_tensor(s, 3.0));
    const Tensor g1 = fuse.g1(nn::concat_last({fd, fs})).value();
    const Tensor side = sep::fuse_with_gates(fd, fd, fs, nn::constant(g1), nn::constant(Tensor(s, 1.0))).value();
    const Tensor out = fuse(f, fd, fs).value();
    for (int64_t i = 0; i < out.numel(); ++i) {
      const double lo = std::min({f.value()[i], side[i]}), hi = std::max({f.value()[i], side[i]});
      const double side_lo = std::min(fd.value()[i], fs.value()[i]), side_hi = std::max(fd.value()[i], fs.value()[i]);
      convex = convex && g1[i] >= 0 && g1[i] <= 1 && out[i] >= lo - 1e-12 && out[i] <= hi + 1e-12 &&
               side[i] >= side_lo - 1e-12 && side[i] <= side_hi + 1e-12;
    }
  }
  need(convex, "fusion convexity");

  // Zero-initialized offset nets leave the generic path untouched.
  const tri::Lattice lat{2, 3, 4};
  tri::PathOffsetNet net(5, 8, rng);
  const Tensor pg = tri::generic_path(lat);
  const Tensor pd = tri::deform_path(pg, nn::constant(rng.normal_tensor({2, 3, 4, 5})), net, 1.0, lat).value();
  need(max_abs_diff(pd, pg) == 0.0, "zero-init offsets");

  // Noise regression loss on two elements.
  const auto loss = wm::noise_loss(nn::constant(Tensor({2}, std::vector<double>{0.5, -1.0})),
                                   Tensor({2}, std::vector<double>{1.5, 1.0}));
  need(loss.value()[0] == (1.0 * 1.0 + 2.0 * 2.0) / 2.0, "noise loss hand case");

  // Forward-noising endpoints.
  const Tensor z = rng.normal_tensor({3, 4}), e = rng.normal_tensor({3, 4});
  need(max_abs_diff(wm::add_noise(z, 1.0, e), z) == 0.0, "add_noise at 1");
  need(max_abs_diff(wm::add_noise(z, 0.0, e), e) == 0.0, "add_noise at 0");

  std::string detail = failed.empty() ? "all shape checks hold" : "failed:";
  for (const auto& f : failed) detail += " " + f + ";";
  return {failed.empty(), detail};
}

// ---------------------------------------------------------------- E13

Outcome e13_ablations() {
  const char* names[5] = {"DE", "SE", "DDM", "SDM", "AGA"};
  int ok = 0;
  std::string errors;
  for (int mask = 0; mask < 32; ++mask) {
    std::string list;
    for (int b = 0; b < 5; ++b)
      if (mask & (1 << b)) list += std::string(list.empty() ? "" : ",") + names[b];
    try {
      wm::WorldModelConfig c = toy::smoke_config();
      c.ablation = sep::Ablation::disabled(list);
      wm::WorldModel model(c, static_cast<uint64_t>(mask) + 1);
      Rng rng(static_cast<uint64_t>(mask) + 100);
      const auto w = toy::random_window(c, rng);
      wm::WorldModelTrainer tr(model, {});
      nn::ParamList ps;
      model.collect(ps);
      std::vector<Tensor> before;
      for (const auto& p : ps) before.push_back(p.var.value());
      const auto log = tr.step({&w}, 7);
      // The optimizer clears gradients after applying them, so a completed
      // backward pass shows up as moved parameters.
      bool moved = false;
      for (size_t i = 0; i < ps.size(); ++i) moved = moved || max_abs_diff(before[i], ps[i].var.value()) > 0.0;
      if (!std::isfinite(log.loss) || !moved) throw Error("no finite loss or no parameter update");
      ++ok;
    } catch (const std::exception& e) {
      errors += " [" + (list.empty() ? std::string("full") : list) + ": " + e.what() + "]";
    }
  }
  return {ok == 32, std::to_string(ok) + "/32 subsets ran forward and backward" + errors};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string only;
  std::string work = "acceptance_work";
  bool fresh = false;
  app.add_option("--only", only, "comma-separated criterion ids, e.g. A1,D9");
  app.add_option("--work", work, "directory for cached checkpoints and logs");
  app.add_flag("--fresh", fresh, "ignore cached checkpoints");
  CLI11_PARSE(app, argc, argv);

  std::set<std::string> selected;
  {
    std::stringstream ss(only);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!item.empty()) selected.insert(item);
  }
  auto wanted = [&](const std::string& id) { return selected.empty() || selected.count(id) > 0; };

  toy::Suite suite(work, fresh);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"A1", a1_scan},
      {"A2", a2_quantize},
      {"A3", a3_trilinear},
      {"A4", a4_metrics},
      {"B5", b5_gradients},
      {"C6", c6_shapes},
      {"D7", [&] { return suite.d7_tokenizer(); }},
      {"D8", [&] { return suite.d8_overfit(); }},
      {"D9", [&] { return suite.d9_forecast(); }},
      {"D10", [&] { return suite.d10_disentangle(); }},
      {"D11", [&] { return suite.d11_planner(); }},
      {"D12", [&] { return suite.d12_counterfactual(); }},
      {"E13", e13_ablations},
  };
  int failures = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = fn();
    } catch (const std::exception& e) {
      out = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s  %s  (%.1f s)\n", out.pass ? "PASS" : "FAIL", id.c_str(), out.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !out.pass;
  }
  return failures == 0 ? 0 : 1;
}
