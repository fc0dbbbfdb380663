#include <cmath>

#include "doctest.h"
#include "gem/tri_path.hpp"
#include "gradcheck.hpp"

using namespace gem;
using gem::testing::grad_check;

namespace {

// Direct convex combination over the eight surrounding lattice sites.
std::vector<double> corner_oracle(const Tensor& f, double t, double y, double x) {
  const int64_t T = f.dim(0), H = f.dim(1), W = f.dim(2), C = f.dim(3);
  std::vector<double> out(static_cast<size_t>(C), 0.0);
  const double coord[3] = {t, y, x};
  const int64_t dims[3] = {T, H, W};
  for (int64_t it = 0; it < T; ++it)
    for (int64_t iy = 0; iy < H; ++iy)
      for (int64_t ix = 0; ix < W; ++ix) {
        const int64_t idx[3] = {it, iy, ix};
        double w = 1.0;
        for (int a = 0; a < 3; ++a) w *= dims[a] == 1 ? 1.0 : std::max(0.0, 1.0 - std::abs(coord[a] - idx[a]));
        for (int64_t c = 0; c < C; ++c) out[static_cast<size_t>(c)] += w * f.at({it, iy, ix, c});
      }
  return out;
}

void randomize_offsets(tri::PathOffsetNet& net, Rng& rng) {
  net.fc2.weight.mutable_value() = rng.normal_tensor(net.fc2.weight.shape(), 0.7);
  net.fc2.bias.mutable_value() = rng.normal_tensor(net.fc2.bias.shape(), 0.3);
}

}  // namespace

TEST_CASE("generic path enumerates the lattice t-major") {
  const Tensor one = tri::generic_path({1, 1, 1});
  CHECK(one.shape() == Shape{1, 3});
  CHECK(one[0] == 0.0);
  const Tensor p = tri::generic_path({1, 2, 2});
  const double expect[] = {0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 1, 1};
  for (int i = 0; i < 12; ++i) CHECK(p[i] == expect[i]);
  CHECK(tri::generic_path({3, 8, 16}).dim(0) == 384);
  CHECK_THROWS_AS(tri::generic_path({0, 1, 1}), Error);
}

TEST_CASE("trilinear sampling matches the corner oracle") {
  Rng rng(1);
  const Tensor f = rng.normal_tensor({3, 4, 5, 3});
  auto fv = nn::constant(f);
  const Tensor knots = tri::generic_path({3, 4, 5});
  CHECK(max_abs_diff(tri::sample_along_path(fv, nn::constant(knots)).value(), f.reshaped({60, 3})) == 0.0);

  const Tensor mid({1, 3}, std::vector<double>{1.0, 2.5, 3.0});
  const Tensor m = tri::sample_along_path(fv, nn::constant(mid)).value();
  for (int64_t c = 0; c < 3; ++c)
    CHECK(std::abs(m[c] - 0.5 * (f.at({1, 2, 3, c}) + f.at({1, 3, 3, c}))) < 1e-15);

  const int64_t n = 500;
  Tensor p({n, 3});
  for (int64_t i = 0; i < n; ++i) {
    p[3 * i] = rng.uniform(0, 2);
    p[3 * i + 1] = rng.uniform(0, 3);
    p[3 * i + 2] = rng.uniform(0, 4);
  }
  p[0] = 2.0;  // upper boundary on each axis
  p[1] = 3.0;
  p[2] = 4.0;
  const Tensor s = tri::sample_along_path(fv, nn::constant(p)).value();
  double worst = 0;
  for (int64_t i = 0; i < n; ++i) {
    auto o = corner_oracle(f, p[3 * i], p[3 * i + 1], p[3 * i + 2]);
    for (int64_t c = 0; c < 3; ++c) worst = std::max(worst, std::abs(o[static_cast<size_t>(c)] - s[i * 3 + c]));
  }
  CHECK(worst < 1e-6);

  const Tensor outside({1, 3}, std::vector<double>{0.0, 3.5, 0.0});
  CHECK_THROWS_AS(tri::sample_along_path(fv, nn::constant(outside)), Error);
}

TEST_CASE("sampling gradients in features and coordinates") {
  Rng rng(2);
  auto f = nn::parameter(rng.normal_tensor({2, 3, 4, 2}));
  Tensor pv({20, 3});
  for (int64_t i = 0; i < 20; ++i) {
    pv[3 * i] = rng.uniform(0.05, 0.95);
    pv[3 * i + 1] = rng.uniform(0.05, 0.95) + static_cast<double>(i % 2);
    pv[3 * i + 2] = rng.uniform(0.05, 0.95) + static_cast<double>(i % 3);
  }
  auto p = nn::parameter(pv);
  const Tensor w = rng.normal_tensor({20, 2});
  auto rep = grad_check([&] { return nn::sum(nn::mul(tri::sample_along_path(f, p), nn::constant(w))); },
                        {{"f", f}, {"p", p}});
  INFO(rep.worst << " " << rep.rel_err);
  CHECK(rep.rel_err < 1e-8);

  // Singleton axes carry no coordinate gradient.
  auto flat = nn::parameter(rng.normal_tensor({1, 1, 4, 2}));
  auto q = nn::parameter(Tensor({1, 3}, std::vector<double>{0.0, 0.0, 1.3}));
  nn::backward(nn::sum(tri::sample_along_path(flat, q)));
  CHECK(q.grad()[0] == 0.0);
  CHECK(q.grad()[1] == 0.0);
  CHECK(q.grad()[2] != 0.0);
}

TEST_CASE("deformed paths start at the generic path and stay bounded") {
  Rng rng(3);
  const tri::Lattice lat{2, 3, 4};
  auto f = nn::constant(rng.normal_tensor({2, 3, 4, 5}));
  tri::PathOffsetNet net(5, 8, rng);
  const Tensor pg = tri::generic_path(lat);
  CHECK(max_abs_diff(tri::deform_path(pg, f, net, 1.0, lat).value(), pg) == 0.0);

  net.fc2.weight.mutable_value() = rng.normal_tensor(net.fc2.weight.shape(), 100.0);
  const double scale = 0.75;
  const Tensor raw = net(f).value();
  const Tensor p = tri::deform_path(pg, f, net, scale, lat).value();
  const double hi[3] = {1, 2, 3};
  for (int64_t i = 0; i < raw.numel(); ++i) {
    CHECK(std::abs(raw[i]) <= 1.0);
    CHECK(std::abs(p[i] - pg[i]) <= scale + 1e-12);
    CHECK(p[i] >= 0.0);
    CHECK(p[i] <= hi[i % 3]);
  }
}

TEST_CASE("frame modulation and adaptive group norm") {
  Rng rng(4);
  auto x = nn::constant(rng.normal_tensor({3, 2, 2, 8}, 2.0));
  tri::Agn agn(6, 8, 4, rng);
  agn.gamma.zero_init();
  agn.beta.zero_init();
  auto c = nn::constant(rng.normal_tensor({3, 6}));
  const Tensor plain = nn::group_norm(x, 4).value();
  CHECK(max_abs_diff(agn(x, c).value(), plain) == 0.0);
  for (int64_t g = 0; g < 4; ++g) {
    double m = 0, v = 0;
    const int64_t rows = 12;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t k = 2 * g; k < 2 * g + 2; ++k) m += plain[r * 8 + k];
    m /= 2.0 * rows;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t k = 2 * g; k < 2 * g + 2; ++k) v += (plain[r * 8 + k] - m) * (plain[r * 8 + k] - m);
    v /= 2.0 * rows;
    CHECK(std::abs(m) < 1e-5);
    CHECK(std::abs(v - 1.0) < 1e-4);  // eps in the denominator
  }
  CHECK_THROWS_AS(tri::Agn(6, 8, 3, rng), Error);

  tri::Agn live(6, 8, 4, rng);
  auto xp = nn::parameter(x.value());
  auto cp = nn::parameter(c.value());
  nn::ParamList params{{"x", xp}, {"c", cp}};
  live.collect(params, "agn");
  const Tensor w = rng.normal_tensor({3, 2, 2, 8});
  auto rep = grad_check([&] { return nn::sum(nn::mul(live(xp, cp), nn::constant(w))); }, params);
  INFO(rep.worst << " " << rep.rel_err);
  CHECK(rep.rel_err < 1e-5);

  // A single condition row broadcasts over frames.
  auto c1 = nn::constant(rng.normal_tensor({1, 6}));
  Tensor rep3({3, 6});
  for (int64_t t = 0; t < 3; ++t)
    for (int64_t k = 0; k < 6; ++k) rep3[t * 6 + k] = c1.value()[k];
  CHECK(max_abs_diff(live(x, c1).value(), live(x, nn::constant(rep3)).value()) < 1e-14);
}

TEST_CASE("tri-path block shapes, zero-offset baseline, and fusion degenerate case") {
  Rng rng(5);
  tri::TriPathConfig cfg{.blocks = 1, .d_state = 4, .groups = 4, .gate_kernel = 1};
  tri::TriPathBlock block(cfg, 8, 6, {}, rng);
  for (auto dims : {Shape{1, 1, 1, 8}, Shape{2, 3, 5, 8}, Shape{4, 2, 8, 8}}) {
    auto f = nn::constant(rng.normal_tensor(dims));
    auto fd = nn::constant(rng.normal_tensor(dims));
    auto fs = nn::constant(rng.normal_tensor(dims));
    auto c = nn::constant(rng.normal_tensor({1, 6}));
    auto y = block(f, fd, fs, c);
    CHECK(y.shape() == dims);
    CHECK(max_abs_diff(y.value(), block(f, fd, fs, c).value()) == 0.0);
  }

  // Zero offsets: each deformable branch reads exactly the raster order, so
  // it equals its Mamba applied to the modulated lattice.
  auto f = nn::constant(rng.normal_tensor({2, 3, 4, 8}));
  auto c = nn::constant(rng.normal_tensor({2, 6}));
  tri::BlockTrace trace;
  block(f, f, f, c, &trace);
  for (double v : trace.offset_d.values()) CHECK(v == 0.0);
  for (double v : trace.offset_s.values()) CHECK(v == 0.0);

}

TEST_CASE("tri-path block equals the raster Mamba plus residual when gates select the generic branch") {
  Rng rng(6);
  tri::TriPathConfig cfg{.blocks = 1, .d_state = 4, .groups = 4, .gate_kernel = 1};
  tri::TriPathBlock block(cfg, 8, 6, {}, rng);
  block.fuse().g2.conv.weight.mutable_value().fill(0.0);
  block.fuse().g2.conv.bias.mutable_value().fill(-1e4);
  auto f = nn::constant(rng.normal_tensor({2, 3, 4, 8}));
  auto c = nn::constant(rng.normal_tensor({2, 6}));
  nn::ParamList ps;
  block.collect(ps, "b");
  auto find = [&](const std::string& n) {
    for (auto& p : ps)
      if (p.name == n) return p.var;
    FAIL("missing " << n);
    return nn::Var();
  };
  tri::Agn agn;
  agn.groups = 4;
  agn.gamma.weight = find("b.agn.gamma.weight");
  agn.gamma.bias = find("b.agn.gamma.bias");
  agn.beta.weight = find("b.agn.beta.weight");
  agn.beta.bias = find("b.agn.beta.bias");
  const auto g = agn(f, c);
  const Tensor fg = nn::reshape(block.mamba_g()(nn::reshape(g, {24, 8})), {2, 3, 4, 8}).value();
  const Tensor y = block(f, f, f, c).value();
  for (int64_t i = 0; i < y.numel(); ++i) CHECK(std::abs(y[i] - (fg[i] + f.value()[i])) < 1e-12);
}

TEST_CASE("tri-path block gradients match finite differences") {
  Rng rng(7);
  tri::TriPathConfig cfg{.blocks = 1, .offset_hidden = 6, .d_state = 3, .groups = 4, .gate_kernel = 3};
  tri::TriPathBlock block(cfg, 8, 5, {}, rng);
  randomize_offsets(block.offsets_d(), rng);
  randomize_offsets(block.offsets_s(), rng);
  auto f = nn::parameter(rng.normal_tensor({2, 4, 4, 8}));
  auto fd = nn::parameter(rng.normal_tensor({2, 4, 4, 8}));
  auto fs = nn::parameter(rng.normal_tensor({2, 4, 4, 8}));
  auto c = nn::parameter(rng.normal_tensor({2, 5}));
  const Tensor w = rng.normal_tensor({2, 4, 4, 8});
  nn::ParamList params{{"f", f}, {"fd", fd}, {"fs", fs}, {"c", c}};
  block.collect(params, "b");
  auto rep = grad_check([&] { return nn::sum(nn::mul(block(f, fd, fs, c), nn::constant(w))); }, params, 1e-4, 60);
  INFO(rep.worst << " " << rep.rel_err);
  CHECK(rep.rel_err < 1e-4);
}

TEST_CASE("tri-path stack depth, determinism, and ablation matrix") {
  Rng rng(8);
  tri::TriPathConfig one{.blocks = 1, .d_state = 4, .groups = 4, .gate_kernel = 1};
  Rng r1(11), r2(11);
  tri::TriPathStack stack(one, 8, 4, {}, r1);
  tri::TriPathBlock block(one, 8, 4, {}, r2);
  auto f = nn::constant(rng.normal_tensor({2, 2, 4, 8}));
  auto fd = nn::constant(rng.normal_tensor({2, 2, 4, 8}));
  auto fs = nn::constant(rng.normal_tensor({2, 2, 4, 8}));
  auto c = nn::constant(rng.normal_tensor({1, 4}));
  CHECK(max_abs_diff(stack(f, fd, fs, c).value(), block(f, fd, fs, c).value()) == 0.0);

  tri::TriPathConfig four = one;
  four.blocks = 4;
  Rng r3(12), r4(12);
  tri::TriPathStack a(four, 8, 4, {}, r3), b(four, 8, 4, {}, r4);
  std::vector<tri::BlockTrace> traces;
  CHECK(max_abs_diff(a(f, fd, fs, c, &traces).value(), b(f, fd, fs, c).value()) == 0.0);
  CHECK(traces.size() == 4);

  for (const char* flags : {"", "DE", "SE", "DDM", "SDM", "AGA", "DDM,DE", "SDM,SE", "DDM,DE,SDM,SE"}) {
    const auto abl = sep::Ablation::disabled(flags);
    tri::TriPathStack s(four, 8, 4, abl, rng);
    auto fdv = abl.dynamic_extractor ? fd : nn::Var();
    auto fsv = abl.static_extractor ? fs : nn::Var();
    std::vector<tri::BlockTrace> tr;
    auto y = s(f, fdv, fsv, c, &tr);
    CHECK(y.shape() == f.shape());
    CHECK(tr[0].offset_d.empty() == !abl.dynamic_branch);
    CHECK(tr[0].offset_s.empty() == !abl.static_branch);
    nn::ParamList ps;
    s.collect(ps, "s");
    bool has_dynamic = false;
    for (auto& p : ps) has_dynamic = has_dynamic || p.name.find(".offset_d") != std::string::npos;
    CHECK(has_dynamic == abl.dynamic_branch);
  }
}

TEST_CASE("time-reversed lattice read along the time-reversed path gives the same sequence") {
  Rng rng(9);
  const tri::Lattice lat{4, 2, 3};
  auto f = nn::constant(rng.normal_tensor({4, 2, 3, 5}));
  Tensor p = tri::generic_path(lat);
  for (int64_t i = 0; i < lat.size(); ++i) {
    p[3 * i] += rng.uniform(0, 0.9) * (p[3 * i] < 3 ? 1 : 0);
    p[3 * i + 2] = std::min(2.0, p[3 * i + 2] + rng.uniform(0, 0.9));
  }
  Tensor q = p;
  for (int64_t i = 0; i < lat.size(); ++i) q[3 * i] = 3.0 - p[3 * i];
  const Tensor a = tri::sample_along_path(f, nn::constant(p)).value();
  const Tensor b = tri::sample_along_path(nn::reverse0(f), nn::constant(q)).value();
  CHECK(max_abs_diff(a, b) < 1e-14);
}

TEST_CASE("deformation heatmap averages |offset| over blocks") {
  const tri::Lattice lat{1, 1, 2};
  tri::BlockTrace a, b;
  a.offset_d = Tensor({2, 3}, std::vector<double>{0.3, -0.3, 0.0, 0.6, 0.0, 0.0});
  b.offset_d = Tensor({2, 3}, std::vector<double>{0.0, 0.0, 0.0, 0.0, -0.6, 0.0});
  const auto hm = tri::deform_heatmap({a, b}, lat, 2.0);
  REQUIRE(hm.dynamic.size() == 2);
  CHECK(hm.stat.empty());
  CHECK(hm.dynamic[0] == doctest::Approx(0.2));
  CHECK(hm.dynamic[1] == doctest::Approx(0.4));
}
