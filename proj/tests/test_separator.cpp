#include <cmath>

#include "doctest.h"
#include "gem/separator.hpp"
#include "gradcheck.hpp"

using namespace gem;
using gem::testing::grad_check;

namespace {

Tensor frame_filled(int64_t T, int64_t h, int64_t w, int64_t C, const std::vector<double>& per_frame) {
  Tensor z({T, h, w, C});
  const int64_t F = h * w * C;
  for (int64_t t = 0; t < T; ++t)
    for (int64_t i = 0; i < F; ++i) z[t * F + i] = per_frame[static_cast<size_t>(t)];
  return z;
}

nn::Var full_gate(const Shape& s, double v) { return nn::constant(Tensor(s, v)); }

}  // namespace

TEST_CASE("dynamic pattern is the frame difference") {
  Rng rng(1);
  const Tensor frame = rng.normal_tensor({1, 2, 3, 2});
  Tensor constant_seq({4, 2, 3, 2});
  for (int64_t i = 0; i < constant_seq.numel(); ++i) constant_seq[i] = frame[i % frame.numel()];
  const Tensor d = sep::dynamic_pattern(nn::constant(constant_seq)).value();
  for (double v : d.values()) CHECK(v == 0.0);

  const Tensor single = sep::dynamic_pattern(nn::constant(rng.normal_tensor({1, 2, 2, 3}))).value();
  for (double v : single.values()) CHECK(v == 0.0);

  const Tensor ramp = sep::dynamic_pattern(nn::constant(frame_filled(4, 2, 2, 1, {0, 1, 2, 3}))).value();
  for (int64_t i = 0; i < ramp.numel(); ++i) CHECK(ramp[i] == (i < 4 ? 0.0 : 1.0));
}

TEST_CASE("static pattern averages over the realized window") {
  const std::vector<double> abc{2.0, 5.0, 11.0};
  const Tensor z = frame_filled(3, 1, 2, 1, abc);
  const Tensor s = sep::static_pattern(nn::constant(z), 3).value();
  const double expect[3] = {(2.0 + 5.0) / 2, (2.0 + 5.0 + 11.0) / 3, (5.0 + 11.0) / 2};
  for (int64_t t = 0; t < 3; ++t)
    for (int64_t i = 0; i < 2; ++i) CHECK(s[t * 2 + i] == expect[t]);

  Rng rng(2);
  const Tensor r = rng.normal_tensor({4, 2, 3, 2});
  const Tensor id = sep::static_pattern(nn::constant(r), 1).value();
  CHECK(max_abs_diff(id, r) == 0.0);

  const Tensor wide = sep::static_pattern(nn::constant(r), 9).value();
  const int64_t F = 12;
  for (int64_t i = 0; i < F; ++i) {
    double m = 0;
    for (int64_t t = 0; t < 4; ++t) m += r[t * F + i];
    m /= 4;
    for (int64_t t = 0; t < 4; ++t) CHECK(std::abs(wide[t * F + i] - m) < 1e-12);
  }
  CHECK_THROWS_AS(sep::static_pattern(nn::constant(r), 0), Error);
}

TEST_CASE("static pattern is shift-equivariant away from the boundary") {
  Rng rng(3);
  const int64_t T = 12, F = 6, n = 5;
  const Tensor z = rng.normal_tensor({T, 1, 3, 2});
  Tensor shifted({T, 1, 3, 2});
  for (int64_t t = 0; t + 1 < T; ++t)
    for (int64_t i = 0; i < F; ++i) shifted[t * F + i] = z[(t + 1) * F + i];
  const Tensor a = sep::static_pattern(nn::constant(z), n).value();
  const Tensor b = sep::static_pattern(nn::constant(shifted), n).value();
  for (int64_t t = n / 2; t + 1 + n / 2 < T - 1; ++t)
    for (int64_t i = 0; i < F; ++i) CHECK(std::abs(b[t * F + i] - a[(t + 1) * F + i]) < 1e-12);
}

TEST_CASE("pattern operators pass finite-difference checks") {
  Rng rng(4);
  auto z = nn::parameter(rng.normal_tensor({5, 2, 2, 3}));
  const Tensor w = rng.normal_tensor({5, 2, 2, 3});
  auto rep = grad_check(
      [&] {
        return nn::sum(nn::mul(nn::add(sep::dynamic_pattern(z), sep::static_pattern(z, 3)), nn::constant(w)));
      },
      {{"z", z}});
  CHECK(rep.rel_err < 1e-8);
}

TEST_CASE("gated fusion closed forms") {
  Rng rng(5);
  const Shape s{2, 2, 3, 4};
  auto f = nn::constant(rng.normal_tensor(s));
  auto fd = nn::constant(rng.normal_tensor(s));
  auto fs = nn::constant(rng.normal_tensor(s));

  const Tensor sat = sep::fuse_with_gates(f, fd, fs, full_gate(s, 0.0), full_gate(s, 1.0)).value();
  CHECK(max_abs_diff(sat, fd.value()) < 1e-15);

  const Tensor half = sep::fuse_with_gates(f, fd, fs, full_gate(s, 0.5), full_gate(s, 0.5)).value();
  for (int64_t i = 0; i < half.numel(); ++i)
    CHECK(std::abs(half[i] - (0.5 * f.value()[i] + 0.25 * fd.value()[i] + 0.25 * fs.value()[i])) < 1e-14);

  // Constant gates are what the non-adaptive fusion uses.
  sep::GatedFuse fixed(4, 3, false, rng);
  CHECK(max_abs_diff(fixed(f, fd, fs).value(), half) < 1e-14);

  sep::GatedFuse learned(4, 3, true, rng);
  const Tensor fixed_point = learned(f, f, f).value();
  CHECK(max_abs_diff(fixed_point, f.value()) < 1e-12);
  const Tensor g1 = nn::constant(rng.uniform_tensor(s, 0, 1)).value();
  CHECK(max_abs_diff(sep::fuse_with_gates(f, f, f, nn::constant(g1), nn::constant(g1)).value(), f.value()) < 1e-12);

  CHECK(max_abs_diff(learned(f, nn::Var(), nn::Var()).value(), f.value()) == 0.0);
}

TEST_CASE("gated fusion stays between F and the side feature") {
  Rng rng(6);
  const Shape s{3, 2, 4, 4};
  sep::GatedFuse fuse(4, 3, true, rng);
  for (int rep = 0; rep < 5; ++rep) {
    auto f = nn::constant(rng.normal_tensor(s, 3.0));
    auto fd = nn::constant(rng.normal_tensor(s, 3.0));
    auto fs = nn::constant(rng.normal_tensor(s, 3.0));
    const Tensor g1 = fuse.g1(nn::concat_last({fd, fs})).value();
    const Tensor g2_in = sep::fuse_with_gates(fd, fd, fs, nn::constant(g1), full_gate(s, 1.0)).value();
    const Tensor out = fuse(f, fd, fs).value();
    for (int64_t i = 0; i < out.numel(); ++i) {
      CHECK(g1[i] >= 0.0);
      CHECK(g1[i] <= 1.0);
      const double lo = std::min(f.value()[i], g2_in[i]), hi = std::max(f.value()[i], g2_in[i]);
      CHECK(out[i] >= lo - 1e-12);
      CHECK(out[i] <= hi + 1e-12);
    }
  }
}

TEST_CASE("separator shapes, zero weights, and ablations") {
  Rng rng(7);
  sep::SeparatorConfig cfg{.window = 3, .channels = 6, .gate_kernel = 1};
  sep::Separator full(cfg, 4, {}, rng);
  auto z = nn::constant(rng.normal_tensor({3, 2, 4, 4}));
  auto feats = full(z);
  for (const auto* v : {&feats.f, &feats.f_d, &feats.f_s, &feats.f_g}) CHECK(v->shape() == Shape{3, 2, 4, 6});

  sep::Extractor ex(4, 6, rng);
  ex.zero_init();
  const Tensor zeros = ex(z).value();
  for (double v : zeros.values()) CHECK(v == 0.0);

  sep::Separator no_de(cfg, 4, sep::Ablation::disabled("DE"), rng);
  auto f2 = no_de(z);
  CHECK_FALSE(f2.f_d.defined());
  CHECK(f2.f_s.defined());
  sep::Separator bare(cfg, 4, sep::Ablation::disabled("de, se"), rng);
  auto f3 = bare(z);
  CHECK(max_abs_diff(f3.f_g.value(), f3.f.value()) == 0.0);

  nn::ParamList a, b;
  full.collect(a, "sep");
  bare.collect(b, "sep");
  CHECK(a.size() > b.size());
  CHECK_THROWS_AS(sep::Ablation::disabled("XYZ"), Error);
  CHECK(sep::Ablation::disabled("DDM,AGA").describe() == "DDM,AGA");
  CHECK(sep::Ablation{}.describe() == "full");
}

TEST_CASE("separator gradients match finite differences") {
  Rng rng(8);
  sep::SeparatorConfig cfg{.window = 3, .channels = 3, .gate_kernel = 3};
  sep::Separator model(cfg, 2, {}, rng);
  auto z = nn::parameter(rng.normal_tensor({3, 2, 3, 2}));
  const Tensor w = rng.normal_tensor({3, 2, 3, 3});
  nn::ParamList params{{"z", z}};
  model.collect(params, "sep");
  auto rep = grad_check([&] { return nn::sum(nn::mul(model(z).f_g, nn::constant(w))); }, params, 1e-5, 200);
  INFO(rep.worst << " " << rep.rel_err);
  CHECK(rep.rel_err < 1e-4);
}
