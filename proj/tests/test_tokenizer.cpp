#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "gem/synth_world.hpp"
#include "gem/tokenizer.hpp"
#include "gradcheck.hpp"

using namespace gem;
using gem::testing::grad_check;

namespace {

geom::SensorConfig small_sensor() { return {.n_lasers = 8, .n_azimuth = 64}; }

tok::TokenizerConfig small_config() {
  tok::TokenizerConfig c;
  c.codebook_size = 16;
  c.latent_channels = 4;
  c.down_v = 4;
  c.down_h = 16;
  c.width = 8;
  c.d_state = 2;
  c.blocks = 2;
  c.full_res_mamba = false;
  c.adv_weight = 0.0;
  c.lr = 3e-3;
  return c;
}

std::vector<geom::RangeImage> small_sweeps(int64_t n, uint64_t seed) {
  synth::SceneSpec spec;
  spec.sensor = small_sensor();
  spec.frames = std::max<int64_t>(n, 2);
  spec.seed = seed;
  std::vector<geom::RangeImage> out;
  for (auto& f : synth::generate_sequence(spec)) out.push_back(f.range);
  out.resize(static_cast<size_t>(n));
  return out;
}

// Brute-force nearest codeword with first-index tie breaking.
int64_t nearest_oracle(const Tensor& z, int64_t row, const Tensor& cb) {
  const int64_t K = cb.shape()[0], C = cb.shape()[1];
  int64_t best = 0;
  double best_d = INFINITY;
  for (int64_t k = 0; k < K; ++k) {
    double d = 0;
    for (int64_t c = 0; c < C; ++c) {
      const double e = z[row * C + c] - cb[k * C + c];
      d += e * e;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("tokenizer shapes and determinism") {
  const auto sensor = small_sensor();
  tok::Tokenizer a(small_config(), sensor, 5), b(small_config(), sensor, 5);
  const auto sweeps = small_sweeps(1, 3);
  const Tensor x = tok::normalized_input(sweeps[0], sensor);
  CHECK(x.shape() == Shape{8, 64, 1});
  const auto z = a.encode(nn::constant(x));
  CHECK(z.shape() == Shape{2, 4, 4});
  CHECK(max_abs_diff(z.value(), b.encode(nn::constant(x)).value()) == 0.0);
  const auto d = a.decode(a.quantize(z).z_q);
  CHECK(d.range.shape() == Shape{8, 64, 1});
  CHECK(d.valid_logit.shape() == Shape{8, 64, 1});
  const auto img = a.reconstruct(sweeps[0]);
  CHECK(img.height == 8);
  CHECK(img.width == 64);

  auto bad = small_config();
  bad.down_h = 3;
  CHECK_THROWS_AS(bad.validate(sensor), Error);
  bad.down_h = 128;
  CHECK_THROWS_AS(bad.validate(sensor), Error);
}

TEST_CASE("nearest-code assignment matches brute force") {
  Rng rng(11);
  const Tensor cb = rng.normal_tensor({32, 5});
  const Tensor z = rng.normal_tensor({10, 10, 10, 5});
  const auto idx = tok::nearest_codes(z, cb);
  REQUIRE(idx.size() == 1000);
  for (int64_t r = 0; r < 1000; ++r) CHECK(idx[static_cast<size_t>(r)] == nearest_oracle(z, r, cb));

  // Equidistant codewords resolve to the lower index.
  const Tensor tie_cb({3, 2}, {1.0, 0.0, -1.0, 0.0, 0.0, 5.0});
  const Tensor origin({1, 2}, {0.0, 0.0});
  CHECK(tok::nearest_codes(origin, tie_cb)[0] == 0);
  const Tensor dup_cb({2, 2}, {0.3, 0.3, 0.3, 0.3});
  CHECK(tok::nearest_codes(origin, dup_cb)[0] == 0);
}

TEST_CASE("quantization is idempotent and passes gradients straight through") {
  const auto sensor = small_sensor();
  tok::Tokenizer model(small_config(), sensor, 7);
  Rng rng(12);
  auto z = nn::parameter(rng.normal_tensor({2, 4, 4}));
  const auto q = model.quantize(z);
  const Tensor& cb = model.codebook().value();
  for (int64_t r = 0; r < 8; ++r)
    for (int64_t c = 0; c < 4; ++c) CHECK(q.z_q.value()[r * 4 + c] == cb[q.indices[static_cast<size_t>(r)] * 4 + c]);
  const auto again = model.quantize(nn::constant(q.z_q.value()));
  CHECK(again.indices == q.indices);
  CHECK(max_abs_diff(again.z_q.value(), q.z_q.value()) == 0.0);

  const Tensor w = rng.normal_tensor({2, 4, 4});
  nn::backward(nn::sum(nn::mul(q.z_q, nn::constant(w))));
  CHECK(max_abs_diff(z.grad(), w) == 0.0);
}

TEST_CASE("vq loss closed form") {
  const Tensor target({2, 2, 1}, {0.1, 0.2, 0.3, 0.4});
  const Tensor mask({2, 2, 1}, {1.0, 0.0, 1.0, 1.0});
  auto pred = nn::parameter(Tensor({2, 2, 1}, {0.2, 9.0, 0.1, 0.4}));
  auto z = nn::parameter(Tensor({1, 1, 2}, {1.0, 2.0}));
  auto codes = nn::parameter(Tensor({1, 1, 2}, {0.0, 4.0}));
  const auto l = tok::vq_loss(target, mask, pred, z, codes, 0.25);
  CHECK(l.recon == doctest::Approx((0.1 + 0.2 + 0.0) / 3.0).epsilon(1e-14));
  CHECK(l.codebook == doctest::Approx(0.25 * (1.0 + 4.0) / 2.0).epsilon(1e-14));
  CHECK(l.commit == doctest::Approx((1.0 + 4.0) / 2.0).epsilon(1e-14));
  CHECK(l.total.value()[0] == doctest::Approx(l.recon + l.codebook + l.commit).epsilon(1e-14));

  nn::backward(l.total);
  // Stop-gradients split the two squared terms: codes see only beta, z only the commitment.
  CHECK(z.grad()[0] == doctest::Approx(1.0));
  CHECK(z.grad()[1] == doctest::Approx(-2.0));
  CHECK(codes.grad()[0] == doctest::Approx(-0.25));
  CHECK(codes.grad()[1] == doctest::Approx(0.5));
  CHECK(pred.grad()[1] == 0.0);
}

TEST_CASE("adversarial losses at chance and their gradients") {
  auto half = nn::parameter(Tensor({2, 2, 1}, 0.5));
  const auto l = tok::adv_losses(half, half, half);
  CHECK(l.d_loss.value()[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-14));
  CHECK(l.g_loss.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-14));

  Rng rng(13);
  auto real = nn::parameter(rng.uniform_tensor({3, 3, 1}, 0.1, 0.9));
  auto fake = nn::parameter(rng.uniform_tensor({3, 3, 1}, 0.1, 0.9));
  auto rep = grad_check(
      [&] {
        const auto a = tok::adv_losses(real, fake, fake);
        return nn::add(a.d_loss, a.g_loss);
      },
      {{"real", real}, {"fake", fake}});
  CHECK(rep.rel_err < 1e-8);
}

TEST_CASE("tokenizer gradients match finite differences") {
  const auto sensor = small_sensor();
  auto cfg = small_config();
  cfg.blocks = 1;
  cfg.down_v = 2;
  cfg.down_h = 16;
  tok::Tokenizer model(cfg, sensor, 9);
  const auto sweeps = small_sweeps(1, 4);
  const Tensor x = tok::normalized_input(sweeps[0], sensor);
  const Tensor mask = tok::valid_mask(sweeps[0]);
  nn::ParamList all, enc, dec;
  model.collect(all);
  for (const auto& p : all) {
    const bool decoder = p.name.rfind("tok.dec", 0) == 0 || p.name.rfind("tok.head", 0) == 0;
    if (decoder) dec.push_back(p);
    else if (p.name != "tok.codebook") enc.push_back(p);
  }
  REQUIRE_FALSE(dec.empty());
  REQUIRE_FALSE(enc.empty());

  // The quantizer is piecewise constant, so the decoder is checked on the full
  // loss and the encoder on its own output.
  auto rep = grad_check(
      [&] {
        const auto z = model.encode(nn::constant(x));
        const auto q = model.quantize(z);
        const auto d = model.decode(q.z_q);
        return tok::vq_loss(x, mask, d.range, z, q.codes, cfg.beta).total;
      },
      dec, 1e-5, 20);
  INFO(rep.worst << " " << rep.rel_err);
  CHECK(rep.rel_err < 1e-4);

  Rng rng(15);
  const Tensor w = rng.normal_tensor({4, 4, 4});
  auto enc_rep = grad_check([&] { return nn::sum(nn::mul(model.encode(nn::constant(x)), nn::constant(w))); }, enc,
                            1e-5, 20);
  INFO(enc_rep.worst << " " << enc_rep.rel_err);
  CHECK(enc_rep.rel_err < 1e-4);
}

TEST_CASE("discriminator step lowers its loss on a fixed pair") {
  const auto sweeps = small_sweeps(2, 5);
  const auto sensor = small_sensor();
  tok::Discriminator disc(4, 3);
  nn::ParamList params;
  disc.collect(params);
  nn::Adam opt(params, {.lr = 1e-2});
  const Tensor real = tok::normalized_input(sweeps[0], sensor);
  Rng rng(14);
  const Tensor fake = rng.uniform_tensor(real.shape(), 0.0, 1.0);
  auto d_loss = [&] {
    return tok::adv_losses(disc(nn::constant(real)), disc(nn::constant(fake)), disc(nn::constant(fake))).d_loss;
  };
  const double before = d_loss().value()[0];
  for (int i = 0; i < 20; ++i) {
    opt.zero_grad();
    nn::backward(d_loss());
    opt.step();
  }
  CHECK(d_loss().value()[0] < before);
}

TEST_CASE("short tokenizer training reduces reconstruction error") {
  const auto sensor = small_sensor();
  auto cfg = small_config();
  cfg.restart_after = 20;
  tok::Tokenizer model(cfg, sensor, 10);
  tok::Discriminator disc(4, 11);
  const auto data = small_sweeps(6, 6);
  const auto before = tok::evaluate_reconstruction(model, data);
  tok::TrainOptions opt;
  opt.steps = 120;
  opt.log_every = 0;
  tok::TokenizerTrainer tr(model, disc, opt);
  const auto res = tr.run(data);
  CHECK(tr.steps_done() == 120);
  const auto after = tok::evaluate_reconstruction(model, data);
  CHECK(after.mae < 0.7 * before.mae);
  CHECK(after.usage > 0.0);
  CHECK(after.usage <= 1.0);
  const auto codes_seen = [&] {
    std::set<int64_t> s;
    for (const auto& img : data) {
      const Tensor z = model.latent(img);
      for (auto i : tok::nearest_codes(z, model.codebook().value())) s.insert(i);
    }
    return static_cast<double>(s.size()) / static_cast<double>(cfg.codebook_size);
  }();
  CHECK(after.usage == doctest::Approx(codes_seen));
}
