#include <cmath>

#include "doctest.h"
#include "gem/diffusion_wm.hpp"
#include "gradcheck.hpp"

using namespace gem;
using gem::testing::grad_check;

namespace {

wm::WorldModelConfig tiny_config() {
  wm::WorldModelConfig c;
  c.latent_h = 2;
  c.latent_w = 4;
  c.latent_channels = 4;
  c.history = 2;
  c.future = 2;
  c.separator = {.window = 3, .channels = 8, .gate_kernel = 1};
  c.tri_path = {.blocks = 2, .offset_hidden = 4, .d_state = 2, .groups = 4, .gate_kernel = 1};
  c.cond_dim = 8;
  c.time_embed_dim = 8;
  c.diffusion_steps = 100;
  c.sample_steps = 10;
  c.planner_hidden = 8;
  c.layout_size = 16;
  c.lr = 3e-3;
  return c;
}

synth::BEVLayout random_layout(Rng& rng, int64_t size) {
  synth::BEVLayout l;
  l.size = size;
  l.extent = 64;
  for (int64_t i = 0; i < size * size; ++i) l.grid.push_back(static_cast<uint8_t>(rng.uniform_int(0, 2)));
  return l;
}

wm::Window random_window(const wm::WorldModelConfig& c, Rng& rng) {
  wm::Window w;
  w.z_p = rng.normal_tensor({c.history, c.latent_h, c.latent_w, c.latent_channels});
  w.z_f = rng.normal_tensor({c.future, c.latent_h, c.latent_w, c.latent_channels});
  for (int64_t k = 0; k < c.history; ++k) w.past.push_back({1.5, 0.0, 0.1});
  for (int64_t k = 0; k < c.future; ++k) w.future.push_back({1.5, 0.0, 0.1});
  w.layout = random_layout(rng, c.layout_size);
  w.has_layout = true;
  return w;
}

}  // namespace

TEST_CASE("cosine schedule is strictly decreasing within (0, 1]") {
  const auto s = wm::NoiseSchedule::cosine(1000);
  CHECK(s.steps() == 1000);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(1) > 0.999);
  CHECK(s.alpha_bar(1000) < 1e-4);
  CHECK(s.alpha_bar(1000) > 0.0);
  double snr_prev = INFINITY;
  for (int64_t t = 1; t <= 1000; ++t) {
    CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
    const double snr = s.alpha_bar(t) / (1 - s.alpha_bar(t));
    CHECK(snr < snr_prev);
    snr_prev = snr;
  }
  CHECK_THROWS_AS(s.alpha_bar(1001), Error);
  CHECK_THROWS_AS(wm::NoiseSchedule::from_alpha_bar({1.0, 0.5, 0.6}), Error);
}

TEST_CASE("add_noise endpoints, range checks, and variance") {
  Rng rng(1);
  const Tensor z = rng.normal_tensor({3, 4});
  const Tensor e = rng.normal_tensor({3, 4});
  CHECK(max_abs_diff(wm::add_noise(z, 1.0, e), z) == 0.0);
  CHECK(max_abs_diff(wm::add_noise(z, 0.0, e), e) == 0.0);
  const auto s = wm::NoiseSchedule::cosine(50);
  CHECK_THROWS_AS(wm::add_noise(s, z, 0, e), Error);
  CHECK_THROWS_AS(wm::add_noise(s, z, 51, e), Error);
  CHECK_NOTHROW(wm::add_noise(s, z, 50, e));

  // Var(z_t) = 0.5 Var(z) + 0.5 at alpha_bar = 0.5.
  const int64_t n = 10000;
  const Tensor big = rng.normal_tensor({n}, 2.0);
  const Tensor eps = rng.normal_tensor({n});
  const Tensor zt = wm::add_noise(big, 0.5, eps);
  auto var = [](const Tensor& t) {
    double m = 0, v = 0;
    for (double x : t.values()) m += x;
    m /= static_cast<double>(t.numel());
    for (double x : t.values()) v += (x - m) * (x - m);
    return v / static_cast<double>(t.numel());
  };
  const double expect = 0.5 * var(big) + 0.5;
  CHECK(std::abs(var(zt) - expect) / expect < 0.05);
}

TEST_CASE("noise loss is the mean squared error") {
  auto eh = nn::constant(Tensor({2}, std::vector<double>{0.5, -1.0}));
  const Tensor e({2}, std::vector<double>{1.5, 1.0});
  CHECK(wm::noise_loss(eh, e).value()[0] == doctest::Approx((1.0 + 4.0) / 2.0).epsilon(1e-15));
}

TEST_CASE("timestep embedding and ego features") {
  const Tensor e0 = wm::timestep_embedding(0.0, 8);
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(e0[i] == 0.0);
    CHECK(e0[4 + i] == 1.0);
  }
  CHECK(max_abs_diff(wm::timestep_embedding(17, 8), wm::timestep_embedding(17, 8)) == 0.0);
  CHECK_THROWS_AS(wm::timestep_embedding(1, 7), Error);

  const wm::EgoTrack still(3, synth::EgoStatus{});
  const Tensor still_feats = wm::ego_features(still, still);
  for (double v : still_feats.values()) CHECK(v == 0.0);

  // Straight motion: the relative pose of the last history frame is zero and
  // future frames move forward by the accumulated distance.
  const wm::EgoTrack move(2, synth::EgoStatus{1.0, 0.0, 0.0});
  const Tensor f = wm::ego_features(move, move);
  CHECK(f.shape() == Shape{4, 6});
  CHECK(f.at({1, 3}) == 0.0);
  CHECK(f.at({3, 3}) == doctest::Approx(2.0 / 10.0));
  CHECK(f.at({0, 3}) == doctest::Approx(-1.0 / 10.0));
}

TEST_CASE("planner units round-trip and planner loss vanishes at the target") {
  const wm::EgoTrack tr{{1.5, 0.1, 0.05}, {1.4, -0.2, -0.1}};
  const auto back = wm::to_ego(wm::from_ego(tr));
  for (size_t k = 0; k < tr.size(); ++k) {
    CHECK(back[k].dx == doctest::Approx(tr[k].dx));
    CHECK(back[k].dy == doctest::Approx(tr[k].dy));
    CHECK(back[k].dyaw == doctest::Approx(tr[k].dyaw));
  }
  CHECK(wm::planner_loss(nn::constant(wm::from_ego(tr)), tr).value()[0] == 0.0);
}

TEST_CASE("condition encoder: determinism, layout sensitivity, and missing future ego") {
  const auto cfg = tiny_config();
  wm::WorldModel model(cfg, 3);
  Rng rng(2);
  const auto w = random_window(cfg, rng);
  const Tensor a = model.condition(w.past, w.future, 10, nullptr).value();
  CHECK(a.shape() == Shape{4, 8});
  CHECK(max_abs_diff(a, model.condition(w.past, w.future, 10, nullptr).value()) == 0.0);
  const Tensor b = model.condition(w.past, w.future, 10, &w.layout).value();
  CHECK(max_abs_diff(a, b) > 0.0);
  CHECK_THROWS_AS(model.condition(w.past, {}, 10, nullptr), Error);

  // With zero ego deltas and zero encoder biases the ego branch adds nothing.
  nn::ParamList ps;
  model.collect(ps);
  for (auto& p : ps)
    if (p.name == "wm.cond.past.bias" || p.name == "wm.cond.future.bias") p.var.mutable_value().fill(0.0);
  const wm::EgoTrack zero_p(2, synth::EgoStatus{}), zero_f(2, synth::EgoStatus{});
  const Tensor c0 = model.condition(zero_p, zero_f, 0, nullptr).value();
  for (int64_t r = 1; r < 4; ++r)
    for (int64_t k = 0; k < 8; ++k) CHECK(c0.at({r, k}) == c0.at({0, k}));
}

TEST_CASE("predict_noise shape, determinism, purity, and conditioning effect") {
  const auto cfg = tiny_config();
  wm::WorldModel model(cfg, 4);
  // The zero-initialized head would hide the conditioning path.
  nn::ParamList ps;
  model.collect(ps);
  Rng rng(3);
  for (auto& p : ps)
    if (p.name.rfind("wm.head", 0) == 0) p.var.mutable_value() = rng.normal_tensor(p.var.shape(), 0.3);
  const auto w = random_window(cfg, rng);
  const Tensor zp_before = w.z_p;
  auto c = model.condition(w.past, w.future, 30, nullptr);
  const Tensor e1 = model.predict_noise(w.z_p, nn::constant(w.z_f), c).value();
  CHECK(e1.shape() == w.z_f.shape());
  CHECK(max_abs_diff(e1, model.predict_noise(w.z_p, nn::constant(w.z_f), c).value()) == 0.0);
  CHECK(max_abs_diff(zp_before, w.z_p) == 0.0);
  const Tensor e2 = model.predict_noise(w.z_p, nn::constant(w.z_f), model.condition(w.past, w.future, 80, nullptr)).value();
  CHECK(max_abs_diff(e1, e2) > 1e-6);
  const Tensor short_history = rng.normal_tensor({cfg.history - 1, cfg.latent_h, cfg.latent_w, cfg.latent_channels});
  CHECK_THROWS_AS(model.predict_noise(short_history, nn::constant(w.z_f), c), Error);
  const Tensor wrong = rng.normal_tensor({cfg.future, cfg.latent_h, cfg.latent_w, 3});
  CHECK_THROWS_AS(model.predict_noise(w.z_p, nn::constant(wrong), c), Error);
}

TEST_CASE("sampler: single step is the clean estimate and seeds reproduce") {
  const auto cfg = tiny_config();
  wm::WorldModel model(cfg, 5);
  nn::ParamList ps;
  model.collect(ps);
  Rng rng(4);
  for (auto& p : ps)
    if (p.name.rfind("wm.head", 0) == 0) p.var.mutable_value() = rng.normal_tensor(p.var.shape(), 0.3);
  const auto w = random_window(cfg, rng);
  auto cond = [&](double t) { return model.condition(w.past, w.future, t, nullptr); };

  wm::WorldModel::SampleOptions one;
  one.steps = 1;
  one.seed = 9;
  const Tensor s1 = model.sample(w.z_p, cond, one);
  Rng noise(derive_seed(9, Stream::kSampler));
  const Tensor z = noise.normal_tensor(w.z_f.shape());
  const int64_t T = cfg.diffusion_steps;
  const Tensor eps = model.predict_noise(w.z_p, nn::constant(z), cond(T)).value();
  const double ab = model.schedule().alpha_bar(T);
  for (int64_t i = 0; i < z.numel(); ++i) {
    const double x0 = std::clamp((z[i] - std::sqrt(1 - ab) * eps[i]) / std::sqrt(ab), -cfg.x0_clip, cfg.x0_clip);
    CHECK(std::abs(s1[i] - x0) < 1e-12);
  }

  wm::WorldModel::SampleOptions many;
  many.seed = 11;
  CHECK(max_abs_diff(model.sample(w.z_p, cond, many), model.sample(w.z_p, cond, many)) == 0.0);
  many.seed = 12;
  CHECK(max_abs_diff(model.sample(w.z_p, cond, many), model.sample(w.z_p, cond, one)) > 0.0);
}

TEST_CASE("partial denoising from a small step beats sampling from pure noise") {
  const auto cfg = tiny_config();
  wm::WorldModel model(cfg, 6);
  Rng rng(5);
  const auto w = random_window(cfg, rng);
  auto cond = [&](double t) { return model.condition(w.past, w.future, t, nullptr); };
  const int64_t t0 = 5;
  wm::WorldModel::SampleOptions part;
  part.start_t = t0;
  part.start = wm::add_noise(model.schedule(), w.z_f, t0, rng.normal_tensor(w.z_f.shape()));
  part.steps = 5;
  const Tensor rec = model.sample(w.z_p, cond, part);
  wm::WorldModel::SampleOptions full;
  full.seed = 1;
  const Tensor gen = model.sample(w.z_p, cond, full);
  auto mae = [&](const Tensor& a) {
    double s = 0;
    for (int64_t i = 0; i < a.numel(); ++i) s += std::abs(a[i] - w.z_f[i]);
    return s / static_cast<double>(a.numel());
  };
  CHECK(mae(rec) < mae(gen));
  CHECK(mae(rec) < 0.2);
  part.start.reset();
  CHECK_THROWS_AS(model.sample(w.z_p, cond, part), Error);
}

TEST_CASE("planner gradients reach the world-model features") {
  const auto cfg = tiny_config();
  wm::WorldModel model(cfg, 7);
  Rng rng(6);
  const auto w = random_window(cfg, rng);
  nn::ParamList ps;
  model.collect(ps);
  nn::zero_grads(ps);
  nn::backward(wm::planner_loss(model.plan(w.past, w.z_p), w.future));
  double sep_norm = 0;
  for (auto& p : ps)
    if (p.name.rfind("wm.sep", 0) == 0 && !p.var.grad().empty())
      for (double g : p.var.grad().values()) sep_norm += g * g;
  CHECK(sep_norm > 0.0);

  auto cfg2 = cfg;
  cfg2.planner = false;
  wm::WorldModel no_plan(cfg2, 7);
  CHECK_THROWS_AS(no_plan.plan(w.past, w.z_p), Error);
}

TEST_CASE("planner and conditioning heads pass finite-difference checks") {
  auto cfg = tiny_config();
  cfg.tri_path.blocks = 1;
  wm::WorldModel model(cfg, 8);
  Rng rng(7);
  const auto w = random_window(cfg, rng);
  nn::ParamList ps;
  model.collect(ps);
  nn::ParamList subset;
  for (auto& p : ps)
    if (p.name.rfind("wm.planner", 0) == 0 || p.name.rfind("wm.cond", 0) == 0 || p.name.rfind("wm.head", 0) == 0)
      subset.push_back(p);
  for (auto& p : subset)
    if (p.name.rfind("wm.head", 0) == 0) p.var.mutable_value() = rng.normal_tensor(p.var.shape(), 0.3);
  const Tensor eps = rng.normal_tensor(w.z_f.shape());
  auto loss = [&] {
    auto c = model.condition(w.past, w.future, 40, &w.layout);
    auto d = wm::noise_loss(model.predict_noise(w.z_p, nn::constant(w.z_f), c), eps);
    return nn::add(d, wm::planner_loss(model.plan(w.past, w.z_p), w.future));
  };
  auto rep = grad_check(loss, subset, 1e-5, 40);
  INFO(rep.worst << " " << rep.rel_err);
  CHECK(rep.rel_err < 1e-4);
}

TEST_CASE("frozen-batch training reduces the noise loss") {
  const auto cfg = tiny_config();
  wm::WorldModel model(cfg, 9);
  Rng rng(8);
  std::vector<wm::Window> ws{random_window(cfg, rng), random_window(cfg, rng)};
  std::vector<const wm::Window*> batch{&ws[0], &ws[1]};
  wm::WorldModelTrainer tr(model, {});
  const double before = tr.evaluate(batch, 42);
  double first = 0, last = 0;
  for (int i = 0; i < 150; ++i) {
    const auto log = tr.step(batch, 42);
    if (i == 0) first = log.diffusion;
    last = log.diffusion;
  }
  CHECK(first == doctest::Approx(before));
  CHECK(last < 0.5 * first);
  CHECK(tr.evaluate(batch, 42) == doctest::Approx(last).epsilon(0.5));
}

TEST_CASE("windows cover consecutive frames and carry the last future layout") {
  const auto cfg = tiny_config();
  Rng rng(9);
  wm::SequenceLatents s;
  for (int k = 0; k < 6; ++k) {
    s.latents.push_back(Tensor({2, 4, 4}, static_cast<double>(k)));
    s.ego.push_back({static_cast<double>(k), 0, 0});
    s.layouts.push_back(random_layout(rng, 16));
  }
  const auto ws = wm::make_windows({s}, cfg, 2.0);
  REQUIRE(ws.size() == 3);
  CHECK(ws[1].z_p[0] == 0.5);
  CHECK(ws[1].z_f[ws[1].z_f.numel() - 1] == 2.0);
  CHECK(ws[1].past[0].dx == 1.0);
  CHECK(ws[1].future[1].dx == 4.0);
  CHECK(ws[1].layout.grid == s.layouts[4].grid);
  CHECK(wm::make_windows({s}, cfg, 1.0, 2).size() == 2);
}

namespace {

struct RolloutFixture {
  geom::SensorConfig sensor{.n_lasers = 8, .n_azimuth = 64};
  tok::Tokenizer tokenizer;
  wm::WorldModel model;
  std::vector<geom::RangeImage> history;
  wm::EgoTrack past;

  RolloutFixture() {
    tok::TokenizerConfig tc;
    tc.codebook_size = 16;
    tc.latent_channels = 4;
    tc.down_v = 4;
    tc.down_h = 16;
    tc.width = 8;
    tc.d_state = 2;
    tc.blocks = 2;
    tc.full_res_mamba = false;
    tokenizer = tok::Tokenizer(tc, sensor, 1);
    auto cfg = tiny_config();
    cfg.latent_h = 2;
    cfg.latent_w = 4;
    model = wm::WorldModel(cfg, 2);
    Rng rng(3);
    for (int k = 0; k < 2; ++k) {
      geom::RangeImage img(sensor.n_lasers, sensor.n_azimuth, sensor.r_max + 1.0);
      for (size_t i = 0; i < img.ranges.size(); ++i) {
        img.ranges[i] = rng.uniform(2.0, 30.0);
        img.valid[i] = 1;
      }
      history.push_back(img);
      past.push_back({1.0, 0.0, 0.0});
    }
  }
};

}  // namespace

TEST_CASE("rollout: mode contracts and autoregressive continuation") {
  RolloutFixture fx;
  const wm::EgoTrack future(7, synth::EgoStatus{1.0, 0.0, 0.05});
  wm::RolloutOptions opt;
  opt.sample_steps = 3;
  opt.steps = 2;
  auto one = wm::rollout(fx.tokenizer, fx.model, fx.history, fx.past, &future, opt);
  CHECK(one.clouds.size() == 2);
  CHECK(one.ranges.size() == 2);
  CHECK(one.ego[1].dyaw == 0.05);

  opt.steps = 5;
  auto longer = wm::rollout(fx.tokenizer, fx.model, fx.history, fx.past, &future, opt);
  CHECK(longer.latents.size() == 5);
  // The first round is unaffected by the requested length.
  CHECK(max_abs_diff(longer.latents[0], one.latents[0]) == 0.0);
  auto again = wm::rollout(fx.tokenizer, fx.model, fx.history, fx.past, &future, opt);
  CHECK(max_abs_diff(again.latents[4], longer.latents[4]) == 0.0);

  const wm::EgoTrack short_future(3, synth::EgoStatus{});
  CHECK_THROWS_AS(wm::rollout(fx.tokenizer, fx.model, fx.history, fx.past, &short_future, opt), Error);
  CHECK_THROWS_AS(wm::rollout(fx.tokenizer, fx.model, fx.history, fx.past, nullptr, opt), Error);

  opt.mode = wm::RolloutMode::kPlanner;
  CHECK_THROWS_AS(wm::rollout(fx.tokenizer, fx.model, fx.history, fx.past, &future, opt), Error);
  auto planned = wm::rollout(fx.tokenizer, fx.model, fx.history, fx.past, nullptr, opt);
  CHECK(planned.clouds.size() == 5);
  CHECK(planned.ego.size() == 5);
  CHECK(wm::parse_rollout_mode("planner") == wm::RolloutMode::kPlanner);
  CHECK_THROWS_AS(wm::parse_rollout_mode("oracle"), Error);
}

TEST_CASE("anchored rollout starts from the last history latent") {
  RolloutFixture fx;
  const wm::EgoTrack future(2, synth::EgoStatus{1.0, 0.0, 0.0});
  wm::RolloutOptions opt;
  opt.steps = 2;
  opt.sample_steps = 1;
  opt.snap_to_codebook = false;
  auto cfg = fx.model.config();
  cfg.start_fraction = 0.01;  // one step above clean
  const wm::WorldModel anchored(cfg, 2);
  const Tensor last = fx.tokenizer.latent(fx.history.back());
  auto gap = [&](const Tensor& z) {
    double s = 0;
    for (int64_t i = 0; i < z.numel(); ++i) s += std::abs(z[i] - last[i]);
    return s / static_cast<double>(z.numel());
  };
  const auto near = wm::rollout(fx.tokenizer, anchored, fx.history, fx.past, &future, opt);
  const auto far = wm::rollout(fx.tokenizer, fx.model, fx.history, fx.past, &future, opt);
  // With the zero-initialized head the clean estimate is the start latent
  // rescaled, so an anchored start stays next to the last frame.
  CHECK(gap(near.latents[0]) < 0.1 * gap(far.latents[0]));
  const auto again = wm::rollout(fx.tokenizer, anchored, fx.history, fx.past, &future, opt);
  CHECK(max_abs_diff(again.latents[1], near.latents[1]) == 0.0);
  cfg.start_fraction = 0.0;
  CHECK_THROWS_AS(wm::WorldModel(cfg, 2), Error);
}
