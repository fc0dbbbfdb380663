#include "gem/diffusion_wm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace gem::wm {

using nn::Var;

namespace {

constexpr int64_t kEgoFeatures = 6;
// Feature scales: delta (dx, dy, dyaw), relative pose (x, y, yaw).
constexpr double kEgoScale[kEgoFeatures] = {2.0, 2.0, 0.2, 10.0, 10.0, 1.0};

void require_finite(const Tensor& t, const char* what) {
  for (double v : t.values())
    if (!std::isfinite(v)) throw Error(std::string(what) + ": non-finite value");
}

Tensor frame_of(const Tensor& seq, int64_t k) {
  const int64_t F = seq.numel() / seq.dim(0);
  Shape s(seq.shape().begin() + 1, seq.shape().end());
  Tensor out(s);
  std::copy_n(seq.data() + k * F, F, out.data());
  return out;
}

Tensor snap(const Tensor& z, const tok::Tokenizer& tokenizer) {
  const int64_t C = z.dim(z.rank() - 1);
  const Tensor flat = z.reshaped({z.numel() / C, C});
  const Tensor& book = tokenizer.codebook().value();
  const auto idx = tok::nearest_codes(flat, book);
  Tensor out(z.shape());
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(book.data() + idx[i] * C, C, out.data() + static_cast<int64_t>(i) * C);
  return out;
}

}  // namespace

NoiseSchedule NoiseSchedule::cosine(int64_t steps, double offset) {
  if (steps < 1) throw Error("noise schedule: steps must be positive");
  auto f = [&](double t) {
    const double v = std::cos((t / static_cast<double>(steps) + offset) / (1.0 + offset) * std::numbers::pi / 2);
    return v * v;
  };
  std::vector<double> ab(static_cast<size_t>(steps + 1));
  ab[0] = 1.0;
  for (int64_t t = 1; t <= steps; ++t) {
    const double beta = std::min(1.0 - f(static_cast<double>(t)) / f(static_cast<double>(t - 1)), 0.999);
    ab[static_cast<size_t>(t)] = ab[static_cast<size_t>(t - 1)] * (1.0 - beta);
  }
  return from_alpha_bar(std::move(ab));
}

NoiseSchedule NoiseSchedule::from_alpha_bar(std::vector<double> alpha_bar) {
  if (alpha_bar.size() < 2) throw Error("noise schedule: need at least one step");
  for (size_t i = 0; i < alpha_bar.size(); ++i) {
    if (!(alpha_bar[i] > 0.0 && alpha_bar[i] <= 1.0)) throw Error("noise schedule: alpha_bar outside (0, 1]");
    if (i > 0 && !(alpha_bar[i] < alpha_bar[i - 1])) throw Error("noise schedule: alpha_bar must decrease");
  }
  NoiseSchedule s;
  s.alpha_bar_ = std::move(alpha_bar);
  return s;
}

double NoiseSchedule::alpha_bar(int64_t t) const {
  if (t < 0 || t > steps()) throw Error("noise schedule: step " + std::to_string(t) + " outside [0, T]");
  return alpha_bar_[static_cast<size_t>(t)];
}

Tensor add_noise(const Tensor& z, double alpha_bar, const Tensor& eps) {
  if (!z.same_shape(eps)) throw Error("add_noise: noise shape differs from latent shape");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw Error("add_noise: alpha_bar outside [0, 1]");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  Tensor out(z.shape());
  for (int64_t i = 0; i < z.numel(); ++i) out[i] = a * z[i] + b * eps[i];
  return out;
}

Tensor add_noise(const NoiseSchedule& s, const Tensor& z, int64_t t, const Tensor& eps) {
  if (t < 1 || t > s.steps()) throw Error("add_noise: step " + std::to_string(t) + " outside [1, T]");
  return add_noise(z, s.alpha_bar(t), eps);
}

Var noise_loss(const Var& eps_hat, const Tensor& eps) { return nn::mse(eps_hat, nn::constant(eps)); }

Tensor timestep_embedding(double t, int64_t dim) {
  if (dim < 2 || dim % 2) throw Error("timestep_embedding: dim must be even and >= 2");
  const int64_t half = dim / 2;
  Tensor e({1, dim});
  for (int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(t * freq);
    e[half + i] = std::cos(t * freq);
  }
  return e;
}

Tensor ego_features(const EgoTrack& past, const EgoTrack& future) {
  if (past.empty()) throw Error("ego_features: empty history");
  EgoTrack all = past;
  all.insert(all.end(), future.begin(), future.end());
  std::vector<synth::Pose2> poses(all.size());
  for (size_t k = 1; k < all.size(); ++k) poses[k] = synth::compose(poses[k - 1], all[k]);
  const synth::Pose2 ref = poses[past.size() - 1];
  Tensor f({static_cast<int64_t>(all.size()), kEgoFeatures});
  for (size_t k = 0; k < all.size(); ++k) {
    const synth::EgoStatus rel = synth::relative_motion(ref, poses[k]);
    const double v[kEgoFeatures] = {all[k].dx, all[k].dy, all[k].dyaw, rel.dx, rel.dy, rel.dyaw};
    for (int64_t j = 0; j < kEgoFeatures; ++j)
      f[static_cast<int64_t>(k) * kEgoFeatures + j] = v[j] / kEgoScale[j];
  }
  return f;
}

Tensor planner_input(const EgoTrack& past) {
  Tensor x({1, 3 * static_cast<int64_t>(past.size())});
  for (size_t k = 0; k < past.size(); ++k) {
    x[3 * static_cast<int64_t>(k)] = past[k].dx / kPlanScale[0];
    x[3 * static_cast<int64_t>(k) + 1] = past[k].dy / kPlanScale[1];
    x[3 * static_cast<int64_t>(k) + 2] = past[k].dyaw / kPlanScale[2];
  }
  return x;
}

Tensor layout_tensor(const synth::BEVLayout& layout) {
  if (layout.size < 1 || static_cast<int64_t>(layout.grid.size()) != layout.size * layout.size)
    throw Error("layout: grid size mismatch");
  Tensor t({layout.size, layout.size, 1});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = 0.5 * static_cast<double>(layout.grid[static_cast<size_t>(i)]);
  return t;
}

void WorldModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("world model config: " + m); };
  if (latent_h < 1 || latent_w < 1 || latent_channels < 1) fail("latent dimensions must be positive");
  if (history < 1 || future < 1) fail("history and future must be >= 1");
  separator.validate();
  tri_path.validate(separator.channels);
  if (cond_dim < 1) fail("cond_dim must be positive");
  if (time_embed_dim < 2 || time_embed_dim % 2) fail("time_embed_dim must be even");
  if (diffusion_steps < 1) fail("diffusion_steps must be >= 1");
  if (sample_steps < 1 || sample_steps > diffusion_steps) fail("sample_steps must be in [1, diffusion_steps]");
  if (planner_hidden < 1 || planner_weight < 0) fail("planner settings out of range");
  if (layout && (layout_size < 16 || layout_size % 16)) fail("layout_size must be a positive multiple of 16");
  if (!(layout_dropout >= 0 && layout_dropout <= 1)) fail("layout_dropout must be in [0, 1]");
  if (!(x0_clip > 0)) fail("x0_clip must be positive");
  if (!(start_fraction > 0 && start_fraction <= 1)) fail("start_fraction must be in (0, 1]");
  if (!(lr > 0)) fail("lr must be positive");
}

ConditionEncoder::ConditionEncoder(const WorldModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  time_ = nn::Mlp(cfg.time_embed_dim, cfg.cond_dim, cfg.cond_dim, rng);
  past_ = nn::Linear(kEgoFeatures, cfg.cond_dim, rng);
  future_ = nn::Linear(kEgoFeatures, cfg.cond_dim, rng);
  if (cfg.layout) {
    lay1_ = nn::Conv2d(1, 16, 4, 4, 0, rng);
    lay2_ = nn::Conv2d(16, cfg.cond_dim, 4, 4, 0, rng);
    lay_out_ = nn::Linear(cfg.cond_dim, cfg.cond_dim, rng);
  }
}

Var ConditionEncoder::operator()(const EgoTrack& past, const EgoTrack& future, double t,
                                 const synth::BEVLayout* layout) const {
  if (static_cast<int64_t>(past.size()) != cfg_.history) throw Error("condition: history ego length mismatch");
  if (static_cast<int64_t>(future.size()) != cfg_.future) throw Error("condition: future ego missing or wrong length");
  const Tensor feats = ego_features(past, future);
  const int64_t tp = cfg_.history;
  const Var all = nn::constant(feats);
  Var ego = nn::concat0({past_(nn::slice0(all, 0, tp)), future_(nn::slice0(all, tp, cfg_.frames()))});
  Var shared = time_(nn::constant(timestep_embedding(t, cfg_.time_embed_dim)));
  if (layout) {
    if (!cfg_.layout) throw Error("condition: layout given but layout conditioning is disabled");
    if (layout->size != cfg_.layout_size) throw Error("condition: layout size mismatch");
    Var h = lay2_(nn::silu(lay1_(nn::constant(layout_tensor(*layout)))));
    shared = nn::add(shared, lay_out_(nn::reshape(nn::mean_rows(h), {1, cfg_.cond_dim})));
  }
  return nn::add_bias(ego, shared);
}

void ConditionEncoder::collect(nn::ParamList& out, const std::string& prefix) const {
  time_.collect(out, prefix + ".time");
  past_.collect(out, prefix + ".past");
  future_.collect(out, prefix + ".future");
  if (cfg_.layout) {
    lay1_.collect(out, prefix + ".layout1");
    lay2_.collect(out, prefix + ".layout2");
    lay_out_.collect(out, prefix + ".layout_out");
  }
}

Planner::Planner(const WorldModelConfig& cfg, int64_t feature_dim, Rng& rng) : future_(cfg.future) {
  ego_ = nn::Linear(3 * cfg.history, cfg.planner_hidden, rng);
  mlp_ = nn::Mlp(cfg.planner_hidden + feature_dim, cfg.planner_hidden, 3 * cfg.future, rng);
}

Var Planner::operator()(const EgoTrack& past, const Var& pooled) const {
  Var e = nn::silu(ego_(nn::constant(planner_input(past))));
  return nn::reshape(mlp_(nn::concat_last({e, pooled})), {future_, 3});
}

void Planner::collect(nn::ParamList& out, const std::string& prefix) const {
  ego_.collect(out, prefix + ".ego");
  mlp_.collect(out, prefix + ".mlp");
}

EgoTrack to_ego(const Tensor& planned) {
  if (planned.rank() != 2 || planned.dim(1) != 3) throw Error("to_ego: expected [n, 3]");
  EgoTrack out(static_cast<size_t>(planned.dim(0)));
  for (int64_t k = 0; k < planned.dim(0); ++k)
    out[static_cast<size_t>(k)] = {planned[3 * k] * kPlanScale[0], planned[3 * k + 1] * kPlanScale[1],
                                   planned[3 * k + 2] * kPlanScale[2]};
  return out;
}

Tensor from_ego(const EgoTrack& track) {
  Tensor t({static_cast<int64_t>(track.size()), 3});
  for (size_t k = 0; k < track.size(); ++k) {
    const int64_t r = static_cast<int64_t>(k);
    t[3 * r] = track[k].dx / kPlanScale[0];
    t[3 * r + 1] = track[k].dy / kPlanScale[1];
    t[3 * r + 2] = track[k].dyaw / kPlanScale[2];
  }
  return t;
}

Var planner_loss(const Var& planned, const EgoTrack& target) {
  return nn::mse(planned, nn::constant(from_ego(target)));
}

WorldModel::WorldModel(const WorldModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, Stream::kInit, 2));
  schedule_ = NoiseSchedule::cosine(cfg_.diffusion_steps);
  const int64_t Cp = cfg_.separator.channels;
  sep_ = sep::Separator(cfg_.separator, cfg_.latent_channels, cfg_.ablation, rng);
  stack_ = tri::TriPathStack(cfg_.tri_path, Cp, cfg_.cond_dim, cfg_.ablation, rng);
  frame_embed_ = nn::parameter(rng.normal_tensor({cfg_.frames(), Cp}, 0.1));
  head_ = nn::Linear(Cp, cfg_.latent_channels, rng);
  head_.zero_init();
  cond_ = ConditionEncoder(cfg_, rng);
  if (cfg_.planner) planner_ = Planner(cfg_, Cp, rng);
  latent_scale_ = nn::constant(Tensor({1}, 1.0));
}

void WorldModel::set_latent_scale(double s) {
  if (!(s > 0) || !std::isfinite(s)) throw Error("world model: latent scale must be positive");
  latent_scale_.mutable_value()[0] = s;
}

Var WorldModel::predict_noise(const Tensor& z_p, const Var& z_t, const Var& c,
                              std::vector<tri::BlockTrace>* traces) const {
  const Shape frame{cfg_.latent_h, cfg_.latent_w, cfg_.latent_channels};
  auto check = [&](const Shape& s, int64_t n, const char* what) {
    if (s.size() != 4 || s[0] != n || Shape(s.begin() + 1, s.end()) != frame)
      throw Error(std::string("predict_noise: ") + what + " has shape " + shape_str(s));
  };
  check(z_p.shape(), cfg_.history, "history");
  check(z_t.shape(), cfg_.future, "noisy future");
  if (c.value().rank() != 2 || c.dim(1) != cfg_.cond_dim || (c.dim(0) != 1 && c.dim(0) != cfg_.frames()))
    throw Error("predict_noise: condition must be [T, cond_dim]");
  const Var z = nn::concat0({nn::constant(z_p), z_t});
  const sep::Features f = sep_(z);
  const int64_t Cp = cfg_.separator.channels;
  const Var fg = tri::frame_modulate(f.f_g, nn::constant(Tensor({cfg_.frames(), Cp})), frame_embed_);
  const Var out = stack_(fg, f.f_d, f.f_s, nn::silu(c), traces);
  return head_(nn::slice0(out, cfg_.history, cfg_.frames()));
}

sep::Features WorldModel::features(const Tensor& z) const { return sep_(nn::constant(z)); }

Var WorldModel::pooled_history(const Tensor& z_p) const {
  const Var fg = sep_(nn::constant(z_p)).f_g;
  return nn::reshape(nn::mean_rows(fg), {1, cfg_.separator.channels});
}

Var WorldModel::plan(const EgoTrack& past, const Tensor& z_p) const {
  if (!cfg_.planner) throw Error("world model: planner is disabled in this configuration");
  return planner_(past, pooled_history(z_p));
}

Tensor WorldModel::sample(const Tensor& z_p, const std::function<Var(double)>& cond_at,
                          const SampleOptions& opt) const {
  nn::NoGradGuard ng;
  const int64_t T = schedule_.steps();
  const int64_t start = opt.start_t > 0 ? opt.start_t : T;
  if (start > T) throw Error("sample: start step beyond T");
  const int64_t n = std::min(opt.steps > 0 ? opt.steps : cfg_.sample_steps, start);
  const Shape shape{cfg_.future, cfg_.latent_h, cfg_.latent_w, cfg_.latent_channels};
  Tensor z;
  if (opt.start) {
    z = *opt.start;
    require_shape(z, shape, "sample start");
  } else {
    if (start != T) throw Error("sample: a start latent is required below T");
    Rng rng(derive_seed(opt.seed, Stream::kSampler));
    z = rng.normal_tensor(shape);
  }
  for (int64_t i = 0; i < n; ++i) {
    const int64_t t = (start * (n - i) + n - 1) / n;  // ceil, strictly decreasing
    const int64_t t_next = i + 1 < n ? (start * (n - i - 1) + n - 1) / n : 0;
    const double ab = schedule_.alpha_bar(t), ab_next = schedule_.alpha_bar(t_next);
    const Tensor eps = predict_noise(z_p, nn::constant(z), cond_at(static_cast<double>(t))).value();
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double na = std::sqrt(ab_next), nb = std::sqrt(1.0 - ab_next);
    for (int64_t k = 0; k < z.numel(); ++k) {
      const double x0 = std::clamp((z[k] - sb * eps[k]) / sa, -cfg_.x0_clip, cfg_.x0_clip);
      // The noise direction is re-derived from the clipped estimate so the
      // step stays on the line through z and x0.
      const double e = (z[k] - sa * x0) / sb;
      z[k] = na * x0 + nb * e;
    }
    require_finite(z, "sample");
  }
  return z;
}

void WorldModel::collect(nn::ParamList& out, const std::string& prefix) const {
  sep_.collect(out, prefix + ".sep");
  stack_.collect(out, prefix + ".tri");
  out.push_back({prefix + ".frame_embed", frame_embed_});
  head_.collect(out, prefix + ".head");
  cond_.collect(out, prefix + ".cond");
  if (cfg_.planner) planner_.collect(out, prefix + ".planner");
}

void WorldModel::state(nn::ParamList& out, const std::string& prefix) const {
  collect(out, prefix);
  out.push_back({prefix + ".latent_scale", latent_scale_});
}

WorldModelTrainer::WorldModelTrainer(WorldModel& model, const WmTrainOptions& opt)
    : model_(model),
      opts_(opt),
      opt_(
          [&] {
            nn::ParamList p;
            model.collect(p);
            return p;
          }(),
          nn::AdamOptions{.lr = model.config().lr, .grad_clip = 1.0}),
      rng_(derive_seed(opt.seed, Stream::kWorldModelData)) {}

std::vector<WorldModelTrainer::Draw> WorldModelTrainer::draw(const std::vector<const Window*>& batch,
                                                             Rng& rng) const {
  const auto& cfg = model_.config();
  std::vector<Draw> draws;
  for (const Window* w : batch) {
    Draw d;
    d.t = rng.uniform_int(1, model_.schedule().steps());
    d.eps = rng.normal_tensor(w->z_f.shape());
    d.use_layout = cfg.layout && w->has_layout && rng.uniform(0, 1) >= cfg.layout_dropout;
    draws.push_back(std::move(d));
  }
  return draws;
}

void WorldModelTrainer::accumulate(const std::vector<const Window*>& batch, const std::vector<Draw>& draws,
                                   bool backprop, WmTrainLog& log) const {
  const auto& cfg = model_.config();
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (size_t i = 0; i < batch.size(); ++i) {
    const Window& w = *batch[i];
    const Draw& d = draws[i];
    const Tensor z_t = add_noise(model_.schedule(), w.z_f, d.t, d.eps);
    const Var c = model_.condition(w.past, w.future, static_cast<double>(d.t), d.use_layout ? &w.layout : nullptr);
    const Var diff = noise_loss(model_.predict_noise(w.z_p, nn::constant(z_t), c), d.eps);
    Var total = diff;
    double plan = 0.0;
    if (cfg.planner) {
      const Var pl = planner_loss(model_.plan(w.past, w.z_p), w.future);
      plan = pl.value()[0];
      total = nn::add(total, nn::scale(pl, cfg.planner_weight));
    }
    if (!std::isfinite(total.value()[0])) throw Error("world model training: non-finite loss");
    log.diffusion += inv * diff.value()[0];
    log.planner += inv * plan;
    log.loss += inv * total.value()[0];
    if (backprop) nn::backward(nn::scale(total, inv));
  }
}

WmTrainLog WorldModelTrainer::step(const std::vector<const Window*>& batch, std::optional<uint64_t> frozen_noise) {
  if (batch.empty()) throw Error("world model training: empty batch");
  WmTrainLog log;
  log.step = ++step_;
  std::vector<Draw> draws;
  if (frozen_noise) {
    Rng r(*frozen_noise);
    draws = draw(batch, r);
  } else {
    draws = draw(batch, rng_);
  }
  accumulate(batch, draws, true, log);
  opt_.step();
  return log;
}

double WorldModelTrainer::evaluate(const std::vector<const Window*>& batch, uint64_t noise_seed) const {
  nn::NoGradGuard ng;
  Rng r(noise_seed);
  WmTrainLog log;
  accumulate(batch, draw(batch, r), false, log);
  return log.diffusion;
}

std::vector<WmTrainLog> WorldModelTrainer::run(const std::vector<Window>& data) {
  if (data.empty()) throw Error("world model training: no windows");
  std::vector<WmTrainLog> history;
  for (int64_t s = 0; s < opts_.steps; ++s) {
    std::vector<const Window*> batch;
    for (int64_t b = 0; b < opts_.batch; ++b)
      batch.push_back(&data[static_cast<size_t>(rng_.uniform_int(0, static_cast<int64_t>(data.size()) - 1))]);
    opt_.options().lr = nn::cosine_lr(model_.config().lr, s, opts_.steps, opts_.final_lr_fraction);
    WmTrainLog log = step(batch);
    if (opts_.log_every > 0 && (log.step % opts_.log_every == 0 || s + 1 == opts_.steps)) {
      history.push_back(log);
      if (opts_.on_log) opts_.on_log(log);
    }
  }
  return history;
}

double latent_std(const std::vector<Tensor>& latents) {
  double s = 0, s2 = 0;
  int64_t n = 0;
  for (const Tensor& t : latents)
    for (double v : t.values()) {
      s += v;
      s2 += v * v;
      ++n;
    }
  if (n == 0) throw Error("latent_std: no latents");
  const double m = s / static_cast<double>(n);
  const double var = s2 / static_cast<double>(n) - m * m;
  return std::sqrt(std::max(var, 1e-12));
}

Tensor stack_frames(const std::vector<Tensor>& frames, size_t begin, size_t end) {
  if (begin >= end || end > frames.size()) throw Error("stack_frames: bad range");
  const Tensor& f0 = frames[begin];
  Shape s{static_cast<int64_t>(end - begin)};
  s.insert(s.end(), f0.shape().begin(), f0.shape().end());
  Tensor out(s);
  for (size_t k = begin; k < end; ++k) {
    if (!frames[k].same_shape(f0)) throw Error("stack_frames: frame shapes differ");
    std::copy_n(frames[k].data(), f0.numel(), out.data() + static_cast<int64_t>(k - begin) * f0.numel());
  }
  return out;
}

std::vector<Window> make_windows(const std::vector<SequenceLatents>& seqs, const WorldModelConfig& cfg,
                                 double latent_scale, int64_t stride) {
  if (stride < 1) throw Error("make_windows: stride must be positive");
  std::vector<Window> out;
  const size_t tp = static_cast<size_t>(cfg.history), tau = static_cast<size_t>(cfg.frames());
  for (const SequenceLatents& s : seqs) {
    if (s.ego.size() != s.latents.size()) throw Error("make_windows: ego and latent counts differ");
    for (size_t b = 0; b + tau <= s.latents.size(); b += static_cast<size_t>(stride)) {
      Window w;
      w.z_p = stack_frames(s.latents, b, b + tp);
      w.z_f = stack_frames(s.latents, b + tp, b + tau);
      for (double& v : w.z_p.storage()) v /= latent_scale;
      for (double& v : w.z_f.storage()) v /= latent_scale;
      w.past.assign(s.ego.begin() + static_cast<int64_t>(b), s.ego.begin() + static_cast<int64_t>(b + tp));
      w.future.assign(s.ego.begin() + static_cast<int64_t>(b + tp), s.ego.begin() + static_cast<int64_t>(b + tau));
      if (s.layouts.size() == s.latents.size()) {
        w.layout = s.layouts[b + tau - 1];
        w.has_layout = true;
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

std::string to_string(RolloutMode m) { return m == RolloutMode::kGtEgo ? "gt_ego" : "planner"; }

RolloutMode parse_rollout_mode(const std::string& s) {
  if (s == "gt_ego") return RolloutMode::kGtEgo;
  if (s == "planner") return RolloutMode::kPlanner;
  throw Error("unknown rollout mode '" + s + "' (expected gt_ego or planner)");
}

RolloutResult rollout(const tok::Tokenizer& tokenizer, const WorldModel& model,
                      const std::vector<geom::RangeImage>& history, const EgoTrack& past_ego,
                      const EgoTrack* future_ego, const RolloutOptions& opt) {
  const auto& cfg = model.config();
  const size_t tp = static_cast<size_t>(cfg.history);
  if (history.size() < tp) throw Error("rollout: need at least tau_p history sweeps");
  if (past_ego.size() != history.size()) throw Error("rollout: one past ego delta per history sweep required");
  if (opt.steps < 1) throw Error("rollout: steps must be positive");
  if (opt.mode == RolloutMode::kPlanner) {
    if (future_ego) throw Error("rollout: planner mode must not be given future ego");
    if (!cfg.planner) throw Error("rollout: planner mode requested but the model has no planner");
  } else if (!future_ego || static_cast<int64_t>(future_ego->size()) < opt.steps) {
    throw Error("rollout: ground-truth ego mode needs future ego for every predicted frame");
  }
  nn::NoGradGuard ng;
  const double scale = model.latent_scale();
  std::vector<Tensor> frames;  // normalized latents, history then predictions
  for (size_t k = history.size() - tp; k < history.size(); ++k) {
    Tensor z = tokenizer.latent(history[k]);
    for (double& v : z.storage()) v /= scale;
    frames.push_back(std::move(z));
  }
  EgoTrack ego(past_ego.end() - static_cast<int64_t>(tp), past_ego.end());

  RolloutResult res;
  int64_t produced = 0;
  for (uint64_t round = 0; produced < opt.steps; ++round) {
    const Tensor z_p = stack_frames(frames, frames.size() - tp, frames.size());
    const EgoTrack past(ego.end() - static_cast<int64_t>(tp), ego.end());
    EgoTrack fut;
    if (opt.mode == RolloutMode::kPlanner) {
      fut = to_ego(model.plan(past, z_p).value());
    } else {
      for (int64_t k = 0; k < cfg.future; ++k) {
        const int64_t idx = std::min(produced + k, static_cast<int64_t>(future_ego->size()) - 1);
        fut.push_back((*future_ego)[static_cast<size_t>(idx)]);
      }
    }
    WorldModel::SampleOptions so;
    so.steps = opt.sample_steps;
    so.seed = derive_seed(opt.seed, Stream::kSampler, round);
    if (cfg.start_fraction < 1.0) {
      // Every future slot starts as the last known frame noised to start_t.
      so.start_t = std::max<int64_t>(1, std::llround(cfg.start_fraction * static_cast<double>(cfg.diffusion_steps)));
      const Tensor last = frame_of(z_p, cfg.history - 1);
      std::vector<Tensor> slots(static_cast<size_t>(cfg.future), last);
      Rng noise(so.seed);
      so.start = add_noise(model.schedule(), stack_frames(slots, 0, slots.size()), so.start_t,
                           noise.normal_tensor({cfg.future, cfg.latent_h, cfg.latent_w, cfg.latent_channels}));
    }
    const Tensor z_f = model.sample(
        z_p, [&](double t) { return model.condition(past, fut, t, opt.layout); }, so);
    for (int64_t k = 0; k < cfg.future && produced < opt.steps; ++k, ++produced) {
      Tensor z = frame_of(z_f, k);
      for (double& v : z.storage()) v *= scale;
      if (opt.snap_to_codebook) z = snap(z, tokenizer);
      geom::RangeImage img = tokenizer.decode_latent(z);
      res.clouds.push_back(geom::unproject(img, tokenizer.sensor()));
      res.ranges.push_back(std::move(img));
      res.latents.push_back(z);
      Tensor zn = z;
      for (double& v : zn.storage()) v /= scale;
      frames.push_back(std::move(zn));
      ego.push_back(fut[static_cast<size_t>(k)]);
      res.ego.push_back(fut[static_cast<size_t>(k)]);
    }
  }
  return res;
}

}  // namespace gem::wm
