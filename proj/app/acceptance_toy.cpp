#include "acceptance_toy.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "gem/metrics.hpp"
#include "gem/parallel.hpp"

namespace toy {

using namespace gem;
namespace fs = std::filesystem;

namespace {

// Pinned thresholds.
constexpr double kMaeLimit = 0.5;        // meters
constexpr double kUsageFloor = 0.25;     // fraction of K
constexpr double kOverfitDrop = 0.5;     // loss must reach half its start
constexpr int64_t kOverfitSteps = 2000;
constexpr double kSkillTarget = 0.2;     // relative CD gain over copy-last
constexpr int64_t kForecastHorizon = 5;
constexpr double kOffsetContrast = 1.5;
constexpr double kPlanTransLimit = 0.2;  // meters
constexpr double kPlanYawLimit = 0.05;   // radians
constexpr double kDivergence = 1.0;      // meters
constexpr double kAboveGround = 0.25;    // meters over the ground plane

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

Tensor normalized(const Tensor& z, double scale) {
  Tensor out = z;
  for (double& v : out.storage()) v /= scale;
  return out;
}

// Latent cell (i, j) of frame k is dynamic when any range-image cell it
// covers saw a moving box.
std::vector<uint8_t> dynamic_latent_cells(const std::vector<uint8_t>& cells, const geom::SensorConfig& s,
                                          int64_t h, int64_t w) {
  const int64_t dv = s.n_lasers / h, dh = s.n_azimuth / w;
  std::vector<uint8_t> out(static_cast<size_t>(h * w), 0);
  for (int64_t r = 0; r < s.n_lasers; ++r)
    for (int64_t c = 0; c < s.n_azimuth; ++c)
      if (cells[static_cast<size_t>(r * s.n_azimuth + c)]) out[static_cast<size_t>((r / dv) * w + c / dh)] = 1;
  return out;
}

// Planar centroid of points standing above the ground plane.
std::optional<std::pair<double, double>> raised_centroid(const geom::PointCloud& cloud, double ground_z) {
  double x = 0, y = 0;
  int64_t n = 0;
  for (const auto& p : cloud.points)
    if (p.z > ground_z + kAboveGround) {
      x += p.x;
      y += p.y;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return std::make_pair(x / static_cast<double>(n), y / static_cast<double>(n));
}

}  // namespace

wm::WorldModelConfig smoke_config() {
  wm::WorldModelConfig c;
  c.latent_h = 2;
  c.latent_w = 4;
  c.latent_channels = 8;
  c.history = 2;
  c.future = 2;
  c.separator = {.window = 3, .channels = 8, .gate_kernel = 3};
  c.tri_path = {.blocks = 2, .offset_hidden = 4, .d_state = 2, .groups = 4, .gate_kernel = 3};
  c.cond_dim = 8;
  c.time_embed_dim = 8;
  c.diffusion_steps = 100;
  c.sample_steps = 10;
  c.planner_hidden = 8;
  c.layout_size = 16;
  return c;
}

wm::Window random_window(const wm::WorldModelConfig& c, Rng& rng) {
  wm::Window w;
  w.z_p = rng.normal_tensor({c.history, c.latent_h, c.latent_w, c.latent_channels});
  w.z_f = rng.normal_tensor({c.future, c.latent_h, c.latent_w, c.latent_channels});
  for (int64_t k = 0; k < c.history; ++k) w.past.push_back({1.5, 0.0, 0.1});
  for (int64_t k = 0; k < c.future; ++k) w.future.push_back({1.5, 0.0, 0.1});
  w.layout.size = c.layout_size;
  w.layout.extent = 64;
  for (int64_t i = 0; i < c.layout_size * c.layout_size; ++i)
    w.layout.grid.push_back(static_cast<uint8_t>(rng.uniform_int(0, 2)));
  w.has_layout = true;
  return w;
}

cli::RunConfig toy_config() {
  cli::RunConfig c;
  c.data.train_sequences = 200;
  c.data.test_sequences = 20;
  c.data.frames = 12;

  auto& t = c.tokenizer;
  t.codebook_size = 256;
  t.latent_channels = 8;
  t.down_v = 4;
  t.down_h = 8;
  t.width = 16;
  t.full_res_mamba = false;
  t.adv_weight = 0.0;
  t.restart_after = 50;
  t.lr = 2e-3;
  c.tokenizer_train.steps = 3000;
  c.tokenizer_train.batch = 1;
  c.tokenizer_train.log_every = 250;

  auto& w = c.world_model;
  w.history = 3;
  w.future = 5;
  w.separator.channels = 16;
  w.separator.gate_kernel = 1;
  w.tri_path.blocks = 2;
  w.tri_path.d_state = 4;
  w.tri_path.gate_kernel = 1;
  w.cond_dim = 32;
  w.time_embed_dim = 32;
  w.sample_steps = 20;
  w.start_fraction = 0.3;
  w.lr = 1e-3;
  c.wm_train.steps = 3000;
  c.wm_train.batch = 1;
  c.wm_train.log_every = 250;
  c.finalize();
  return c;
}

Suite::Suite(fs::path work, bool fresh) : work_(std::move(work)), fresh_(fresh), cfg_(toy_config()) {}

void Suite::note(const std::string& line) {
  std::fprintf(stderr, "  %s\n", line.c_str());
  fs::create_directories(work_);
  std::ofstream(work_ / "train.log", std::ios::app) << line << "\n";
}

const tok::Tokenizer& Suite::tokenizer() {
  if (tok_) return *tok_;
  const fs::path path = work_ / "tokenizer.ckpt";
  if (!fresh_ && fs::exists(path)) {
    tok_ = cli::load_tokenizer(path, cfg_);
    return *tok_;
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<geom::RangeImage> images;
  for (int64_t s = 0; s < cfg_.data.train_sequences; ++s) {
    auto seq = cli::generate(cfg_, s, false, false);
    for (auto& r : seq.ranges) images.push_back(std::move(r));
  }
  note("tokenizer: " + std::to_string(images.size()) + " training sweeps");
  tok_ = cli::train_tokenizer(cfg_, images, [&](const tok::TrainLog& l) {
    std::ostringstream os;
    os << "tokenizer step " << l.step << " recon " << l.recon << " codes " << l.used_codes << " restarts "
       << l.restarts;
    note(os.str());
  });
  cli::save_tokenizer(path, *tok_, cfg_, cfg_.tokenizer_train.steps);
  note(fmt("tokenizer trained in %.0f s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
  return *tok_;
}

std::vector<wm::SequenceLatents> Suite::latents(int64_t first, int64_t count, bool test) {
  const auto& t = tokenizer();
  std::vector<wm::SequenceLatents> out;
  for (int64_t s = first; s < first + count; ++s) out.push_back(cli::encode_sequence(t, cli::generate(cfg_, s, test, false)));
  return out;
}

const wm::WorldModel& Suite::world_model() {
  if (wm_) return *wm_;
  const fs::path path = work_ / "wm.ckpt";
  if (!fresh_ && fs::exists(path)) {
    wm_ = cli::load_world_model(path, cfg_);
    return *wm_;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto lat = latents(0, cfg_.data.train_sequences, false);
  note(fmt("world model: encoded training sequences in %.0f s",
           std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
  wm::WorldModel model(cfg_.world_model, cfg_.seed);
  cli::train_world_model(model, cfg_, lat, [&](const wm::WmTrainLog& l) {
    std::ostringstream os;
    os << "world model step " << l.step << " loss " << l.loss << " diffusion " << l.diffusion << " planner "
       << l.planner;
    note(os.str());
  });
  cli::save_world_model(path, model, cfg_, cfg_.wm_train.steps);
  note(fmt("world model trained in %.0f s", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()));
  wm_ = std::move(model);
  return *wm_;
}

const std::vector<cli::SequenceData>& Suite::test_set() {
  if (!test_) {
    test_.emplace();
    for (int64_t s = 0; s < cfg_.data.test_sequences; ++s) test_->push_back(cli::generate(cfg_, s, true, true));
  }
  return *test_;
}

Outcome Suite::d7_tokenizer() {
  const auto& t = tokenizer();
  std::vector<geom::RangeImage> held_out;
  for (const auto& seq : test_set()) held_out.insert(held_out.end(), seq.ranges.begin(), seq.ranges.end());
  const auto st = tok::evaluate_reconstruction(t, held_out);
  std::ostringstream os;
  os << held_out.size() << " held-out sweeps, MAE " << st.mae << " m, usage " << st.usage << " of K="
     << cfg_.tokenizer.codebook_size << ", validity agreement " << st.valid_accuracy;
  return {st.mae < kMaeLimit && st.usage >= kUsageFloor, os.str()};
}

Outcome Suite::d8_overfit() {
  // A fresh model on one frozen batch of real windows.
  const auto lat = latents(0, 2, false);
  std::vector<Tensor> all;
  for (const auto& s : lat) all.insert(all.end(), s.latents.begin(), s.latents.end());
  wm::WorldModel model(cfg_.world_model, cfg_.seed + 1);
  model.set_latent_scale(wm::latent_std(all));
  const auto windows = wm::make_windows(lat, cfg_.world_model, model.latent_scale(), 4);
  const std::vector<const wm::Window*> batch{&windows.front(), &windows.back()};
  wm::WorldModelTrainer tr(model, {});
  constexpr uint64_t kFrozen = 1234;
  const double start = tr.evaluate(batch, kFrozen);
  double now = start;
  int64_t steps = 0;
  while (steps < kOverfitSteps && now > kOverfitDrop * start) {
    tr.step(batch, kFrozen);
    ++steps;
    if (steps % 25 == 0) now = tr.evaluate(batch, kFrozen);
  }
  std::ostringstream os;
  os << "loss " << start << " -> " << now << " (" << now / start << "x) after " << steps << " steps";
  return {now <= kOverfitDrop * start, os.str()};
}

Outcome Suite::d9_forecast() {
  const auto& t = tokenizer();
  const auto& m = world_model();
  const auto& seqs = test_set();
  const size_t tp = static_cast<size_t>(m.config().history);
  const size_t last = tp + kForecastHorizon - 1;
  std::vector<double> pred(seqs.size()), copy(seqs.size()), floor(seqs.size());
  for (size_t i = 0; i < seqs.size(); ++i) {
    const auto& seq = seqs[i];
    const std::vector<geom::RangeImage> history(seq.ranges.begin(), seq.ranges.begin() + static_cast<int64_t>(tp));
    const wm::EgoTrack past(seq.ego.begin(), seq.ego.begin() + static_cast<int64_t>(tp));
    const wm::EgoTrack future(seq.ego.begin() + static_cast<int64_t>(tp), seq.ego.begin() + static_cast<int64_t>(last) + 1);
    wm::RolloutOptions opt;
    opt.steps = kForecastHorizon;
    opt.seed = i;
    const auto r = wm::rollout(t, m, history, past, &future, opt);
    const auto& truth = seq.clouds[last];
    pred[i] = metrics::chamfer(r.clouds.back(), truth).value_or(NAN);
    copy[i] = metrics::chamfer(seq.clouds[tp - 1], truth).value_or(NAN);
    floor[i] = metrics::chamfer(geom::unproject(t.reconstruct(seq.ranges[last]), cfg_.sensor), truth).value_or(NAN);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double p = mean(pred), c = mean(copy), f = mean(floor);
  const double skill = 1.0 - p / c;
  std::ostringstream os;
  os << seqs.size() << " sequences, CD at frame +" << kForecastHorizon << ": predicted " << p << ", copy-last " << c
     << ", skill " << skill * 100 << "% (tokenizer floor " << f << ")";
  return {std::isfinite(skill) && skill >= kSkillTarget, os.str()};
}

Outcome Suite::d10_disentangle() {
  const auto& m = world_model();
  const auto& t = tokenizer();
  const auto& mc = m.config();
  const auto& seqs = test_set();
  const int64_t T = mc.frames(), h = mc.latent_h, w = mc.latent_w;
  const int64_t t_noise = std::max<int64_t>(1, mc.diffusion_steps / 10);
  double off_dyn = 0, off_sta = 0, fd_dyn = 0, fd_sta = 0;
  int64_t n_dyn = 0, n_sta = 0;
  for (size_t i = 0; i < seqs.size(); ++i) {
    const auto& seq = seqs[i];
    std::vector<Tensor> frames;
    for (int64_t k = 0; k < T; ++k) frames.push_back(normalized(t.latent(seq.ranges[static_cast<size_t>(k)]), m.latent_scale()));
    const Tensor z_p = wm::stack_frames(frames, 0, static_cast<size_t>(mc.history));
    const Tensor z_f = wm::stack_frames(frames, static_cast<size_t>(mc.history), frames.size());
    const Tensor z_all = wm::stack_frames(frames, 0, frames.size());
    Rng rng(derive_seed(cfg_.seed, Stream::kEval, i));
    const Tensor z_t = wm::add_noise(m.schedule(), z_f, t_noise, rng.normal_tensor(z_f.shape()));
    const wm::EgoTrack past(seq.ego.begin(), seq.ego.begin() + mc.history);
    const wm::EgoTrack future(seq.ego.begin() + mc.history, seq.ego.begin() + T);
    std::vector<tri::BlockTrace> traces;
    {
      nn::NoGradGuard ng;
      m.predict_noise(z_p, nn::constant(z_t), m.condition(past, future, static_cast<double>(t_noise), nullptr), &traces);
    }
    const auto heat = tri::deform_heatmap(traces, {T, h, w}, mc.tri_path.offset_scale);
    Tensor f_d;
    {
      nn::NoGradGuard ng;
      f_d = m.features(z_all).f_d.value();
    }
    const int64_t Cd = f_d.dim(3);
    for (int64_t k = 0; k < T; ++k) {
      const auto dyn = dynamic_latent_cells(seq.dynamic_cells[static_cast<size_t>(k)], cfg_.sensor, h, w);
      for (int64_t c = 0; c < h * w; ++c) {
        const double off = heat.dynamic[static_cast<size_t>(k * h * w + c)];
        double norm = 0;
        for (int64_t ch = 0; ch < Cd; ++ch) norm += std::pow(f_d[(k * h * w + c) * Cd + ch], 2);
        norm = std::sqrt(norm);
        if (dyn[static_cast<size_t>(c)]) {
          off_dyn += off;
          fd_dyn += norm;
          ++n_dyn;
        } else {
          off_sta += off;
          fd_sta += norm;
          ++n_sta;
        }
      }
    }
  }
  if (n_dyn == 0 || n_sta == 0) return {false, "no dynamic or no static latent cells in the test set"};
  const double off_ratio = (off_dyn / n_dyn) / (off_sta / n_sta);
  const double fd_ratio = (fd_dyn / n_dyn) / (fd_sta / n_sta);
  std::ostringstream os;
  os << n_dyn << " dynamic / " << n_sta << " static cells; |offset_d| contrast " << off_ratio << "x; F_d norm contrast "
     << fd_ratio << "x";
  return {off_ratio >= kOffsetContrast && fd_ratio > 1.0, os.str()};
}

Outcome Suite::d11_planner() {
  const auto& m = world_model();
  const auto& t = tokenizer();
  const auto& mc = m.config();
  const auto& seqs = test_set();
  const int64_t H = kForecastHorizon;
  std::vector<double> trans(static_cast<size_t>(H), 0.0), yaw(static_cast<size_t>(H), 0.0);
  int64_t n = 0;
  for (size_t i = 0; i < seqs.size(); ++i) {
    if (cfg_.scene_spec(static_cast<int64_t>(i), true).ego == synth::EgoProfile::kStop) continue;
    const auto& seq = seqs[i];
    std::vector<Tensor> frames;
    for (int64_t k = 0; k < mc.history; ++k) frames.push_back(normalized(t.latent(seq.ranges[static_cast<size_t>(k)]), m.latent_scale()));
    const wm::EgoTrack past(seq.ego.begin(), seq.ego.begin() + mc.history);
    wm::EgoTrack plan;
    {
      nn::NoGradGuard ng;
      plan = wm::to_ego(m.plan(past, wm::stack_frames(frames, 0, frames.size())).value());
    }
    for (int64_t k = 0; k < H; ++k) {
      const auto& g = seq.ego[static_cast<size_t>(mc.history + k)];
      const auto& p = plan[static_cast<size_t>(k)];
      trans[static_cast<size_t>(k)] += std::hypot(p.dx - g.dx, p.dy - g.dy);
      yaw[static_cast<size_t>(k)] += std::abs(p.dyaw - g.dyaw);
    }
    ++n;
  }
  double worst_t = 0, worst_y = 0;
  for (int64_t k = 0; k < H; ++k) {
    worst_t = std::max(worst_t, trans[static_cast<size_t>(k)] / static_cast<double>(n));
    worst_y = std::max(worst_y, yaw[static_cast<size_t>(k)] / static_cast<double>(n));
  }

  // The planner-mode interface must refuse future ego and run without it.
  const auto& seq = seqs.front();
  const std::vector<geom::RangeImage> history(seq.ranges.begin(), seq.ranges.begin() + mc.history);
  const wm::EgoTrack past(seq.ego.begin(), seq.ego.begin() + mc.history);
  const wm::EgoTrack future(seq.ego.begin() + mc.history, seq.ego.end());
  wm::RolloutOptions opt;
  opt.mode = wm::RolloutMode::kPlanner;
  opt.steps = H;
  bool refused = false;
  try {
    wm::rollout(t, m, history, past, &future, opt);
  } catch (const Error&) {
    refused = true;
  }
  const auto r = wm::rollout(t, m, history, past, nullptr, opt);
  const bool completed = static_cast<int64_t>(r.clouds.size()) == H;

  std::ostringstream os;
  os << n << " straight/arc sequences, worst per-frame mean error " << worst_t << " m, " << worst_y
     << " rad; planner rollout " << (completed ? "completed" : "incomplete") << ", future ego "
     << (refused ? "refused" : "accepted");
  return {worst_t < kPlanTransLimit && worst_y < kPlanYawLimit && completed && refused, os.str()};
}

Outcome Suite::d12_counterfactual() {
  const auto& m = world_model();
  const auto& t = tokenizer();
  const auto& mc = m.config();
  const auto& seqs = test_set();
  const int64_t H = kForecastHorizon;
  // Injected futures: standing still versus the data's left arc.
  const wm::EgoTrack stop(static_cast<size_t>(H), synth::EgoStatus{});
  synth::SceneSpec arc = cfg_.scene_spec(2, true);
  arc.frames = H + 1;
  const auto arc_deltas = synth::ego_deltas(arc);
  const wm::EgoTrack turn(arc_deltas.begin() + 1, arc_deltas.end());
  const double ground = -cfg_.scene_spec(0, true).sensor_height;
  double total = 0;
  int64_t n = 0;
  for (size_t i = 0; i < seqs.size(); ++i) {
    const auto& seq = seqs[i];
    const std::vector<geom::RangeImage> history(seq.ranges.begin(), seq.ranges.begin() + mc.history);
    const wm::EgoTrack past(seq.ego.begin(), seq.ego.begin() + mc.history);
    wm::RolloutOptions opt;
    opt.steps = H;
    opt.seed = 500 + i;  // shared by both arms
    const auto a = wm::rollout(t, m, history, past, &stop, opt);
    const auto b = wm::rollout(t, m, history, past, &turn, opt);
    const auto ca = raised_centroid(a.clouds.back(), ground), cb = raised_centroid(b.clouds.back(), ground);
    if (!ca || !cb) continue;
    total += std::hypot(ca->first - cb->first, ca->second - cb->second);
    ++n;
  }
  if (n == 0) return {false, "no decoded points above the ground"};
  const double mean = total / static_cast<double>(n);
  std::ostringstream os;
  os << n << " paired rollouts, mean final-frame BEV centroid divergence " << mean << " m";
  return {mean > kDivergence, os.str()};
}

}  // namespace toy
