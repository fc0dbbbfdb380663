#include "gem/pipeline.hpp"

#include <algorithm>
#include <cstdio>

#include "gem/checkpoint.hpp"
#include "gem/parallel.hpp"

namespace gem::cli {

namespace fs = std::filesystem;

SequenceData from_frames(std::vector<synth::SceneFrame> frames, bool keep_clouds) {
  SequenceData s;
  for (auto& f : frames) {
    s.ranges.push_back(std::move(f.range));
    s.dynamic_cells.push_back(std::move(f.dynamic_cells));
    if (keep_clouds) s.clouds.push_back(std::move(f.cloud));
    s.ego.push_back(f.ego);
    s.layouts.push_back(std::move(f.layout));
  }
  return s;
}

SequenceData generate(const RunConfig& cfg, int64_t index, bool test, bool keep_clouds) {
  return from_frames(synth::generate_sequence(cfg.scene_spec(index, test)), keep_clouds);
}

SequenceData load_sequence(const fs::path& dir, const geom::SensorConfig& sensor) {
  auto loaded = synth::read_sequence(dir);
  SequenceData s;
  for (auto& c : loaded.clouds) {
    s.ranges.push_back(geom::project(c, sensor));
    s.clouds.push_back(std::move(c));
  }
  s.ego = std::move(loaded.ego);
  s.layouts = std::move(loaded.layouts);
  return s;
}

std::vector<fs::path> sequence_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error("dataset directory not found: " + root.string());
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw Error("no sequences under " + root.string());
  return dirs;
}

std::vector<fs::path> write_dataset(const RunConfig& cfg, const fs::path& root) {
  struct Job {
    int64_t index;
    bool test;
    fs::path dir;
  };
  std::vector<Job> jobs;
  auto add = [&](int64_t n, bool test) {
    for (int64_t i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof(name), "seq_%04lld", static_cast<long long>(i));
      jobs.push_back({i, test, root / (test ? "test" : "train") / name});
    }
  };
  add(cfg.data.train_sequences, false);
  add(cfg.data.test_sequences, true);
  // Each job owns its directory, so workers never share a file.
  parallel_for(static_cast<int64_t>(jobs.size()), [&](int64_t j) {
    const Job& job = jobs[static_cast<size_t>(j)];
    const auto spec = cfg.scene_spec(job.index, job.test);
    synth::write_sequence(job.dir, spec, synth::generate_sequence(spec));
  });
  std::vector<fs::path> out;
  for (const auto& j : jobs) out.push_back(j.dir);
  return out;
}

tok::Tokenizer train_tokenizer(const RunConfig& cfg, const std::vector<geom::RangeImage>& images,
                               const std::function<void(const tok::TrainLog&)>& on_log) {
  tok::Tokenizer model(cfg.tokenizer, cfg.sensor, derive_seed(cfg.seed, Stream::kInit, 1));
  tok::Discriminator disc(cfg.tokenizer.disc_width, derive_seed(cfg.seed, Stream::kInit, 3));
  tok::TrainOptions opt;
  opt.steps = cfg.tokenizer_train.steps;
  opt.batch = cfg.tokenizer_train.batch;
  opt.seed = cfg.seed;
  opt.log_every = cfg.tokenizer_train.log_every;
  opt.on_log = on_log;
  tok::TokenizerTrainer trainer(model, disc, opt);
  trainer.run(images);
  return model;
}

wm::SequenceLatents encode_sequence(const tok::Tokenizer& tokenizer, const SequenceData& seq) {
  wm::SequenceLatents out;
  out.latents.resize(seq.frames());
  parallel_for(static_cast<int64_t>(seq.frames()), [&](int64_t k) {
    out.latents[static_cast<size_t>(k)] = tokenizer.latent(seq.ranges[static_cast<size_t>(k)]);
  });
  out.ego = seq.ego;
  out.layouts = seq.layouts;
  return out;
}

void train_world_model(wm::WorldModel& model, const RunConfig& cfg, const std::vector<wm::SequenceLatents>& latents,
                       const std::function<void(const wm::WmTrainLog&)>& on_log) {
  std::vector<Tensor> all;
  for (const auto& s : latents) all.insert(all.end(), s.latents.begin(), s.latents.end());
  model.set_latent_scale(wm::latent_std(all));
  const auto windows = wm::make_windows(latents, model.config(), model.latent_scale(), cfg.window_stride);
  if (windows.empty()) throw Error("world model training: sequences are shorter than tau_p + tau_f");
  wm::WmTrainOptions opt;
  opt.steps = cfg.wm_train.steps;
  opt.batch = cfg.wm_train.batch;
  opt.seed = cfg.seed;
  opt.log_every = cfg.wm_train.log_every;
  opt.on_log = on_log;
  wm::WorldModelTrainer trainer(model, opt);
  trainer.run(windows);
}

void save_tokenizer(const fs::path& path, const tok::Tokenizer& t, const RunConfig& cfg, int64_t step) {
  nn::ParamList params;
  t.collect(params);
  ckpt::save(path, ckpt::from_params(params, to_json(cfg), step));
}

tok::Tokenizer load_tokenizer(const fs::path& path, const RunConfig& cfg) {
  const auto ck = ckpt::load(path);
  tok::Tokenizer t(cfg.tokenizer, cfg.sensor, 0);
  nn::ParamList params;
  t.collect(params);
  ckpt::restore(ck, params);
  return t;
}

void save_world_model(const fs::path& path, const wm::WorldModel& m, const RunConfig& cfg, int64_t step) {
  nn::ParamList params;
  m.state(params);
  ckpt::save(path, ckpt::from_params(params, to_json(cfg), step));
}

wm::WorldModel load_world_model(const fs::path& path, const RunConfig& cfg) {
  const auto ck = ckpt::load(path);
  wm::WorldModel m(cfg.world_model, 0);
  nn::ParamList params;
  m.state(params);
  ckpt::restore(ck, params);
  return m;
}

wm::RolloutResult predict_sequence(const tok::Tokenizer& tokenizer, const wm::WorldModel& model,
                                   const SequenceData& seq, int64_t horizon, wm::RolloutMode mode, uint64_t seed,
                                   const wm::EgoTrack* future_override) {
  const auto tp = static_cast<size_t>(model.config().history);
  if (tp + static_cast<size_t>(horizon) > seq.frames())
    throw Error("horizon mismatch: " + std::to_string(horizon) + " frames after a history of " + std::to_string(tp) +
                " exceed the sequence length " + std::to_string(seq.frames()));
  const std::vector<geom::RangeImage> history(seq.ranges.begin(), seq.ranges.begin() + static_cast<int64_t>(tp));
  const wm::EgoTrack past(seq.ego.begin(), seq.ego.begin() + static_cast<int64_t>(tp));
  wm::RolloutOptions opt;
  opt.mode = mode;
  opt.steps = horizon;
  opt.seed = seed;
  // The layout of the last predicted frame, as in training.
  opt.layout = &seq.layouts[tp + static_cast<size_t>(horizon) - 1];
  if (mode == wm::RolloutMode::kPlanner) return wm::rollout(tokenizer, model, history, past, nullptr, opt);
  wm::EgoTrack future;
  if (future_override) {
    future = *future_override;
  } else {
    future.assign(seq.ego.begin() + static_cast<int64_t>(tp), seq.ego.begin() + static_cast<int64_t>(tp) + horizon);
  }
  return wm::rollout(tokenizer, model, history, past, &future, opt);
}

}  // namespace gem::cli
