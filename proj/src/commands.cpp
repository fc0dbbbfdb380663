#include "gem/commands.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "gem/binary_io.hpp"
#include "gem/checkpoint.hpp"
#include "gem/metrics.hpp"
#include "gem/parallel.hpp"
#include "gem/pipeline.hpp"
#include "json.hpp"

namespace gem::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kTokenizerCkpt = "tokenizer.ckpt";
constexpr const char* kWorldModelCkpt = "wm.ckpt";

struct Context {
  const CommandOptions& opt;
  RunConfig cfg;
  std::vector<std::string> defaulted;
  std::ostream& log;
  ordered_json inputs = ordered_json::object();
  ordered_json outputs = ordered_json::object();
  ordered_json extra = ordered_json::object();

  fs::path data_root() const { return cfg.data_dir; }
  void input_file(const std::string& role, const fs::path& p) { inputs[role] = {{"path", p.string()}, {"sha1", ckpt::sha1_file(p)}}; }
  void input_tree(const std::string& role, const fs::path& p) { inputs[role] = {{"path", p.string()}, {"sha1", tree_sha1(p)}}; }
  // Outputs are recorded relative to --out so a tree does not depend on where it was written.
  std::string rel(const fs::path& p) const { return fs::proximate(p, opt.out).generic_string(); }
  void output_file(const std::string& role, const fs::path& p) { outputs[role] = {{"path", rel(p)}, {"sha1", ckpt::sha1_file(p)}}; }
  void output_tree(const std::string& role, const fs::path& p) { outputs[role] = {{"path", rel(p)}, {"sha1", tree_sha1(p)}}; }
};

void write_manifest(const std::string& name, Context& ctx, const fs::path& dir) {
  const std::string config_json = to_json(ctx.cfg);
  ordered_json m;
  m["command"] = name;
  m["seed"] = ctx.cfg.seed;
  m["config_sha1"] = ckpt::sha1_hex(config_json.data(), config_json.size());
  m["config"] = ordered_json::parse(config_json);
  m["defaults"] = ctx.defaulted;
  if (name != "synth") {
    m["mode"] = ctx.opt.mode;
    m["horizon"] = ctx.opt.horizon;
  }
  m["inputs"] = ctx.inputs;
  m["outputs"] = ctx.outputs;
  for (const auto& [k, v] : ctx.extra.items()) m[k] = v;
  io::write_text(dir / (name + ".manifest.json"), m.dump(2) + "\n");
}

fs::path require_checkpoint(const fs::path& p) {
  if (!fs::exists(p)) throw Error("missing checkpoint: " + p.string());
  return p;
}

std::vector<geom::RangeImage> load_images(const fs::path& root, const geom::SensorConfig& sensor) {
  std::vector<geom::RangeImage> images;
  for (const auto& dir : sequence_dirs(root))
    for (auto& r : load_sequence(dir, sensor).ranges) images.push_back(std::move(r));
  return images;
}

// The dataset must have been generated with the configured sensor and be
// long enough for the requested horizon.
void check_dataset(const fs::path& dir, const RunConfig& cfg, int64_t needed_frames) {
  const auto m = ordered_json::parse(io::read_text(dir / "manifest.json"));
  const auto& s = m.at("spec").at("sensor");
  if (s.at("n_lasers").get<int64_t>() != cfg.sensor.n_lasers || s.at("n_azimuth").get<int64_t>() != cfg.sensor.n_azimuth)
    throw Error("dataset sensor resolution differs from the config: " + dir.string());
  const auto frames = m.at("frame_count").get<int64_t>();
  if (frames < needed_frames)
    throw Error("horizon mismatch between config and dataset: need " + std::to_string(needed_frames) +
                " frames, " + dir.string() + " has " + std::to_string(frames));
}

void cmd_synth(Context& ctx) {
  const fs::path root = ctx.opt.out;
  const auto dirs = write_dataset(ctx.cfg, root);
  ctx.log << "synth: wrote " << dirs.size() << " sequences under " << root << "\n";
  ctx.output_tree("train", root / "train");
  ctx.output_tree("test", root / "test");
  write_manifest("synth", ctx, root);
}

void cmd_train_tokenizer(Context& ctx) {
  const fs::path out = ctx.opt.out;
  ctx.input_tree("train_data", ctx.data_root() / "train");
  const auto images = load_images(ctx.data_root() / "train", ctx.cfg.sensor);
  ctx.log << "train-tokenizer: " << images.size() << " sweeps, " << ctx.cfg.tokenizer_train.steps << " steps\n";
  std::ostringstream csv;
  csv << "step,total,recon,codebook,commit,g_adv,d_adv,used_codes,restarts\n";
  auto model = train_tokenizer(ctx.cfg, images, [&](const tok::TrainLog& l) {
    csv << l.step << ',' << l.total << ',' << l.recon << ',' << l.codebook << ',' << l.commit << ',' << l.g_adv << ','
        << l.d_adv << ',' << l.used_codes << ',' << l.restarts << '\n';
    ctx.log << "  step " << l.step << " recon " << l.recon << " used " << l.used_codes << "\n";
  });
  fs::create_directories(out);
  save_tokenizer(out / kTokenizerCkpt, model, ctx.cfg, ctx.cfg.tokenizer_train.steps);
  io::write_text(out / "tokenizer_train.csv", csv.str());

  const auto held_out = load_images(ctx.data_root() / "test", ctx.cfg.sensor);
  const auto stats = tok::evaluate_reconstruction(model, held_out);
  ordered_json ev{{"heldout_mae_m", stats.mae}, {"valid_accuracy", stats.valid_accuracy}, {"codebook_usage", stats.usage}};
  io::write_text(out / "tokenizer_eval.json", ev.dump(2) + "\n");
  ctx.log << "train-tokenizer: held-out MAE " << stats.mae << " m, usage " << stats.usage << "\n";
  ctx.output_file("checkpoint", out / kTokenizerCkpt);
  ctx.extra["heldout"] = ev;
  write_manifest("train-tokenizer", ctx, out);
}

void cmd_train_wm(Context& ctx) {
  const fs::path out = ctx.opt.out;
  const auto tok_path = require_checkpoint(out / kTokenizerCkpt);
  ctx.input_file("tokenizer", tok_path);
  ctx.input_tree("train_data", ctx.data_root() / "train");
  const auto tokenizer = load_tokenizer(tok_path, ctx.cfg);
  std::vector<wm::SequenceLatents> latents;
  for (const auto& dir : sequence_dirs(ctx.data_root() / "train")) {
    check_dataset(dir, ctx.cfg, ctx.cfg.world_model.frames());
    latents.push_back(encode_sequence(tokenizer, load_sequence(dir, ctx.cfg.sensor)));
  }
  ctx.log << "train-wm: " << latents.size() << " sequences, " << ctx.cfg.wm_train.steps << " steps, ablation "
          << ctx.cfg.world_model.ablation.describe() << "\n";
  wm::WorldModel model(ctx.cfg.world_model, derive_seed(ctx.cfg.seed, Stream::kInit, 2));
  std::ostringstream csv;
  csv << "step,loss,diffusion,planner\n";
  train_world_model(model, ctx.cfg, latents, [&](const wm::WmTrainLog& l) {
    csv << l.step << ',' << l.loss << ',' << l.diffusion << ',' << l.planner << '\n';
    ctx.log << "  step " << l.step << " loss " << l.loss << "\n";
  });
  save_world_model(out / kWorldModelCkpt, model, ctx.cfg, ctx.cfg.wm_train.steps);
  io::write_text(out / "wm_train.csv", csv.str());
  ctx.output_file("checkpoint", out / kWorldModelCkpt);
  write_manifest("train-wm", ctx, out);
}

// Shared by predict (one sampling round) and rollout (autoregressive).
void write_predictions(Context& ctx, const std::string& name, bool single_round) {
  const fs::path out = ctx.opt.out;
  const auto mode = wm::parse_rollout_mode(ctx.opt.mode);
  if (mode == wm::RolloutMode::kPlanner && !ctx.cfg.world_model.planner)
    throw Error(name + ": planner mode requested but the config disables the planner");
  const int64_t horizon = ctx.cfg.horizon(ctx.opt.horizon);
  if (single_round && horizon > ctx.cfg.world_model.future)
    throw Error("predict: horizon " + std::to_string(horizon) + " exceeds tau_f; use rollout for longer horizons");
  const auto tok_path = require_checkpoint(out / kTokenizerCkpt);
  const auto wm_path = require_checkpoint(out / kWorldModelCkpt);
  ctx.input_file("tokenizer", tok_path);
  ctx.input_file("world_model", wm_path);
  ctx.input_tree("test_data", ctx.data_root() / "test");
  const auto tokenizer = load_tokenizer(tok_path, ctx.cfg);
  const auto model = load_world_model(wm_path, ctx.cfg);

  const fs::path pred_root = ctx.cfg.predictions_dir.empty() ? out / "pred" : fs::path(ctx.cfg.predictions_dir);
  const auto dirs = sequence_dirs(ctx.data_root() / "test");
  for (const auto& dir : dirs) check_dataset(dir, ctx.cfg, ctx.cfg.world_model.history + horizon);
  const int64_t tp = ctx.cfg.world_model.history;
  parallel_for(static_cast<int64_t>(dirs.size()), [&](int64_t i) {
    const auto& dir = dirs[static_cast<size_t>(i)];
    const auto seq = load_sequence(dir, ctx.cfg.sensor);
    const uint64_t seed = derive_seed(ctx.cfg.seed, Stream::kSampler, static_cast<uint64_t>(i));
    const auto res = predict_sequence(tokenizer, model, seq, horizon, mode, seed);
    std::vector<synth::SceneFrame> frames(res.clouds.size());
    for (size_t k = 0; k < frames.size(); ++k) {
      frames[k].cloud = res.clouds[k];
      frames[k].ego = res.ego[k];
      frames[k].layout = seq.layouts[static_cast<size_t>(tp) + k];
      frames[k].dynamic_mask.assign(res.clouds[k].size(), 0);
    }
    auto spec = ctx.cfg.scene_spec(0, true);
    spec.frames = static_cast<int64_t>(frames.size());
    const fs::path target = pred_root / dir.filename();
    synth::write_sequence(target, spec, frames);
    ordered_json meta;
    meta["mode"] = wm::to_string(mode);
    meta["seed"] = seed;
    meta["T_sample"] = ctx.cfg.world_model.sample_steps;
    meta["horizon"] = horizon;
    meta["first_frame"] = tp;
    meta["source"] = dir.string();
    meta["checkpoints"] = {{"tokenizer", ctx.inputs["tokenizer"]["sha1"]}, {"world_model", ctx.inputs["world_model"]["sha1"]}};
    io::write_text(target / "pred_meta.json", meta.dump(2) + "\n");
  });
  ctx.log << name << ": " << dirs.size() << " sequences, horizon " << horizon << ", mode " << wm::to_string(mode)
          << " -> " << pred_root << "\n";
  ctx.output_tree("predictions", pred_root);
  write_manifest(name, ctx, out);
}

void cmd_eval(Context& ctx) {
  const fs::path out = ctx.opt.out;
  const fs::path pred_root = ctx.cfg.predictions_dir.empty() ? out / "pred" : fs::path(ctx.cfg.predictions_dir);
  const fs::path gt_root = ctx.data_root() / "test";
  ctx.input_tree("predictions", pred_root);
  ctx.input_tree("test_data", gt_root);
  const auto& ev = ctx.cfg.eval;

  struct Row {
    std::string seq;
    int64_t frame;
    std::string metric;
    double value;
  };
  std::vector<Row> rows;
  std::map<std::string, std::vector<double>> series;
  std::vector<metrics::BEVHistogram> gen_final, ref_final;
  for (const auto& pdir : sequence_dirs(pred_root)) {
    const fs::path gdir = gt_root / pdir.filename();
    if (!fs::exists(gdir / "manifest.json")) throw Error("eval: no ground truth for " + pdir.filename().string());
    int64_t first = 0;
    if (fs::exists(pdir / "pred_meta.json"))
      first = ordered_json::parse(io::read_text(pdir / "pred_meta.json")).at("first_frame").get<int64_t>();
    const auto pred = load_sequence(pdir, ctx.cfg.sensor);
    const auto gt = load_sequence(gdir, ctx.cfg.sensor);
    if (first + static_cast<int64_t>(pred.frames()) > static_cast<int64_t>(gt.frames()))
      throw Error("horizon mismatch between predictions and dataset for " + pdir.filename().string());
    for (size_t k = 0; k < pred.frames(); ++k) {
      const size_t g = static_cast<size_t>(first) + k;
      const auto emit = [&](const std::string& metric, std::optional<double> v) {
        if (!v) return;
        rows.push_back({pdir.filename().string(), static_cast<int64_t>(k) + 1, metric, *v});
        series[metric].push_back(*v);
      };
      emit("cd", metrics::chamfer(pred.clouds[k], gt.clouds[g]));
      emit("cd_inner", metrics::chamfer_inner(pred.clouds[k], gt.clouds[g], ev.inner_radius));
      const auto depth = metrics::depth_errors(gt.ranges[g], pred.ranges[k]);
      emit("l1", depth ? std::optional(depth->l1) : std::nullopt);
      emit("absrel", depth ? std::optional(depth->absrel) : std::nullopt);
      const auto hp = metrics::bev_histogram(pred.clouds[k], ev.bev_bins, ev.bev_extent);
      const auto hg = metrics::bev_histogram(gt.clouds[g], ev.bev_bins, ev.bev_extent);
      emit("jsd", metrics::jsd(hp, hg));
      if (k + 1 == pred.frames()) {
        gen_final.push_back(hp);
        ref_final.push_back(hg);
      }
    }
  }
  std::ostringstream report;
  report.precision(10);
  report << "sequence,frame,metric,value\n";
  for (const auto& r : rows) report << r.seq << ',' << r.frame << ',' << r.metric << ',' << r.value << '\n';
  ordered_json summary = ordered_json::object();
  for (const auto& [metric, v] : series) {
    double m = 0;
    for (double x : v) m += x;
    summary[metric] = m / static_cast<double>(v.size());
    report << "mean,," << metric << ',' << summary[metric].get<double>() << '\n';
  }
  auto put_optional = [&](const std::string& key, std::optional<double> v) {
    summary[key] = v ? ordered_json(*v) : ordered_json(nullptr);
    if (v) report << "aggregate,," << key << ',' << *v << '\n';
  };
  if (series.count("l1")) put_optional("l1_sr", metrics::stability_ratio(series["l1"]));
  if (series.count("absrel")) put_optional("absrel_sr", metrics::stability_ratio(series["absrel"]));
  const auto mmd = metrics::mmd(gen_final, ref_final);
  put_optional("mmd_x1e-4", mmd ? std::optional(*mmd / 1e-4) : std::nullopt);

  fs::create_directories(out / "eval");
  io::write_text(out / "eval" / "report.csv", report.str());
  io::write_text(out / "eval" / "summary.json", summary.dump(2) + "\n");
  ctx.log << "eval: " << rows.size() << " records, mean cd " << (summary.contains("cd") ? summary["cd"].dump() : "n/a")
          << "\n";
  ctx.output_file("report", out / "eval" / "report.csv");
  ctx.output_file("summary", out / "eval" / "summary.json");
  write_manifest("eval", ctx, out);
}

void cmd_plot_deform(Context& ctx) {
  const fs::path out = ctx.opt.out;
  const auto tok_path = require_checkpoint(out / kTokenizerCkpt);
  const auto wm_path = require_checkpoint(out / kWorldModelCkpt);
  ctx.input_file("tokenizer", tok_path);
  ctx.input_file("world_model", wm_path);
  const auto tokenizer = load_tokenizer(tok_path, ctx.cfg);
  const auto model = load_world_model(wm_path, ctx.cfg);
  const auto& wc = model.config();
  const auto dir = sequence_dirs(ctx.data_root() / "test").front();
  check_dataset(dir, ctx.cfg, wc.frames());
  ctx.input_tree("sequence", dir);
  const auto seq = load_sequence(dir, ctx.cfg.sensor);
  auto lat = encode_sequence(tokenizer, seq);
  for (auto& z : lat.latents)
    for (double& v : z.storage()) v /= model.latent_scale();
  const Tensor z_p = wm::stack_frames(lat.latents, 0, static_cast<size_t>(wc.history));
  const Tensor z_f = wm::stack_frames(lat.latents, static_cast<size_t>(wc.history), static_cast<size_t>(wc.frames()));
  // Offsets are read at a lightly noised step so the map reflects the data.
  const int64_t t = std::max<int64_t>(1, wc.diffusion_steps / 10);
  Rng rng(derive_seed(ctx.cfg.seed, Stream::kNoise, 0));
  const Tensor z_t = wm::add_noise(model.schedule(), z_f, t, rng.normal_tensor(z_f.shape()));
  const wm::EgoTrack past(seq.ego.begin(), seq.ego.begin() + wc.history);
  const wm::EgoTrack fut(seq.ego.begin() + wc.history, seq.ego.begin() + wc.frames());
  std::vector<tri::BlockTrace> traces;
  {
    nn::NoGradGuard ng;
    model.predict_noise(z_p, nn::constant(z_t), model.condition(past, fut, static_cast<double>(t), nullptr), &traces);
  }
  const tri::Lattice latt{wc.frames(), wc.latent_h, wc.latent_w};
  const auto heat = tri::deform_heatmap(traces, latt, wc.tri_path.offset_scale);

  fs::create_directories(out / "deform");
  float peak = 1e-12f;
  for (float v : heat.dynamic) peak = std::max(peak, v);
  for (float v : heat.stat) peak = std::max(peak, v);
  std::ostringstream csv;
  csv << "branch,t,row,col,offset\n";
  const int64_t plane = latt.h * latt.w;
  auto emit = [&](const std::string& branch, const std::vector<float>& v) {
    if (v.empty()) return;
    std::vector<float> scaled(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
      scaled[i] = v[i] / peak;
      csv << branch << ',' << static_cast<int64_t>(i) / plane << ',' << (static_cast<int64_t>(i) % plane) / latt.w << ','
          << static_cast<int64_t>(i) % latt.w << ',' << v[i] << '\n';
    }
    // Frames are stacked vertically.
    const fs::path p = out / "deform" / ("deform_" + branch + ".ppm");
    write_heatmap_ppm(p, scaled, latt.t * latt.h, latt.w);
    ctx.output_file(branch, p);
  };
  emit("dynamic", heat.dynamic);
  emit("static", heat.stat);
  io::write_text(out / "deform" / "deform.csv", csv.str());
  ctx.output_file("csv", out / "deform" / "deform.csv");
  ctx.log << "plot-deform: " << traces.size() << " blocks, peak offset " << peak << " cells\n";
  write_manifest("plot-deform", ctx, out);
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synth", "train-tokenizer", "train-wm", "predict",
                                                 "rollout", "eval", "plot-deform"};
  return names;
}

ParsedConfig resolve_config(const CommandOptions& opt) {
  std::string text = "{}";
  if (!opt.config.empty()) {
    try {
      text = io::read_text(opt.config);
    } catch (const Error&) {
      throw ConfigError(ConfigError::Kind::kUnreadable, "", "config: cannot read '" + opt.config.string() + "'");
    }
  }
  if (!opt.seed && !opt.ablate) return parse_config_text(text);
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(ConfigError::Kind::kSyntax, "", std::string("config: malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError(ConfigError::Kind::kSyntax, "", "config: top level must be an object");
  if (opt.seed) doc["seed"] = *opt.seed;
  if (opt.ablate) {
    if (doc.contains("tri_path") && !doc["tri_path"].is_object())
      throw ConfigError(ConfigError::Kind::kType, "tri_path", "config: 'tri_path' must be an object");
    doc["tri_path"]["ablate"] = *opt.ablate;
  }
  return parse_config_text(doc.dump());
}

void run_command(const std::string& name, const CommandOptions& opt, std::ostream& log) {
  if (std::find(command_names().begin(), command_names().end(), name) == command_names().end())
    throw Error("unknown command '" + name + "'");
  auto parsed = resolve_config(opt);
  Context ctx{opt, parsed.config, parsed.defaulted, log};
  log << name << ": seed " << ctx.cfg.seed << ", workers " << num_workers() << "\n";
  for (const auto& k : ctx.defaulted) log << "  default " << k << "\n";
  if (name == "synth") cmd_synth(ctx);
  else if (name == "train-tokenizer") cmd_train_tokenizer(ctx);
  else if (name == "train-wm") cmd_train_wm(ctx);
  else if (name == "predict") write_predictions(ctx, name, true);
  else if (name == "rollout") write_predictions(ctx, name, false);
  else if (name == "eval") cmd_eval(ctx);
  else cmd_plot_deform(ctx);
}

std::string tree_sha1(const fs::path& root) {
  if (!fs::is_directory(root)) throw Error("not a directory: " + root.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  std::sort(files.begin(), files.end());
  std::string listing;
  for (const auto& f : files) listing += f.generic_string() + " " + ckpt::sha1_file(root / f) + "\n";
  return ckpt::sha1_hex(listing.data(), listing.size());
}

void write_heatmap_ppm(const fs::path& path, const std::vector<float>& values, int64_t rows, int64_t cols, int64_t cell) {
  if (static_cast<int64_t>(values.size()) != rows * cols) throw Error("heatmap: size mismatch");
  const int64_t H = rows * cell, W = cols * cell;
  std::string header = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  std::vector<uint8_t> buf(header.begin(), header.end());
  for (int64_t y = 0; y < H; ++y)
    for (int64_t x = 0; x < W; ++x) {
      const double v = std::clamp(static_cast<double>(values[static_cast<size_t>((y / cell) * cols + x / cell)]), 0.0, 1.0);
      // Black -> red -> yellow -> white.
      buf.push_back(static_cast<uint8_t>(std::lround(255 * std::min(1.0, 3 * v))));
      buf.push_back(static_cast<uint8_t>(std::lround(255 * std::clamp(3 * v - 1, 0.0, 1.0))));
      buf.push_back(static_cast<uint8_t>(std::lround(255 * std::clamp(3 * v - 2, 0.0, 1.0))));
    }
  io::write_file(path, buf);
}

}  // namespace gem::cli
