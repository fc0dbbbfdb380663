#include "gem/config.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <set>

#include "gem/binary_io.hpp"
#include "json.hpp"

namespace gem::cli {

using nlohmann::ordered_json;

ConfigError::ConfigError(Kind kind, std::string key, const std::string& message)
    : Error(message), kind_(kind), key_(std::move(key)) {}

namespace {

constexpr double kHalfPi = std::numbers::pi / 2.0;  // sensor angles are radians

struct Field {
  std::string key;
  std::function<ordered_json(const RunConfig&)> get;
  std::function<void(RunConfig&, const ordered_json&)> set;
};

[[noreturn]] void range_error(const std::string& key, const std::string& what) {
  throw ConfigError(ConfigError::Kind::kRange, key, "config: '" + key + "' out of range: " + what);
}

[[noreturn]] void type_error(const std::string& key, const std::string& expected) {
  throw ConfigError(ConfigError::Kind::kType, key, "config: '" + key + "' must be " + expected);
}

template <typename Acc>
Field int_field(std::string key, Acc acc, int64_t lo, int64_t hi) {
  return {key, [acc](const RunConfig& c) { return ordered_json(acc(const_cast<RunConfig&>(c))); },
          [acc, key, lo, hi](RunConfig& c, const ordered_json& v) {
            if (!v.is_number_integer()) type_error(key, "an integer");
            if (v.is_number_unsigned() && v.get<uint64_t>() > static_cast<uint64_t>(hi))
              range_error(key, "must be <= " + std::to_string(hi));
            const int64_t x = v.get<int64_t>();
            if (x < lo || x > hi) range_error(key, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
            acc(c) = x;
          }};
}

// Open or closed lower bound; the upper bound is always inclusive.
template <typename Acc>
Field real_field(std::string key, Acc acc, double lo, double hi, bool open_lo = false) {
  return {key, [acc](const RunConfig& c) { return ordered_json(acc(const_cast<RunConfig&>(c))); },
          [acc, key, lo, hi, open_lo](RunConfig& c, const ordered_json& v) {
            if (!v.is_number()) type_error(key, "a number");
            const double x = v.get<double>();
            const bool ok = std::isfinite(x) && (open_lo ? x > lo : x >= lo) && x <= hi;
            if (!ok)
              range_error(key, std::string("must be in ") + (open_lo ? "(" : "[") + std::to_string(lo) + ", " +
                                   std::to_string(hi) + "]");
            acc(c) = x;
          }};
}

template <typename Acc>
Field bool_field(std::string key, Acc acc) {
  return {key, [acc](const RunConfig& c) { return ordered_json(acc(const_cast<RunConfig&>(c))); },
          [acc, key](RunConfig& c, const ordered_json& v) {
            if (!v.is_boolean()) type_error(key, "a boolean");
            acc(c) = v.get<bool>();
          }};
}

template <typename Acc>
Field string_field(std::string key, Acc acc) {
  return {key, [acc](const RunConfig& c) { return ordered_json(acc(const_cast<RunConfig&>(c))); },
          [acc, key](RunConfig& c, const ordered_json& v) {
            if (!v.is_string()) type_error(key, "a string");
            acc(c) = v.get<std::string>();
          }};
}

Field seed_field() {
  return {"seed", [](const RunConfig& c) { return ordered_json(c.seed); },
          [](RunConfig& c, const ordered_json& v) {
            if (!v.is_number_integer()) type_error("seed", "an integer");
            if (v.is_number_integer() && !v.is_number_unsigned() && v.get<int64_t>() < 0)
              range_error("seed", "must be non-negative");
            c.seed = v.get<uint64_t>();
          }};
}

Field ablate_field() {
  return {"tri_path.ablate",
          [](const RunConfig& c) {
            const std::string d = c.world_model.ablation.describe();
            return ordered_json(d == "full" ? "" : d);
          },
          [](RunConfig& c, const ordered_json& v) {
            if (!v.is_string()) type_error("tri_path.ablate", "a string");
            try {
              c.world_model.ablation = sep::Ablation::disabled(v.get<std::string>());
            } catch (const Error& e) {
              range_error("tri_path.ablate", e.what());
            }
          }};
}

Field schedule_field() {
  return {"diffusion.schedule", [](const RunConfig& c) { return ordered_json(c.schedule); },
          [](RunConfig& c, const ordered_json& v) {
            if (!v.is_string()) type_error("diffusion.schedule", "a string");
            if (v.get<std::string>() != "cosine") range_error("diffusion.schedule", "only 'cosine' is supported");
            c.schedule = v.get<std::string>();
          }};
}

#define ACC(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  constexpr int64_t kBig = 1'000'000'000;
  static const std::vector<Field> all = {
      seed_field(),
      int_field("sensor.n_lasers", ACC(sensor.n_lasers), 2, 4096),
      int_field("sensor.n_azimuth", ACC(sensor.n_azimuth), 4, 65536),
      real_field("sensor.fov_up", ACC(sensor.fov_up), -kHalfPi, kHalfPi),
      real_field("sensor.fov_down", ACC(sensor.fov_down), -kHalfPi, kHalfPi),
      real_field("sensor.r_min", ACC(sensor.r_min), 0.0, 1000.0, true),
      real_field("sensor.r_max", ACC(sensor.r_max), 0.0, 1000.0, true),
      int_field("data.train_sequences", ACC(data.train_sequences), 1, 100000),
      int_field("data.test_sequences", ACC(data.test_sequences), 1, 100000),
      int_field("data.frames", ACC(data.frames), 2, 10000),
      real_field("data.frame_dt", ACC(data.frame_dt), 0.0, 10.0, true),
      int_field("data.n_static_boxes", ACC(data.n_static_boxes), 0, 1000),
      int_field("data.n_dynamic_boxes", ACC(data.n_dynamic_boxes), 0, 1000),
      real_field("data.ego_speed", ACC(data.ego_speed), 0.0, 50.0),
      real_field("data.ego_yaw_rate", ACC(data.ego_yaw_rate), 0.0, 2.0),
      int_field("data.bev_size", ACC(data.bev_size), 16, 4096),
      real_field("data.bev_extent", ACC(data.bev_extent), 0.0, 10000.0, true),
      int_field("tokenizer.K", ACC(tokenizer.codebook_size), 2, 1 << 20),
      int_field("tokenizer.C", ACC(tokenizer.latent_channels), 1, 4096),
      real_field("tokenizer.beta", ACC(tokenizer.beta), 0.0, 100.0),
      int_field("tokenizer.down_v", ACC(tokenizer.down_v), 1, 4096),
      int_field("tokenizer.down_h", ACC(tokenizer.down_h), 1, 65536),
      int_field("tokenizer.width", ACC(tokenizer.width), 1, 4096),
      int_field("tokenizer.d_state", ACC(tokenizer.d_state), 1, 1024),
      int_field("tokenizer.blocks", ACC(tokenizer.blocks), 1, 64),
      bool_field("tokenizer.full_res_mamba", ACC(tokenizer.full_res_mamba)),
      bool_field("tokenizer.bidirectional", ACC(tokenizer.bidirectional)),
      real_field("tokenizer.adv_weight", ACC(tokenizer.adv_weight), 0.0, 100.0),
      real_field("tokenizer.adv_warmup", ACC(tokenizer.adv_warmup), 0.0, 1.0),
      int_field("tokenizer.disc_width", ACC(tokenizer.disc_width), 1, 4096),
      int_field("tokenizer.restart_after", ACC(tokenizer.restart_after), 1, kBig),
      real_field("tokenizer.lr", ACC(tokenizer.lr), 0.0, 1.0, true),
      real_field("tokenizer.disc_lr", ACC(tokenizer.disc_lr), 0.0, 1.0, true),
      int_field("tokenizer.steps", ACC(tokenizer_train.steps), 1, kBig),
      int_field("tokenizer.batch", ACC(tokenizer_train.batch), 1, 4096),
      int_field("tokenizer.log_every", ACC(tokenizer_train.log_every), 0, kBig),
      int_field("separator.window", ACC(world_model.separator.window), 1, 999),
      int_field("separator.channels", ACC(world_model.separator.channels), 1, 4096),
      int_field("separator.gate_kernel", ACC(world_model.separator.gate_kernel), 1, 15),
      int_field("tri_path.blocks", ACC(world_model.tri_path.blocks), 1, 64),
      real_field("tri_path.offset_scale", ACC(world_model.tri_path.offset_scale), 0.0, 1000.0),
      int_field("tri_path.offset_hidden", ACC(world_model.tri_path.offset_hidden), 1, 4096),
      int_field("tri_path.d_state", ACC(world_model.tri_path.d_state), 1, 1024),
      int_field("tri_path.expand", ACC(world_model.tri_path.expand), 1, 64),
      bool_field("tri_path.bidirectional", ACC(world_model.tri_path.bidirectional)),
      int_field("tri_path.groups", ACC(world_model.tri_path.groups), 1, 4096),
      int_field("tri_path.gate_kernel", ACC(world_model.tri_path.gate_kernel), 1, 15),
      ablate_field(),
      int_field("diffusion.T", ACC(world_model.diffusion_steps), 1, 100000),
      schedule_field(),
      int_field("diffusion.sample_steps", ACC(world_model.sample_steps), 1, 100000),
      real_field("diffusion.x0_clip", ACC(world_model.x0_clip), 0.0, 1e6, true),
      real_field("diffusion.start_fraction", ACC(world_model.start_fraction), 0.0, 1.0, true),
      int_field("condition.cond_dim", ACC(world_model.cond_dim), 1, 4096),
      int_field("condition.time_embed_dim", ACC(world_model.time_embed_dim), 2, 4096),
      bool_field("condition.layout", ACC(world_model.layout)),
      real_field("condition.layout_dropout", ACC(world_model.layout_dropout), 0.0, 1.0),
      bool_field("planner.enabled", ACC(world_model.planner)),
      int_field("planner.hidden", ACC(world_model.planner_hidden), 1, 4096),
      real_field("planner.weight", ACC(world_model.planner_weight), 0.0, 1000.0),
      int_field("horizons.history", ACC(world_model.history), 1, 64),
      int_field("horizons.future", ACC(world_model.future), 1, 64),
      int_field("horizons.short", ACC(short_horizon), 1, 10000),
      int_field("horizons.long", ACC(long_horizon), 1, 10000),
      real_field("world_model.lr", ACC(world_model.lr), 0.0, 1.0, true),
      int_field("world_model.steps", ACC(wm_train.steps), 1, kBig),
      int_field("world_model.batch", ACC(wm_train.batch), 1, 4096),
      int_field("world_model.log_every", ACC(wm_train.log_every), 0, kBig),
      int_field("world_model.window_stride", ACC(window_stride), 1, 10000),
      real_field("eval.inner_radius", ACC(eval.inner_radius), 0.0, 10000.0, true),
      int_field("eval.bev_bins", ACC(eval.bev_bins), 1, 4096),
      real_field("eval.bev_extent", ACC(eval.bev_extent), 0.0, 100000.0, true),
      string_field("paths.data", ACC(data_dir)),
      string_field("paths.predictions", ACC(predictions_dir)),
  };
  return all;
}

#undef ACC

const std::map<std::string, const Field*>& field_index() {
  static const auto index = [] {
    std::map<std::string, const Field*> m;
    for (const auto& f : fields()) m[f.key] = &f;
    return m;
  }();
  return index;
}

bool is_section(const std::string& prefix) {
  for (const auto& f : fields())
    if (f.key.size() > prefix.size() && f.key.compare(0, prefix.size(), prefix) == 0 && f.key[prefix.size()] == '.')
      return true;
  return false;
}

void apply(const ordered_json& obj, const std::string& prefix, RunConfig& c, std::set<std::string>& seen) {
  for (const auto& [name, value] : obj.items()) {
    const std::string key = prefix.empty() ? name : prefix + "." + name;
    const auto it = field_index().find(key);
    if (it != field_index().end()) {
      it->second->set(c, value);
      seen.insert(key);
    } else if (is_section(key)) {
      if (!value.is_object()) type_error(key, "an object");
      apply(value, key, c, seen);
    } else {
      throw ConfigError(ConfigError::Kind::kUnknownKey, key, "config: unknown key '" + key + "'");
    }
  }
}

// Wraps a library validation failure so callers see a range diagnostic.
template <typename F>
void check(const std::string& scope, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    range_error(scope, e.what());
  }
}

}  // namespace

void RunConfig::finalize() {
  check("sensor", [&] { sensor.validate(); });
  check("tokenizer", [&] { tokenizer.validate(sensor); });
  world_model.latent_h = tokenizer.latent_h(sensor);
  world_model.latent_w = tokenizer.latent_w(sensor);
  world_model.latent_channels = tokenizer.latent_channels;
  world_model.layout_size = data.bev_size;
  check("world_model", [&] { world_model.validate(); });
  if (world_model.frames() > data.frames)
    range_error("horizons", "history + future exceeds data.frames");
  if (world_model.history + short_horizon > data.frames) range_error("horizons.short", "history + short exceeds data.frames");
  if (world_model.history + long_horizon > data.frames) range_error("horizons.long", "history + long exceeds data.frames");
  check("data", [&] { scene_spec(0, false).validate(); });
}

int64_t RunConfig::horizon(const std::string& name) const {
  if (name == "short") return short_horizon;
  if (name == "long") return long_horizon;
  throw Error("unknown horizon '" + name + "' (expected short or long)");
}

synth::SceneSpec RunConfig::scene_spec(int64_t index, bool test) const {
  synth::SceneSpec s;
  s.sensor = sensor;
  s.frames = data.frames;
  s.frame_dt = data.frame_dt;
  s.n_static_boxes = data.n_static_boxes;
  s.n_dynamic_boxes = data.n_dynamic_boxes;
  s.ego_speed = data.ego_speed;
  s.bev_size = data.bev_size;
  s.bev_extent = data.bev_extent;
  // Profiles cycle straight, straight, left arc, right arc, stop.
  switch (index % 5) {
    case 0:
    case 1:
      s.ego = synth::EgoProfile::kStraight;
      break;
    case 2:
      s.ego = synth::EgoProfile::kArc;
      s.ego_yaw_rate = data.ego_yaw_rate;
      break;
    case 3:
      s.ego = synth::EgoProfile::kArc;
      s.ego_yaw_rate = -data.ego_yaw_rate;
      break;
    default:
      s.ego = synth::EgoProfile::kStop;
  }
  s.seed = derive_seed(seed, Stream::kScene, static_cast<uint64_t>(index) * 2 + (test ? 1 : 0));
  return s;
}

ParsedConfig parse_config_text(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(ConfigError::Kind::kSyntax, "", std::string("config: malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError(ConfigError::Kind::kSyntax, "", "config: top level must be an object");
  ParsedConfig out;
  std::set<std::string> seen;
  apply(doc, "", out.config, seen);
  for (const auto& f : fields())
    if (!seen.count(f.key)) out.defaulted.push_back(f.key);
  out.config.finalize();
  return out;
}

ParsedConfig parse_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const Error&) {
    throw ConfigError(ConfigError::Kind::kUnreadable, "", "config: cannot read '" + path.string() + "'");
  }
  return parse_config_text(text);
}

std::string to_json(const RunConfig& c) {
  ordered_json doc = ordered_json::object();
  for (const auto& f : fields()) {
    ordered_json* node = &doc;
    size_t start = 0;
    for (size_t dot; (dot = f.key.find('.', start)) != std::string::npos; start = dot + 1)
      node = &(*node)[f.key.substr(start, dot - start)];
    (*node)[f.key.substr(start)] = f.get(c);
  }
  return doc.dump(2) + "\n";
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

bool operator==(const RunConfig& a, const RunConfig& b) {
  for (const auto& f : fields())
    if (f.get(a) != f.get(b)) return false;
  return true;
}

}  // namespace gem::cli
