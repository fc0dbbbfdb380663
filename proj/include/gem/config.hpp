#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gem/diffusion_wm.hpp"
#include "gem/synth_world.hpp"
#include "gem/tokenizer.hpp"

// Run configuration: one JSON document with sections for every stage.
// Unknown keys and out-of-range values are rejected with the dotted key.
namespace gem::cli {

class ConfigError : public Error {
 public:
  enum class Kind { kUnreadable, kSyntax, kUnknownKey, kType, kRange };
  ConfigError(Kind kind, std::string key, const std::string& message);
  Kind kind() const { return kind_; }
  const std::string& key() const { return key_; }

 private:
  Kind kind_;
  std::string key_;
};

struct DataConfig {
  int64_t train_sequences = 200;
  int64_t test_sequences = 20;
  int64_t frames = 12;
  double frame_dt = 0.5;
  int64_t n_static_boxes = 8;
  int64_t n_dynamic_boxes = 3;
  double ego_speed = 3.0;
  double ego_yaw_rate = 0.2;
  int64_t bev_size = 64;
  double bev_extent = 64.0;
};

struct TrainConfig {
  int64_t steps = 1000;
  int64_t batch = 1;
  int64_t log_every = 100;
};

struct EvalConfig {
  double inner_radius = 10.0;
  int64_t bev_bins = 100;
  double bev_extent = 100.0;
};

struct RunConfig {
  uint64_t seed = 0;
  geom::SensorConfig sensor;
  DataConfig data;
  tok::TokenizerConfig tokenizer;
  TrainConfig tokenizer_train{.steps = 50000};
  // Latent dimensions are derived from the tokenizer and sensor.
  wm::WorldModelConfig world_model;
  TrainConfig wm_train{.steps = 20000};
  int64_t window_stride = 1;
  std::string schedule = "cosine";
  int64_t short_horizon = 5;
  int64_t long_horizon = 9;
  EvalConfig eval;
  std::string data_dir = "data";
  std::string predictions_dir;  // empty -> <run>/pred

  // Cross-field checks and derived values; called by every parser.
  void finalize();
  int64_t horizon(const std::string& name) const;
  synth::SceneSpec scene_spec(int64_t index, bool test) const;
};

struct ParsedConfig {
  RunConfig config;
  std::vector<std::string> defaulted;  // dotted keys that kept their default
};

ParsedConfig parse_config_text(const std::string& text);
ParsedConfig parse_config(const std::filesystem::path& path);
// Every key, including defaults; parse_config_text(to_json(c)) == c.
std::string to_json(const RunConfig& c);
std::vector<std::string> config_keys();

bool operator==(const RunConfig& a, const RunConfig& b);

}  // namespace gem::cli
