#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "gem/config.hpp"
#include "gem/diffusion_wm.hpp"
#include "gem/pipeline.hpp"

namespace toy {

struct Outcome {
  bool pass = false;
  std::string detail;
};

// Small world-model config for the ablation smoke run.
gem::wm::WorldModelConfig smoke_config();
gem::wm::Window random_window(const gem::wm::WorldModelConfig& c, gem::Rng& rng);

// Toy-training run: 32x1024 sensor, 200 training sequences of 12 frames.
gem::cli::RunConfig toy_config();

// Shared state for the training checks. The tokenizer and world model are
// trained once and cached as checkpoints under the work directory.
class Suite {
 public:
  Suite(std::filesystem::path work, bool fresh);

  Outcome d7_tokenizer();
  Outcome d8_overfit();
  Outcome d9_forecast();
  Outcome d10_disentangle();
  Outcome d11_planner();
  Outcome d12_counterfactual();

 private:
  const gem::tok::Tokenizer& tokenizer();
  const gem::wm::WorldModel& world_model();
  const std::vector<gem::cli::SequenceData>& test_set();
  std::vector<gem::wm::SequenceLatents> latents(int64_t first, int64_t count, bool test);
  void note(const std::string& line);

  std::filesystem::path work_;
  bool fresh_;
  gem::cli::RunConfig cfg_;
  std::optional<gem::tok::Tokenizer> tok_;
  std::optional<gem::wm::WorldModel> wm_;
  std::optional<std::vector<gem::cli::SequenceData>> test_;
};

}  // namespace toy
