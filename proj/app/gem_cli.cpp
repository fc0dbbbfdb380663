#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "gem/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generative LiDAR world model tools"};
  app.require_subcommand(1);
  gem::cli::CommandOptions opt;
  std::string config, out = "run", mode = "gt_ego", horizon = "short", ablate;
  uint64_t seed = 0;

  const std::map<std::string, std::string> about = {
      {"synth", "write the synthetic train/test dataset under --out"},
      {"train-tokenizer", "train the range-image tokenizer on the dataset"},
      {"train-wm", "encode the dataset and train the diffusion world model"},
      {"predict", "one denoising round over the test sequences"},
      {"rollout", "autoregressive prediction up to the chosen horizon"},
      {"eval", "score predictions against the test sequences"},
      {"plot-deform", "deformation heatmaps for the first test sequence"},
  };
  for (const auto& name : gem::cli::command_names()) {
    auto* sub = app.add_subcommand(name, about.at(name));
    sub->add_option("--config", config, "run configuration (JSON)");
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", out, "output directory (dataset root for synth, run directory otherwise)");
    sub->add_option("--mode", mode, "rollout ego source")->check(CLI::IsMember({"gt_ego", "planner"}));
    sub->add_option("--horizon", horizon, "prediction horizon")->check(CLI::IsMember({"short", "long"}));
    sub->add_option("--ablate", ablate, "disabled components, e.g. DE,AGA");
  }
  CLI11_PARSE(app, argc, argv);

  auto* sub = app.get_subcommands().front();
  opt.config = config;
  opt.out = out;
  opt.mode = mode;
  opt.horizon = horizon;
  if (sub->count("--seed")) opt.seed = seed;
  if (sub->count("--ablate")) opt.ablate = ablate;
  try {
    gem::cli::run_command(sub->get_name(), opt, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
