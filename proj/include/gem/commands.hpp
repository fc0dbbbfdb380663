#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gem/config.hpp"

// The command surface: each command reads a RunConfig, writes its artifacts
// under --out, and leaves a <command>.manifest.json beside them.
namespace gem::cli {

struct CommandOptions {
  std::filesystem::path config;  // empty -> defaults
  std::optional<uint64_t> seed;
  std::filesystem::path out = "run";
  std::string mode = "gt_ego";
  std::string horizon = "short";
  std::optional<std::string> ablate;
};

const std::vector<std::string>& command_names();

// Throws gem::Error on any failure; the caller maps that to an exit status.
void run_command(const std::string& name, const CommandOptions& opt, std::ostream& log);

// Resolves the config with command-line overrides applied.
ParsedConfig resolve_config(const CommandOptions& opt);

// SHA-1 over the sorted relative paths and contents of every file in a tree.
std::string tree_sha1(const std::filesystem::path& root);

// Binary PPM of a row-major [rows, cols] map in [0, 1].
void write_heatmap_ppm(const std::filesystem::path& path, const std::vector<float>& values, int64_t rows, int64_t cols,
                       int64_t cell = 4);

}  // namespace gem::cli
