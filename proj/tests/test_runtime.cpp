#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "gem/binary_io.hpp"
#include "gem/checkpoint.hpp"
#include "gem/commands.hpp"
#include "gem/pipeline.hpp"
#include "json.hpp"

using namespace gem;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("gem_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const char* kTinyConfig = R"({
  "seed": 3,
  "sensor": {"n_lasers": 8, "n_azimuth": 64},
  "data": {"train_sequences": 3, "test_sequences": 2, "frames": 7, "bev_size": 16, "n_static_boxes": 4,
           "n_dynamic_boxes": 2},
  "tokenizer": {"K": 16, "C": 4, "down_v": 4, "down_h": 16, "width": 8, "d_state": 2, "blocks": 2,
                "full_res_mamba": false, "adv_weight": 0.0, "steps": 12, "log_every": 0},
  "separator": {"channels": 8, "gate_kernel": 1, "window": 3},
  "tri_path": {"blocks": 1, "d_state": 2, "groups": 4, "gate_kernel": 1, "offset_hidden": 4},
  "diffusion": {"T": 50, "sample_steps": 4},
  "condition": {"cond_dim": 8, "time_embed_dim": 8},
  "planner": {"hidden": 8},
  "horizons": {"history": 2, "future": 2, "short": 2, "long": 4},
  "world_model": {"steps": 6, "log_every": 0}
})";

cli::ConfigError::Kind error_kind(const std::string& text) {
  try {
    cli::parse_config_text(text);
  } catch (const cli::ConfigError& e) {
    return e.kind();
  }
  FAIL("expected a config error for " << text);
  return cli::ConfigError::Kind::kSyntax;
}

}  // namespace

TEST_CASE("config defaults, diagnostics, and provenance") {
  const auto empty = cli::parse_config_text("{}");
  CHECK(empty.config == cli::RunConfig{});
  CHECK(empty.config.world_model.tri_path.blocks == 4);
  CHECK(empty.defaulted.size() == cli::config_keys().size());
  CHECK(empty.config.world_model.latent_h == 8);
  CHECK(empty.config.world_model.latent_w == 128);

  try {
    cli::parse_config_text(R"({"diffusion": {"T": 0}})");
    FAIL("T = 0 accepted");
  } catch (const cli::ConfigError& e) {
    CHECK(e.kind() == cli::ConfigError::Kind::kRange);
    CHECK(e.key() == "diffusion.T");
    CHECK(std::string(e.what()).find("diffusion.T") != std::string::npos);
  }
  CHECK(error_kind(R"({"diffusion": {"steps": 3}})") == cli::ConfigError::Kind::kUnknownKey);
  CHECK(error_kind(R"({"bogus": 1})") == cli::ConfigError::Kind::kUnknownKey);
  CHECK(error_kind(R"({"sensor": {"n_lasers": "32"}})") == cli::ConfigError::Kind::kType);
  CHECK(error_kind(R"({"sensor": 4})") == cli::ConfigError::Kind::kType);
  CHECK(error_kind(R"({"tri_path": {"ablate": "XYZ"}})") == cli::ConfigError::Kind::kRange);
  CHECK(error_kind(R"({"tokenizer": {"down_h": 3}})") == cli::ConfigError::Kind::kRange);
  CHECK(error_kind(R"({"horizons": {"long": 20}})") == cli::ConfigError::Kind::kRange);
  CHECK(error_kind(R"({"seed": -1})") == cli::ConfigError::Kind::kRange);
  CHECK(error_kind("{not json") == cli::ConfigError::Kind::kSyntax);
  try {
    cli::parse_config("/nonexistent/config.json");
    FAIL("unreadable file accepted");
  } catch (const cli::ConfigError& e) {
    CHECK(e.kind() == cli::ConfigError::Kind::kUnreadable);
  }

  const auto partial = cli::parse_config_text(R"({"seed": 9, "tri_path": {"ablate": "aga, de"}})");
  CHECK(partial.config.seed == 9);
  CHECK(partial.config.world_model.ablation == sep::Ablation::disabled("DE,AGA"));
  CHECK(std::find(partial.defaulted.begin(), partial.defaulted.end(), "seed") == partial.defaulted.end());
  CHECK(std::find(partial.defaulted.begin(), partial.defaulted.end(), "diffusion.T") != partial.defaulted.end());
}

TEST_CASE("config serialization round-trips under random edits") {
  Rng rng(21);
  const char* ablations[] = {"", "DE", "SE,SDM", "DDM,AGA", "DE,SE,DDM,SDM,AGA"};
  for (int rep = 0; rep < 40; ++rep) {
    auto doc = nlohmann::json::parse(cli::to_json(cli::RunConfig{}));
    doc["seed"] = rng.uniform_int(0, 1000000);
    doc["tokenizer"]["K"] = rng.uniform_int(2, 1024);
    doc["tokenizer"]["beta"] = rng.uniform(0.0, 1.0);
    doc["tokenizer"]["full_res_mamba"] = rng.uniform(0.0, 1.0) < 0.5;
    doc["separator"]["channels"] = 8 * rng.uniform_int(1, 8);
    doc["tri_path"]["offset_scale"] = rng.uniform(0.0, 3.0);
    doc["tri_path"]["ablate"] = ablations[rng.uniform_int(0, 4)];
    doc["diffusion"]["T"] = rng.uniform_int(50, 2000);
    doc["diffusion"]["sample_steps"] = rng.uniform_int(1, 50);
    doc["diffusion"]["start_fraction"] = rng.uniform(0.05, 1.0);
    doc["planner"]["enabled"] = rng.uniform(0.0, 1.0) < 0.5;
    doc["condition"]["layout_dropout"] = rng.uniform(0.0, 1.0);
    doc["sensor"]["r_max"] = rng.uniform(20.0, 120.0);
    doc["paths"]["data"] = "d" + std::to_string(rep);
    const auto a = cli::parse_config_text(doc.dump()).config;
    const auto text = cli::to_json(a);
    const auto b = cli::parse_config_text(text).config;
    CHECK(a == b);
    CHECK(cli::to_json(b) == text);
  }
}

TEST_CASE("checkpoints round-trip byte for byte and detect corruption") {
  Rng rng(22);
  ckpt::Checkpoint ck;
  ck.tensors.emplace_back("a.weight", rng.normal_tensor({3, 4}));
  ck.tensors.emplace_back("a.bias", rng.normal_tensor({4}));
  ck.tensors.emplace_back("scalar", Tensor({1}, {-0.0}));
  ck.config = R"({"seed": 1})";
  ck.step = 1234;
  const auto bytes = ckpt::serialize(ck);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "GEMCKPT1");
  const auto back = ckpt::deserialize(bytes);
  CHECK(back.step == 1234);
  CHECK(back.config == ck.config);
  REQUIRE(back.tensors.size() == 3);
  CHECK(back.tensors[0].first == "a.weight");
  CHECK(max_abs_diff(back.tensors[0].second, ck.tensors[0].second) == 0.0);
  CHECK(std::signbit(back.tensors[2].second[0]));
  CHECK(ckpt::serialize(back) == bytes);

  auto corrupt = bytes;
  corrupt[40] ^= 1;
  CHECK_THROWS_AS(ckpt::deserialize(corrupt), Error);
  CHECK_THROWS_AS(ckpt::deserialize(std::vector<uint8_t>(bytes.begin(), bytes.end() - 3)), Error);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(ckpt::deserialize(bad_magic), Error);
  ckpt::Checkpoint dup = ck;
  dup.tensors.emplace_back("a.bias", Tensor({1}));
  CHECK_THROWS_AS(ckpt::serialize(dup), Error);

  CHECK(ckpt::sha1_hex("abc", 3) == "a9993e364706816aba3e25717850c26c9cd0d89d");
}

TEST_CASE("model checkpoints restore identical parameters") {
  TempDir tmp("ckpt");
  const auto cfg = cli::parse_config_text(kTinyConfig).config;
  wm::WorldModel model(cfg.world_model, 5);
  model.set_latent_scale(0.37);
  cli::save_world_model(tmp.path / "wm.ckpt", model, cfg, 7);
  const auto loaded = cli::load_world_model(tmp.path / "wm.ckpt", cfg);
  CHECK(loaded.latent_scale() == 0.37);
  nn::ParamList a, b;
  model.state(a);
  loaded.state(b);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i].var.value(), b[i].var.value()) == 0.0);
  cli::save_world_model(tmp.path / "wm2.ckpt", loaded, cfg, 7);
  CHECK(io::read_file(tmp.path / "wm.ckpt") == io::read_file(tmp.path / "wm2.ckpt"));

  auto other = cfg;
  other.world_model.ablation = sep::Ablation::disabled("DE");
  CHECK_THROWS_AS(cli::load_world_model(tmp.path / "wm.ckpt", other), Error);
  CHECK_THROWS_AS(cli::load_world_model(tmp.path / "missing.ckpt", cfg), Error);
}

TEST_CASE("command surface end to end on a tiny run") {
  TempDir tmp("cli");
  const fs::path cfg_path = tmp.path / "tiny.json";
  auto doc = nlohmann::json::parse(kTinyConfig);
  doc["paths"]["data"] = (tmp.path / "data").string();
  io::write_text(cfg_path, doc.dump());
  std::ostringstream log;

  cli::CommandOptions opt;
  opt.config = cfg_path;
  opt.seed = 7;
  opt.out = tmp.path / "data";
  cli::run_command("synth", opt, log);
  opt.out = tmp.path / "data_again";
  cli::run_command("synth", opt, log);
  CHECK(cli::tree_sha1(tmp.path / "data") == cli::tree_sha1(tmp.path / "data_again"));
  CHECK(cli::sequence_dirs(tmp.path / "data" / "train").size() == 3);

  const fs::path run = tmp.path / "run";
  opt.out = run;
  CHECK_THROWS_AS(cli::run_command("train-wm", opt, log), Error);  // no tokenizer yet
  cli::run_command("train-tokenizer", opt, log);
  CHECK(fs::exists(run / "tokenizer.ckpt"));
  cli::run_command("train-wm", opt, log);
  CHECK(fs::exists(run / "train-wm.manifest.json"));

  cli::run_command("predict", opt, log);
  const auto seqs = cli::sequence_dirs(run / "pred");
  REQUIRE(seqs.size() == 2);
  const auto meta = nlohmann::json::parse(io::read_text(seqs[0] / "pred_meta.json"));
  CHECK(meta["mode"] == "gt_ego");
  CHECK(meta["T_sample"] == 4);
  CHECK(meta["checkpoints"]["tokenizer"] == ckpt::sha1_file(run / "tokenizer.ckpt"));
  const auto first = cli::tree_sha1(run / "pred");
  cli::run_command("predict", opt, log);
  CHECK(cli::tree_sha1(run / "pred") == first);

  opt.horizon = "long";
  CHECK_THROWS_AS(cli::run_command("predict", opt, log), Error);  // beyond one sampling round
  opt.mode = "planner";
  cli::run_command("rollout", opt, log);
  CHECK(synth::read_sequence(seqs[0]).clouds.size() == 4);
  cli::run_command("eval", opt, log);
  CHECK(fs::exists(run / "eval" / "report.csv"));
  cli::run_command("plot-deform", opt, log);
  CHECK(fs::exists(run / "deform" / "deform_dynamic.ppm"));
  CHECK(fs::exists(run / "deform" / "deform_static.ppm"));

  // A sequence compared with itself scores zero.
  auto self_doc = doc;
  self_doc["paths"]["predictions"] = (tmp.path / "data" / "test").string();
  io::write_text(tmp.path / "self.json", self_doc.dump());
  cli::CommandOptions self_opt;
  self_opt.config = tmp.path / "self.json";
  self_opt.out = tmp.path / "self_eval";
  cli::run_command("eval", self_opt, log);
  const auto summary = nlohmann::json::parse(io::read_text(tmp.path / "self_eval" / "eval" / "summary.json"));
  CHECK(summary["cd"].get<double>() == 0.0);
  CHECK(summary["jsd"].get<double>() == 0.0);

  // Planner mode on a config without a planner is a contract error.
  auto no_planner = doc;
  no_planner["planner"]["enabled"] = false;
  io::write_text(tmp.path / "gt_only.json", no_planner.dump());
  cli::CommandOptions gt_only = opt;
  gt_only.config = tmp.path / "gt_only.json";
  gt_only.mode = "planner";
  CHECK_THROWS_AS(cli::run_command("rollout", gt_only, log), Error);

  cli::CommandOptions horizon_opt = opt;
  auto long_doc = doc;
  long_doc["data"]["frames"] = 12;
  long_doc["horizons"]["long"] = 9;
  io::write_text(tmp.path / "long.json", long_doc.dump());
  horizon_opt.config = tmp.path / "long.json";
  horizon_opt.mode = "gt_ego";
  CHECK_THROWS_AS(cli::run_command("rollout", horizon_opt, log), Error);  // dataset has 7 frames

  CHECK_THROWS_AS(cli::run_command("dance", opt, log), Error);
}
