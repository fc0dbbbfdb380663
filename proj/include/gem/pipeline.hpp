#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "gem/config.hpp"
#include "gem/diffusion_wm.hpp"

// Stage plumbing shared by the command-line tools and the acceptance suite.
namespace gem::cli {

// One sequence as the models consume it.
struct SequenceData {
  std::vector<geom::RangeImage> ranges;
  std::vector<std::vector<uint8_t>> dynamic_cells;  // per range cell; empty when loaded from disk
  std::vector<geom::PointCloud> clouds;
  wm::EgoTrack ego;
  std::vector<synth::BEVLayout> layouts;
  size_t frames() const { return ranges.size(); }
};

SequenceData from_frames(std::vector<synth::SceneFrame> frames, bool keep_clouds = true);
SequenceData generate(const RunConfig& cfg, int64_t index, bool test, bool keep_clouds = true);
// Reads a dataset sequence and projects its clouds with the configured sensor.
SequenceData load_sequence(const std::filesystem::path& dir, const geom::SensorConfig& sensor);
std::vector<std::filesystem::path> sequence_dirs(const std::filesystem::path& root);

// Writes train/seq_XXXX and test/seq_XXXX trees; returns the sequence dirs.
std::vector<std::filesystem::path> write_dataset(const RunConfig& cfg, const std::filesystem::path& root);

tok::Tokenizer train_tokenizer(const RunConfig& cfg, const std::vector<geom::RangeImage>& images,
                               const std::function<void(const tok::TrainLog&)>& on_log = {});
wm::SequenceLatents encode_sequence(const tok::Tokenizer& tokenizer, const SequenceData& seq);
// Sets the latent scale from the data, then trains.
void train_world_model(wm::WorldModel& model, const RunConfig& cfg, const std::vector<wm::SequenceLatents>& latents,
                       const std::function<void(const wm::WmTrainLog&)>& on_log = {});

void save_tokenizer(const std::filesystem::path& path, const tok::Tokenizer& t, const RunConfig& cfg, int64_t step);
tok::Tokenizer load_tokenizer(const std::filesystem::path& path, const RunConfig& cfg);
void save_world_model(const std::filesystem::path& path, const wm::WorldModel& m, const RunConfig& cfg, int64_t step);
wm::WorldModel load_world_model(const std::filesystem::path& path, const RunConfig& cfg);

// Rolls out `horizon` frames after the first tau_p frames of `seq`.
wm::RolloutResult predict_sequence(const tok::Tokenizer& tokenizer, const wm::WorldModel& model,
                                   const SequenceData& seq, int64_t horizon, wm::RolloutMode mode, uint64_t seed,
                                   const wm::EgoTrack* future_override = nullptr);

}  // namespace gem::cli
