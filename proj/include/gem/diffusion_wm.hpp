#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gem/optim.hpp"
#include "gem/synth_world.hpp"
#include "gem/tokenizer.hpp"
#include "gem/tri_path.hpp"

// Latent diffusion world model: future latents are denoised conditioned on
// clean history latents, the diffusion step, ego motion, and an optional BEV
// layout. A planner head predicts future ego motion from the history.
namespace gem::wm {

using EgoTrack = std::vector<synth::EgoStatus>;

/// Cosine cumulative signal schedule; index 0 is the clean signal.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  static NoiseSchedule cosine(int64_t steps, double offset = 0.008);
  static NoiseSchedule from_alpha_bar(std::vector<double> alpha_bar);

  int64_t steps() const { return static_cast<int64_t>(alpha_bar_.size()) - 1; }
  // t in [0, T].
  double alpha_bar(int64_t t) const;

 private:
  std::vector<double> alpha_bar_;
};

/// sqrt(a) z + sqrt(1 - a) eps.
Tensor add_noise(const Tensor& z, double alpha_bar, const Tensor& eps);
// t must lie in [1, T].
Tensor add_noise(const NoiseSchedule& s, const Tensor& z, int64_t t, const Tensor& eps);

/// Eq.-style noise regression loss: mean squared error.
nn::Var noise_loss(const nn::Var& eps_hat, const Tensor& eps);

/// [sin(t w_0..w_{d/2-1}), cos(...)] with geometric frequencies.
Tensor timestep_embedding(double t, int64_t dim);

/// Per-frame ego features [T, 6]: the frame's delta and its pose relative to
/// the last history frame, both scaled to order one.
Tensor ego_features(const EgoTrack& past, const EgoTrack& future);
/// Past deltas flattened and scaled, [1, 3 * past.size()].
Tensor planner_input(const EgoTrack& past);

// Scales mapping ego deltas to planner units (meters, meters, 0.1 rad).
inline constexpr double kPlanScale[3] = {1.0, 1.0, 0.1};

/// Layout raster [G, G, 1] with class ids mapped to {0, 0.5, 1}.
Tensor layout_tensor(const synth::BEVLayout& layout);

struct WorldModelConfig {
  int64_t latent_h = 8, latent_w = 128, latent_channels = 64;  // from the tokenizer
  int64_t history = 3;  // tau_p
  int64_t future = 5;   // tau_f
  sep::SeparatorConfig separator;
  tri::TriPathConfig tri_path;
  sep::Ablation ablation;
  int64_t cond_dim = 64;
  int64_t time_embed_dim = 64;
  int64_t diffusion_steps = 1000;
  int64_t sample_steps = 50;
  bool planner = true;
  int64_t planner_hidden = 64;
  double planner_weight = 1.0;
  bool layout = true;
  int64_t layout_size = 64;
  double layout_dropout = 0.5;  // training-time probability of omitting the layout
  double x0_clip = 5.0;         // sampler clamp on the clean estimate, normalized units
  // Rollout sampling starts at start_fraction * T from the last history
  // latent plus noise; 1 starts from pure noise at T.
  double start_fraction = 1.0;
  double lr = 4e-4;

  void validate() const;
  int64_t frames() const { return history + future; }
};

class ConditionEncoder {
 public:
  ConditionEncoder() = default;
  ConditionEncoder(const WorldModelConfig& cfg, Rng& rng);

  // -> [T, cond_dim]; future may come from ground truth or the planner.
  nn::Var operator()(const EgoTrack& past, const EgoTrack& future, double t,
                     const synth::BEVLayout* layout) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  WorldModelConfig cfg_;
  nn::Mlp time_;
  nn::Linear past_, future_;
  nn::Conv2d lay1_, lay2_;
  nn::Linear lay_out_;
};

class Planner {
 public:
  Planner() = default;
  Planner(const WorldModelConfig& cfg, int64_t feature_dim, Rng& rng);

  // pooled: [1, C']; returns [tau_f, 3] in planner units.
  nn::Var operator()(const EgoTrack& past, const nn::Var& pooled) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

 private:
  int64_t future_ = 0;
  nn::Linear ego_;
  nn::Mlp mlp_;
};

EgoTrack to_ego(const Tensor& planned);
Tensor from_ego(const EgoTrack& track);

/// Squared error in planner units, averaged over frames and components.
nn::Var planner_loss(const nn::Var& planned, const EgoTrack& target);

class WorldModel {
 public:
  WorldModel() = default;
  WorldModel(const WorldModelConfig& cfg, uint64_t seed);

  const WorldModelConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  double latent_scale() const { return latent_scale_.value()[0]; }
  void set_latent_scale(double s);

  // z_p: [tau_p, h, w, C] clean and normalized; z_t: [tau_f, h, w, C]; c from
  // the condition encoder.
  nn::Var predict_noise(const Tensor& z_p, const nn::Var& z_t, const nn::Var& c,
                        std::vector<tri::BlockTrace>* traces = nullptr) const;
  // Separator features of a sequence, for analysis.
  sep::Features features(const Tensor& z) const;

  nn::Var condition(const EgoTrack& past, const EgoTrack& future, double t,
                    const synth::BEVLayout* layout) const {
    return cond_(past, future, t, layout);
  }

  // History-only pooled generic features [1, C'] and the planner output.
  nn::Var pooled_history(const Tensor& z_p) const;
  nn::Var plan(const EgoTrack& past, const Tensor& z_p) const;

  struct SampleOptions {
    int64_t steps = 0;  // 0 -> config sample_steps
    uint64_t seed = 0;
    int64_t start_t = 0;                // 0 -> T (pure noise)
    std::optional<Tensor> start;        // z at start_t, required when start_t < T
  };
  // Deterministic DDIM from start_t down to 0 with a fixed condition builder.
  Tensor sample(const Tensor& z_p, const std::function<nn::Var(double)>& cond_at,
                const SampleOptions& opt) const;

  // Trainable parameters (optimizer set).
  void collect(nn::ParamList& out, const std::string& prefix = "wm") const;
  // Trainable parameters plus buffers (checkpoint set).
  void state(nn::ParamList& out, const std::string& prefix = "wm") const;

 private:
  WorldModelConfig cfg_;
  NoiseSchedule schedule_;
  sep::Separator sep_;
  tri::TriPathStack stack_;
  nn::Var frame_embed_;  // [T, C']
  nn::Linear head_;
  ConditionEncoder cond_;
  Planner planner_;
  nn::Var latent_scale_;  // [1] buffer
};

/// One training window: latents already normalized by the model scale.
struct Window {
  Tensor z_p, z_f;
  EgoTrack past, future;
  synth::BEVLayout layout;  // layout of the last future frame
  bool has_layout = false;
};

struct WmTrainLog {
  int64_t step = 0;
  double loss = 0, diffusion = 0, planner = 0;
};

struct WmTrainOptions {
  int64_t steps = 1000;
  int64_t batch = 1;
  uint64_t seed = 0;
  int64_t log_every = 50;
  double final_lr_fraction = 0.1;  // cosine decay target over `steps`; 1 keeps the rate constant
  std::function<void(const WmTrainLog&)> on_log;
};

class WorldModelTrainer {
 public:
  WorldModelTrainer(WorldModel& model, const WmTrainOptions& opt);

  // One update on the given windows. With `frozen_noise` the diffusion steps,
  // noise, and layout dropout are drawn from that seed, so repeated calls see
  // the identical batch.
  WmTrainLog step(const std::vector<const Window*>& batch, std::optional<uint64_t> frozen_noise = std::nullopt);
  std::vector<WmTrainLog> run(const std::vector<Window>& data);
  // Loss on a batch without updating, with a fixed noise stream.
  double evaluate(const std::vector<const Window*>& batch, uint64_t noise_seed) const;
  nn::Adam& optimizer() { return opt_; }

 private:
  struct Draw {
    int64_t t;
    Tensor eps;
    bool use_layout;
  };
  std::vector<Draw> draw(const std::vector<const Window*>& batch, Rng& rng) const;
  void accumulate(const std::vector<const Window*>& batch, const std::vector<Draw>& draws, bool backprop,
                  WmTrainLog& log) const;

  WorldModel& model_;
  WmTrainOptions opts_;
  nn::Adam opt_;
  Rng rng_;
  int64_t step_ = 0;
};

/// Mean standard deviation of latent entries; used as the normalization scale.
double latent_std(const std::vector<Tensor>& latents);

// Windows of tau_p + tau_f consecutive frames from per-sequence latents.
struct SequenceLatents {
  std::vector<Tensor> latents;  // per frame [h, w, C], unnormalized
  EgoTrack ego;
  std::vector<synth::BEVLayout> layouts;
};
std::vector<Window> make_windows(const std::vector<SequenceLatents>& seqs, const WorldModelConfig& cfg,
                                 double latent_scale, int64_t stride = 1);

Tensor stack_frames(const std::vector<Tensor>& frames, size_t begin, size_t end);

enum class RolloutMode { kGtEgo, kPlanner };
std::string to_string(RolloutMode m);
RolloutMode parse_rollout_mode(const std::string& s);

struct RolloutOptions {
  RolloutMode mode = RolloutMode::kGtEgo;
  int64_t steps = 5;          // frames to predict
  int64_t sample_steps = 0;   // 0 -> config
  uint64_t seed = 0;
  bool snap_to_codebook = true;
  const synth::BEVLayout* layout = nullptr;
};

struct RolloutResult {
  std::vector<Tensor> latents;  // unnormalized, [h, w, C] per predicted frame
  std::vector<geom::RangeImage> ranges;
  std::vector<geom::PointCloud> clouds;
  EgoTrack ego;  // ego used per predicted frame (planned or given)
};

/// Predicts `steps` frames after the history. In ground-truth mode
/// `future_ego` must hold at least `steps` deltas. In planner mode it must be
/// null: the planner is the only source of future motion.
RolloutResult rollout(const tok::Tokenizer& tokenizer, const WorldModel& model,
                      const std::vector<geom::RangeImage>& history, const EgoTrack& past_ego,
                      const EgoTrack* future_ego, const RolloutOptions& opt);

}  // namespace gem::wm
