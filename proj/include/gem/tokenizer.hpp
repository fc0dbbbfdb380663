#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gem/lidar_geom.hpp"
#include "gem/optim.hpp"
#include "gem/ssm.hpp"

// Range-image tokenizer: Mamba encoder, vector-quantized latent grid,
// mirrored decoder, and a patch discriminator for the adversarial term.
namespace gem::tok {

struct TokenizerConfig {
  int64_t codebook_size = 512;   // K
  int64_t latent_channels = 64;  // C
  double beta = 0.25;
  int64_t down_v = 4;  // H / h, power of two
  int64_t down_h = 8;  // W / w, power of two
  int64_t width = 32;  // hidden feature width
  int64_t d_state = 8;
  int64_t blocks = 6;
  bool full_res_mamba = true;  // scan at input resolution before the blocks
  bool bidirectional = false;
  double adv_weight = 0.1;
  double adv_warmup = 0.5;  // fraction of steps before the adversarial term starts
  int64_t disc_width = 8;
  int64_t restart_after = 1000;  // steps a codeword may stay unused
  double lr = 4e-4;
  double disc_lr = 4e-4;

  void validate(const geom::SensorConfig& sensor) const;
  int64_t latent_h(const geom::SensorConfig& s) const { return s.n_lasers / down_v; }
  int64_t latent_w(const geom::SensorConfig& s) const { return s.n_azimuth / down_h; }
};

// Per-block (vertical, horizontal) downsampling factors.
std::vector<std::pair<int64_t, int64_t>> downsample_schedule(int64_t down_v, int64_t down_h, int64_t blocks);

/// Log-normalized ranges as [H, W, 1]; invalid cells hold the r_max value (+1).
Tensor normalized_input(const geom::RangeImage& img, const geom::SensorConfig& sensor);
Tensor valid_mask(const geom::RangeImage& img);

/// Index of the nearest codeword for every row of z[..., C]; ties go to the
/// lowest index.
std::vector<int64_t> nearest_codes(const Tensor& z, const Tensor& codebook);

struct Quantized {
  nn::Var z_q;    // forward value = codewords, gradient passes straight to z
  nn::Var codes;  // codewords gathered from the codebook (grad to codebook)
  std::vector<int64_t> indices;
};

struct Decoded {
  nn::Var range;        // [H, W, 1] normalized log range
  nn::Var valid_logit;  // [H, W, 1]
};

struct EncoderBlock {
  int64_t sv = 1, sh = 1;
  nn::Linear down;  // defined only when the block downsamples
  ssm::MambaBlock mamba;
  nn::LayerNorm norm;
  nn::Mlp mlp;
};

struct DecoderBlock {
  int64_t sv = 1, sh = 1;
  ssm::MambaBlock mamba;
  nn::LayerNorm norm;
  nn::Mlp mlp;
  nn::Linear up;  // defined only when the block upsamples
};

class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(const TokenizerConfig& cfg, const geom::SensorConfig& sensor, uint64_t seed);

  const TokenizerConfig& config() const { return cfg_; }
  const geom::SensorConfig& sensor() const { return sensor_; }
  int64_t latent_h() const { return cfg_.latent_h(sensor_); }
  int64_t latent_w() const { return cfg_.latent_w(sensor_); }

  // x: [H, W, 1] normalized -> z: [h, w, C].
  nn::Var encode(const nn::Var& x) const;
  Quantized quantize(const nn::Var& z) const;
  // z_q: [h, w, C].
  Decoded decode(const nn::Var& z_q) const;

  geom::RangeImage to_range_image(const Decoded& d) const;
  // encode -> quantize -> decode without building a tape.
  geom::RangeImage reconstruct(const geom::RangeImage& img) const;
  // Quantized latent of one image, [h, w, C], no tape.
  Tensor latent(const geom::RangeImage& img) const;
  geom::RangeImage decode_latent(const Tensor& z_q) const;

  nn::Var& codebook() { return codebook_; }
  const nn::Var& codebook() const { return codebook_; }
  void collect(nn::ParamList& out, const std::string& prefix = "tok") const;

 private:
  TokenizerConfig cfg_;
  geom::SensorConfig sensor_;
  nn::Linear stem_;
  ssm::MambaBlock stem_mamba_;
  std::vector<EncoderBlock> enc_;
  nn::LayerNorm enc_norm_;
  nn::Linear enc_out_;
  nn::Var codebook_;  // [K, C]
  nn::Linear dec_in_;
  nn::Var dec_rows_;  // [h, width] per-row embedding at latent resolution
  std::vector<DecoderBlock> dec_;
  ssm::MambaBlock head_mamba_;
  nn::Var head_rows_;  // [H, width] per-laser embedding at output resolution
  nn::LayerNorm head_norm_;
  nn::Linear head_;
};

/// Patch discriminator: strided convolutions to a grid of real/fake logits.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(int64_t width, uint64_t seed);

  // x: [H, W, 1] -> probabilities clamped to (eps, 1 - eps), [H/4, W/4, 1].
  nn::Var operator()(const nn::Var& x) const;
  void collect(nn::ParamList& out, const std::string& prefix = "disc") const;

 private:
  nn::Conv2d c1_, c2_, c3_;
};

inline constexpr double kDiscEps = 1e-6;

struct VqLoss {
  nn::Var total;
  double recon = 0.0;
  double codebook = 0.0;  // beta-weighted ||sg(z) - z_hat||^2 term
  double commit = 0.0;    // ||z - sg(z_hat)||^2 term
};

/// Masked L1 reconstruction on normalized ranges + beta * mean(sg(z) - codes)^2
/// + mean(z - sg(codes))^2.
VqLoss vq_loss(const Tensor& target, const Tensor& mask, const nn::Var& pred, const nn::Var& z,
               const nn::Var& codes, double beta);

struct AdvLoss {
  nn::Var d_loss;  // -mean(log S(real)) - mean(log(1 - S(fake)))
  nn::Var g_loss;  // -mean(log S(fake))
};

// Probabilities in, already clamped. `fake_for_d` should be detached from
// the generator; `fake_for_g` keeps the generator graph.
AdvLoss adv_losses(const nn::Var& s_real, const nn::Var& s_fake_for_d, const nn::Var& s_fake_for_g);

// What the discriminator sees for a decoded sweep: the normalized range
// composited toward the sky value by the validity probability.
nn::Var disc_view(const Decoded& d);

struct TrainLog {
  int64_t step = 0;
  double total = 0, recon = 0, codebook = 0, commit = 0, g_adv = 0, d_adv = 0;
  int64_t used_codes = 0;  // distinct indices in this step's batch
  int64_t restarts = 0;
};

struct TrainOptions {
  int64_t steps = 1000;
  int64_t batch = 1;
  uint64_t seed = 0;
  int64_t log_every = 50;
  double final_lr_fraction = 0.1;  // cosine decay target over `steps`; 1 keeps the rate constant
  std::function<void(const TrainLog&)> on_log;
};

struct TrainResult {
  std::vector<TrainLog> history;
  int64_t restarts = 0;
};

class TokenizerTrainer {
 public:
  TokenizerTrainer(Tokenizer& model, Discriminator& disc, const TrainOptions& opt);

  // One generator (+ discriminator, once active) update on `batch`.
  TrainLog step(const std::vector<const geom::RangeImage*>& batch);
  TrainResult run(const std::vector<geom::RangeImage>& data);
  int64_t steps_done() const { return step_; }

 private:
  void restart_dead_codes(const std::vector<Tensor>& z_batch, TrainLog& log);

  Tokenizer& model_;
  Discriminator& disc_;
  TrainOptions opt_;
  nn::Adam gen_opt_;
  nn::Adam disc_opt_;
  Rng rng_;
  std::vector<int64_t> last_used_;
  int64_t step_ = 0;
  bool initialized_codes_ = false;
};

struct ReconStats {
  double mae = 0.0;           // meters over ground-truth valid cells
  double valid_accuracy = 0;  // agreement of predicted validity
  double usage = 0.0;         // distinct codes used / K
};

ReconStats evaluate_reconstruction(const Tokenizer& model, const std::vector<geom::RangeImage>& data);

}  // namespace gem::tok
