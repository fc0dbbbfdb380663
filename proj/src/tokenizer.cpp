#include "gem/tokenizer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

namespace gem::tok {

namespace {

bool power_of_two(int64_t v) { return v >= 1 && std::has_single_bit(static_cast<uint64_t>(v)); }

// Runs a Mamba block over a [H, W, D] grid in ring-major order.
nn::Var scan_grid(const ssm::MambaBlock& block, const nn::Var& x) {
  const Shape s = x.shape();
  return nn::reshape(block(ssm::ring_major(x).tokens), s);
}

// Per-row embedding broadcast over columns: table [H, D] -> [H, W, D].
nn::Var row_embedding(const nn::Var& table, int64_t width) {
  const int64_t H = table.dim(0);
  std::vector<int64_t> idx(static_cast<size_t>(H * width));
  for (int64_t r = 0; r < H; ++r) std::fill_n(idx.begin() + r * width, width, r);
  return nn::reshape(nn::gather_rows(table, idx), {H, width, table.dim(1)});
}

}  // namespace

void TokenizerConfig::validate(const geom::SensorConfig& sensor) const {
  auto fail = [](const std::string& what) { throw Error("tokenizer config: " + what); };
  if (codebook_size < 2) fail("codebook_size must be >= 2");
  if (latent_channels < 1) fail("latent_channels must be >= 1");
  if (!(beta >= 0)) fail("beta must be >= 0");
  if (!power_of_two(down_v) || !power_of_two(down_h)) fail("downsample factors must be powers of two");
  if (sensor.n_lasers % down_v != 0 || sensor.n_azimuth % down_h != 0)
    fail("downsample factors must divide the sensor resolution");
  if (width < 1 || d_state < 1 || disc_width < 1) fail("widths must be positive");
  if (blocks < 1) fail("blocks must be >= 1");
  if (!(adv_weight >= 0)) fail("adv_weight must be >= 0");
  if (!(adv_warmup >= 0 && adv_warmup <= 1)) fail("adv_warmup must be in [0, 1]");
  if (restart_after < 1) fail("restart_after must be >= 1");
  if (!(lr > 0) || !(disc_lr > 0)) fail("learning rates must be positive");
}

std::vector<std::pair<int64_t, int64_t>> downsample_schedule(int64_t down_v, int64_t down_h, int64_t blocks) {
  // Halvings are dealt to the earliest blocks first, wrapping around when
  // there are more halvings than blocks.
  std::vector<std::pair<int64_t, int64_t>> out(static_cast<size_t>(blocks), {1, 1});
  const int nv = std::countr_zero(static_cast<uint64_t>(down_v));
  const int nh = std::countr_zero(static_cast<uint64_t>(down_h));
  for (int i = 0; i < nv; ++i) out[static_cast<size_t>(i % blocks)].first *= 2;
  for (int i = 0; i < nh; ++i) out[static_cast<size_t>(i % blocks)].second *= 2;
  return out;
}

Tensor normalized_input(const geom::RangeImage& img, const geom::SensorConfig& sensor) {
  if (img.height != sensor.n_lasers || img.width != sensor.n_azimuth) {
    throw Error("tokenizer: range image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                " does not match sensor " + std::to_string(sensor.n_lasers) + "x" +
                std::to_string(sensor.n_azimuth));
  }
  Tensor x({img.height, img.width, 1});
  for (size_t k = 0; k < img.ranges.size(); ++k)
    x[static_cast<int64_t>(k)] = img.valid[k] ? geom::normalize_range(img.ranges[k], sensor) : 1.0;
  return x;
}

Tensor valid_mask(const geom::RangeImage& img) {
  Tensor m({img.height, img.width, 1});
  for (size_t k = 0; k < img.valid.size(); ++k) m[static_cast<int64_t>(k)] = img.valid[k] ? 1.0 : 0.0;
  return m;
}

std::vector<int64_t> nearest_codes(const Tensor& z, const Tensor& codebook) {
  if (codebook.rank() != 2 || codebook.dim(0) < 1) throw Error("quantize: empty codebook");
  const int64_t K = codebook.dim(0), C = codebook.dim(1);
  if (z.dim(-1) != C) throw Error("quantize: latent channels do not match codebook");
  const int64_t n = z.numel() / C;
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* zi = z.data() + i * C;
    double best = std::numeric_limits<double>::infinity();
    int64_t arg = 0;
    for (int64_t k = 0; k < K; ++k) {
      const double* e = codebook.data() + k * C;
      double d = 0.0;
      for (int64_t c = 0; c < C; ++c) d += (zi[c] - e[c]) * (zi[c] - e[c]);
      if (d < best) {  // strict: the first minimum wins ties
        best = d;
        arg = k;
      }
    }
    idx[static_cast<size_t>(i)] = arg;
  }
  return idx;
}

Tokenizer::Tokenizer(const TokenizerConfig& cfg, const geom::SensorConfig& sensor, uint64_t seed)
    : cfg_(cfg), sensor_(sensor) {
  sensor_.validate();
  cfg_.validate(sensor_);
  Rng rng(derive_seed(seed, Stream::kInit, 1));
  const int64_t D = cfg_.width;
  const ssm::MambaConfig mc{.d_model = D, .d_state = cfg_.d_state, .bidirectional = cfg_.bidirectional};

  stem_ = nn::Linear(1, D, rng);
  if (cfg_.full_res_mamba) stem_mamba_ = ssm::MambaBlock(mc, rng);
  const auto sched = downsample_schedule(cfg_.down_v, cfg_.down_h, cfg_.blocks);
  for (const auto& [sv, sh] : sched) {
    EncoderBlock b;
    b.sv = sv;
    b.sh = sh;
    if (sv * sh > 1) b.down = nn::Linear(D * sv * sh, D, rng);
    b.mamba = ssm::MambaBlock(mc, rng);
    b.norm = nn::LayerNorm(D);
    b.mlp = nn::Mlp(D, 2 * D, D, rng);
    enc_.push_back(std::move(b));
  }
  enc_norm_ = nn::LayerNorm(D);
  enc_out_ = nn::Linear(D, cfg_.latent_channels, rng);

  const double cb = 1.0 / static_cast<double>(cfg_.codebook_size);
  codebook_ = nn::parameter(rng.uniform_tensor({cfg_.codebook_size, cfg_.latent_channels}, -cb, cb));

  dec_in_ = nn::Linear(cfg_.latent_channels, D, rng);
  dec_rows_ = nn::parameter(rng.normal_tensor({latent_h(), D}, 0.02));
  for (auto it = sched.rbegin(); it != sched.rend(); ++it) {
    DecoderBlock b;
    b.sv = it->first;
    b.sh = it->second;
    b.mamba = ssm::MambaBlock(mc, rng);
    b.norm = nn::LayerNorm(D);
    b.mlp = nn::Mlp(D, 2 * D, D, rng);
    if (b.sv * b.sh > 1) b.up = nn::Linear(D, D * b.sv * b.sh, rng);
    dec_.push_back(std::move(b));
  }
  if (cfg_.full_res_mamba) head_mamba_ = ssm::MambaBlock(mc, rng);
  head_rows_ = nn::parameter(rng.normal_tensor({sensor_.n_lasers, D}, 0.02));
  head_norm_ = nn::LayerNorm(D);
  head_ = nn::Linear(D, 2, rng);
}

nn::Var Tokenizer::encode(const nn::Var& x) const {
  require_shape(x.value(), {sensor_.n_lasers, sensor_.n_azimuth, 1}, "tokenizer input");
  nn::Var h = stem_(x);
  if (cfg_.full_res_mamba) h = scan_grid(stem_mamba_, h);
  for (const auto& b : enc_) {
    if (b.down.weight.defined()) h = b.down(nn::space_to_depth(h, b.sv, b.sh));
    h = scan_grid(b.mamba, h);
    h = nn::add(h, b.mlp(b.norm(h)));
  }
  return enc_out_(enc_norm_(h));
}

Quantized Tokenizer::quantize(const nn::Var& z) const {
  Quantized q;
  q.indices = nearest_codes(z.value(), codebook_.value());
  q.codes = nn::reshape(nn::gather_rows(codebook_, q.indices), z.shape());
  q.z_q = nn::straight_through(z, q.codes.value());
  return q;
}

Decoded Tokenizer::decode(const nn::Var& z_q) const {
  require_shape(z_q.value(), {latent_h(), latent_w(), cfg_.latent_channels}, "tokenizer latent");
  nn::Var h = nn::add(dec_in_(z_q), row_embedding(dec_rows_, latent_w()));
  for (const auto& b : dec_) {
    h = scan_grid(b.mamba, h);
    h = nn::add(h, b.mlp(b.norm(h)));
    if (b.up.weight.defined()) h = nn::depth_to_space(b.up(h), b.sv, b.sh);
  }
  h = nn::add(h, row_embedding(head_rows_, sensor_.n_azimuth));
  if (cfg_.full_res_mamba) h = scan_grid(head_mamba_, h);
  nn::Var out = head_(head_norm_(h));
  return {nn::slice_last(out, 0, 1), nn::slice_last(out, 1, 2)};
}

geom::RangeImage Tokenizer::to_range_image(const Decoded& d) const {
  geom::RangeImage img(sensor_.n_lasers, sensor_.n_azimuth, sensor_.r_max);
  for (size_t k = 0; k < img.ranges.size(); ++k) {
    if (d.valid_logit.value()[static_cast<int64_t>(k)] <= 0.0) continue;
    const double r = geom::denormalize_range(d.range.value()[static_cast<int64_t>(k)], sensor_);
    img.ranges[k] = std::clamp(r, sensor_.r_min, sensor_.r_max);
    img.valid[k] = 1;
  }
  return img;
}

Tensor Tokenizer::latent(const geom::RangeImage& img) const {
  nn::NoGradGuard ng;
  return quantize(encode(nn::constant(normalized_input(img, sensor_)))).codes.value();
}

geom::RangeImage Tokenizer::decode_latent(const Tensor& z_q) const {
  nn::NoGradGuard ng;
  return to_range_image(decode(nn::constant(z_q)));
}

geom::RangeImage Tokenizer::reconstruct(const geom::RangeImage& img) const { return decode_latent(latent(img)); }

void Tokenizer::collect(nn::ParamList& out, const std::string& prefix) const {
  stem_.collect(out, prefix + ".stem");
  if (cfg_.full_res_mamba) stem_mamba_.collect(out, prefix + ".stem_mamba");
  for (size_t i = 0; i < enc_.size(); ++i) {
    const std::string p = prefix + ".enc" + std::to_string(i);
    if (enc_[i].down.weight.defined()) enc_[i].down.collect(out, p + ".down");
    enc_[i].mamba.collect(out, p + ".mamba");
    enc_[i].norm.collect(out, p + ".norm");
    enc_[i].mlp.collect(out, p + ".mlp");
  }
  enc_norm_.collect(out, prefix + ".enc_norm");
  enc_out_.collect(out, prefix + ".enc_out");
  out.push_back({prefix + ".codebook", codebook_});
  dec_in_.collect(out, prefix + ".dec_in");
  out.push_back({prefix + ".dec_rows", dec_rows_});
  for (size_t i = 0; i < dec_.size(); ++i) {
    const std::string p = prefix + ".dec" + std::to_string(i);
    dec_[i].mamba.collect(out, p + ".mamba");
    dec_[i].norm.collect(out, p + ".norm");
    dec_[i].mlp.collect(out, p + ".mlp");
    if (dec_[i].up.weight.defined()) dec_[i].up.collect(out, p + ".up");
  }
  if (cfg_.full_res_mamba) head_mamba_.collect(out, prefix + ".head_mamba");
  out.push_back({prefix + ".head_rows", head_rows_});
  head_norm_.collect(out, prefix + ".head_norm");
  head_.collect(out, prefix + ".head");
}

Discriminator::Discriminator(int64_t width, uint64_t seed) {
  if (width < 1) throw Error("discriminator: width must be positive");
  Rng rng(derive_seed(seed, Stream::kInit, 2));
  c1_ = nn::Conv2d(1, width, 4, 2, 1, rng);
  c2_ = nn::Conv2d(width, 2 * width, 4, 2, 1, rng);
  c3_ = nn::Conv2d(2 * width, 1, 3, 1, 1, rng);
}

nn::Var Discriminator::operator()(const nn::Var& x) const {
  nn::Var h = nn::silu(c1_(x));
  h = nn::silu(c2_(h));
  return nn::sigmoid(c3_(h));
}

void Discriminator::collect(nn::ParamList& out, const std::string& prefix) const {
  c1_.collect(out, prefix + ".c1");
  c2_.collect(out, prefix + ".c2");
  c3_.collect(out, prefix + ".c3");
}

VqLoss vq_loss(const Tensor& target, const Tensor& mask, const nn::Var& pred, const nn::Var& z,
               const nn::Var& codes, double beta) {
  if (!z.value().same_shape(codes.value())) throw Error("vq_loss: latent and codes differ in shape");
  nn::Var recon = nn::l1_masked(pred, target, mask);
  nn::Var cb = nn::mse(nn::detach(z), codes);
  nn::Var commit = nn::mse(z, nn::detach(codes));
  VqLoss out;
  out.total = nn::add(nn::add(recon, nn::scale(cb, beta)), commit);
  out.recon = recon.value()[0];
  out.codebook = beta * cb.value()[0];
  out.commit = commit.value()[0];
  return out;
}

AdvLoss adv_losses(const nn::Var& s_real, const nn::Var& s_fake_for_d, const nn::Var& s_fake_for_g) {
  AdvLoss out;
  nn::Var real_term = nn::mean(nn::log_clamped(s_real, kDiscEps));
  nn::Var fake_term = nn::mean(nn::log_clamped(nn::one_minus(s_fake_for_d), kDiscEps));
  out.d_loss = nn::scale(nn::add(real_term, fake_term), -1.0);
  out.g_loss = nn::scale(nn::mean(nn::log_clamped(s_fake_for_g, kDiscEps)), -1.0);
  return out;
}

nn::Var disc_view(const Decoded& d) {
  nn::Var p = nn::sigmoid(d.valid_logit);
  return nn::add_scalar(nn::mul(p, nn::add_scalar(d.range, -1.0)), 1.0);
}

TokenizerTrainer::TokenizerTrainer(Tokenizer& model, Discriminator& disc, const TrainOptions& opt)
    : model_(model),
      disc_(disc),
      opt_(opt),
      gen_opt_(
          [&] {
            nn::ParamList p;
            model.collect(p);
            return p;
          }(),
          nn::AdamOptions{.lr = model.config().lr}),
      disc_opt_(
          [&] {
            nn::ParamList p;
            disc.collect(p);
            return p;
          }(),
          nn::AdamOptions{.lr = model.config().disc_lr}),
      rng_(derive_seed(opt.seed, Stream::kCodebookRestart)),
      last_used_(static_cast<size_t>(model.config().codebook_size), 0) {
  if (opt_.batch < 1) throw Error("tokenizer training: batch must be >= 1");
  if (opt_.steps < 0) throw Error("tokenizer training: steps must be >= 0");
}

void TokenizerTrainer::restart_dead_codes(const std::vector<Tensor>& z_batch, TrainLog& log) {
  const int64_t K = model_.config().codebook_size, C = model_.config().latent_channels;
  Tensor& cb = model_.codebook().mutable_value();
  int64_t sites = 0;
  for (const auto& z : z_batch) sites += z.numel() / C;
  for (int64_t k = 0; k < K; ++k) {
    if (step_ - last_used_[static_cast<size_t>(k)] < model_.config().restart_after) continue;
    // Replace with a random encoder output from this batch, slightly jittered.
    int64_t s = rng_.uniform_int(0, sites - 1);
    const Tensor* src = nullptr;
    for (const auto& z : z_batch) {
      if (s < z.numel() / C) {
        src = &z;
        break;
      }
      s -= z.numel() / C;
    }
    for (int64_t c = 0; c < C; ++c) cb[k * C + c] = (*src)[s * C + c] + 1e-3 * rng_.normal();
    last_used_[static_cast<size_t>(k)] = step_;
    ++log.restarts;
  }
}

TrainLog TokenizerTrainer::step(const std::vector<const geom::RangeImage*>& batch) {
  if (batch.empty()) throw Error("tokenizer training: empty batch");
  const TokenizerConfig& cfg = model_.config();
  const auto& sensor = model_.sensor();
  TrainLog log;
  log.step = step_;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  if (!initialized_codes_) {
    // Seed the codebook with encoder outputs so every codeword starts on
    // the data manifold.
    nn::NoGradGuard ng;
    std::vector<Tensor> zs;
    for (const auto* img : batch) zs.push_back(model_.encode(nn::constant(normalized_input(*img, sensor))).value());
    std::fill(last_used_.begin(), last_used_.end(), -cfg.restart_after);
    TrainLog ignored;
    restart_dead_codes(zs, ignored);
    initialized_codes_ = true;
  }

  const bool adversarial =
      cfg.adv_weight > 0 && static_cast<double>(step_) >= cfg.adv_warmup * static_cast<double>(opt_.steps);
  std::vector<Tensor> z_batch, fakes, reals;
  std::set<int64_t> used;
  for (const auto* img : batch) {
    const Tensor x = normalized_input(*img, sensor);
    const Tensor mask = valid_mask(*img);
    nn::Var z = model_.encode(nn::constant(x));
    Quantized q = model_.quantize(z);
    Decoded d = model_.decode(q.z_q);
    VqLoss vq = vq_loss(x, mask, d.range, z, q.codes, cfg.beta);
    nn::Var total = vq.total;
    // Validity head: which cells return a point.
    total = nn::add(total, nn::bce_with_logits(d.valid_logit, mask));
    if (adversarial) {
      nn::Var view = disc_view(d);
      AdvLoss adv = adv_losses(disc_(nn::constant(x)), disc_(nn::detach(view)), disc_(view));
      total = nn::add(total, nn::scale(adv.g_loss, cfg.adv_weight));
      log.g_adv += adv.g_loss.value()[0] * inv_b;
      fakes.push_back(view.value());
      reals.push_back(x);
    }
    const double t = total.value()[0];
    if (!std::isfinite(t)) {
      std::ostringstream os;
      os << "tokenizer training: non-finite loss at step " << step_;
      throw Error(os.str());
    }
    nn::backward(nn::scale(total, inv_b));
    log.total += t * inv_b;
    log.recon += vq.recon * inv_b;
    log.codebook += vq.codebook * inv_b;
    log.commit += vq.commit * inv_b;
    for (int64_t k : q.indices) {
      used.insert(k);
      last_used_[static_cast<size_t>(k)] = step_;
    }
    z_batch.push_back(z.value());
  }
  gen_opt_.step();

  // Generator backward also reached the discriminator; its own update
  // starts from clean gradients.
  disc_opt_.zero_grad();
  if (adversarial) {
    for (size_t i = 0; i < fakes.size(); ++i) {
      AdvLoss adv = adv_losses(disc_(nn::constant(reals[i])), disc_(nn::constant(fakes[i])),
                               disc_(nn::constant(fakes[i])));
      log.d_adv += adv.d_loss.value()[0] * inv_b;
      nn::backward(nn::scale(adv.d_loss, inv_b));
    }
    disc_opt_.step();
  }

  ++step_;
  restart_dead_codes(z_batch, log);
  log.used_codes = static_cast<int64_t>(used.size());
  return log;
}

TrainResult TokenizerTrainer::run(const std::vector<geom::RangeImage>& data) {
  if (data.empty()) throw Error("tokenizer training: empty dataset");
  Rng pick(derive_seed(opt_.seed, Stream::kTokenizerData));
  TrainResult res;
  for (int64_t s = 0; s < opt_.steps; ++s) {
    std::vector<const geom::RangeImage*> batch;
    for (int64_t b = 0; b < opt_.batch; ++b)
      batch.push_back(&data[static_cast<size_t>(pick.uniform_int(0, static_cast<int64_t>(data.size()) - 1))]);
    gen_opt_.options().lr = nn::cosine_lr(model_.config().lr, s, opt_.steps, opt_.final_lr_fraction);
    disc_opt_.options().lr = nn::cosine_lr(model_.config().disc_lr, s, opt_.steps, opt_.final_lr_fraction);
    TrainLog log = step(batch);
    res.restarts += log.restarts;
    res.history.push_back(log);
    if (opt_.on_log && opt_.log_every > 0 && (s % opt_.log_every == 0 || s + 1 == opt_.steps)) opt_.on_log(log);
  }
  return res;
}

ReconStats evaluate_reconstruction(const Tokenizer& model, const std::vector<geom::RangeImage>& data) {
  ReconStats st;
  std::set<int64_t> used;
  double err = 0.0, agree = 0.0;
  int64_t n = 0, cells = 0;
  for (const auto& img : data) {
    nn::NoGradGuard ng;
    Quantized q = model.quantize(model.encode(nn::constant(normalized_input(img, model.sensor()))));
    used.insert(q.indices.begin(), q.indices.end());
    Decoded d = model.decode(q.codes);
    for (size_t k = 0; k < img.ranges.size(); ++k) {
      const bool pv = d.valid_logit.value()[static_cast<int64_t>(k)] > 0;
      agree += pv == (img.valid[k] != 0);
      ++cells;
      if (!img.valid[k]) continue;
      const double r = std::clamp(geom::denormalize_range(d.range.value()[static_cast<int64_t>(k)], model.sensor()),
                                  model.sensor().r_min, model.sensor().r_max);
      err += std::abs(r - img.ranges[k]);
      ++n;
    }
  }
  st.mae = n ? err / static_cast<double>(n) : 0.0;
  st.valid_accuracy = cells ? agree / static_cast<double>(cells) : 0.0;
  st.usage = static_cast<double>(used.size()) / static_cast<double>(model.config().codebook_size);
  return st;
}

}  // namespace gem::tok
