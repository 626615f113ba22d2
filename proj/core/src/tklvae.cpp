#include "dod/tklvae.hpp"

#include <cmath>

#include "dod/adam.hpp"
#include "dod/serialize.hpp"

namespace dod {

nlohmann::json VaeConfig::to_json() const {
  return {{"image_channels", image_channels}, {"latent_channels", latent_channels},
          {"temporal_kernel", temporal_kernel}, {"widths", widths},
          {"attention_dim", attention_dim}, {"seed", seed}};
}

VaeConfig VaeConfig::from_json(const nlohmann::json& j) {
  VaeConfig c;
  c.image_channels = j.at("image_channels");
  c.latent_channels = j.at("latent_channels");
  c.temporal_kernel = j.at("temporal_kernel");
  c.widths = j.at("widths").get<std::vector<std::size_t>>();
  c.attention_dim = j.at("attention_dim");
  c.seed = j.at("seed");
  return c;
}

void init_temporal_attention_zero(AttentionLayer& layer) {
  for (Tensor* t : {&layer.out.weight, &layer.out.bias}) {
    for (double& v : t->mutable_data()) v = 0.0;
  }
}

namespace {

FactorizedConv factorized(ParamBuilder& pb, const std::string& name, std::size_t cin, std::size_t cout,
                          std::size_t k_t, std::size_t stride = 1) {
  FactorizedConv f;
  f.spatial = pb.conv2d(name + ".spatial", cin, cout, 3, stride);
  f.temporal = pb.identity_conv1d(name + ".temporal", cout, k_t);
  return f;
}

bool is_temporal(const std::string& name) { return name.find(".temporal") != std::string::npos; }

}  // namespace

TemporalVae::TemporalVae(VaeConfig config) : config_(std::move(config)) {
  if (config_.widths.empty()) throw ValueError("VaeConfig: need at least one resolution level");
  if (config_.temporal_kernel % 2 == 0) throw ValueError("VaeConfig: temporal kernel must be odd");
  ParamBuilder pb(params_, config_.seed);
  const std::size_t kt = config_.temporal_kernel, levels = config_.widths.size();
  const std::size_t c = config_.latent_channels, top = config_.widths.back();
  const auto& w = config_.widths;

  enc_in_ = factorized(pb, "enc.in", config_.image_channels, w[0], kt);
  for (std::size_t i = 0; i < levels; ++i) {
    const std::string n = "enc.level" + std::to_string(i);
    const std::size_t next = i + 1 < levels ? w[i + 1] : w[i];
    enc_levels_.push_back({pb.norm(n + ".norm", w[i], 1), factorized(pb, n + ".conv", w[i], w[i], kt),
                           factorized(pb, n + ".down", w[i], next, kt, 2)});
  }
  enc_mid_.spatial_attn = pb.attention("enc.mid.spatial_attn", top, top, config_.attention_dim, false);
  enc_mid_.temporal_attn = pb.attention("enc.mid.temporal_attn", top, top, config_.attention_dim, true);
  enc_head_norm_ = pb.norm("enc.head.norm", top, 1);
  enc_head_ = factorized(pb, "enc.head", top, 2 * c, kt);

  dec_in_ = factorized(pb, "dec.in", c, top, kt);
  dec_mid_.spatial_attn = pb.attention("dec.mid.spatial_attn", top, top, config_.attention_dim, false);
  dec_mid_.temporal_attn = pb.attention("dec.mid.temporal_attn", top, top, config_.attention_dim, true);
  std::size_t cur = top;
  dec_levels_.resize(levels);
  for (std::size_t i = levels; i-- > 0;) {
    const std::string n = "dec.level" + std::to_string(i);
    dec_levels_[i] = {pb.norm(n + ".norm", cur, 1), factorized(pb, n + ".conv", cur, cur, kt),
                      factorized(pb, n + ".up", cur, w[i], kt)};
    cur = w[i];
  }
  dec_out_norm_ = pb.norm("dec.out.norm", w[0], 1);
  dec_out_ = factorized(pb, "dec.out", w[0], config_.image_channels, kt);
}

std::vector<Tensor> TemporalVae::spatial_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_.items()) {
    if (!is_temporal(name) && name.find("temporal_attn") == std::string::npos) out.push_back(t);
  }
  return out;
}

std::vector<Tensor> TemporalVae::temporal_parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params_.items()) {
    if (is_temporal(name) || name.find("temporal_attn") != std::string::npos) out.push_back(t);
  }
  return out;
}

std::size_t TemporalVae::latent_size(std::size_t image_size) const {
  return image_size >> config_.downsampling_stages();
}

Tensor TemporalVae::apply(const FactorizedConv& f, const Tensor& x, ClipDims dims, bool temporal) const {
  Tensor h = f.spatial(x);
  return temporal ? temporal_conv(h, dims, f.temporal) : h;
}

Tensor TemporalVae::apply_mid(const Mid& mid, const Tensor& x, ClipDims dims, bool temporal) const {
  Tensor h = spatial_self_attention(x, mid.spatial_attn);
  return temporal ? temporal_self_attention(h, dims, mid.temporal_attn) : h;
}

void TemporalVae::check_video(const Tensor& video) const {
  if (video.rank() != 5 || video.dim(2) != config_.image_channels) {
    throw ShapeError("T-KLVAE: video must be (b, L, " + std::to_string(config_.image_channels) +
                     ", H, W), got " + shape_str(video.shape()));
  }
  if (video.dim(1) == 0) throw ValueError("T-KLVAE: video has no frames (L == 0)");
  const std::size_t h = video.dim(3), w = video.dim(4);
  const std::size_t unit = std::size_t{1} << config_.downsampling_stages();
  if (h % unit || w % unit || (h & (h - 1)) || (w & (w - 1))) {
    throw ShapeError("T-KLVAE: H and W (axes 3, 4) must be powers of two divisible by " + std::to_string(unit));
  }
}

Posterior TemporalVae::encode(const Tensor& video, bool temporal) const {
  check_video(video);
  const ClipDims dims{video.dim(0), video.dim(1)};
  Tensor h = reshape(video, {dims.frames(), video.dim(2), video.dim(3), video.dim(4)});
  h = apply(enc_in_, h, dims, temporal);
  for (const LevelBlock& level : enc_levels_) {
    h = add(h, apply(level.conv, silu(level.norm(h)), dims, temporal));
    h = apply(level.resample, h, dims, temporal);
  }
  h = apply_mid(enc_mid_, h, dims, temporal);
  h = apply(enc_head_, silu(enc_head_norm_(h)), dims, temporal);
  const std::size_t c = config_.latent_channels, lh = h.dim(2), lw = h.dim(3);
  const Shape latent_shape{dims.batch, dims.length, c, lh, lw};
  return {reshape(slice(h, 1, 0, c), latent_shape), reshape(slice(h, 1, c, c), latent_shape)};
}

Tensor TemporalVae::decode(const Tensor& latent, bool temporal) const {
  if (latent.rank() != 5 || latent.dim(2) != config_.latent_channels) {
    throw ShapeError("T-KLVAE: latent must be (b, L, " + std::to_string(config_.latent_channels) +
                     ", h, w), got " + shape_str(latent.shape()));
  }
  if (latent.dim(1) == 0) throw ValueError("T-KLVAE: latent has no frames (L == 0)");
  const ClipDims dims{latent.dim(0), latent.dim(1)};
  Tensor h = reshape(latent, {dims.frames(), latent.dim(2), latent.dim(3), latent.dim(4)});
  h = apply(dec_in_, h, dims, temporal);
  h = apply_mid(dec_mid_, h, dims, temporal);
  for (std::size_t i = dec_levels_.size(); i-- > 0;) {
    const LevelBlock& level = dec_levels_[i];
    h = add(h, apply(level.conv, silu(level.norm(h)), dims, temporal));
    h = apply(level.resample, upsample_nearest2x(h), dims, temporal);
  }
  h = tanh(apply(dec_out_, silu(dec_out_norm_(h)), dims, temporal));
  return reshape(h, {dims.batch, dims.length, h.dim(1), h.dim(2), h.dim(3)});
}

Tensor TemporalVae::sample_latent(const Posterior& posterior, Rng& rng) const {
  Tensor noise = rng.normal_tensor(posterior.mean.shape());
  return add(posterior.mean, mul(exp(scale(posterior.log_var, 0.5)), noise));
}

Tensor TemporalVae::reconstruct(const Tensor& video) const { return decode(encode(video).mean); }

Tensor gaussian_kl(const Tensor& mean, const Tensor& log_var) {
  // -1/2 (1 + lv - m^2 - e^lv)
  Tensor inner = sub(add_scalar(log_var, 1.0), add(square(mean), exp(log_var)));
  return scale(dod::mean(inner), -0.5);
}

VaeLoss vae_loss_terms(const Tensor& reconstruction, const Tensor& target, const Posterior& posterior,
                       double kl_weight) {
  if (kl_weight < 0.0) throw ValueError("vae_loss: kl_weight must be non-negative");
  Tensor rec = mse(reconstruction, target);
  Tensor kl = gaussian_kl(posterior.mean, posterior.log_var);
  VaeLoss out;
  out.reconstruction = rec.item();
  out.kl = kl.item();
  out.total = kl_weight == 0.0 ? rec : add(rec, scale(kl, kl_weight));
  return out;
}

VaeLoss vae_loss(const TemporalVae& vae, const Tensor& video, double kl_weight, Rng& rng, bool temporal) {
  Posterior post = vae.encode(video, temporal);
  Tensor z = vae.sample_latent(post, rng);
  return vae_loss_terms(vae.decode(z, temporal), video, post, kl_weight);
}

namespace {

Tensor stack_clips(const std::vector<Tensor>& clips) {
  // Each clip is (1, L, C, H, W); result (n, L, C, H, W).
  std::vector<Tensor> parts(clips.begin(), clips.end());
  return concat(parts, 0);
}

}  // namespace

VaeTrainReport train_vae(TemporalVae& vae, const std::vector<SyntheticEpisode>& episodes,
                         const VaeTrainConfig& config, const std::function<void(std::size_t, double)>& on_step) {
  if (episodes.empty()) throw ValueError("train_vae: no episodes");
  VaeTrainReport report;
  Rng rng(hash_seed({config.seed, hash_string("vae-train")}));

  auto run_stage = [&](std::vector<Tensor> trainable, std::size_t steps, bool temporal,
                       const std::function<Tensor()>& batch) {
    for (Tensor& t : vae.params().tensors()) t.set_requires_grad(false);
    for (Tensor& t : trainable) t.set_requires_grad(true);
    AdamState adam;
    adam.config.lr = config.lr;
    for (std::size_t step = 0; step < steps; ++step) {
      Tensor video = batch();
      zero_grad(trainable);
      Tape tape;
      VaeLoss loss;
      {
        TapeScope scope(tape);
        loss = vae_loss(vae, video, config.kl_weight, rng, temporal);
      }
      tape.backward(loss.total);
      adam_step(trainable, adam);
      report.loss.push_back(loss.total.item());
      if (on_step) on_step(report.loss.size(), loss.total.item());
    }
    for (Tensor& t : vae.params().tensors()) t.set_requires_grad(true);
  };

  // Stage 1: shuffled single frames, b = frame_batch, L = 1.
  run_stage(vae.spatial_parameters(), config.spatial_steps, false, [&] {
    std::vector<Tensor> frames;
    for (std::size_t i = 0; i < config.frame_batch; ++i) {
      const SyntheticEpisode& ep = episodes[rng.below(episodes.size())];
      frames.push_back(ep.render_frames({rng.below(ep.length())}));
    }
    return stack_clips(frames);
  });

  // Stage 2: short windows of clips sampled at every hierarchy depth's stride.
  std::vector<Tensor> stage2 = config.freeze_spatial_in_temporal_stage ? vae.temporal_parameters()
                                                                       : vae.params().tensors();
  run_stage(stage2, config.temporal_steps, true, [&] {
    std::vector<Tensor> clips;
    for (std::size_t i = 0; i < config.clip_batch; ++i) {
      const SyntheticEpisode& ep = episodes[rng.below(episodes.size())];
      const std::size_t depth = 1 + rng.below(config.depth);
      TrainingClip clip = sample_training_clip(ep, depth, config.segment_length, config.depth, rng);
      const std::size_t len = std::min(config.clip_length, config.segment_length);
      const std::size_t start = rng.below(config.segment_length - len + 1);
      clips.push_back(slice(clip.video, 1, start, len));
    }
    return stack_clips(clips);
  });
  return report;
}

void save_vae(const std::filesystem::path& dir, const TemporalVae& vae, const nlohmann::json& training) {
  save_checkpoint(dir, vae.params(), {{"kind", "tklvae"}, {"config", vae.config().to_json()}, {"training", training}});
}

TemporalVae load_vae(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  const nlohmann::json& meta = manifest.at("meta");
  if (meta.value("kind", "") != "tklvae") throw CheckpointError("not a T-KLVAE checkpoint: " + dir.string());
  TemporalVae vae(VaeConfig::from_json(meta.at("config")));
  load_checkpoint(dir, vae.params());
  return vae;
}

double reconstruction_mse(const TemporalVae& vae, const std::vector<Tensor>& clips) {
  double acc = 0.0;
  for (const Tensor& clip : clips) acc += mse(vae.reconstruct(clip), clip).item();
  return clips.empty() ? 0.0 : acc / static_cast<double>(clips.size());
}

}  // namespace dod
