#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dod/nn.hpp"
#include "dod/rng.hpp"
#include "dod/tklvae.hpp"

// Mask temporal diffusion: DDPM schedule and corruption, masked visual conditions, the
// masked 3D UNet denoiser with scale/shift condition injection, training and sampling.
// The same network serves global mode (no visual condition) and local mode (first and
// last frames given).

namespace dod {

struct DiffusionSchedule {
  std::vector<double> beta, alpha, alpha_bar;  // index t-1 for step t
  std::size_t steps() const { return beta.size(); }
  double beta_at(std::size_t t) const;
  double alpha_at(std::size_t t) const;
  double alpha_bar_at(std::size_t t) const;  // alpha_bar_at(0) == 1
};

/// Linear beta ramp over T steps.
DiffusionSchedule make_schedule(std::size_t T, double beta_start, double beta_end);
/// Any explicit beta sequence with 0 < beta < 1 (including T = 1).
DiffusionSchedule schedule_from_betas(std::vector<double> betas);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const DiffusionSchedule& sched);
/// Per-batch-item timesteps; x0 is (b, ...).
Tensor q_sample(const Tensor& x0, const std::vector<std::size_t>& t, const Tensor& eps,
                const DiffusionSchedule& sched);

/// Standard deviation of the noise added when stepping from t to t-1. The default is the
/// posterior standard deviation sqrt((1 - ab_{t-1}) beta_t / (1 - ab_t)); `literal` uses the
/// same expression without the square root. Zero at t == 1.
double sampling_noise_scale(const DiffusionSchedule& sched, std::size_t t, bool literal = false);

/// x_{t-1} = (x_t - beta_t / sqrt(1 - ab_t) eps_hat) / sqrt(alpha_t) + sigma_t noise.
Tensor ddpm_sample_step(const Tensor& x_t, std::size_t t, const Tensor& eps_hat, const DiffusionSchedule& sched,
                        const Tensor& noise, bool literal_variance = false);

enum class DiffusionMode { global, local };
std::string to_string(DiffusionMode mode);
DiffusionMode diffusion_mode_from_string(const std::string& s);

/// Encodes pixel clips to the scaled latents the diffusion model works on.
struct LatentCodec {
  const TemporalVae* vae = nullptr;
  double scale = 1.0;  // latent = posterior mean * scale

  Tensor encode(const Tensor& video) const;
  Tensor decode(const Tensor& latent) const;
};

struct VisualCondition {
  Tensor latent;  // x0^c (b, L, c, h, w); zero wherever the mask is zero
  Tensor mask;    // x0^m (b, L, 1, h, w) in {0, 1}
};

/// Global: all-zero condition video and mask. Local: frames 2..L-1 zeroed before encoding,
/// mask set at the first and last frame only.
VisualCondition build_visual_condition(const Tensor& video, DiffusionMode mode, const LatentCodec& codec);

struct UNetConfig {
  std::size_t latent_channels = 4;
  std::size_t base_width = 16;
  std::size_t prompt_tokens = 4;  // l_p
  std::size_t prompt_dim = 16;    // d_p
  std::size_t temporal_kernel = 3;
  bool multi_scale_injection = true;  // MI: inject at every scale, not only the finest
  bool symmetric_injection = true;    // SI: inject in down and up blocks, not only up
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static UNetConfig from_json(const nlohmann::json& j);
};

/// One down or up block of the UNet; the stage order is fixed by block_forward.
struct UNetBlock {
  std::size_t channels = 0;
  LinearLayer time_proj;
  Conv2dLayer channel_conv;  // 1x1, (skip + input) channels -> channels
  NormLayer spatial_norm;
  Conv2dLayer spatial_conv;
  Conv1dLayer temporal_conv;
  std::optional<Conv2dLayer> inject_latent;  // c -> 2 * channels, zero-initialized
  std::optional<Conv2dLayer> inject_mask;    // 1 -> 2 * channels, zero-initialized
  AttentionLayer spatial_attn, prompt_attn, temporal_attn;
};

struct BlockInputs {
  Tensor h;              // (b L, C_in, H, W)
  Tensor skip;           // optional (b L, C_skip, H, W)
  Tensor time;           // (b, time_dim) embedding
  Tensor cond_latent;    // (b L, c, H, W) at this block's resolution
  Tensor cond_mask;      // (b L, 1, H, W)
  Tensor prompt;         // (b L, l_p, d_p)
  ClipDims dims;
};

/// Scale/shift injection: (w, b) = conv(cond) split along channels; h + w * h + b.
Tensor inject_condition(const Tensor& h, const Conv2dLayer& conv, const Tensor& cond);

/// skip concat -> channel conv -> timestep add -> spatial conv -> temporal conv ->
/// latent injection -> mask injection -> spatial attention -> prompt cross-attention ->
/// temporal attention. Resampling is applied by the caller.
Tensor block_forward(const UNetBlock& block, const BlockInputs& in);
/// Up block: block_forward followed by nearest upsampling and its conv.
Tensor upblock_forward(const UNetBlock& block, const Conv2dLayer& upsample, const BlockInputs& in);

/// Sinusoidal timestep embedding, (b, dim).
Tensor timestep_embedding(const std::vector<std::size_t>& t, std::size_t dim);

class Mask3DUNet {
 public:
  explicit Mask3DUNet(UNetConfig config = {});

  const UNetConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  /// x_t, x0c: (b, L, c, h, w); x0m: (b, L, 1, h, w); prompt: (b, L, l_p, d_p); one t per item.
  Tensor forward(const Tensor& x_t, const Tensor& prompt, const std::vector<std::size_t>& t,
                 const Tensor& cond_latent, const Tensor& cond_mask) const;

  /// Which blocks inject conditions under the MI/SI flags. Names: down0, down1, up1, up0.
  bool injects(const std::string& block) const;

  const UNetBlock& block(const std::string& name) const;
  const Conv2dLayer& upsample_conv() const { return up_conv_; }

 private:
  UNetConfig config_;
  ParamSet params_;
  Conv2dLayer conv_in_, down_conv_, up_conv_, conv_out_;
  Conv2dLayer pyramid_latent_, pyramid_mask_;
  bool has_pyramid_ = false;
  NormLayer out_norm_;
  LinearLayer time_mlp1_, time_mlp2_;
  UNetBlock down0_, down1_, up1_, up0_;
};

/// Mean squared error between true and predicted noise.
Tensor training_loss(const Mask3DUNet& net, const Tensor& x0, const Tensor& prompt, const VisualCondition& cond,
                     const std::vector<std::size_t>& t, const Tensor& eps, const DiffusionSchedule& sched);

struct DiffusionModel {
  Mask3DUNet net;
  DiffusionSchedule schedule;
  double beta_start = 1e-4;
  double beta_end = 0.2;
  DiffusionMode mode = DiffusionMode::global;
  std::size_t depth = 1;
  std::size_t stride = 1;
  std::size_t frame_size = 32;
  double latent_scale = 1.0;
  bool literal_variance = false;
  std::size_t trained_steps = 0;
  std::uint64_t train_seed = 0;
};

DiffusionModel make_diffusion_model(const UNetConfig& net, std::size_t T, double beta_start, double beta_end,
                                    DiffusionMode mode, std::size_t depth, std::size_t stride);

struct SampleOptions {
  bool allow_untrained = false;
};

/// Reverse process from x_T ~ N(0, I) seeded by `seed`, decoded with the VAE. In local
/// mode `condition_video` (b, L, 3, H, W) supplies the endpoints, which are copied into
/// the output bit for bit. Reentrant: touches only its own noise stream.
Tensor sample(const DiffusionModel& model, const TemporalVae& vae, const Tensor& prompt,
              const Tensor& condition_video, std::uint64_t seed, const SampleOptions& options = {});

/// Training examples: clean latents, prompts, and visual conditions at one depth's stride.
struct ClipPool {
  std::vector<Tensor> x0;      // each (1, L, c, h, w)
  std::vector<Tensor> prompt;  // each (1, L, l_p, d_p)
  std::vector<VisualCondition> cond;
  std::size_t size() const { return x0.size(); }
};

ClipPool build_clip_pool(const std::vector<SyntheticEpisode>& episodes, const std::vector<std::size_t>& depths,
                         std::size_t L, std::size_t m, DiffusionMode mode, const LatentCodec& codec,
                         std::size_t count, std::uint64_t seed);

/// Latent scale making the pool's posterior means unit-variance.
double estimate_latent_scale(const TemporalVae& vae, const std::vector<SyntheticEpisode>& episodes,
                             std::size_t L, std::size_t m, std::size_t count, std::uint64_t seed);

struct DiffusionTrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 2;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t eval_triples = 64;
};

struct DiffusionTrainReport {
  std::vector<double> loss;
  double initial_eval_loss = 0.0;
  double final_eval_loss = 0.0;
};

/// Loss on fixed (clip, t, noise) triples with t spread evenly over [1, T].
double fixed_eval_loss(const DiffusionModel& model, const ClipPool& pool, std::size_t triples, std::uint64_t seed);

DiffusionTrainReport train_diffusion(DiffusionModel& model, const ClipPool& pool, const DiffusionTrainConfig& config,
                                     const std::function<void(std::size_t, double)>& on_step = {});

void save_diffusion(const std::filesystem::path& dir, const DiffusionModel& model, const nlohmann::json& extra = {});
DiffusionModel load_diffusion(const std::filesystem::path& dir);

}  // namespace dod
