#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <json.hpp>

#include "dod/dataset.hpp"
#include "dod/nn.hpp"
#include "dod/rng.hpp"

// Temporal KL-VAE: a per-frame convolutional VAE where every spatial convolution is
// followed by a temporal convolution and the spatial attention by a temporal attention.
// Temporal convolutions start as the identity and temporal attention starts with a zero
// output projection, so an untrained model encodes and decodes exactly like the
// per-frame model.

namespace dod {

struct VaeConfig {
  std::size_t image_channels = 3;
  std::size_t latent_channels = 4;
  std::size_t temporal_kernel = 3;
  /// One entry per resolution level; the image is halved after each level.
  std::vector<std::size_t> widths{16, 32};
  std::size_t attention_dim = 32;
  std::uint64_t seed = 0;

  std::size_t downsampling_stages() const { return widths.size(); }
  nlohmann::json to_json() const;
  static VaeConfig from_json(const nlohmann::json& j);
};

/// Zeroes the output projection (weight and bias) of an attention layer in place.
void init_temporal_attention_zero(AttentionLayer& layer);

struct Posterior {
  Tensor mean;     // (b, L, c, h, w)
  Tensor log_var;  // (b, L, c, h, w)
};

/// Spatial convolution followed by its temporal convolution.
struct FactorizedConv {
  Conv2dLayer spatial;
  Conv1dLayer temporal;
};

/// Copies share parameter storage; use params().clone() for an independent snapshot.
class TemporalVae {
 public:
  explicit TemporalVae(VaeConfig config = {});

  const VaeConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  std::vector<Tensor> spatial_parameters() const;
  std::vector<Tensor> temporal_parameters() const;

  /// video: (b, L, C, H, W). With temporal = false the temporal layers are skipped,
  /// which is the per-frame image VAE the temporal model extends.
  Posterior encode(const Tensor& video, bool temporal = true) const;
  /// latent: (b, L, c, h, w) -> (b, L, C, H, W) in [-1, 1].
  Tensor decode(const Tensor& latent, bool temporal = true) const;

  /// mean + exp(log_var / 2) * noise.
  Tensor sample_latent(const Posterior& posterior, Rng& rng) const;
  /// Decode of the posterior mean.
  Tensor reconstruct(const Tensor& video) const;

  std::size_t latent_size(std::size_t image_size) const;

 private:
  struct LevelBlock {
    NormLayer norm;
    FactorizedConv conv;
    FactorizedConv resample;
  };
  struct Mid {
    AttentionLayer spatial_attn;
    AttentionLayer temporal_attn;
  };

  Tensor apply(const FactorizedConv& f, const Tensor& x, ClipDims dims, bool temporal) const;
  Tensor apply_mid(const Mid& mid, const Tensor& x, ClipDims dims, bool temporal) const;
  void check_video(const Tensor& video) const;

  VaeConfig config_;
  ParamSet params_;
  FactorizedConv enc_in_, enc_head_, dec_in_, dec_out_;
  NormLayer enc_head_norm_, dec_out_norm_;
  std::vector<LevelBlock> enc_levels_, dec_levels_;
  Mid enc_mid_, dec_mid_;
};

/// Mean over elements of -1/2 (1 + log_var - mean^2 - exp(log_var)).
Tensor gaussian_kl(const Tensor& mean, const Tensor& log_var);

struct VaeLoss {
  Tensor total;
  double reconstruction = 0.0;
  double kl = 0.0;
};

/// Reconstruction MSE plus kl_weight times the per-element KL, from given tensors.
VaeLoss vae_loss_terms(const Tensor& reconstruction, const Tensor& target, const Posterior& posterior,
                       double kl_weight);
/// Full objective: encode, reparameterize with `rng`, decode, compare.
VaeLoss vae_loss(const TemporalVae& vae, const Tensor& video, double kl_weight, Rng& rng,
                 bool temporal = true);

struct VaeTrainConfig {
  std::size_t spatial_steps = 600;
  std::size_t temporal_steps = 200;
  std::size_t frame_batch = 8;
  std::size_t clip_batch = 2;
  std::size_t clip_length = 4;
  std::size_t segment_length = 16;  // L of the hierarchy, sets the clip strides
  std::size_t depth = 3;            // m of the hierarchy
  double lr = 2e-3;
  double kl_weight = 1e-4;
  bool freeze_spatial_in_temporal_stage = true;
  std::uint64_t seed = 0;
};

struct VaeTrainReport {
  std::vector<double> loss;
};

/// Stage 1 trains spatial layers on shuffled single frames (the per-frame image VAE);
/// stage 2 trains temporal layers on clips sampled at the hierarchy's strides.
VaeTrainReport train_vae(TemporalVae& vae, const std::vector<SyntheticEpisode>& episodes,
                         const VaeTrainConfig& config,
                         const std::function<void(std::size_t, double)>& on_step = {});

/// Checkpoint: named DODT tensors plus a manifest with the architecture and `training` info.
void save_vae(const std::filesystem::path& dir, const TemporalVae& vae, const nlohmann::json& training);
TemporalVae load_vae(const std::filesystem::path& dir);

/// Mean reconstruction MSE over clips, using posterior means.
double reconstruction_mse(const TemporalVae& vae, const std::vector<Tensor>& clips);

}  // namespace dod
