#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dod/mtd.hpp"
#include "dod/tklvae.hpp"

// One flat run configuration covering every stage: dataset, T-KLVAE, diffusion, generation,
// evaluation and benchmarking.

namespace dod {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // hierarchy
  std::size_t L = 16;
  std::size_t m = 3;
  // dataset
  std::size_t frame_size = 32;
  std::size_t train_episodes = 64;
  std::size_t eval_episodes = 16;
  // T-KLVAE
  std::vector<std::size_t> vae_widths{16, 32};
  std::size_t latent_channels = 4;
  std::size_t vae_attention_dim = 32;
  std::size_t vae_spatial_steps = 600;
  std::size_t vae_temporal_steps = 200;
  double vae_lr = 2e-3;
  double vae_kl_weight = 1e-4;
  // diffusion
  std::size_t T = 50;
  double beta_start = 1e-4;
  double beta_end = 0.2;
  bool literal_variance = false;
  std::size_t unet_width = 32;
  std::size_t temporal_kernel = 3;
  bool multi_scale_injection = true;
  bool symmetric_injection = true;
  std::size_t diffusion_steps = 3000;
  std::size_t diffusion_batch = 1;
  double diffusion_lr = 1e-3;
  std::size_t pool_clips = 200;
  std::size_t latent_scale_clips = 20;
  // generation, evaluation, benchmark
  std::uint64_t seed = 0;
  std::size_t workers = 8;
  std::size_t frames = 0;  // 0: the plan's full length
  std::size_t eval_episode = 0;    // first eval episode that generate/eval use
  std::size_t generate_count = 1;  // consecutive eval episodes per generate call
  std::uint64_t extractor_seed = 1234;
  std::size_t block_length = 16;
  std::size_t bench_frames = 226;
  std::size_t bench_repeats = 3;
  // paths
  std::string work_dir = "runs/default";

  nlohmann::json to_json() const;
  /// Unknown keys and wrongly typed values raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  /// "key=value"; the value is read as JSON when it parses, as a string otherwise.
  void apply_override(const std::string& assignment);
  /// Cross-field checks; raises ConfigError.
  void validate() const;

  std::size_t output_frames() const;
  std::filesystem::path vae_dir() const;
  std::filesystem::path diffusion_dir(std::size_t depth) const;

  VaeConfig vae_config() const;
  VaeTrainConfig vae_train_config() const;
  UNetConfig unet_config(std::size_t depth) const;
  DiffusionTrainConfig diffusion_train_config(std::size_t depth) const;
};

}  // namespace dod
