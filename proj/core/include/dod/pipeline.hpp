#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dod/config.hpp"
#include "dod/dataset.hpp"
#include "dod/hierarchy.hpp"
#include "dod/metrics.hpp"
#include "dod/mtd.hpp"
#include "dod/tklvae.hpp"

// Stage drivers shared by the command-line tool and the acceptance harness.

namespace dod {

using Logger = std::function<void(const std::string&)>;

std::vector<SyntheticEpisode> make_episodes(const std::vector<std::uint64_t>& ids, const RunConfig& config);
std::vector<SyntheticEpisode> training_episodes(const RunConfig& config);
std::vector<SyntheticEpisode> evaluation_episodes(const RunConfig& config);

/// Fixed clips at every depth's stride, used to score reconstructions.
std::vector<Tensor> vae_probe_clips(const std::vector<SyntheticEpisode>& episodes, const RunConfig& config, std::size_t count);

struct VaeStage {
  TemporalVae vae;
  double initial_mse = 0.0;
  double final_mse = 0.0;
  double seconds = 0.0;
  nlohmann::json summary() const;
};

VaeStage run_vae_stage(const RunConfig& config, const std::vector<SyntheticEpisode>& train,
                       const std::vector<SyntheticEpisode>& probe_episodes, const Logger& log = {});

struct DiffusionStage {
  DiffusionModel model;
  DiffusionTrainReport report;
  double seconds = 0.0;
  nlohmann::json summary() const;
};

/// Untrained model for one depth, with the latent scale measured on `train`.
DiffusionModel fresh_diffusion_model(const RunConfig& config, std::size_t depth, const TemporalVae& vae,
                                     const std::vector<SyntheticEpisode>& train);

DiffusionStage run_diffusion_stage(const RunConfig& config, std::size_t depth, const TemporalVae& vae,
                                   const std::vector<SyntheticEpisode>& train, const Logger& log = {});

/// Owns a VAE and one diffusion model per depth.
struct LoadedStack {
  TemporalVae vae;
  std::vector<DiffusionModel> models;
  ModelStack view() const;
};

/// Reads every checkpoint the config needs; CheckpointError names the first missing one.
LoadedStack load_stack(const RunConfig& config);

/// Per-video seed for an evaluation episode.
std::uint64_t video_seed(const RunConfig& config, const SyntheticEpisode& episode);

GenerationResult generate_video(const RunConfig& config, const ModelStack& stack, const SyntheticEpisode& episode,
                                std::size_t n_frames, std::size_t workers, bool allow_untrained = false);

/// FNV-style hash over the frame bytes after 8-bit quantization.
std::uint64_t frames_hash(const LongVideo& video);

struct MetricsReport {
  double avg_fid = 0.0;
  BlockFvd b_fvd;
  std::size_t block_length = 16;
  std::uint64_t extractor_seed = 0;
  nlohmann::json to_json() const;
};

/// avg_fid on all frames pooled per side, b_fvd on the video sets.
MetricsReport evaluate_videos(const std::vector<LongVideo>& real, const std::vector<LongVideo>& gen,
                              const RunConfig& config);

/// Writes pretty-printed, key-sorted JSON.
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace dod
