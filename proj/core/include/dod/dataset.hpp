#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "dod/rng.hpp"
#include "dod/tensor.hpp"

// Synthetic long-video episodes: scripted sprite shots rendered with integer arithmetic,
// plus structured per-frame condition rows that play the role of prompt embeddings.

namespace dod {

/// Frame-index spacing of depth `depth` (1-based) in a depth-`m` hierarchy of length-L
/// segments: (L-1)^(m-depth). Training clip sampling and generation planning both use it.
std::size_t stride_for_depth(std::size_t L, std::size_t m, std::size_t depth);

struct DatasetConfig {
  std::size_t frame_size = 32;
  std::size_t episode_length = 4096;
  std::size_t prompt_tokens = 4;  // l_p
  std::size_t prompt_dim = 16;    // d_p
  std::size_t min_shots = 2;
  std::size_t max_shots = 6;
};

enum class SpriteShape : int { square = 0, disc = 1, diamond = 2 };
enum class MotionLaw : int { bounce = 0, hop = 1 };

struct Shot {
  std::size_t start = 0;
  std::size_t length = 0;
  SpriteShape shape = SpriteShape::square;
  int sprite_color = 0;
  int background = 0;
  int size = 8;
  MotionLaw motion = MotionLaw::bounce;
  // Fixed point, 1/256 pixel.
  std::int64_t x0 = 0, y0 = 0, vx = 0, vy = 0;
  std::int64_t hop_period = 0;  // frames, hop law only
};

/// Integer pixel placement of the sprite at one frame.
struct SpriteState {
  std::size_t shot = 0;
  int x = 0;
  int y = 0;
  bool operator==(const SpriteState&) const = default;
};

class SyntheticEpisode {
 public:
  static SyntheticEpisode generate(std::uint64_t episode_id, const DatasetConfig& config = {});
  static SyntheticEpisode from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  std::uint64_t id() const { return id_; }
  std::size_t length() const { return config_.episode_length; }
  const DatasetConfig& config() const { return config_; }
  const std::vector<Shot>& shots() const { return shots_; }

  std::size_t shot_index(std::size_t frame) const;
  SpriteState sprite_state(std::size_t frame) const;

  /// 8-bit RGB, (3, H, W) planar, pure function of (episode, frame).
  std::vector<std::uint8_t> render_rgb8(std::size_t frame) const;
  /// (3, H, W) with values in [-1, 1].
  Tensor render_frame(std::size_t frame) const;
  /// (l_p, d_p) condition row describing only what is visible in the frame.
  Tensor condition_row(std::size_t frame) const;

  /// Frames at the given indices as (1, n, 3, H, W).
  Tensor render_frames(const std::vector<std::size_t>& frames) const;
  /// Condition rows at the given indices as (1, n, l_p, d_p).
  Tensor condition_rows(const std::vector<std::size_t>& frames) const;

 private:
  std::uint64_t id_ = 0;
  DatasetConfig config_;
  std::vector<Shot> shots_;
};

struct TrainingClip {
  Tensor video;   // (1, L, 3, H, W)
  Tensor prompt;  // (1, L, l_p, d_p)
  std::vector<std::size_t> frames;
  std::size_t stride = 1;  // frames per step, i.e. inverse frame rate relative to the episode
};

/// L frames at the depth's stride from a uniformly random start.
TrainingClip sample_training_clip(const SyntheticEpisode& episode, std::size_t depth, std::size_t L,
                                  std::size_t m, Rng& rng);

/// Episode ids used for training and evaluation; the two ranges never overlap.
std::vector<std::uint64_t> training_episode_ids(std::size_t count);
std::vector<std::uint64_t> eval_episode_ids(std::size_t count);

}  // namespace dod
