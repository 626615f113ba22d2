#include "dod/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <utility>

namespace dod {

namespace {

using Rgb = std::array<int, 3>;

constexpr std::array<Rgb, 8> kBackgrounds{{{30, 30, 70},
                                           {20, 70, 35},
                                           {80, 35, 25},
                                           {50, 50, 50},
                                           {15, 55, 85},
                                           {70, 25, 70},
                                           {90, 80, 20},
                                           {10, 10, 10}}};

constexpr std::array<Rgb, 6> kSprites{{{245, 80, 80},
                                       {80, 240, 90},
                                       {100, 130, 255},
                                       {250, 230, 70},
                                       {250, 250, 250},
                                       {245, 145, 40}}};

constexpr std::size_t kGroundRows = 5;
constexpr std::int64_t kFixed = 256;

std::int64_t triangle(std::int64_t raw, std::int64_t range) {
  if (range <= 0) return 0;
  const std::int64_t period = 2 * range;
  const std::int64_t m = ((raw % period) + period) % period;
  return m <= range ? m : period - m;
}

std::int64_t signed_speed(Rng& rng, std::int64_t lo, std::int64_t hi) {
  const auto mag = lo + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  return rng.below(2) ? mag : -mag;
}

bool covers(SpriteShape shape, int size, int i, int j) {
  const int dy = 2 * i + 1 - size, dx = 2 * j + 1 - size;
  switch (shape) {
    case SpriteShape::square:
      return true;
    case SpriteShape::disc:
      return dx * dx + dy * dy <= size * size;
    case SpriteShape::diamond:
      return std::abs(dx) + std::abs(dy) <= size;
  }
  return false;
}

void bump_features(double center, double extent, std::span<double> out) {
  const std::size_t bins = out.size();
  const double spacing = extent / static_cast<double>(bins - 1);
  for (std::size_t i = 0; i < bins; ++i) {
    const double c = spacing * static_cast<double>(i);
    out[i] = std::max(0.0, 1.0 - std::abs(center - c) / (2.0 * spacing));
  }
}

}  // namespace

std::size_t stride_for_depth(std::size_t L, std::size_t m, std::size_t depth) {
  if (L < 2 || depth < 1 || depth > m) {
    throw ValueError("stride_for_depth: need L >= 2 and 1 <= depth <= m (L=" + std::to_string(L) +
                     ", m=" + std::to_string(m) + ", depth=" + std::to_string(depth) + ")");
  }
  std::size_t s = 1;
  for (std::size_t i = depth; i < m; ++i) s *= (L - 1);
  return s;
}

SyntheticEpisode SyntheticEpisode::generate(std::uint64_t episode_id, const DatasetConfig& config) {
  if (config.prompt_tokens < 4 || config.prompt_dim < 16) {
    throw ValueError("dataset: condition rows need at least 4 tokens of width 16");
  }
  if (config.min_shots < 1 || config.max_shots < config.min_shots ||
      config.episode_length < 64 * config.max_shots || config.frame_size < 16) {
    throw ValueError("dataset: inconsistent episode configuration");
  }
  SyntheticEpisode ep;
  ep.id_ = episode_id;
  ep.config_ = config;
  Rng rng(hash_seed({episode_id, hash_string("episode")}));

  const std::size_t n_shots = config.min_shots + rng.below(config.max_shots - config.min_shots + 1);
  // Cut points: at least 1/(2 n) of the episode per shot.
  const std::size_t min_len = config.episode_length / (2 * n_shots);
  std::vector<std::size_t> cuts{0};
  std::size_t remaining = config.episode_length - min_len * n_shots;
  std::vector<std::size_t> extra(n_shots);
  std::vector<std::size_t> weights(n_shots);
  std::size_t wsum = 0;
  for (auto& w : weights) wsum += (w = 1 + rng.below(100));
  std::size_t used = 0;
  for (std::size_t i = 0; i < n_shots; ++i) {
    extra[i] = (i + 1 == n_shots) ? remaining - used : remaining * weights[i] / wsum;
    used += extra[i];
  }

  int previous_bg = -1;
  std::size_t start = 0;
  const auto fs = static_cast<std::int64_t>(config.frame_size);
  for (std::size_t i = 0; i < n_shots; ++i) {
    Shot s;
    s.start = start;
    s.length = min_len + extra[i];
    start += s.length;
    s.shape = static_cast<SpriteShape>(rng.below(3));
    s.sprite_color = static_cast<int>(rng.below(kSprites.size()));
    do {
      s.background = static_cast<int>(rng.below(kBackgrounds.size()));
    } while (s.background == previous_bg);
    previous_bg = s.background;
    s.size = 6 + static_cast<int>(rng.below(5));
    s.motion = static_cast<MotionLaw>(rng.below(2));
    const std::int64_t range = (fs - s.size) * kFixed;
    s.x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(range + 1)));
    s.y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(range + 1)));
    s.vx = signed_speed(rng, 24, 160);
    s.vy = signed_speed(rng, 24, 160);
    s.hop_period = 24 + static_cast<std::int64_t>(rng.below(73));
    ep.shots_.push_back(s);
  }
  return ep;
}

nlohmann::json SyntheticEpisode::to_json() const {
  nlohmann::json shots = nlohmann::json::array();
  for (const Shot& s : shots_) {
    shots.push_back({{"start", s.start},
                     {"length", s.length},
                     {"shape", static_cast<int>(s.shape)},
                     {"sprite_color", s.sprite_color},
                     {"background", s.background},
                     {"size", s.size},
                     {"motion", static_cast<int>(s.motion)},
                     {"x0", s.x0},
                     {"y0", s.y0},
                     {"vx", s.vx},
                     {"vy", s.vy},
                     {"hop_period", s.hop_period}});
  }
  return {{"id", id_},
          {"frame_size", config_.frame_size},
          {"episode_length", config_.episode_length},
          {"prompt_tokens", config_.prompt_tokens},
          {"prompt_dim", config_.prompt_dim},
          {"shots", shots}};
}

SyntheticEpisode SyntheticEpisode::from_json(const nlohmann::json& j) {
  SyntheticEpisode ep;
  ep.id_ = j.at("id").get<std::uint64_t>();
  ep.config_.frame_size = j.at("frame_size").get<std::size_t>();
  ep.config_.episode_length = j.at("episode_length").get<std::size_t>();
  ep.config_.prompt_tokens = j.at("prompt_tokens").get<std::size_t>();
  ep.config_.prompt_dim = j.at("prompt_dim").get<std::size_t>();
  for (const auto& js : j.at("shots")) {
    Shot s;
    s.start = js.at("start");
    s.length = js.at("length");
    s.shape = static_cast<SpriteShape>(js.at("shape").get<int>());
    s.sprite_color = js.at("sprite_color");
    s.background = js.at("background");
    s.size = js.at("size");
    s.motion = static_cast<MotionLaw>(js.at("motion").get<int>());
    s.x0 = js.at("x0");
    s.y0 = js.at("y0");
    s.vx = js.at("vx");
    s.vy = js.at("vy");
    s.hop_period = js.at("hop_period");
    ep.shots_.push_back(s);
  }
  return ep;
}

std::size_t SyntheticEpisode::shot_index(std::size_t frame) const {
  if (frame >= length()) {
    throw ValueError("episode " + std::to_string(id_) + ": frame " + std::to_string(frame) +
                     " out of range [0, " + std::to_string(length()) + ")");
  }
  for (std::size_t i = 0; i < shots_.size(); ++i) {
    if (frame < shots_[i].start + shots_[i].length) return i;
  }
  return shots_.size() - 1;
}

namespace {

// Fixed-point sprite corner at shot-relative time t.
std::pair<std::int64_t, std::int64_t> fixed_position(const Shot& s, std::int64_t t, std::size_t frame_size) {
  const std::int64_t range = (static_cast<std::int64_t>(frame_size) - s.size) * kFixed;
  const std::int64_t fx = triangle(s.x0 + s.vx * t, range);
  if (s.motion == MotionLaw::bounce) return {fx, triangle(s.y0 + s.vy * t, range)};
  // Hop: rest on the ground line, rise and fall once per period.
  const std::int64_t ground = range - static_cast<std::int64_t>(kGroundRows) * kFixed / 2;
  const std::int64_t phase = t % s.hop_period;
  const std::int64_t up = phase < s.hop_period / 2 ? phase : s.hop_period - phase;
  const std::int64_t height = (range / 2) * 2 * up / s.hop_period;
  return {fx, ground - height};
}

}  // namespace

SpriteState SyntheticEpisode::sprite_state(std::size_t frame) const {
  const std::size_t si = shot_index(frame);
  const Shot& s = shots_[si];
  const auto [fx, fy] = fixed_position(s, static_cast<std::int64_t>(frame - s.start), config_.frame_size);
  return {si, static_cast<int>(fx / kFixed), static_cast<int>(fy / kFixed)};
}

std::vector<std::uint8_t> SyntheticEpisode::render_rgb8(std::size_t frame) const {
  const SpriteState st = sprite_state(frame);
  const Shot& s = shots_[st.shot];
  const std::size_t n = config_.frame_size;
  std::vector<std::uint8_t> px(3 * n * n);
  const Rgb& bg = kBackgrounds[static_cast<std::size_t>(s.background)];
  const Rgb& fg = kSprites[static_cast<std::size_t>(s.sprite_color)];
  for (std::size_t i = 0; i < n; ++i) {
    const bool ground = i >= n - kGroundRows;
    for (std::size_t j = 0; j < n; ++j) {
      Rgb c = bg;
      if (ground) {
        for (int& v : c) v = std::min(255, v + 45);
      }
      const int si = static_cast<int>(i) - st.y, sj = static_cast<int>(j) - st.x;
      if (si >= 0 && sj >= 0 && si < s.size && sj < s.size && covers(s.shape, s.size, si, sj)) c = fg;
      for (std::size_t ch = 0; ch < 3; ++ch) px[(ch * n + i) * n + j] = static_cast<std::uint8_t>(c[ch]);
    }
  }
  return px;
}

Tensor SyntheticEpisode::render_frame(std::size_t frame) const {
  const auto px = render_rgb8(frame);
  const std::size_t n = config_.frame_size;
  Tensor t(Shape{3, n, n});
  auto d = t.mutable_data();
  for (std::size_t i = 0; i < px.size(); ++i) d[i] = static_cast<double>(px[i]) / 127.5 - 1.0;
  return t;
}

Tensor SyntheticEpisode::condition_row(std::size_t frame) const {
  const SpriteState st = sprite_state(frame);
  const Shot& s = shots_[st.shot];
  const std::size_t dp = config_.prompt_dim;
  Tensor row(Shape{config_.prompt_tokens, dp}, 0.0);
  auto d = row.mutable_data();
  d[static_cast<std::size_t>(s.shape)] = 1.0;
  d[3 + static_cast<std::size_t>(s.sprite_color)] = 1.0;
  d[9] = (s.size - 8) / 2.0;
  const double extent = static_cast<double>(config_.frame_size - 1);
  bump_features(st.x + s.size / 2.0, extent, d.subspan(dp, 16));
  bump_features(st.y + s.size / 2.0, extent, d.subspan(2 * dp, 16));
  d[3 * dp + static_cast<std::size_t>(s.background)] = 1.0;
  // Velocity over the next frame, in pixels per frame, quantized to 1/8 px.
  const auto t = static_cast<std::int64_t>(frame - s.start);
  const auto [x0, y0] = fixed_position(s, t, config_.frame_size);
  const auto [x1, y1] = fixed_position(s, t + 1, config_.frame_size);
  d[3 * dp + 8] = static_cast<double>((x1 - x0) / (kFixed / 8)) / 8.0;
  d[3 * dp + 9] = static_cast<double>((y1 - y0) / (kFixed / 8)) / 8.0;
  d[3 * dp + 10] = static_cast<double>(s.motion);
  return row;
}

Tensor SyntheticEpisode::render_frames(const std::vector<std::size_t>& frames) const {
  const std::size_t n = config_.frame_size, per = 3 * n * n;
  Tensor out(Shape{1, frames.size(), 3, n, n});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Tensor f = render_frame(frames[i]);
    std::copy(f.data().begin(), f.data().end(), d.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

Tensor SyntheticEpisode::condition_rows(const std::vector<std::size_t>& frames) const {
  const std::size_t per = config_.prompt_tokens * config_.prompt_dim;
  Tensor out(Shape{1, frames.size(), config_.prompt_tokens, config_.prompt_dim});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Tensor r = condition_row(frames[i]);
    std::copy(r.data().begin(), r.data().end(), d.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return out;
}

TrainingClip sample_training_clip(const SyntheticEpisode& episode, std::size_t depth, std::size_t L,
                                  std::size_t m, Rng& rng) {
  const std::size_t stride = stride_for_depth(L, m, depth);
  const std::size_t span = (L - 1) * stride + 1;
  if (span > episode.length()) {
    throw ValueError("sample_training_clip: depth " + std::to_string(depth) + " clip spans " +
                     std::to_string(span) + " frames, episode has " + std::to_string(episode.length()));
  }
  const std::size_t start = rng.below(episode.length() - span + 1);
  TrainingClip clip;
  clip.stride = stride;
  for (std::size_t i = 0; i < L; ++i) clip.frames.push_back(start + i * stride);
  clip.video = episode.render_frames(clip.frames);
  clip.prompt = episode.condition_rows(clip.frames);
  return clip;
}

std::vector<std::uint64_t> training_episode_ids(std::size_t count) {
  std::vector<std::uint64_t> ids(count);
  for (std::size_t i = 0; i < count; ++i) ids[i] = i;
  return ids;
}

std::vector<std::uint64_t> eval_episode_ids(std::size_t count) {
  std::vector<std::uint64_t> ids(count);
  for (std::size_t i = 0; i < count; ++i) ids[i] = 1'000'000 + i;
  return ids;
}

}  // namespace dod
