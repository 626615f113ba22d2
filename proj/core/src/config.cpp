#include "dod/config.hpp"

#include <fstream>
#include <set>

#include "dod/dataset.hpp"
#include "dod/hierarchy.hpp"
#include "dod/rng.hpp"

namespace dod {

namespace {

template <class Config, class F>
void visit_fields(Config& c, F&& f) {
  f("L", c.L);
  f("m", c.m);
  f("frame_size", c.frame_size);
  f("train_episodes", c.train_episodes);
  f("eval_episodes", c.eval_episodes);
  f("vae_widths", c.vae_widths);
  f("latent_channels", c.latent_channels);
  f("vae_attention_dim", c.vae_attention_dim);
  f("vae_spatial_steps", c.vae_spatial_steps);
  f("vae_temporal_steps", c.vae_temporal_steps);
  f("vae_lr", c.vae_lr);
  f("vae_kl_weight", c.vae_kl_weight);
  f("T", c.T);
  f("beta_start", c.beta_start);
  f("beta_end", c.beta_end);
  f("literal_variance", c.literal_variance);
  f("unet_width", c.unet_width);
  f("temporal_kernel", c.temporal_kernel);
  f("multi_scale_injection", c.multi_scale_injection);
  f("symmetric_injection", c.symmetric_injection);
  f("diffusion_steps", c.diffusion_steps);
  f("diffusion_batch", c.diffusion_batch);
  f("diffusion_lr", c.diffusion_lr);
  f("pool_clips", c.pool_clips);
  f("latent_scale_clips", c.latent_scale_clips);
  f("seed", c.seed);
  f("workers", c.workers);
  f("frames", c.frames);
  f("eval_episode", c.eval_episode);
  f("generate_count", c.generate_count);
  f("extractor_seed", c.extractor_seed);
  f("block_length", c.block_length);
  f("bench_frames", c.bench_frames);
  f("bench_repeats", c.bench_repeats);
  f("work_dir", c.work_dir);
}

void read_value(const std::string& key, const nlohmann::json& v, std::uint64_t& out) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) throw ConfigError("config key '" + key + "': expected a non-negative integer, got " + v.dump());
  out = v.get<std::uint64_t>();
}
void read_value(const std::string& key, const nlohmann::json& v, double& out) {
  if (!v.is_number()) throw ConfigError("config key '" + key + "': expected a number, got " + v.dump());
  out = v.get<double>();
}
void read_value(const std::string& key, const nlohmann::json& v, bool& out) {
  if (!v.is_boolean()) throw ConfigError("config key '" + key + "': expected true or false, got " + v.dump());
  out = v.get<bool>();
}
void read_value(const std::string& key, const nlohmann::json& v, std::string& out) {
  if (!v.is_string()) throw ConfigError("config key '" + key + "': expected a string, got " + v.dump());
  out = v.get<std::string>();
}
void read_value(const std::string& key, const nlohmann::json& v, std::vector<std::size_t>& out) {
  if (!v.is_array()) throw ConfigError("config key '" + key + "': expected an array, got " + v.dump());
  out.clear();
  for (const auto& e : v) {
    std::uint64_t x = 0;
    read_value(key, e, x);
    out.push_back(x);
  }
}

bool is_power_of_two(std::size_t n) { return n && !(n & (n - 1)); }

}  // namespace

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  visit_fields(*this, [&](const char* key, const auto& v) { j[key] = v; });
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  std::set<std::string> known;
  visit_fields(c, [&](const char* key, auto& v) {
    known.insert(key);
    if (j.contains(key)) read_value(key, j.at(key), v);
  });
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json j = to_json();
  if (!j.contains(key)) throw ConfigError("unknown config key '" + key + "' in override");
  j[key] = value;
  *this = from_json(j);
}

void RunConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("invalid config: " + what);
  };
  require(m >= 1, "m must be at least 1");
  require(L >= 3 || m == 1, "L must be at least 3 when m >= 2");
  require(L >= 2, "L must be at least 2");
  try {
    total_frames_for(L, m);
  } catch (const ValueError& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  require(frames <= total_frames_for(L, m), "frames exceeds the plan length");
  require(frames == 0 || frames >= L, "frames must be at least L");
  require(frame_size >= 4 && is_power_of_two(frame_size), "frame_size must be a power of two >= 4");
  require(!vae_widths.empty() && (frame_size >> vae_widths.size()) >= 2, "vae_widths must leave a latent of at least 2x2");
  for (std::size_t w : vae_widths) require(w > 0, "vae widths must be positive");
  require((frame_size >> vae_widths.size()) % 2 == 0, "the UNet needs an even latent size");
  require(latent_channels > 0 && vae_attention_dim > 0, "latent_channels and vae_attention_dim must be positive");
  require(train_episodes > 0 && eval_episodes > 0, "episode counts must be positive");
  require(generate_count >= 1 && eval_episode + generate_count <= eval_episodes,
          "eval_episode + generate_count must not exceed eval_episodes");
  require(T >= 2, "T must be at least 2");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, "need 0 < beta_start <= beta_end < 1");
  require(unet_width > 0 && temporal_kernel % 2 == 1, "unet_width must be positive and temporal_kernel odd");
  require(diffusion_batch > 0 && pool_clips > 0 && latent_scale_clips > 0, "batch, pool and scale clip counts must be positive");
  require(vae_lr > 0.0 && diffusion_lr > 0.0 && vae_kl_weight >= 0.0, "learning rates must be positive, kl weight non-negative");
  require(workers >= 1, "workers must be at least 1");
  require(block_length >= 2, "block_length must be at least 2");
  require(bench_frames >= L && bench_frames <= total_frames_for(L, m), "bench_frames must lie in [L, plan length]");
  require(bench_repeats >= 1, "bench_repeats must be at least 1");
  require(!work_dir.empty(), "work_dir must not be empty");
}

std::size_t RunConfig::output_frames() const { return frames == 0 ? total_frames_for(L, m) : frames; }

std::filesystem::path RunConfig::vae_dir() const { return std::filesystem::path(work_dir) / "checkpoints" / "tklvae"; }

std::filesystem::path RunConfig::diffusion_dir(std::size_t depth) const {
  return std::filesystem::path(work_dir) / "checkpoints" / (depth == 1 ? std::string("global-d1") : "local-d" + std::to_string(depth));
}

VaeConfig RunConfig::vae_config() const {
  VaeConfig c;
  c.latent_channels = latent_channels;
  c.temporal_kernel = temporal_kernel;
  c.widths = vae_widths;
  c.attention_dim = vae_attention_dim;
  c.seed = hash_seed({seed, hash_string("tklvae-init")});
  return c;
}

VaeTrainConfig RunConfig::vae_train_config() const {
  VaeTrainConfig c;
  c.spatial_steps = vae_spatial_steps;
  c.temporal_steps = vae_temporal_steps;
  c.segment_length = L;
  c.depth = m;
  c.lr = vae_lr;
  c.kl_weight = vae_kl_weight;
  c.seed = hash_seed({seed, hash_string("tklvae-train")});
  return c;
}

UNetConfig RunConfig::unet_config(std::size_t depth) const {
  UNetConfig c;
  c.latent_channels = latent_channels;
  c.base_width = unet_width;
  c.temporal_kernel = temporal_kernel;
  c.multi_scale_injection = multi_scale_injection;
  c.symmetric_injection = symmetric_injection;
  c.seed = hash_seed({seed, hash_string("unet-init"), depth});
  return c;
}

DiffusionTrainConfig RunConfig::diffusion_train_config(std::size_t depth) const {
  DiffusionTrainConfig c;
  c.steps = diffusion_steps;
  c.batch = diffusion_batch;
  c.lr = diffusion_lr;
  c.seed = hash_seed({seed, hash_string("diffusion-train"), depth});
  return c;
}

}  // namespace dod
