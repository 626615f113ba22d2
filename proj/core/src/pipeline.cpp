#include "dod/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "dod/ops.hpp"
#include "dod/rng.hpp"
#include "dod/serialize.hpp"

namespace dod {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void say(const Logger& log, const std::string& s) {
  if (log) log(s);
}

}  // namespace

std::vector<SyntheticEpisode> make_episodes(const std::vector<std::uint64_t>& ids, const RunConfig& config) {
  DatasetConfig dc;
  dc.frame_size = config.frame_size;
  dc.episode_length = std::max<std::size_t>(dc.episode_length, total_frames_for(config.L, config.m));
  std::vector<SyntheticEpisode> out;
  for (auto id : ids) out.push_back(SyntheticEpisode::generate(id, dc));
  return out;
}

std::vector<SyntheticEpisode> training_episodes(const RunConfig& config) {
  return make_episodes(training_episode_ids(config.train_episodes), config);
}

std::vector<SyntheticEpisode> evaluation_episodes(const RunConfig& config) {
  return make_episodes(eval_episode_ids(config.eval_episodes), config);
}

std::vector<Tensor> vae_probe_clips(const std::vector<SyntheticEpisode>& episodes, const RunConfig& config, std::size_t count) {
  Rng rng(hash_seed({config.seed, hash_string("vae-probe")}));
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < count; ++i) {
    const SyntheticEpisode& ep = episodes[i % episodes.size()];
    out.push_back(sample_training_clip(ep, 1 + i % config.m, config.L, config.m, rng).video);
  }
  return out;
}

nlohmann::json VaeStage::summary() const {
  return {{"initial_mse", initial_mse}, {"final_mse", final_mse}, {"improvement", initial_mse / final_mse}, {"seconds", seconds}};
}

VaeStage run_vae_stage(const RunConfig& config, const std::vector<SyntheticEpisode>& train,
                       const std::vector<SyntheticEpisode>& probe_episodes, const Logger& log) {
  const auto t0 = std::chrono::steady_clock::now();
  VaeStage s{TemporalVae(config.vae_config())};
  const std::vector<Tensor> probe = vae_probe_clips(probe_episodes, config, 12);
  s.initial_mse = reconstruction_mse(s.vae, probe);
  const VaeTrainConfig tc = config.vae_train_config();
  const std::size_t total = tc.spatial_steps + tc.temporal_steps;
  double acc = 0.0;
  std::size_t n = 0;
  train_vae(s.vae, train, tc, [&](std::size_t step, double loss) {
    acc += loss;
    ++n;
    if (step % 100 == 0 || step == total) {
      say(log, "tklvae step " + std::to_string(step) + "/" + std::to_string(total) + " loss " + std::to_string(acc / n));
      acc = 0.0;
      n = 0;
    }
  });
  s.final_mse = reconstruction_mse(s.vae, probe);
  s.seconds = seconds_since(t0);
  say(log, "tklvae probe mse " + std::to_string(s.initial_mse) + " -> " + std::to_string(s.final_mse));
  return s;
}

nlohmann::json DiffusionStage::summary() const {
  return {{"depth", model.depth},
          {"initial_eval_loss", report.initial_eval_loss},
          {"final_eval_loss", report.final_eval_loss},
          {"improvement", report.initial_eval_loss / report.final_eval_loss},
          {"steps", model.trained_steps},
          {"seconds", seconds}};
}

DiffusionModel fresh_diffusion_model(const RunConfig& config, std::size_t depth, const TemporalVae& vae,
                                     const std::vector<SyntheticEpisode>& train) {
  if (depth < 1 || depth > config.m) throw ConfigError("depth " + std::to_string(depth) + " is outside 1.." + std::to_string(config.m));
  const DiffusionMode mode = depth == 1 ? DiffusionMode::global : DiffusionMode::local;
  DiffusionModel model = make_diffusion_model(config.unet_config(depth), config.T, config.beta_start, config.beta_end, mode, depth,
                                              stride_for_depth(config.L, config.m, depth));
  model.frame_size = config.frame_size;
  model.literal_variance = config.literal_variance;
  model.latent_scale = estimate_latent_scale(vae, train, config.L, config.m, config.latent_scale_clips,
                                             hash_seed({config.seed, hash_string("latent-scale")}));
  return model;
}

DiffusionStage run_diffusion_stage(const RunConfig& config, std::size_t depth, const TemporalVae& vae,
                                   const std::vector<SyntheticEpisode>& train, const Logger& log) {
  const auto t0 = std::chrono::steady_clock::now();
  DiffusionStage s{fresh_diffusion_model(config, depth, vae, train), {}};
  const LatentCodec codec{&vae, s.model.latent_scale};
  const ClipPool pool = build_clip_pool(train, {depth}, config.L, config.m, s.model.mode, codec, config.pool_clips,
                                        hash_seed({config.seed, hash_string("pool"), depth}));
  say(log, "depth " + std::to_string(depth) + ": " + std::to_string(pool.size()) + " training clips, latent scale " +
               std::to_string(s.model.latent_scale));
  const DiffusionTrainConfig tc = config.diffusion_train_config(depth);
  double acc = 0.0;
  std::size_t n = 0;
  s.report = train_diffusion(s.model, pool, tc, [&](std::size_t step, double loss) {
    acc += loss;
    ++n;
    if (step % 250 == 0 || step == tc.steps) {
      say(log, "depth " + std::to_string(depth) + " step " + std::to_string(step) + "/" + std::to_string(tc.steps) + " loss " +
                   std::to_string(acc / n));
      acc = 0.0;
      n = 0;
    }
  });
  s.seconds = seconds_since(t0);
  say(log, "depth " + std::to_string(depth) + " eval loss " + std::to_string(s.report.initial_eval_loss) + " -> " +
               std::to_string(s.report.final_eval_loss));
  return s;
}

ModelStack LoadedStack::view() const {
  ModelStack s{&vae, {}};
  for (const auto& m : models) s.models.push_back(&m);
  return s;
}

LoadedStack load_stack(const RunConfig& config) {
  auto require = [](const std::filesystem::path& dir, const std::string& what) {
    if (!std::filesystem::exists(dir / "manifest.json")) {
      throw CheckpointError("missing " + what + " checkpoint: " + (dir / "manifest.json").string());
    }
  };
  require(config.vae_dir(), "T-KLVAE");
  for (std::size_t d = 1; d <= config.m; ++d) require(config.diffusion_dir(d), "depth-" + std::to_string(d) + " diffusion");
  LoadedStack s{load_vae(config.vae_dir()), {}};
  for (std::size_t d = 1; d <= config.m; ++d) s.models.push_back(load_diffusion(config.diffusion_dir(d)));
  return s;
}

std::uint64_t video_seed(const RunConfig& config, const SyntheticEpisode& episode) {
  return hash_seed({config.seed, hash_string("video"), episode.id()});
}

GenerationResult generate_video(const RunConfig& config, const ModelStack& stack, const SyntheticEpisode& episode,
                                std::size_t n_frames, std::size_t workers, bool allow_untrained) {
  const GenerationPlan plan = truncate(plan_frames(config.L, config.m), n_frames);
  GenerateOptions o;
  o.workers = workers;
  o.allow_untrained = allow_untrained;
  return generate(plan, stack, PromptSource::from_episode(episode), video_seed(config, episode), o);
}

std::uint64_t frames_hash(const LongVideo& video) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : video.frames.data()) {
    h ^= to_byte(v);
    h *= 0x100000001b3ULL;
  }
  return h;
}

nlohmann::json MetricsReport::to_json() const {
  const auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json blocks = nlohmann::json::array();
  for (double v : b_fvd.per_block) blocks.push_back(num(v));
  return {{"avg_fid", num(avg_fid)},
          {"b_fvd_" + std::to_string(block_length), num(b_fvd.value)},
          {"blocks", blocks.size()},
          {"per_block", blocks},
          {"extractor_seed", extractor_seed}};
}

MetricsReport evaluate_videos(const std::vector<LongVideo>& real, const std::vector<LongVideo>& gen, const RunConfig& config) {
  const FeatureExtractor fx(config.extractor_seed, 3 * config.frame_size * config.frame_size);
  MetricsReport r;
  r.block_length = config.block_length;
  r.extractor_seed = config.extractor_seed;
  auto pooled = [](const std::vector<LongVideo>& vs) {
    std::vector<Tensor> parts;
    for (const auto& v : vs) parts.push_back(v.frames);
    return concat(parts, 0);
  };
  r.avg_fid = avg_fid(pooled(real), pooled(gen), fx);
  r.b_fvd = b_fvd(real, gen, config.block_length, fx);
  return r;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace dod
