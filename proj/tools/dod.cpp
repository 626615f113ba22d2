// dod: dataset synthesis, staged training, generation, evaluation and benchmarking.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 missing checkpoint.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <regex>

#include "dod/bench.hpp"
#include "dod/config.hpp"
#include "dod/pipeline.hpp"
#include "dod/serialize.hpp"

namespace fs = std::filesystem;
using namespace dod;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers, frames, depth;
  std::string out, in;
  std::vector<std::string> overrides;
  bool untrained = false;
};

void log_line(const std::string& s) {
  static const auto t0 = std::chrono::steady_clock::now();
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "[%8.1fs] %s\n", t, s.c_str());
}

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : RunConfig::load(f.config);
  for (const auto& o : f.overrides) c.apply_override(o);
  if (f.seed) c.seed = *f.seed;
  if (f.workers) c.workers = *f.workers;
  if (f.frames) c.frames = *f.frames;
  c.validate();
  return c;
}

fs::path out_dir(const Flags& f, const RunConfig& c, const std::string& command) {
  return f.out.empty() ? fs::path(c.work_dir) / command : fs::path(f.out);
}

int cmd_plan(const RunConfig& c) {
  const GenerationPlan full = plan_frames(c.L, c.m);
  const GenerationPlan p = truncate(full, c.output_frames());
  std::printf("L=%zu m=%zu total_frames=%zu output_frames=%zu\n", p.L, p.m, p.total_frames, p.output_frames);
  std::printf("%-6s %-8s %-7s %-11s %s\n", "depth", "stride", "tasks", "new_frames", "frames_so_far");
  std::size_t so_far = 0;
  for (std::size_t d = 0; d < p.m; ++d) {
    std::size_t added = 0;
    for (const auto& t : p.tasks[d]) added += t.produced().size();
    so_far += added;
    std::printf("%-6zu %-8zu %-7zu %-11zu %zu\n", d + 1, p.stride[d], p.tasks[d].size(), added, so_far);
  }
  std::printf("predicted speedup, unbounded workers: %.2f%%; %zu workers: %.2f%%\n", predict_speedup(p, kUnboundedWorkers, 1.0),
              c.workers, predict_speedup(p, c.workers, 1.0));
  return 0;
}

int cmd_train_vae(const RunConfig& c) {
  const auto train = training_episodes(c);
  const auto eval = evaluation_episodes(c);
  log_line("training T-KLVAE on " + std::to_string(train.size()) + " episodes");
  const VaeStage s = run_vae_stage(c, train, eval, log_line);
  save_vae(c.vae_dir(), s.vae, {{"config", c.to_json()}, {"summary", s.summary()}});
  log_line("saved " + c.vae_dir().string());
  std::cout << s.summary().dump(2) << '\n';
  return 0;
}

int cmd_train_diffusion(const RunConfig& c, std::size_t depth) {
  if (depth < 1 || depth > c.m) throw ConfigError("--depth must lie in 1.." + std::to_string(c.m));
  if (!fs::exists(c.vae_dir() / "manifest.json")) {
    throw CheckpointError("missing T-KLVAE checkpoint: " + (c.vae_dir() / "manifest.json").string() + " (run train-vae first)");
  }
  const TemporalVae vae = load_vae(c.vae_dir());
  const auto train = training_episodes(c);
  const DiffusionStage s = run_diffusion_stage(c, depth, vae, train, log_line);
  save_diffusion(c.diffusion_dir(depth), s.model, {{"config", c.to_json()}, {"summary", s.summary()}});
  log_line("saved " + c.diffusion_dir(depth).string());
  std::cout << s.summary().dump(2) << '\n';
  return 0;
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Everything except wall-clock measurements and the worker count, neither of which
// affects the frames.
std::uint64_t content_hash(nlohmann::json j) {
  std::function<void(nlohmann::json&)> strip = [&](nlohmann::json& x) {
    if (x.is_object()) {
      x.erase("depth_seconds");
      x.erase("seconds");
      x.erase("workers");
      for (auto& [_, v] : x.items()) strip(v);
    } else if (x.is_array()) {
      for (auto& v : x) strip(v);
    }
  };
  strip(j);
  return hash_string(j.dump());
}

int cmd_generate(const RunConfig& c, const fs::path& out) {
  const LoadedStack stack = load_stack(c);
  const auto eval = evaluation_episodes(c);
  const std::size_t n = c.output_frames();
  nlohmann::json videos = nlohmann::json::array();
  for (std::size_t k = c.eval_episode; k < c.eval_episode + c.generate_count; ++k) {
    log_line("generating " + std::to_string(n) + " frames for eval episode " + std::to_string(k) + " with " +
             std::to_string(c.workers) + " workers");
    const GenerationPlan plan = truncate(plan_frames(c.L, c.m), n);
    const GenerationResult r = generate_video(c, stack.view(), eval[k], n, c.workers);
    const fs::path dir = out / ("episode_" + std::to_string(k));
    write_ppm_frames(dir, r.video);
    nlohmann::json m = generation_manifest(plan, r, video_seed(c, eval[k]));
    m["eval_episode"] = k;
    m["episode_id"] = eval[k].id();
    m["frames_hash"] = hex(frames_hash(r.video));
    m["config"] = c.to_json();
    write_json(dir / "manifest.json", m);
    videos.push_back({{"dir", dir.filename().string()}, {"eval_episode", k}, {"frames_hash", m["frames_hash"]}});
  }
  nlohmann::json top{{"config", c.to_json()}, {"videos", videos}, {"frames", n}};
  top["content_hash"] = hex(content_hash(top));
  write_json(out / "manifest.json", top);
  std::cout << "wrote " << videos.size() << " video(s) to " << out.string() << ", content_hash " << top["content_hash"].get<std::string>()
            << '\n';
  return 0;
}

int cmd_eval(const RunConfig& c, const fs::path& in, const fs::path& out) {
  if (!fs::exists(in / "manifest.json")) throw CheckpointError("missing generation output: " + (in / "manifest.json").string());
  nlohmann::json top;
  std::ifstream(in / "manifest.json") >> top;
  const auto eval = evaluation_episodes(c);
  std::vector<LongVideo> real, gen;
  for (const auto& v : top.at("videos")) {
    const std::size_t k = v.at("eval_episode").get<std::size_t>();
    if (k >= eval.size()) throw ConfigError("generation used eval episode " + std::to_string(k) + ", config has " + std::to_string(eval.size()));
    gen.push_back(read_ppm_frames(in / v.at("dir").get<std::string>()));
    real.push_back(episode_video(eval[k], gen.back().length()));
  }
  const MetricsReport r = evaluate_videos(real, gen, c);
  nlohmann::json j = r.to_json();
  j["videos"] = gen.size();
  j["frames"] = gen.front().length();
  j["config"] = c.to_json();
  write_json(out / "metrics.json", j);
  std::cout << "avg_fid " << r.avg_fid << "  b_fvd_" << r.block_length << " " << r.b_fvd.value << "  blocks " << r.b_fvd.per_block.size()
            << '\n';
  return 0;
}

int cmd_bench(const RunConfig& c, const fs::path& out, bool untrained) {
  std::optional<LoadedStack> loaded;
  std::optional<TemporalVae> vae;
  std::vector<DiffusionModel> fresh;
  ModelStack stack;
  if (untrained) {
    const auto train = training_episodes(c);
    vae.emplace(c.vae_config());
    for (std::size_t d = 1; d <= c.m; ++d) fresh.push_back(fresh_diffusion_model(c, d, *vae, train));
    stack.vae = &*vae;
    for (const auto& m : fresh) stack.models.push_back(&m);
  } else {
    loaded.emplace(load_stack(c));
    stack = loaded->view();
  }
  const auto eval = evaluation_episodes(c);
  const GenerationPlan plan = truncate(plan_frames(c.L, c.m), c.bench_frames);
  BenchOptions o;
  o.workers = c.workers;
  o.repeats = c.bench_repeats;
  o.seed = video_seed(c, eval[c.eval_episode]);
  o.allow_untrained = untrained;
  log_line("bench: " + std::to_string(plan.task_count()) + " tasks, " + std::to_string(c.workers) + " workers, " +
           std::to_string(o.repeats) + " repeats");
  const BenchReport r = run_bench(plan, stack, PromptSource::from_episode(eval[c.eval_episode]), o);
  nlohmann::json j = r.to_json();
  j["config"] = c.to_json();
  j["untrained_models"] = untrained;
  j["predicted_speedup_unbounded_full_plan"] = predict_speedup(plan_frames(c.L, c.m), kUnboundedWorkers, 1.0);
  write_json(out / "bench.json", j);
  const std::string table = format_bench_table({r});
  std::ofstream(out / "bench.txt") << table;
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-over-diffusion toy pipeline"};
  app.require_subcommand(1);
  Flags f;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "global seed");
    sub->add_option("--workers", f.workers, "worker threads for local diffusion");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--frames", f.frames, "output length in frames (default: full plan)");
    sub->add_option("--override", f.overrides, "key=value, repeatable")->take_all();
  };
  CLI::App* plan = app.add_subcommand("plan", "print the generation plan");
  CLI::App* train_vae = app.add_subcommand("train-vae", "train the T-KLVAE");
  CLI::App* train_diff = app.add_subcommand("train-diffusion", "train the diffusion model of one depth");
  CLI::App* gen = app.add_subcommand("generate", "generate long videos for eval episodes");
  CLI::App* eval = app.add_subcommand("eval", "score generated videos against eval episodes");
  CLI::App* bench = app.add_subcommand("bench", "sequential vs parallel generation timing");
  for (CLI::App* s : {plan, train_vae, train_diff, gen, eval, bench}) common(s);
  train_diff->add_option("--depth", f.depth, "depth to train (1 = global)")->required();
  eval->add_option("--in", f.in, "generation directory (default: --out)");
  bench->add_flag("--untrained", f.untrained, "use freshly initialized models (inference timing only)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig c = resolve(f);
    if (*plan) return cmd_plan(c);
    if (*train_vae) return cmd_train_vae(c);
    if (*train_diff) return cmd_train_diffusion(c, *f.depth);
    if (*gen) return cmd_generate(c, out_dir(f, c, "generate"));
    if (*eval) {
      const fs::path out = out_dir(f, c, "generate");
      return cmd_eval(c, f.in.empty() ? out : fs::path(f.in), out);
    }
    if (*bench) return cmd_bench(c, out_dir(f, c, "bench"), f.untrained);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
