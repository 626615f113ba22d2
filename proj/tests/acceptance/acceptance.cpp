// Acceptance harness: one PASS/FAIL line per criterion.
//
//   dod_acceptance prepare --work DIR   train the toy stack and run the long generations (cached)
//   dod_acceptance <1..9>  --work DIR   judge one criterion
//   dod_acceptance all     --work DIR
//
// Exit status: 0 pass, 1 fail, 77 when the criterion cannot be measured on this machine
// (criterion 7 with fewer than 8 hardware threads).

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <thread>

#include "dod/bench.hpp"
#include "dod/config.hpp"
#include "dod/metrics.hpp"
#include "dod/ops.hpp"
#include "dod/pipeline.hpp"
#include "dod/serialize.hpp"
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace dod;
using dod::testing::bit_equal;
using dod::testing::grad_check;
using dod::testing::max_abs_diff;
using dod::testing::random_leaf;

namespace {

constexpr int kSkip = 77;

// Tolerances and thresholds.
constexpr double kGradRelTol = 1e-4;
constexpr std::size_t kGradSeeds = 20;
constexpr double kOracleTol = 1e-6;
constexpr double kInversionTol = 1e-10;
constexpr double kFrechetTol = 1e-9;
constexpr double kVaeImprovement = 10.0;
constexpr double kDiffusionImprovement = 5.0;
constexpr double kTrainedVsUntrained = 2.0;
constexpr double kLengthDegradation = 1.5;
constexpr double kParallelSpeedup = 60.0;
constexpr double kUnboundedSpeedup = 95.0;
constexpr double kToyBudgetSeconds = 2.0 * 3600.0;

struct Options {
  fs::path work = "acceptance_work";
  std::size_t videos = 8;
  std::size_t ablation_steps = 2000;
  std::size_t ablation_windows = 2;
};

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const std::string& s) {
  std::fprintf(stderr, "  %s\n", s.c_str());
  std::fflush(stderr);
}

int verdict(int n, bool ok, const std::string& detail) {
  std::printf("criterion %d: %s  %s\n", n, ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  return ok ? 0 : 1;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// The toy configuration used for every trained criterion.
RunConfig toy_config(const Options& o) {
  RunConfig c;
  c.unet_width = 16;
  c.diffusion_steps = 4000;
  c.generate_count = o.videos;
  c.workers = 1;
  c.work_dir = o.work.string();
  c.validate();
  return c;
}

// Cache key: the configuration minus where it lives, so a moved work dir keeps its cache.
nlohmann::json cache_key(const RunConfig& c) {
  nlohmann::json j = c.to_json();
  j.erase("work_dir");
  return j;
}

nlohmann::json read_json(const fs::path& p) {
  nlohmann::json j;
  std::ifstream(p) >> j;
  return j;
}

// ---------------------------------------------------------------- 1

std::size_t recurrence_frames(std::size_t L, std::size_t m) {
  std::size_t n = L;
  for (std::size_t d = 2; d <= m; ++d) n += (n - 1) * (L - 2);
  return n;
}

int criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t f3 = plan_frames(16, 3).total_frames, f2 = plan_frames(16, 2).total_frames;
  bool ok = f3 == 3376 && f2 == 226 && f2 == 16 + 15 * 14;
  std::size_t swept = 0;
  for (std::size_t L = 3; L <= 8; ++L) {
    for (std::size_t m = 1; m <= 4; ++m) {
      const GenerationPlan p = plan_frames(L, m);
      std::vector<int> seen(p.total_frames, 0);
      for (const auto& level : p.tasks)
        for (const auto& t : level)
          for (std::size_t i : t.produced()) ++seen.at(i);
      const bool partition = std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
      ok = ok && p.total_frames == recurrence_frames(L, m) && partition;
      ++swept;
    }
  }
  const double secs = since(t0);
  ok = ok && secs < 1.0;
  return verdict(1, ok,
                 "plan(16,3)=" + std::to_string(f3) + " plan(16,2)=" + std::to_string(f2) + ", " + std::to_string(swept) +
                     " (L,m) pairs match the recurrence and partition the frames, " + fmt("%.3fs", secs));
}

// ---------------------------------------------------------------- 2

int criterion_2(const Options& o) {
  const RunConfig c = toy_config(o);
  TemporalVae vae(c.vae_config());
  Rng rng(2024);
  std::size_t videos = 0, mismatches = 0;
  for (int i = 0; i < 50; ++i) {
    const std::size_t L = 1 + rng.below(8);
    Tensor v = rng.normal_tensor({1 + rng.below(2), L, 3, c.frame_size, c.frame_size});
    for (double& x : v.mutable_data()) x = std::tanh(x);
    const Posterior t = vae.encode(v, true), s = vae.encode(v, false);
    const bool enc = bit_equal(t.mean, s.mean) && bit_equal(t.log_var, s.log_var);
    const bool dec = bit_equal(vae.decode(t.mean, true), vae.decode(t.mean, false));
    mismatches += !(enc && dec);
    ++videos;
  }
  std::size_t trials = 0, inert_fail = 0;
  for (std::size_t depth = 1; depth <= c.m; ++depth) {
    for (bool mi : {true, false}) {
      RunConfig cc = c;
      cc.multi_scale_injection = mi;
      const Mask3DUNet net(cc.unet_config(depth));
      for (int k = 0; k < 3; ++k) {
        const std::size_t b = 1 + rng.below(2), L = 4 + rng.below(13), h = c.frame_size >> c.vae_widths.size();
        const Tensor x = rng.normal_tensor({b, L, c.latent_channels, h, h});
        const Tensor prompt = rng.normal_tensor({b, L, 4, 16});
        const Tensor cl = rng.normal_tensor({b, L, c.latent_channels, h, h});
        Tensor cm(Shape{b, L, 1, h, h}, 0.0);
        for (double& v : cm.mutable_data()) v = rng.below(2) ? 1.0 : 0.0;
        std::vector<std::size_t> t;
        for (std::size_t i = 0; i < b; ++i) t.push_back(1 + rng.below(c.T));
        const Tensor with = net.forward(x, prompt, t, cl, cm);
        const Tensor without = net.forward(x, prompt, t, Tensor(cl.shape(), 0.0), Tensor(cm.shape(), 0.0));
        inert_fail += !bit_equal(with, without);
        ++trials;
      }
    }
  }
  return verdict(2, mismatches == 0 && inert_fail == 0,
                 "T-KLVAE vs per-frame: " + std::to_string(videos - mismatches) + "/" + std::to_string(videos) +
                     " videos bit-exact; condition injection inert in " + std::to_string(trials - inert_fail) + "/" +
                     std::to_string(trials) + " UNet forwards");
}

// ---------------------------------------------------------------- 3

int criterion_3() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (std::uint64_t seed = 0; seed < kGradSeeds; ++seed) {
    Rng rng(50000 + seed);
    auto check = [&](const char* name, auto fn, std::vector<Tensor> in) {
      const double e = grad_check(fn, std::move(in), seed).max_rel_error;
      ++checks;
      if (e > worst) {
        worst = e;
        worst_name = name;
      }
    };
    check("conv2d", [](const std::vector<Tensor>& t) { return conv2d(t[0], t[1], t[2], 1, 1); },
          {random_leaf(rng, {2, 2, 5, 5}), random_leaf(rng, {3, 2, 3, 3}), random_leaf(rng, {3})});
    check("conv2d/stride2", [](const std::vector<Tensor>& t) { return conv2d(t[0], t[1], t[2], 2, 1); },
          {random_leaf(rng, {1, 3, 4, 4}), random_leaf(rng, {2, 3, 3, 3}), random_leaf(rng, {2})});
    check("conv1d", [](const std::vector<Tensor>& t) { return conv1d(t[0], t[1], t[2], 1); },
          {random_leaf(rng, {3, 2, 6}), random_leaf(rng, {2, 2, 3}), random_leaf(rng, {2})});
    check("attention", [](const std::vector<Tensor>& t) { return attention(t[0], t[1], t[2]); },
          {random_leaf(rng, {2, 4, 3}), random_leaf(rng, {2, 6, 3}), random_leaf(rng, {2, 6, 2})});
    check("layer_norm", [](const std::vector<Tensor>& t) { return layer_norm(t[0], 1, t[1], t[2]); },
          {random_leaf(rng, {3, 5, 2}), random_leaf(rng, {5}), random_leaf(rng, {5})});
    check("linear", [](const std::vector<Tensor>& t) { return linear(t[0], t[1], t[2]); },
          {random_leaf(rng, {3, 4}), random_leaf(rng, {4, 3}), random_leaf(rng, {3})});
    check("add/sub/mul", [](const std::vector<Tensor>& t) { return mul(add(t[0], t[1]), sub(t[0], t[1])); },
          {random_leaf(rng, {7}), random_leaf(rng, {7})});
    check("silu/tanh/exp/square/scale", [](const std::vector<Tensor>& t) {
            return add(silu(t[0]), add(tanh(t[0]), add(exp(scale(t[0], 0.3)), square(t[0]))));
          },
          {random_leaf(rng, {9})});
    check("add_group_bias", [](const std::vector<Tensor>& t) { return add_group_bias(t[0], t[1]); },
          {random_leaf(rng, {2, 3, 4}), random_leaf(rng, {2, 3})});
    check("reshape/permute/slice/concat", [](const std::vector<Tensor>& t) {
            Tensor p = permute(reshape(t[0], {3, 2, 2}), {1, 2, 0});
            return square(concat({slice(p, 1, 0, 1), t[1]}, 1));
          },
          {random_leaf(rng, {12}), random_leaf(rng, {2, 1, 3})});
    check("upsample/avg_pool", [](const std::vector<Tensor>& t) { return avg_pool2x(mul(upsample_nearest2x(t[0]), t[1])); },
          {random_leaf(rng, {2, 1, 2, 2}), random_leaf(rng, {2, 1, 4, 4})});
    check("sum/mean/mse", [](const std::vector<Tensor>& t) { return add(mse(t[0], t[1]), add(mean(t[0]), sum(t[1]))); },
          {random_leaf(rng, {6}), random_leaf(rng, {6})});
  }
  const double secs = since(t0);
  return verdict(3, worst <= kGradRelTol && secs < 60.0,
                 std::to_string(checks) + " finite-difference checks over " + std::to_string(kGradSeeds) +
                     " seeds, worst relative error " + fmt("%.2e", worst) + " (" + worst_name + "), " + fmt("%.1fs", secs));
}

// ---------------------------------------------------------------- 4

int criterion_4() {
  Rng rng(404);
  double worst_oracle = 0.0;
  for (std::size_t T = 2; T <= 10; ++T) {
    const auto s = make_schedule(T, 1e-3, 0.5);
    const Tensor x0 = rng.normal_tensor({3, 16});
    Tensor x = rng.normal_tensor(x0.shape());
    for (std::size_t t = T; t >= 1; --t) {
      const double ab = s.alpha_bar_at(t);
      Tensor eps(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) eps.mutable_data()[i] = (x.at(i) - std::sqrt(ab) * x0.at(i)) / std::sqrt(1.0 - ab);
      x = ddpm_sample_step(x, t, eps, s, rng.normal_tensor(x.shape()));
    }
    worst_oracle = std::max(worst_oracle, max_abs_diff(x, x0));
  }

  const auto s50 = make_schedule(50, 1e-4, 0.2);
  const Tensor x0 = rng.normal_tensor({6});
  bool moments = true;
  double worst_var_rel = 0.0;
  for (std::size_t t : {1u, 5u, 25u, 50u}) {
    const std::size_t n = 20000;
    std::vector<double> s1(6, 0.0), s2(6, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      const Tensor xt = q_sample(x0, t, rng.normal_tensor({6}), s50);
      for (std::size_t j = 0; j < 6; ++j) {
        s1[j] += xt.at(j);
        s2[j] += xt.at(j) * xt.at(j);
      }
    }
    const double ab = s50.alpha_bar_at(t), var = 1.0 - ab;
    for (std::size_t j = 0; j < 6; ++j) {
      const double mean = s1[j] / n, v = s2[j] / n - mean * mean;
      moments = moments && std::abs(mean - std::sqrt(ab) * x0.at(j)) <= 3.0 * std::sqrt(var / n);
      worst_var_rel = std::max(worst_var_rel, std::abs(v - var) / var);
    }
  }
  moments = moments && worst_var_rel <= 0.05;

  double worst_inv = 0.0;
  for (double beta : {1e-4, 0.02, 0.2, 0.7}) {
    const auto s = schedule_from_betas({beta});
    const Tensor a = rng.normal_tensor({4, 5}), eps = rng.normal_tensor({4, 5});
    worst_inv = std::max(worst_inv, max_abs_diff(ddpm_sample_step(q_sample(a, 1, eps, s), 1, eps, s, rng.normal_tensor({4, 5})), a));
  }
  return verdict(4, worst_oracle <= kOracleTol && moments && worst_inv <= kInversionTol,
                 "oracle reverse loop T=2..10 max error " + fmt("%.1e", worst_oracle) + "; q_sample means within 3 sigma: " +
                     (moments ? "yes" : "no") + ", worst variance error " + fmt("%.2f%%", 100.0 * worst_var_rel) +
                     "; single-step inversion error " + fmt("%.1e", worst_inv));
}

// ---------------------------------------------------------------- prepare (5, 6)

// Trains the stack when the cached one does not match the toy config, then generates
// the long evaluation videos and records every measurement criteria 5 and 6 need.
int prepare(const Options& o) {
  const RunConfig c = toy_config(o);
  fs::create_directories(o.work);
  const fs::path results = o.work / "experiments.json";
  if (fs::exists(results) && read_json(results).value("config", nlohmann::json()) == cache_key(c)) {
    note("cached " + results.string());
    return 0;
  }
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::json out{{"config", cache_key(c)}};
  const auto train = training_episodes(c);
  const auto eval = evaluation_episodes(c);

  const fs::path stamp = o.work / "training.json";
  nlohmann::json training;
  if (fs::exists(stamp) && read_json(stamp).value("config", nlohmann::json()) == cache_key(c)) {
    training = read_json(stamp);
    note("reusing trained checkpoints in " + o.work.string());
  } else {
    training = {{"config", cache_key(c)}};
    const VaeStage v = run_vae_stage(c, train, eval, note);
    save_vae(c.vae_dir(), v.vae, {{"summary", v.summary()}});
    training["vae"] = v.summary();
    training["diffusion"] = nlohmann::json::array();
    for (std::size_t d = 1; d <= c.m; ++d) {
      const DiffusionStage s = run_diffusion_stage(c, d, v.vae, train, note);
      save_diffusion(c.diffusion_dir(d), s.model, {{"summary", s.summary()}});
      nlohmann::json sj = s.summary();
      sj["depth"] = d;
      training["diffusion"].push_back(sj);
    }
    write_json(stamp, training);
  }
  out["training"] = training;

  const auto t_eval = std::chrono::steady_clock::now();
  const LoadedStack stack = load_stack(c);
  const std::size_t n = c.output_frames();
  const FeatureExtractor fx(c.extractor_seed, 3 * c.frame_size * c.frame_size);
  std::vector<LongVideo> real, gen;
  nlohmann::json videos = nlohmann::json::array();
  const GenerationPlan plan = plan_frames(c.L, c.m);
  for (std::size_t k = 0; k < o.videos; ++k) {
    const auto tv = std::chrono::steady_clock::now();
    const GenerationResult r = generate_video(c, stack.view(), eval[k], n, 1);
    std::vector<std::size_t> counts(c.m + 1, 0);
    for (std::size_t p : r.video.provenance) ++counts.at(p);
    videos.push_back({{"eval_episode", k},
                      {"frames", r.video.length()},
                      {"endpoints_exact", r.endpoints_exact},
                      {"provenance_counts", counts},
                      {"trace_respects_dependencies", trace_respects_dependencies(plan, r.trace)},
                      {"prefix_226_hash", frames_hash(r.video.prefix(226))},
                      {"frames_hash", frames_hash(r.video)},
                      {"seconds", since(tv)}});
    note("video " + std::to_string(k) + ": " + std::to_string(r.video.length()) + " frames in " + fmt("%.0fs", since(tv)));
    gen.push_back(r.video);
    real.push_back(episode_video(eval[k], n));
  }
  out["videos"] = videos;

  auto prefixes = [](const std::vector<LongVideo>& vs, std::size_t len) {
    std::vector<LongVideo> p;
    for (const auto& v : vs) p.push_back(v.prefix(len));
    return p;
  };
  nlohmann::json by_length;
  for (std::size_t len : {std::size_t{16}, std::size_t{226}, n}) {
    const BlockFvd b = b_fvd(prefixes(real, len), prefixes(gen, len), c.block_length, fx);
    by_length[std::to_string(len)] = {{"b_fvd", b.value}, {"blocks", b.per_block.size()}};
    note("trained B-FVD-16 at " + std::to_string(len) + " frames: " + fmt("%.4f", b.value));
  }
  out["trained_b_fvd"] = by_length;

  // Untrained reference: freshly initialized models, same seeds and prompts, 226 frames.
  const TemporalVae fresh_vae(c.vae_config());
  std::vector<DiffusionModel> fresh;
  for (std::size_t d = 1; d <= c.m; ++d) fresh.push_back(fresh_diffusion_model(c, d, fresh_vae, train));
  ModelStack untrained{&fresh_vae, {}};
  for (const auto& m : fresh) untrained.models.push_back(&m);
  std::vector<LongVideo> ugen;
  for (std::size_t k = 0; k < o.videos; ++k) ugen.push_back(generate_video(c, untrained, eval[k], 226, 1, true).video);
  const double ub = b_fvd(prefixes(real, 226), ugen, c.block_length, fx).value;
  out["untrained_b_fvd_226"] = ub;
  note("untrained B-FVD-16 at 226 frames: " + fmt("%.4f", ub));
  out["evaluation_seconds"] = since(t_eval);
  out["seconds"] = since(t0);
  write_json(results, out);
  return 0;
}

nlohmann::json experiments(const Options& o) {
  const fs::path p = o.work / "experiments.json";
  if (!fs::exists(p)) throw CheckpointError("missing " + p.string() + "; run 'dod_acceptance prepare' first");
  const nlohmann::json j = read_json(p);
  if (j.at("config") != cache_key(toy_config(o))) throw CheckpointError(p.string() + " was produced by a different configuration");
  return j;
}

int criterion_5(const Options& o) {
  const nlohmann::json e = experiments(o);
  const nlohmann::json& tr = e.at("training");
  const double vae_gain = tr.at("vae").at("initial_mse").get<double>() / tr.at("vae").at("final_mse").get<double>();
  double worst_diff = 1e300;
  std::string diff_gains;
  for (const auto& d : tr.at("diffusion")) {
    const double g = d.at("initial_eval_loss").get<double>() / d.at("final_eval_loss").get<double>();
    worst_diff = std::min(worst_diff, g);
    diff_gains += (diff_gains.empty() ? "" : "/") + fmt("%.1fx", g);
  }
  const auto& tb = e.at("trained_b_fvd");
  const std::string full = std::to_string(e.at("videos").at(0).at("frames").get<std::size_t>());
  const double b16 = tb.at("16").at("b_fvd"), b226 = tb.at("226").at("b_fvd"), bfull = tb.at(full).at("b_fvd");
  const double ub = e.at("untrained_b_fvd_226");
  double train_seconds = tr.at("vae").at("seconds").get<double>();
  for (const auto& d : tr.at("diffusion")) train_seconds += d.at("seconds").get<double>();
  const double total = train_seconds + e.at("evaluation_seconds").get<double>();

  const bool a = vae_gain >= kVaeImprovement;
  const bool b = worst_diff >= kDiffusionImprovement;
  const bool cc = ub >= kTrainedVsUntrained * b226;
  const bool d = bfull <= kLengthDegradation * b16;
  std::printf("  (a) VAE reconstruction MSE improved %.1fx (need >= %.0fx): %s\n", vae_gain, kVaeImprovement, a ? "ok" : "FAIL");
  std::printf("  (b) diffusion eval loss improved %s per depth (need >= %.0fx): %s\n", diff_gains.c_str(), kDiffusionImprovement,
              b ? "ok" : "FAIL");
  std::printf("  (c) B-FVD-16 at 226 frames: trained %.4f, untrained %.4f, ratio %.2f (need >= %.0f): %s\n", b226, ub, ub / b226,
              kTrainedVsUntrained, cc ? "ok" : "FAIL");
  std::printf("  (d) B-FVD-16 trained at 16/226/%s frames: %.4f / %.4f / %.4f, ratio %.2f (need <= %.1f): %s\n", full.c_str(), b16,
              b226, bfull, bfull / b16, kLengthDegradation, d ? "ok" : "FAIL");
  std::printf("  toy run time (training + generation + scoring) %.0f s (target < %.0f s)\n", total, kToyBudgetSeconds);
  return verdict(5, a && b && cc && d,
                 "VAE " + fmt("%.1fx", vae_gain) + ", diffusion " + diff_gains + ", trained/untrained " + fmt("%.2fx", ub / b226) +
                     ", 16f->" + full + "f " + fmt("%.2fx", bfull / b16) + ", " + fmt("%.0f s", total));
}

int criterion_6(const Options& o) {
  const nlohmann::json e = experiments(o);
  const RunConfig c = toy_config(o);
  const GenerationPlan plan = plan_frames(c.L, c.m);
  std::vector<std::size_t> expected(c.m + 1, 0);
  for (std::size_t d = 1; d <= c.m; ++d)
    for (const auto& t : plan.tasks[d - 1]) expected[d] += t.produced().size();
  bool ok = true;
  std::size_t videos = 0;
  for (const auto& v : e.at("videos")) {
    ok = ok && v.at("endpoints_exact").get<bool>() && v.at("trace_respects_dependencies").get<bool>() &&
         v.at("provenance_counts").get<std::vector<std::size_t>>() == expected && v.at("frames").get<std::size_t>() == plan.total_frames;
    ++videos;
  }
  // A fresh 226-frame run must reproduce the stored prefix: seams do not move with length.
  const LoadedStack stack = load_stack(c);
  const auto eval = evaluation_episodes(c);
  const GenerationResult r = generate_video(c, stack.view(), eval[0], 226, 1);
  const bool prefix = frames_hash(r.video) == e.at("videos").at(0).at("prefix_226_hash").get<std::uint64_t>();

  // Direct check of every local segment of that run: endpoints equal the frames they were conditioned on.
  const GenerationPlan p226 = truncate(plan, 226);
  std::size_t segments = 0, copied = 0;
  std::vector<std::vector<Tensor>> prompts;
  for (std::size_t d = 2; d <= c.m; ++d) {
    const auto pr = prompts_for_depth(p226, d, PromptSource::from_episode(eval[0]));
    for (std::size_t k = 0; k < p226.tasks[d - 1].size(); ++k) {
      const SegmentTask& t = p226.tasks[d - 1][k];
      if (t.last() >= 226) continue;
      std::vector<Tensor> fr, blank;
      for (std::size_t i : t.indices) {
        fr.push_back(slice(r.video.frames, 0, i, 1));
        const bool endpoint = i == t.first() || i == t.last();
        blank.push_back(endpoint ? fr.back() : Tensor(fr.back().shape(), 0.0));
      }
      const Shape s{1, c.L, 3, c.frame_size, c.frame_size};
      const Tensor stored = reshape(concat(fr, 0), s), cond = reshape(concat(blank, 0), s);
      const Tensor out = sample(stack.models[d - 1], stack.vae, pr[k], cond, segment_seed(video_seed(c, eval[0]), t));
      ++segments;
      // endpoints are copies of the parent frames; the middle is what the run stored
      copied += bit_equal(slice(out, 1, 0, 1), slice(cond, 1, 0, 1)) && bit_equal(slice(out, 1, c.L - 1, 1), slice(cond, 1, c.L - 1, 1)) &&
                bit_equal(out, stored);
    }
  }
  ok = ok && prefix && r.endpoints_exact && copied == segments;
  return verdict(6, ok,
                 std::to_string(videos) + " videos of " + std::to_string(plan.total_frames) + " frames: endpoints exact, provenance " +
                     std::to_string(expected[1]) + "/" + std::to_string(expected[2]) + "/" + std::to_string(expected[3]) +
                     ", dependency order held; 226-frame rerun matches stored prefix: " + (prefix ? "yes" : "no") + "; " +
                     std::to_string(copied) + "/" + std::to_string(segments) + " re-sampled local segments reproduce their frames exactly");
}

// ---------------------------------------------------------------- 7

int criterion_7(const Options& o) {
  RunConfig c = toy_config(o);
  const auto train = training_episodes(c);
  const auto eval = evaluation_episodes(c);
  const TemporalVae vae(c.vae_config());
  std::vector<DiffusionModel> models;
  for (std::size_t d = 1; d <= c.m; ++d) models.push_back(fresh_diffusion_model(c, d, vae, train));
  ModelStack stack{&vae, {}};
  for (const auto& m : models) stack.models.push_back(&m);

  const GenerationPlan plan = truncate(plan_frames(c.L, c.m), 226);
  BenchOptions bo;
  bo.workers = 8;
  bo.repeats = 3;
  bo.seed = video_seed(c, eval[0]);
  bo.allow_untrained = true;  // timing and bit identity do not depend on the weights
  const BenchReport r = run_bench(plan, stack, PromptSource::from_episode(eval[0]), bo);
  const double unbounded = predict_speedup(plan_frames(c.L, c.m), kUnboundedWorkers, 1.0);
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  std::printf("%s", format_bench_table({r}).c_str());
  const bool measured = r.speedup_percent >= kParallelSpeedup;
  const bool ok = measured && r.outputs_identical && unbounded >= kUnboundedSpeedup;
  const std::string detail = "measured speedup " + fmt("%.1f%%", r.speedup_percent) + " with 8 workers on " + std::to_string(hw) +
                             " hardware thread(s) (need >= 60%); predicted for this machine " +
                             fmt("%.1f%%", r.predicted_speedup_percent) + "; outputs bit-identical: " +
                             (r.outputs_identical ? "yes" : "no") + "; unbounded prediction for 3376 frames " + fmt("%.2f%%", unbounded);
  const int rc = verdict(7, ok, detail);
  if (!ok && hw < 8 && r.outputs_identical && unbounded >= kUnboundedSpeedup) {
    std::printf("criterion 7: not measurable here, %u hardware thread(s) < 8 workers\n", hw);
    return kSkip;
  }
  return rc;
}

// ---------------------------------------------------------------- 8

FrechetStats stats(std::vector<double> mean, std::vector<double> cov) {
  FrechetStats s;
  s.mean = std::move(mean);
  s.cov = std::move(cov);
  s.count = 100;
  return s;
}

LongVideo noise_video(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  Tensor f = rng.normal_tensor({n, 3, 4, 4});
  for (double& v : f.mutable_data()) v = std::tanh(v);
  return {f, std::vector<std::size_t>(n, 1)};
}

int criterion_8() {
  double worst = 0.0;
  auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };
  Rng rng(808);
  // identical statistics
  for (int i = 0; i < 10; ++i) {
    std::vector<std::vector<double>> xs(40, std::vector<double>(6));
    for (auto& x : xs)
      for (double& v : x) v = rng.normal();
    const FrechetStats s = fit_gaussian(xs);
    track(frechet_distance(s, s), 0.0);
  }
  // 1-D: (m1-m2)^2 + (s1-s2)^2
  for (int i = 0; i < 10; ++i) {
    const double m1 = rng.normal(), m2 = rng.normal(), s1 = 0.1 + rng.uniform(), s2 = 0.1 + rng.uniform();
    track(frechet_distance(stats({m1}, {s1 * s1}), stats({m2}, {s2 * s2})), (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2));
  }
  // diagonal: sum over axes of the 1-D form
  for (int i = 0; i < 10; ++i) {
    const std::size_t d = 2 + rng.below(6);
    std::vector<double> ma(d), mb(d), ca(d * d, 0.0), cb(d * d, 0.0);
    double want = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      ma[k] = rng.normal();
      mb[k] = rng.normal();
      const double sa = 0.1 + rng.uniform(), sb = 0.1 + rng.uniform();
      ca[k * d + k] = sa * sa;
      cb[k * d + k] = sb * sb;
      want += (ma[k] - mb[k]) * (ma[k] - mb[k]) + (sa - sb) * (sa - sb);
    }
    track(frechet_distance(stats(ma, ca), stats(mb, cb)), want);
  }
  // symmetry and non-negativity on random full-covariance fits
  double asym = 0.0, min_fd = 1e300;
  for (int i = 0; i < 20; ++i) {
    std::vector<std::vector<double>> xa(30, std::vector<double>(5)), xb(30, std::vector<double>(5));
    for (auto& x : xa)
      for (double& v : x) v = rng.normal();
    for (auto& x : xb)
      for (double& v : x) v = 1.5 * rng.normal() + 0.3;
    const FrechetStats a = fit_gaussian(xa), b = fit_gaussian(xb);
    const double ab = frechet_distance(a, b), ba = frechet_distance(b, a);
    asym = std::max(asym, std::abs(ab - ba));
    min_fd = std::min({min_fd, ab, ba});
  }
  const bool frechet_ok = worst <= kFrechetTol && asym <= kFrechetTol && min_fd >= 0.0;

  // B-FVD block protocol on hand-built videos: 40 frames, X=16 -> 2 blocks, 8 trailing frames ignored.
  const FeatureExtractor fx(3, 3 * 4 * 4, 8);
  std::vector<LongVideo> real, same, changed_block1, changed_tail;
  for (std::uint64_t k = 0; k < 24; ++k) {
    real.push_back(noise_video(100 + k, 40));
    same.push_back(real.back());
    LongVideo b1{real.back().frames.clone(), real.back().provenance}, tail{real.back().frames.clone(), real.back().provenance};
    const LongVideo other = noise_video(900 + k, 40);
    auto b1d = b1.frames.mutable_data();
    auto td = tail.frames.mutable_data();
    const std::size_t fsz = 3 * 4 * 4;
    for (std::size_t i = 16 * fsz; i < 32 * fsz; ++i) b1d[i] = other.frames.at(i) * 0.5;
    for (std::size_t i = 32 * fsz; i < 40 * fsz; ++i) td[i] = -td[i];
    changed_block1.push_back(b1);
    changed_tail.push_back(tail);
  }
  const BlockFvd z = b_fvd(real, same, 16, fx);
  const BlockFvd one = b_fvd(real, changed_block1, 16, fx);
  const BlockFvd tail = b_fvd(real, changed_tail, 16, fx);
  // Block 1 by hand: Frechet distance between the fits of clip-16 features of frames 16..31.
  std::vector<std::vector<double>> fr, fg;
  for (std::size_t k = 0; k < real.size(); ++k) {
    fr.push_back(fx.clip_features(real[k].clip(16, 16)));
    fg.push_back(fx.clip_features(changed_block1[k].clip(16, 16)));
  }
  const double block1 = frechet_distance(fit_gaussian(fr), fit_gaussian(fg));
  const bool bfvd_ok = z.per_block.size() == 2 && std::abs(z.value) <= kFrechetTol && one.per_block.size() == 2 &&
                       std::abs(one.per_block[0]) <= kFrechetTol && std::abs(one.per_block[1] - block1) <= kFrechetTol &&
                       std::abs(one.value - block1 / 2.0) <= kFrechetTol && std::abs(tail.value) <= kFrechetTol;
  return verdict(8, frechet_ok && bfvd_ok,
                 "closed-form max error " + fmt("%.1e", worst) + ", asymmetry " + fmt("%.1e", asym) + ", min distance " +
                     fmt("%.3g", min_fd) + "; B-FVD blocks: identical " + fmt("%.1e", z.value) + ", one changed block " +
                     fmt("%.4f", one.value) + " = " + fmt("%.4f", block1) + "/2, changed tail " + fmt("%.1e", tail.value));
}

// ---------------------------------------------------------------- 9

// Local depth-m model trained with MI on or off; scored on real 16-frame windows whose
// endpoints come from the data, so only the in-betweening differs between arms.
double ablation_arm(const Options& o, const TemporalVae& vae, const std::vector<SyntheticEpisode>& train,
                    const std::vector<SyntheticEpisode>& eval, std::uint64_t seed, bool mi) {
  RunConfig c = toy_config(o);
  c.seed = seed;
  c.multi_scale_injection = mi;
  c.diffusion_steps = o.ablation_steps;
  const std::size_t depth = c.m;
  const DiffusionStage s = run_diffusion_stage(c, depth, vae, train);
  const FeatureExtractor fx(c.extractor_seed, 3 * c.frame_size * c.frame_size);
  const GenerationPlan plan = plan_frames(c.L, c.m);
  std::vector<LongVideo> real, gen;
  for (const auto& ep : eval) {
    const auto prompts = prompts_for_depth(plan, depth, PromptSource::from_episode(ep));
    for (std::size_t w = 0; w < o.ablation_windows; ++w) {
      const std::size_t k = (w * 97 + ep.id() % 13) % plan.tasks[depth - 1].size();
      const SegmentTask& t = plan.tasks[depth - 1][k];
      const Tensor clip = ep.render_frames(t.indices);  // (1, L, C, H, W)
      // the sampler sees only the endpoints, as during generation
      Tensor cond(clip.shape(), 0.0);
      const std::size_t fsz = clip.numel() / c.L;
      auto cd = cond.mutable_data();
      std::copy(clip.data().begin(), clip.data().begin() + static_cast<std::ptrdiff_t>(fsz), cd.begin());
      std::copy(clip.data().end() - static_cast<std::ptrdiff_t>(fsz), clip.data().end(), cd.end() - static_cast<std::ptrdiff_t>(fsz));
      const Tensor out = sample(s.model, vae, prompts[k], cond, hash_seed({seed, hash_string("ablation"), ep.id(), k}));
      const Shape frames_shape(out.shape().begin() + 1, out.shape().end());
      real.push_back({reshape(clip, frames_shape), std::vector<std::size_t>(c.L, 0)});
      gen.push_back({reshape(out, frames_shape), std::vector<std::size_t>(c.L, depth)});
    }
  }
  return b_fvd(real, gen, c.block_length, fx).value;
}

int criterion_9(const Options& o) {
  const RunConfig c = toy_config(o);
  if (!fs::exists(c.vae_dir() / "manifest.json")) throw CheckpointError("missing T-KLVAE checkpoint; run 'dod_acceptance prepare' first");
  const fs::path cache = o.work / "ablation.json";
  const nlohmann::json key{{"config", cache_key(c)}, {"steps", o.ablation_steps}, {"windows", o.ablation_windows}};
  nlohmann::json results;
  if (fs::exists(cache) && read_json(cache).value("key", nlohmann::json()) == key) {
    results = read_json(cache).at("results");
  } else {
    const TemporalVae vae = load_vae(c.vae_dir());
    const auto train = training_episodes(c);
    const auto eval = evaluation_episodes(c);
    for (std::uint64_t seed : {1, 2, 3}) {
      for (bool mi : {true, false}) {
        const auto t0 = std::chrono::steady_clock::now();
        const double v = ablation_arm(o, vae, train, eval, seed, mi);
        note("seed " + std::to_string(seed) + " MI " + (mi ? "on " : "off") + ": B-FVD-16 " + fmt("%.4f", v) + " (" +
             fmt("%.0fs", since(t0)) + ")");
        results.push_back({{"seed", seed}, {"mi", mi}, {"b_fvd", v}});
      }
    }
    write_json(cache, {{"key", key}, {"results", results}});
  }
  std::vector<double> on, off;
  for (const auto& r : results) (r.at("mi").get<bool>() ? on : off).push_back(r.at("b_fvd").get<double>());
  const double mon = median(on), moff = median(off);
  std::string per_seed;
  for (std::size_t i = 0; i < on.size(); ++i) per_seed += (i ? ", " : "") + fmt("%.3f", on[i]) + " vs " + fmt("%.3f", off[i]);
  return verdict(9, moff > mon,
                 "median B-FVD-16 over 3 seeds: MI on " + fmt("%.4f", mon) + ", MI off " + fmt("%.4f", moff) + " (per seed on vs off: " +
                     per_seed + ")");
}

int run(const std::string& what, const Options& o) {
  if (what == "prepare") return prepare(o);
  if (what == "1") return criterion_1();
  if (what == "2") return criterion_2(o);
  if (what == "3") return criterion_3();
  if (what == "4") return criterion_4();
  if (what == "5") return criterion_5(o);
  if (what == "6") return criterion_6(o);
  if (what == "7") return criterion_7(o);
  if (what == "8") return criterion_8();
  if (what == "9") return criterion_9(o);
  throw std::invalid_argument("unknown criterion '" + what + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string what;
  Options o;
  app.add_option("what", what, "prepare, 1..9 or all")->required();
  app.add_option("--work", o.work, "directory for trained checkpoints and cached measurements");
  app.add_option("--videos", o.videos, "long evaluation videos for criteria 5 and 6");
  app.add_option("--ablation-steps", o.ablation_steps, "training steps per ablation arm");
  CLI11_PARSE(app, argc, argv);
  try {
    if (what != "all") return run(what, o);
    int worst = 0;
    prepare(o);
    for (int n = 1; n <= 9; ++n) {
      const int rc = run(std::to_string(n), o);
      if (rc == 1 || (rc == kSkip && worst == 0)) worst = rc;
    }
    return worst;
  } catch (const std::exception& e) {
    std::printf("criterion %s: FAIL  error: %s\n", what.c_str(), e.what());
    return 1;
  }
}
