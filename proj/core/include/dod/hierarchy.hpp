#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dod/dataset.hpp"
#include "dod/mtd.hpp"
#include "dod/tensor.hpp"
#include "dod/tklvae.hpp"

// Diffusion over diffusion: a depth-1 global pass lays down L keyframes, then every
// adjacent pair of frames from depth d-1 is filled in by a local pass at depth d. Tasks
// within a depth are independent and run on a worker pool; depths are separated by a join.

namespace dod {

struct SegmentTask {
  std::size_t depth = 1;
  std::size_t position = 0;          // index of the task within its depth
  std::vector<std::size_t> indices;  // L absolute frame indices, equally spaced

  std::size_t first() const { return indices.front(); }
  std::size_t last() const { return indices.back(); }
  bool has_endpoints() const { return depth >= 2; }
  /// Indices this task writes: all of them at depth 1, the middle L-2 otherwise.
  std::vector<std::size_t> produced() const;
};

struct GenerationPlan {
  std::size_t L = 16;
  std::size_t m = 3;
  std::size_t total_frames = 0;           // frames of the full plan
  std::size_t output_frames = 0;          // < total_frames after truncation
  std::vector<std::size_t> stride;        // stride[d-1] for depth d
  std::vector<std::vector<SegmentTask>> tasks;  // tasks[d-1]

  std::size_t task_count() const;
  std::vector<std::size_t> tasks_per_depth() const;
  nlohmann::json to_json() const;
};

/// Frame total of an (L, m) hierarchy: N_1 = L, N_{d+1} = N_d + (N_d - 1)(L - 2).
std::size_t total_frames_for(std::size_t L, std::size_t m);

GenerationPlan plan_frames(std::size_t L, std::size_t m);

/// Keeps tasks that produce at least one index below n_frames, plus the tasks that produce
/// their endpoints. Partial tasks are kept whole; generation slices the result.
GenerationPlan truncate(const GenerationPlan& plan, std::size_t n_frames);

/// Per-task seed: depends only on the global seed, depth and first index.
std::uint64_t segment_seed(std::uint64_t seed, const SegmentTask& task);

/// Condition rows by absolute frame index.
struct PromptSource {
  std::function<bool(std::size_t)> has;
  std::function<Tensor(std::size_t)> row;  // (l_p, d_p)

  static PromptSource from_episode(const SyntheticEpisode& episode);
};

/// One (1, L, l_p, d_p) prompt per task of the given depth.
std::vector<Tensor> prompts_for_depth(const GenerationPlan& plan, std::size_t depth, const PromptSource& source);

struct LongVideo {
  Tensor frames;                     // (n, C, H, W) in [-1, 1]
  std::vector<std::size_t> provenance;  // depth that generated each frame

  std::size_t length() const { return frames.defined() ? frames.dim(0) : 0; }
  /// First n frames.
  LongVideo prefix(std::size_t n) const;
  /// Frames [start, start + n) as (1, n, C, H, W).
  Tensor clip(std::size_t start, std::size_t n) const;
};

/// Ground-truth frames 0..n-1 of an episode, all tagged as depth 0.
LongVideo episode_video(const SyntheticEpisode& episode, std::size_t n);

/// Checkpoints for every depth; models[d-1] serves depth d.
struct ModelStack {
  const TemporalVae* vae = nullptr;
  std::vector<const DiffusionModel*> models;
};

struct TraceEvent {
  std::size_t depth = 0;
  std::size_t position = 0;
  std::size_t worker = 0;
  std::uint64_t start = 0;  // global event sequence numbers
  std::uint64_t end = 0;
};

struct GenerateOptions {
  std::size_t workers = 1;
  bool allow_untrained = false;
};

struct GenerationResult {
  LongVideo video;
  std::vector<TraceEvent> trace;
  std::vector<std::uint64_t> seeds;        // per task, depth-major
  std::vector<double> depth_seconds;       // wall time per depth
  bool endpoints_exact = true;             // every child copied its endpoints bit for bit
};

/// Runs the plan. Throws CheckpointError if any depth lacks a model, before any sampling.
GenerationResult generate(const GenerationPlan& plan, const ModelStack& stack, const PromptSource& prompts,
                          std::uint64_t seed, const GenerateOptions& options = {});

/// True when every task started after the tasks producing its endpoints had finished.
bool trace_respects_dependencies(const GenerationPlan& plan, const std::vector<TraceEvent>& trace);

/// [-1, 1] -> 8-bit with rounding and clamping.
std::uint8_t to_byte(double v);

/// Writes frame_%06d.ppm (P6) for every frame.
void write_ppm_frames(const std::filesystem::path& dir, const LongVideo& video);
/// Reads frame_000000.ppm ... until the first missing index.
LongVideo read_ppm_frames(const std::filesystem::path& dir);

/// Plan, seeds, provenance and per-depth wall time.
nlohmann::json generation_manifest(const GenerationPlan& plan, const GenerationResult& result, std::uint64_t seed);

}  // namespace dod
