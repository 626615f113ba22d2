#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "dod/hierarchy.hpp"

// Sequential (one task after another) versus depth-parallel execution of a generation plan.

namespace dod {

inline constexpr std::size_t kUnboundedWorkers = std::numeric_limits<std::size_t>::max();

struct BenchReport {
  std::size_t L = 0, m = 0, n_frames = 0, workers = 0, T = 0;
  std::size_t hardware_threads = 0;
  std::vector<std::size_t> tasks_per_depth;
  std::size_t repeats = 0;
  std::vector<double> sequential_runs, parallel_runs;  // seconds, warmup excluded
  double sequential_seconds = 0.0;  // medians
  double parallel_seconds = 0.0;
  double speedup_percent = 0.0;     // (1 - parallel / sequential) * 100
  double t_call = 0.0;              // seconds per task, from the warmup run
  double predicted_parallel_seconds = 0.0;
  double predicted_speedup_percent = 0.0;
  bool outputs_identical = false;

  nlohmann::json to_json() const;
};

/// Sum over depths of ceil(tasks_d / workers) * t_call.
double predict_parallel_seconds(const GenerationPlan& plan, std::size_t workers, double t_call);
/// (1 - predicted parallel / sequential) * 100, sequential being every task back to back.
double predict_speedup(const GenerationPlan& plan, std::size_t workers, double t_call);

struct BenchOptions {
  std::size_t workers = 8;
  std::size_t repeats = 3;
  std::uint64_t seed = 0;
  bool allow_untrained = false;
};

/// Warmup (sequential, excluded; calibrates t_call), then `repeats` rounds of sequential and
/// parallel runs. Throws if the two arms ever disagree on a single bit.
BenchReport run_bench(const GenerationPlan& plan, const ModelStack& stack, const PromptSource& prompts,
                      const BenchOptions& options = {});

/// Plain-text table: frames, metric, time, speedup; one row per report.
std::string format_bench_table(const std::vector<BenchReport>& reports, const std::vector<double>& metric = {},
                               const std::string& metric_name = "B-FVD-16");

double median(std::vector<double> values);

}  // namespace dod
