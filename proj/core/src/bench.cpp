#include "dod/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <thread>

#include "dod/tensor.hpp"

namespace dod {

namespace {

std::size_t ceil_div(std::size_t n, std::size_t w) { return n == 0 ? 0 : 1 + (n - 1) / w; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin(), [](double x, double y) {
           return std::memcmp(&x, &y, sizeof x) == 0;
         });
}

}  // namespace

double median(std::vector<double> values) {
  if (values.empty()) throw ValueError("median: no values");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double predict_parallel_seconds(const GenerationPlan& plan, std::size_t workers, double t_call) {
  if (!(t_call > 0.0)) throw ValueError("predict_speedup: t_call must be positive");
  if (workers < 1) throw ValueError("predict_speedup: workers must be >= 1");
  std::size_t calls = 0;
  for (std::size_t n : plan.tasks_per_depth()) calls += ceil_div(n, workers);
  return static_cast<double>(calls) * t_call;
}

double predict_speedup(const GenerationPlan& plan, std::size_t workers, double t_call) {
  const double parallel = predict_parallel_seconds(plan, workers, t_call);
  const double sequential = static_cast<double>(plan.task_count()) * t_call;
  return (1.0 - parallel / sequential) * 100.0;
}

BenchReport run_bench(const GenerationPlan& plan, const ModelStack& stack, const PromptSource& prompts,
                      const BenchOptions& options) {
  if (options.workers < 1) throw ValueError("run_bench: workers must be >= 1");
  if (options.repeats < 1) throw ValueError("run_bench: repeats must be >= 1");
  BenchReport r;
  r.L = plan.L;
  r.m = plan.m;
  r.n_frames = plan.output_frames;
  r.workers = options.workers;
  r.T = stack.models.empty() || !stack.models.front() ? 0 : stack.models.front()->schedule.steps();
  r.hardware_threads = std::thread::hardware_concurrency();
  r.tasks_per_depth = plan.tasks_per_depth();
  r.repeats = options.repeats;

  GenerateOptions seq{1, options.allow_untrained}, par{options.workers, options.allow_untrained};
  auto t0 = std::chrono::steady_clock::now();
  const Tensor reference = generate(plan, stack, prompts, options.seed, seq).video.frames;
  r.t_call = seconds_since(t0) / static_cast<double>(plan.task_count());

  r.outputs_identical = true;
  for (std::size_t i = 0; i < options.repeats; ++i) {
    t0 = std::chrono::steady_clock::now();
    const Tensor a = generate(plan, stack, prompts, options.seed, seq).video.frames;
    r.sequential_runs.push_back(seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    const Tensor b = generate(plan, stack, prompts, options.seed, par).video.frames;
    r.parallel_runs.push_back(seconds_since(t0));
    r.outputs_identical = r.outputs_identical && same_bits(a, reference) && same_bits(b, reference);
  }
  if (!r.outputs_identical) throw std::logic_error("run_bench: sequential and parallel outputs differ");

  r.sequential_seconds = median(r.sequential_runs);
  r.parallel_seconds = median(r.parallel_runs);
  r.speedup_percent = (1.0 - r.parallel_seconds / r.sequential_seconds) * 100.0;
  r.predicted_parallel_seconds = predict_parallel_seconds(plan, options.workers, r.t_call);
  r.predicted_speedup_percent = predict_speedup(plan, options.workers, r.t_call);
  return r;
}

nlohmann::json BenchReport::to_json() const {
  return {{"L", L},
          {"m", m},
          {"n_frames", n_frames},
          {"workers", workers},
          {"T", T},
          {"hardware_threads", hardware_threads},
          {"tasks_per_depth", tasks_per_depth},
          {"repeats", repeats},
          {"sequential_runs", sequential_runs},
          {"parallel_runs", parallel_runs},
          {"sequential_seconds", sequential_seconds},
          {"parallel_seconds", parallel_seconds},
          {"speedup_percent", speedup_percent},
          {"t_call", t_call},
          {"predicted_parallel_seconds", predicted_parallel_seconds},
          {"predicted_speedup_percent", predicted_speedup_percent},
          {"outputs_identical", outputs_identical}};
}

std::string format_bench_table(const std::vector<BenchReport>& reports, const std::vector<double>& metric,
                               const std::string& metric_name) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-8s %-12s %-10s %12s %12s %9s\n", "frames", "method", metric_name.c_str(), "time (s)",
                "workers", "speedup");
  out += line;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const BenchReport& r = reports[i];
    char m[32] = "-";
    if (i < metric.size() && std::isfinite(metric[i])) std::snprintf(m, sizeof m, "%.4g", metric[i]);
    std::snprintf(line, sizeof line, "%-8zu %-12s %-10s %12.3f %12d %9s\n", r.n_frames, "sequential", m, r.sequential_seconds, 1, "-");
    out += line;
    std::snprintf(line, sizeof line, "%-8zu %-12s %-10s %12.3f %12zu %8.2f%%\n", r.n_frames, "parallel", m, r.parallel_seconds,
                  r.workers, r.speedup_percent);
    out += line;
  }
  return out;
}

}  // namespace dod
