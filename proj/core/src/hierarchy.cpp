#include "dod/hierarchy.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "dod/ops.hpp"
#include "dod/rng.hpp"
#include "dod/serialize.hpp"

namespace dod {

std::vector<std::size_t> SegmentTask::produced() const {
  if (!has_endpoints()) return indices;
  return {indices.begin() + 1, indices.end() - 1};
}

std::size_t GenerationPlan::task_count() const {
  std::size_t n = 0;
  for (const auto& d : tasks) n += d.size();
  return n;
}

std::vector<std::size_t> GenerationPlan::tasks_per_depth() const {
  std::vector<std::size_t> out;
  for (const auto& d : tasks) out.push_back(d.size());
  return out;
}

nlohmann::json GenerationPlan::to_json() const {
  nlohmann::json depths = nlohmann::json::array();
  for (std::size_t d = 0; d < tasks.size(); ++d) {
    std::size_t frames = 0;
    for (const auto& t : tasks[d]) frames += t.produced().size();
    depths.push_back({{"depth", d + 1}, {"stride", stride[d]}, {"tasks", tasks[d].size()}, {"new_frames", frames}});
  }
  return {{"L", L}, {"m", m}, {"total_frames", total_frames}, {"output_frames", output_frames}, {"depths", depths}};
}

std::size_t total_frames_for(std::size_t L, std::size_t m) {
  if (m == 0) throw ValueError("plan_frames: depth m must be at least 1");
  if (L < 2 || (m >= 2 && L < 3)) {
    throw ValueError("plan_frames: L = " + std::to_string(L) + " leaves no middle frames to fill at depth >= 2");
  }
  std::size_t n = L;
  for (std::size_t d = 1; d < m; ++d) {
    if (n - 1 > (std::numeric_limits<std::size_t>::max() - n) / (L - 2)) throw ValueError("plan_frames: frame count overflows");
    n = n + (n - 1) * (L - 2);
  }
  return n;
}

GenerationPlan plan_frames(std::size_t L, std::size_t m) {
  GenerationPlan plan;
  plan.L = L;
  plan.m = m;
  plan.total_frames = total_frames_for(L, m);
  plan.output_frames = plan.total_frames;
  for (std::size_t d = 1; d <= m; ++d) plan.stride.push_back(stride_for_depth(L, m, d));
  for (std::size_t d = 1; d <= m; ++d) {
    const std::size_t s = plan.stride[d - 1];
    const std::size_t span = s * (L - 1);
    const std::size_t count = (plan.total_frames - 1) / span;
    std::vector<SegmentTask> level(count);
    for (std::size_t j = 0; j < count; ++j) {
      level[j].depth = d;
      level[j].position = j;
      for (std::size_t k = 0; k < L; ++k) level[j].indices.push_back(j * span + k * s);
    }
    plan.tasks.push_back(std::move(level));
  }
  return plan;
}

GenerationPlan truncate(const GenerationPlan& plan, std::size_t n_frames) {
  if (n_frames < plan.L) {
    throw ValueError("truncate: n_frames = " + std::to_string(n_frames) + " is shorter than one segment (L = " +
                     std::to_string(plan.L) + ")");
  }
  if (n_frames > plan.total_frames) {
    throw ValueError("truncate: n_frames = " + std::to_string(n_frames) + " exceeds the plan's " +
                     std::to_string(plan.total_frames) + " frames");
  }
  // keep[d][j]: task j of depth d+1 survives
  std::vector<std::vector<bool>> keep;
  for (const auto& level : plan.tasks) {
    std::vector<bool> k(level.size());
    for (std::size_t j = 0; j < level.size(); ++j) {
      const auto p = level[j].produced();
      k[j] = std::any_of(p.begin(), p.end(), [&](std::size_t i) { return i < n_frames; });
    }
    keep.push_back(std::move(k));
  }
  // A kept child needs the task that produced its endpoints, which is always its parent.
  for (std::size_t d = plan.tasks.size(); d >= 2; --d) {
    for (const auto& t : plan.tasks[d - 1]) {
      if (keep[d - 1][t.position]) keep[d - 2][t.position / (plan.L - 1)] = true;
    }
  }
  GenerationPlan out = plan;
  out.output_frames = n_frames;
  for (std::size_t d = 0; d < plan.tasks.size(); ++d) {
    out.tasks[d].clear();
    for (const auto& t : plan.tasks[d])
      if (keep[d][t.position]) out.tasks[d].push_back(t);
  }
  return out;
}

std::uint64_t segment_seed(std::uint64_t seed, const SegmentTask& task) {
  return hash_seed({seed, task.depth, task.first()});
}

PromptSource PromptSource::from_episode(const SyntheticEpisode& episode) {
  const SyntheticEpisode* ep = &episode;
  return {[ep](std::size_t i) { return i < ep->length(); }, [ep](std::size_t i) { return ep->condition_row(i); }};
}

namespace {

std::string describe_gaps(const std::vector<std::size_t>& missing) {
  std::ostringstream os;
  for (std::size_t i = 0; i < missing.size();) {
    std::size_t j = i;
    while (j + 1 < missing.size() && missing[j + 1] == missing[j] + 1) ++j;
    if (i) os << ", ";
    if (j == i) os << missing[i];
    else os << missing[i] << ".." << missing[j] << " (" << (j - i + 1) << " indices)";
    i = j + 1;
  }
  return os.str();
}

}  // namespace

std::vector<Tensor> prompts_for_depth(const GenerationPlan& plan, std::size_t depth, const PromptSource& source) {
  if (depth < 1 || depth > plan.tasks.size()) throw ValueError("prompts_for_depth: depth " + std::to_string(depth) + " is outside the plan");
  if (!source.has || !source.row) throw ValueError("prompts_for_depth: empty prompt source");
  std::vector<std::size_t> missing;
  for (const auto& t : plan.tasks[depth - 1])
    for (std::size_t i : t.indices)
      if (!source.has(i)) missing.push_back(i);
  if (!missing.empty()) {
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    throw ValueError("prompts_for_depth: prompt source has no row for frame indices " + describe_gaps(missing));
  }
  std::vector<Tensor> out;
  for (const auto& t : plan.tasks[depth - 1]) {
    std::vector<Tensor> rows;
    for (std::size_t i : t.indices) {
      const Tensor r = source.row(i);
      rows.push_back(reshape(r, {1, 1, r.dim(0), r.dim(1)}));
    }
    out.push_back(concat(rows, 1));
  }
  return out;
}

LongVideo LongVideo::prefix(std::size_t n) const {
  if (n > length()) throw ValueError("LongVideo::prefix: " + std::to_string(n) + " > " + std::to_string(length()) + " frames");
  return {slice(frames, 0, 0, n), {provenance.begin(), provenance.begin() + static_cast<std::ptrdiff_t>(n)}};
}

Tensor LongVideo::clip(std::size_t start, std::size_t n) const {
  if (start + n > length()) throw ValueError("LongVideo::clip: frames [" + std::to_string(start) + ", " + std::to_string(start + n) + ") out of range");
  Tensor c = slice(frames, 0, start, n);
  Shape s = c.shape();
  s.insert(s.begin(), 1);
  return reshape(c, s);
}

LongVideo episode_video(const SyntheticEpisode& episode, std::size_t n) {
  if (n > episode.length()) throw ValueError("episode_video: episode has only " + std::to_string(episode.length()) + " frames");
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Tensor v = episode.render_frames(idx);
  Shape s(v.shape().begin() + 1, v.shape().end());
  return {reshape(v, s), std::vector<std::size_t>(n, 0)};
}

namespace {

void validate_stack(const GenerationPlan& plan, const ModelStack& stack, bool allow_untrained) {
  if (stack.vae == nullptr) throw CheckpointError("generate: no T-KLVAE checkpoint");
  for (std::size_t d = 1; d <= plan.m; ++d) {
    if (d > stack.models.size() || stack.models[d - 1] == nullptr) {
      throw CheckpointError("generate: no diffusion checkpoint for depth " + std::to_string(d));
    }
    const DiffusionModel& model = *stack.models[d - 1];
    if (model.trained_steps == 0 && !allow_untrained) throw CheckpointError("generate: diffusion checkpoint for depth " + std::to_string(d) + " is untrained");
    const DiffusionMode want = d == 1 ? DiffusionMode::global : DiffusionMode::local;
    if (model.mode != want) {
      throw ValueError("generate: depth " + std::to_string(d) + " needs a " + to_string(want) + " model, got " + to_string(model.mode));
    }
    if (model.stride != plan.stride[d - 1]) {
      throw ValueError("generate: depth " + std::to_string(d) + " model was trained at stride " + std::to_string(model.stride) +
                       ", plan uses " + std::to_string(plan.stride[d - 1]));
    }
  }
}

}  // namespace

GenerationResult generate(const GenerationPlan& plan, const ModelStack& stack, const PromptSource& prompts,
                          std::uint64_t seed, const GenerateOptions& options) {
  if (options.workers < 1) throw ValueError("generate: workers must be >= 1");
  validate_stack(plan, stack, options.allow_untrained);
  std::vector<std::vector<Tensor>> depth_prompts;
  for (std::size_t d = 1; d <= plan.m; ++d) depth_prompts.push_back(prompts_for_depth(plan, d, prompts));

  std::size_t limit = plan.output_frames;
  for (const auto& level : plan.tasks)
    for (const auto& t : level) limit = std::max(limit, t.last() + 1);
  std::vector<Tensor> frames(limit);
  std::vector<std::size_t> provenance(limit, 0);

  GenerationResult result;
  for (const auto& level : plan.tasks)
    for (const auto& t : level) result.seeds.push_back(segment_seed(seed, t));

  std::atomic<std::uint64_t> clock{0};
  std::atomic<bool> exact{true};
  std::mutex trace_mutex;
  SampleOptions sample_options;
  sample_options.allow_untrained = options.allow_untrained;

  for (std::size_t d = 1; d <= plan.m; ++d) {
    const auto& level = plan.tasks[d - 1];
    const DiffusionModel& model = *stack.models[d - 1];
    const auto t0 = std::chrono::steady_clock::now();

    auto run_task = [&](std::size_t k, std::size_t worker) {
      const SegmentTask& task = level[k];
      TraceEvent ev{d, task.position, worker, clock.fetch_add(1), 0};
      Tensor condition;
      if (task.has_endpoints()) {
        const Tensor& a = frames[task.first()];
        const Tensor& b = frames[task.last()];
        if (!a.defined() || !b.defined()) throw std::logic_error("generate: endpoint frame not yet generated");
        Shape s{1, plan.L};
        s.insert(s.end(), a.shape().begin(), a.shape().end());
        condition = Tensor(s, 0.0);
        auto cd = condition.mutable_data();
        std::copy(a.data().begin(), a.data().end(), cd.begin());
        std::copy(b.data().begin(), b.data().end(), cd.end() - static_cast<std::ptrdiff_t>(b.numel()));
      }
      const Tensor video = sample(model, *stack.vae, depth_prompts[d - 1][k], condition, segment_seed(seed, task), sample_options);
      const std::size_t fsz = video.numel() / plan.L;
      const Shape fshape(video.shape().begin() + 2, video.shape().end());
      for (std::size_t j = 0; j < plan.L; ++j) {
        const auto off = video.data().begin() + static_cast<std::ptrdiff_t>(j * fsz);
        if (task.has_endpoints() && (j == 0 || j + 1 == plan.L)) {
          const Tensor& given = frames[task.indices[j]];
          if (!std::equal(off, off + static_cast<std::ptrdiff_t>(fsz), given.data().begin())) exact = false;
          continue;
        }
        frames[task.indices[j]] = Tensor(fshape, std::vector<double>(off, off + static_cast<std::ptrdiff_t>(fsz)));
        provenance[task.indices[j]] = d;
      }
      ev.end = clock.fetch_add(1);
      std::lock_guard lock(trace_mutex);
      result.trace.push_back(ev);
    };

    const std::size_t n_workers = std::min(options.workers, level.size());
    if (n_workers <= 1) {
      for (std::size_t k = 0; k < level.size(); ++k) run_task(k, 0);
    } else {
      std::atomic<std::size_t> next{0};
      std::exception_ptr error;
      std::mutex error_mutex;
      {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) {
          pool.emplace_back([&, w] {
            for (std::size_t k = next.fetch_add(1); k < level.size(); k = next.fetch_add(1)) {
              try {
                run_task(k, w);
              } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
                next = level.size();
              }
            }
          });
        }
      }  // join: depth barrier
      if (error) std::rethrow_exception(error);
    }
    result.depth_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  std::vector<Tensor> out;
  for (std::size_t i = 0; i < plan.output_frames; ++i) {
    if (!frames[i].defined()) throw std::logic_error("generate: frame " + std::to_string(i) + " was never produced");
    Shape s = frames[i].shape();
    s.insert(s.begin(), 1);
    out.push_back(reshape(frames[i], s));
  }
  result.video.frames = concat(out, 0);
  result.video.provenance.assign(provenance.begin(), provenance.begin() + static_cast<std::ptrdiff_t>(plan.output_frames));
  result.endpoints_exact = exact;
  return result;
}

bool trace_respects_dependencies(const GenerationPlan& plan, const std::vector<TraceEvent>& trace) {
  std::map<std::pair<std::size_t, std::size_t>, const TraceEvent*> by_task;
  for (const auto& ev : trace) by_task[{ev.depth, ev.position}] = &ev;
  std::map<std::size_t, const TraceEvent*> producer;
  for (const auto& level : plan.tasks)
    for (const auto& t : level) {
      auto it = by_task.find({t.depth, t.position});
      if (it == by_task.end()) return false;  // a planned task never ran
      for (std::size_t i : t.produced()) producer[i] = it->second;
    }
  for (const auto& level : plan.tasks)
    for (const auto& t : level) {
      if (!t.has_endpoints()) continue;
      const TraceEvent* self = by_task.at({t.depth, t.position});
      for (std::size_t i : {t.first(), t.last()}) {
        auto p = producer.find(i);
        if (p == producer.end() || p->second->end >= self->start) return false;
      }
    }
  return true;
}

std::uint8_t to_byte(double v) {
  const double x = std::clamp((v + 1.0) * 127.5, 0.0, 255.0);
  return static_cast<std::uint8_t>(x + 0.5);
}

void write_ppm_frames(const std::filesystem::path& dir, const LongVideo& video) {
  const Tensor& f = video.frames;
  if (!f.defined() || f.rank() != 4 || f.dim(1) != 3) throw ShapeError("write_ppm_frames: frames must be (n, 3, H, W)");
  std::filesystem::create_directories(dir);
  const std::size_t h = f.dim(2), w = f.dim(3), plane = h * w;
  std::vector<char> bytes(3 * plane);
  char name[32];
  for (std::size_t n = 0; n < f.dim(0); ++n) {
    const auto src = f.data().subspan(n * 3 * plane, 3 * plane);
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) bytes[3 * p + c] = static_cast<char>(to_byte(src[c * plane + p]));
    std::snprintf(name, sizeof name, "frame_%06zu.ppm", n);
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) throw std::runtime_error("write_ppm_frames: cannot write " + (dir / name).string());
    os << "P6\n" << w << ' ' << h << "\n255\n";
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
}

LongVideo read_ppm_frames(const std::filesystem::path& dir) {
  std::vector<Tensor> out;
  char name[32];
  for (std::size_t n = 0;; ++n) {
    std::snprintf(name, sizeof name, "frame_%06zu.ppm", n);
    std::ifstream is(dir / name, std::ios::binary);
    if (!is) break;
    std::string magic;
    std::size_t w = 0, h = 0, maxval = 0;
    is >> magic >> w >> h >> maxval;
    is.get();
    if (magic != "P6" || maxval != 255 || !is) throw CheckpointError("read_ppm_frames: malformed " + (dir / name).string());
    std::vector<unsigned char> bytes(3 * w * h);
    is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!is) throw CheckpointError("read_ppm_frames: truncated " + (dir / name).string());
    Tensor t(Shape{1, 3, h, w});
    auto d = t.mutable_data();
    for (std::size_t p = 0; p < w * h; ++p)
      for (std::size_t c = 0; c < 3; ++c) d[c * w * h + p] = bytes[3 * p + c] / 127.5 - 1.0;
    out.push_back(t);
  }
  if (out.empty()) throw CheckpointError("read_ppm_frames: no frame_000000.ppm in " + dir.string());
  return {concat(out, 0), std::vector<std::size_t>(out.size(), 0)};
}

nlohmann::json generation_manifest(const GenerationPlan& plan, const GenerationResult& result, std::uint64_t seed) {
  nlohmann::json seeds = nlohmann::json::array();
  std::size_t k = 0;
  for (const auto& level : plan.tasks)
    for (const auto& t : level)
      seeds.push_back({{"depth", t.depth}, {"position", t.position}, {"first_index", t.first()}, {"seed", result.seeds.at(k++)}});
  std::vector<std::size_t> counts(plan.m + 1, 0);
  for (std::size_t p : result.video.provenance) ++counts.at(p);
  return {{"plan", plan.to_json()},
          {"seed", seed},
          {"task_seeds", seeds},
          {"provenance", result.video.provenance},
          {"frames_per_depth", std::vector<std::size_t>(counts.begin() + 1, counts.end())},
          {"depth_seconds", result.depth_seconds},
          {"endpoints_exact", result.endpoints_exact}};
}

}  // namespace dod
