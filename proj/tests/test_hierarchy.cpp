#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "dod/hierarchy.hpp"
#include "dod/serialize.hpp"
#include "support/gradcheck.hpp"

using namespace dod;
using dod::testing::bit_equal;

namespace {

// Recurrence written out independently of the library.
std::size_t recurrence(std::size_t L, std::size_t m) {
  std::size_t n = L;
  for (std::size_t d = 2; d <= m; ++d) n = n + (n - 1) * (L - 2);
  return n;
}

struct TinyStack {
  TemporalVae vae;
  std::vector<DiffusionModel> models;
  ModelStack stack() const {
    ModelStack s{&vae, {}};
    for (const auto& m : models) s.models.push_back(&m);
    return s;
  }
};

TinyStack tiny_stack(const GenerationPlan& plan, std::uint64_t seed = 3) {
  VaeConfig vc;
  vc.widths = {8, 8};
  vc.attention_dim = 8;
  vc.seed = seed;
  TinyStack s{TemporalVae(vc), {}};
  for (std::size_t d = 1; d <= plan.m; ++d) {
    UNetConfig uc;
    uc.base_width = 8;
    uc.seed = seed + d;
    s.models.push_back(make_diffusion_model(uc, 4, 1e-4, 0.2, d == 1 ? DiffusionMode::global : DiffusionMode::local, d,
                                            plan.stride[d - 1]));
  }
  return s;
}

GenerateOptions untrained(std::size_t workers) {
  GenerateOptions o;
  o.workers = workers;
  o.allow_untrained = true;
  return o;
}

}  // namespace

TEST_CASE("frame-count law over the sweep and at the default size") {
  CHECK(plan_frames(16, 1).total_frames == 16);
  CHECK(plan_frames(16, 2).total_frames == 226);
  CHECK(plan_frames(16, 3).total_frames == 3376);
  for (std::size_t L = 3; L <= 8; ++L)
    for (std::size_t m = 1; m <= 4; ++m) {
      CAPTURE(L);
      CAPTURE(m);
      const GenerationPlan p = plan_frames(L, m);
      CHECK(p.total_frames == recurrence(L, m));
      CHECK(p.output_frames == p.total_frames);
      REQUIRE(p.stride.size() == m);
      for (std::size_t d = 1; d <= m; ++d) {
        std::size_t s = 1;
        for (std::size_t k = d; k < m; ++k) s *= L - 1;
        CHECK(p.stride[d - 1] == s);
      }
    }
}

TEST_CASE("plan errors") {
  CHECK_THROWS_AS(plan_frames(2, 2), ValueError);
  CHECK_THROWS_AS(plan_frames(1, 1), ValueError);
  CHECK_THROWS_AS(plan_frames(16, 0), ValueError);
  CHECK_THROWS_AS(plan_frames(1u << 20, 8), ValueError);  // overflow
}

TEST_CASE("tasks partition the frame range and bridge adjacent keyframes") {
  for (std::size_t L = 3; L <= 8; ++L)
    for (std::size_t m = 1; m <= 4; ++m) {
      CAPTURE(L);
      CAPTURE(m);
      const GenerationPlan p = plan_frames(L, m);
      std::vector<int> hits(p.total_frames, 0);
      std::set<std::size_t> known;  // frames produced at shallower depths
      for (std::size_t d = 1; d <= m; ++d) {
        std::set<std::size_t> added;
        for (const SegmentTask& t : p.tasks[d - 1]) {
          REQUIRE(t.indices.size() == L);
          for (std::size_t k = 1; k < L; ++k) CHECK(t.indices[k] - t.indices[k - 1] == p.stride[d - 1]);
          if (d >= 2) {
            // endpoints are adjacent among the frames that already exist
            REQUIRE(known.count(t.first()));
            REQUIRE(known.count(t.last()));
            auto it = known.find(t.first());
            CHECK(*std::next(it) == t.last());
          }
          for (std::size_t i : t.produced()) {
            ++hits.at(i);
            added.insert(i);
          }
          CHECK(t.produced().size() == (d == 1 ? L : L - 2));
        }
        known.insert(added.begin(), added.end());
      }
      for (int h : hits) CHECK(h == 1);
    }
}

TEST_CASE("provenance counts and task counts of the default plan") {
  const GenerationPlan p = plan_frames(16, 3);
  CHECK(p.tasks_per_depth() == std::vector<std::size_t>{1, 15, 225});
  std::vector<std::size_t> frames;
  for (const auto& level : p.tasks) {
    std::size_t n = 0;
    for (const auto& t : level) n += t.produced().size();
    frames.push_back(n);
  }
  CHECK(frames == std::vector<std::size_t>{16, 210, 3150});
}

TEST_CASE("growth per added depth approaches L - 2 new frames per frame") {
  for (std::size_t L = 4; L <= 8; ++L) {
    const double n6 = static_cast<double>(total_frames_for(L, 6)), n7 = static_cast<double>(total_frames_for(L, 7));
    CHECK((n7 - n6) / n6 == doctest::Approx(static_cast<double>(L - 2)).epsilon(1e-3));
    CHECK(n7 / n6 == doctest::Approx(static_cast<double>(L - 1)).epsilon(1e-3));
  }
}

TEST_CASE("prompts_for_depth selects each task's rows") {
  const GenerationPlan p = plan_frames(16, 3);
  const SyntheticEpisode ep = SyntheticEpisode::generate(eval_episode_ids(1)[0]);
  const PromptSource src = PromptSource::from_episode(ep);
  const auto top = prompts_for_depth(p, 1, src);
  REQUIRE(top.size() == 1);
  CHECK(top[0].shape() == Shape{1, 16, 4, 16});
  for (std::size_t k = 0; k < 16; ++k) {
    CHECK(p.tasks[0][0].indices[k] == 225 * k);
    const Tensor row = ep.condition_row(225 * k);
    CHECK(std::equal(row.data().begin(), row.data().end(), top[0].data().begin() + static_cast<std::ptrdiff_t>(k * 64)));
  }
  for (const auto& t : p.tasks[2])
    for (std::size_t k = 1; k < 16; ++k) CHECK(t.indices[k] == t.indices[k - 1] + 1);
  CHECK(prompts_for_depth(p, 3, src).size() == 225);
  CHECK_THROWS_AS(prompts_for_depth(p, 4, src), ValueError);
}

TEST_CASE("index audit for L = 4, m = 3: every index requested once except shared endpoints") {
  const GenerationPlan p = plan_frames(4, 3);
  std::map<std::size_t, int> requests, endpoint_uses;
  for (const auto& level : p.tasks)
    for (const auto& t : level) {
      for (std::size_t i : t.indices) ++requests[i];
      if (t.has_endpoints()) {
        ++endpoint_uses[t.first()];
        ++endpoint_uses[t.last()];
      }
    }
  CHECK(requests.size() == p.total_frames);
  for (const auto& [i, n] : requests) CHECK(n == 1 + endpoint_uses[i]);
}

TEST_CASE("missing prompt rows are reported as gaps") {
  const GenerationPlan p = plan_frames(16, 2);
  const SyntheticEpisode ep = SyntheticEpisode::generate(eval_episode_ids(1)[0]);
  PromptSource src = PromptSource::from_episode(ep);
  src.has = [](std::size_t i) { return i < 91 || i > 104; };
  try {
    prompts_for_depth(p, 2, src);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("91..104 (14 indices)") != std::string::npos);
  }
  CHECK_NOTHROW(prompts_for_depth(p, 1, src));  // keyframes 90 and 105 straddle the gap
}

TEST_CASE("truncate keeps producing tasks and their ancestors") {
  const GenerationPlan p = plan_frames(16, 3);
  const GenerationPlan same = truncate(p, 3376);
  CHECK(same.task_count() == p.task_count());
  CHECK(truncate(p, 226).tasks_per_depth() == std::vector<std::size_t>{1, 1, 15});
  CHECK(truncate(p, 16).tasks_per_depth() == std::vector<std::size_t>{1, 1, 1});
  // 230 reaches into depth-3 task 15, whose right endpoint 240 comes from depth-2 task 1.
  const GenerationPlan t230 = truncate(p, 230);
  CHECK(t230.tasks_per_depth() == std::vector<std::size_t>{1, 2, 16});
  CHECK_THROWS_AS(truncate(p, 15), ValueError);
  CHECK_THROWS_AS(truncate(p, 3377), ValueError);

  for (std::size_t n : {16u, 17u, 100u, 226u, 230u, 241u, 1024u, 2000u, 3375u}) {
    CAPTURE(n);
    const GenerationPlan t = truncate(p, n);
    CHECK(t.output_frames == n);
    std::set<std::size_t> made;
    for (const auto& level : t.tasks)
      for (const auto& task : level) {
        if (task.has_endpoints()) {
          CHECK(made.count(task.first()));
          CHECK(made.count(task.last()));
        }
        for (std::size_t i : task.produced()) made.insert(i);
      }
    for (std::size_t i = 0; i < n; ++i) CHECK(made.count(i));
  }
}

TEST_CASE("segment seeds depend on depth and first index only") {
  const GenerationPlan p = plan_frames(16, 3);
  const GenerationPlan t = truncate(p, 226);
  CHECK(segment_seed(7, t.tasks[2][3]) == segment_seed(7, p.tasks[2][3]));
  CHECK(segment_seed(7, p.tasks[2][3]) != segment_seed(8, p.tasks[2][3]));
  CHECK(segment_seed(7, p.tasks[1][0]) != segment_seed(7, p.tasks[2][0]));
}

TEST_CASE("generation is independent of the worker count") {
  const GenerationPlan plan = plan_frames(4, 2);
  const TinyStack s = tiny_stack(plan);
  const SyntheticEpisode ep = SyntheticEpisode::generate(eval_episode_ids(1)[0]);
  const PromptSource src = PromptSource::from_episode(ep);
  const GenerationResult one = generate(plan, s.stack(), src, 11, untrained(1));
  const GenerationResult four = generate(plan, s.stack(), src, 11, untrained(4));
  REQUIRE(one.video.length() == 10);
  CHECK(one.video.frames.shape() == Shape{10, 3, 32, 32});
  CHECK(bit_equal(one.video.frames, four.video.frames));
  CHECK(one.video.provenance == four.video.provenance);
  CHECK(one.endpoints_exact);
  CHECK(four.endpoints_exact);
  CHECK(trace_respects_dependencies(plan, one.trace));
  CHECK(trace_respects_dependencies(plan, four.trace));
  CHECK(one.depth_seconds.size() == 2);
  const GenerationResult other = generate(plan, s.stack(), src, 12, untrained(1));
  CHECK_FALSE(bit_equal(one.video.frames, other.video.frames));
}

TEST_CASE("children reproduce parent frames at their endpoints; keyframes keep depth-1 provenance") {
  const GenerationPlan plan = plan_frames(4, 3);
  const TinyStack s = tiny_stack(plan);
  const SyntheticEpisode ep = SyntheticEpisode::generate(eval_episode_ids(1)[0]);
  const GenerationResult r = generate(plan, s.stack(), PromptSource::from_episode(ep), 5, untrained(3));
  REQUIRE(r.video.length() == 28);
  CHECK(r.endpoints_exact);
  CHECK(trace_respects_dependencies(plan, r.trace));
  std::vector<std::size_t> counts(4, 0);
  for (std::size_t d : r.video.provenance) ++counts.at(d);
  CHECK(counts == std::vector<std::size_t>{0, 4, 6, 18});
  for (std::size_t k = 0; k < 4; ++k) CHECK(r.video.provenance[9 * k] == 1);
  const nlohmann::json man = generation_manifest(plan, r, 5);
  CHECK(man["frames_per_depth"] == nlohmann::json({4, 6, 18}));
  CHECK(man["task_seeds"].size() == 13);
}

TEST_CASE("truncated and full runs agree on the shared prefix") {
  const GenerationPlan plan = plan_frames(4, 3);
  const TinyStack s = tiny_stack(plan);
  const SyntheticEpisode ep = SyntheticEpisode::generate(eval_episode_ids(1)[0]);
  const PromptSource src = PromptSource::from_episode(ep);
  const GenerationResult full = generate(plan, s.stack(), src, 9, untrained(2));
  for (std::size_t n : {4u, 11u, 19u}) {
    const GenerationResult part = generate(truncate(plan, n), s.stack(), src, 9, untrained(2));
    REQUIRE(part.video.length() == n);
    CHECK(bit_equal(part.video.frames, full.video.prefix(n).frames));
    CHECK(part.video.provenance == full.video.prefix(n).provenance);
  }
}

TEST_CASE("checkpoint problems are reported before any work") {
  const GenerationPlan plan = plan_frames(4, 2);
  TinyStack s = tiny_stack(plan);
  const SyntheticEpisode ep = SyntheticEpisode::generate(eval_episode_ids(1)[0]);
  const PromptSource src = PromptSource::from_episode(ep);

  ModelStack missing = s.stack();
  missing.models.pop_back();
  CHECK_THROWS_AS(generate(plan, missing, src, 1, untrained(1)), CheckpointError);
  ModelStack no_vae = s.stack();
  no_vae.vae = nullptr;
  CHECK_THROWS_AS(generate(plan, no_vae, src, 1, untrained(1)), CheckpointError);
  CHECK_THROWS_AS(generate(plan, s.stack(), src, 1, GenerateOptions{}), CheckpointError);  // untrained

  ModelStack swapped = s.stack();
  std::swap(swapped.models[0], swapped.models[1]);
  CHECK_THROWS_AS(generate(plan, swapped, src, 1, untrained(1)), ValueError);
  s.models[1].stride = 2;
  CHECK_THROWS_AS(generate(plan, s.stack(), src, 1, untrained(1)), ValueError);
  CHECK_THROWS_AS(generate(plan, s.stack(), src, 1, untrained(0)), ValueError);

  PromptSource short_src = src;
  short_src.has = [](std::size_t i) { return i < 5; };
  s.models[1].stride = 1;
  CHECK_THROWS_AS(generate(plan, s.stack(), short_src, 1, untrained(1)), ValueError);
}

TEST_CASE("trace audit rejects a child that started before its parent finished") {
  const GenerationPlan plan = plan_frames(4, 2);
  std::vector<TraceEvent> trace{{1, 0, 0, 0, 1}, {2, 0, 0, 2, 3}, {2, 1, 1, 4, 5}, {2, 2, 0, 6, 7}};
  CHECK(trace_respects_dependencies(plan, trace));
  trace[2].start = 0;
  CHECK_FALSE(trace_respects_dependencies(plan, trace));
  trace.pop_back();
  trace[2].start = 4;
  CHECK_FALSE(trace_respects_dependencies(plan, trace));  // task never ran
}

TEST_CASE("PPM frames round-trip to 8-bit precision") {
  CHECK(to_byte(-1.0) == 0);
  CHECK(to_byte(1.0) == 255);
  CHECK(to_byte(-3.0) == 0);
  CHECK(to_byte(0.0) == 128);
  const SyntheticEpisode ep = SyntheticEpisode::generate(eval_episode_ids(1)[0]);
  const LongVideo v = episode_video(ep, 5);
  const auto dir = std::filesystem::temp_directory_path() / "dod_test_ppm";
  std::filesystem::remove_all(dir);
  write_ppm_frames(dir, v);
  CHECK(std::filesystem::exists(dir / "frame_000004.ppm"));
  const LongVideo back = read_ppm_frames(dir);
  REQUIRE(back.frames.shape() == v.frames.shape());
  // dataset frames are exact 8-bit values, so the round trip is lossless up to rounding
  for (std::size_t i = 0; i < v.frames.numel(); ++i) CHECK(back.frames.at(i) == doctest::Approx(v.frames.at(i)).epsilon(1e-12));
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(read_ppm_frames(dir), CheckpointError);
}

TEST_CASE("LongVideo slicing") {
  const SyntheticEpisode ep = SyntheticEpisode::generate(eval_episode_ids(1)[0]);
  const LongVideo v = episode_video(ep, 20);
  CHECK(v.clip(4, 16).shape() == Shape{1, 16, 3, 32, 32});
  CHECK(v.prefix(7).length() == 7);
  CHECK_THROWS_AS(v.clip(5, 16), ValueError);
  CHECK_THROWS_AS(v.prefix(21), ValueError);
}
