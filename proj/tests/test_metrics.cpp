#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dod/metrics.hpp"
#include "dod/ops.hpp"
#include "dod/rng.hpp"

using namespace dod;

namespace {

FrechetStats diag_stats(std::vector<double> mean, const std::vector<double>& var) {
  FrechetStats s;
  const std::size_t d = mean.size();
  s.mean = std::move(mean);
  s.cov.assign(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) s.cov[i * d + i] = var[i];
  s.count = 1000;
  return s;
}

// Random SPD matrix A A^T / d + 0.1 I.
std::vector<double> random_spd(Rng& rng, std::size_t d) {
  std::vector<double> a(d * d), out(d * d, 0.0);
  for (double& v : a) v = rng.normal();
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      for (std::size_t k = 0; k < d; ++k) out[i * d + j] += a[i * d + k] * a[j * d + k];
      out[i * d + j] /= static_cast<double>(d);
    }
  for (std::size_t i = 0; i < d; ++i) out[i * d + i] += 0.1;
  return out;
}

FrechetStats random_stats(Rng& rng, std::size_t d) {
  FrechetStats s;
  for (std::size_t i = 0; i < d; ++i) s.mean.push_back(rng.normal());
  s.cov = random_spd(rng, d);
  s.count = 100;
  return s;
}

// Random orthogonal matrix by Gram-Schmidt.
std::vector<double> random_rotation(Rng& rng, std::size_t d) {
  std::vector<std::vector<double>> q;
  while (q.size() < d) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.normal();
    for (const auto& u : q) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += u[i] * v[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * u[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    for (double& x : v) x /= std::sqrt(n);
    q.push_back(v);
  }
  std::vector<double> out;
  for (const auto& r : q) out.insert(out.end(), r.begin(), r.end());
  return out;
}

// R diag(var) R^T
std::vector<double> rotate_diag(const std::vector<double>& r, const std::vector<double>& var) {
  const std::size_t d = var.size();
  std::vector<double> out(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < d; ++k) out[i * d + j] += r[i * d + k] * var[k] * r[j * d + k];
  return out;
}

std::vector<std::vector<double>> gaussian_samples(Rng& rng, std::size_t n, std::size_t d, double scale) {
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (auto& row : out)
    for (double& v : row) v = scale * rng.normal();
  return out;
}

Tensor noisy(const Tensor& x, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  return add(x, scale(rng.normal_tensor(x.shape()), sigma));
}

std::vector<LongVideo> episode_videos(std::size_t count, std::size_t frames, std::size_t first = 0) {
  std::vector<LongVideo> out;
  for (auto id : eval_episode_ids(first + count)) {
    if (first > 0) {
      --first;
      continue;
    }
    out.push_back(episode_video(SyntheticEpisode::generate(id), frames));
  }
  return out;
}

}  // namespace

TEST_CASE("Frechet distance: 1-D closed form") {
  CHECK(frechet_distance(diag_stats({0.0}, {1.0}), diag_stats({1.0}, {1.0})) == doctest::Approx(1.0).epsilon(1e-12));
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    const double m1 = rng.normal(), m2 = rng.normal(), s1 = 0.1 + rng.uniform(), s2 = 0.1 + rng.uniform();
    const double want = (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2);
    CHECK(std::abs(frechet_distance(diag_stats({m1}, {s1 * s1}), diag_stats({m2}, {s2 * s2})) - want) < 1e-9);
  }
}

TEST_CASE("Frechet distance: diagonal covariances match the per-axis sum, also after a common rotation") {
  Rng rng(2);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t d = 8;
    std::vector<double> ma(d), mb(d), va(d), vb(d);
    double want = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      ma[i] = rng.normal();
      mb[i] = rng.normal();
      va[i] = 0.05 + rng.uniform();
      vb[i] = 0.05 + rng.uniform();
      want += (ma[i] - mb[i]) * (ma[i] - mb[i]) + std::pow(std::sqrt(va[i]) - std::sqrt(vb[i]), 2);
    }
    const FrechetStats a = diag_stats(ma, va), b = diag_stats(mb, vb);
    CHECK(std::abs(frechet_distance(a, b) - want) < 1e-9);
    // A common rotation of both covariances leaves the trace terms unchanged.
    const auto r = random_rotation(rng, d);
    FrechetStats ra = a, rb = b;
    ra.cov = rotate_diag(r, va);
    rb.cov = rotate_diag(r, vb);
    CHECK(std::abs(frechet_distance(ra, rb) - want) < 1e-9);
  }
}

TEST_CASE("Frechet distance: identity, symmetry, non-negativity") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t d = 1 + rng.below(32);
    const FrechetStats a = random_stats(rng, d), b = random_stats(rng, d);
    CHECK(std::abs(frechet_distance(a, a)) < 1e-9);
    CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-9);
    CHECK(frechet_distance(a, b) >= 0.0);
  }
  // rank-deficient covariances stay non-negative
  FrechetStats z = diag_stats({0.0, 0.0, 0.0}, {0.0, 0.0, 0.0});
  CHECK(frechet_distance(z, z) == 0.0);
  CHECK(frechet_distance(z, diag_stats({0.0, 0.0, 0.0}, {1.0, 0.0, 4.0})) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("Frechet distance: dimension mismatch") {
  CHECK_THROWS_AS(frechet_distance(diag_stats({0.0}, {1.0}), diag_stats({0.0, 0.0}, {1.0, 1.0})), ShapeError);
}

TEST_CASE("doubling one distribution's features increases the distance") {
  Rng rng(4);
  const auto a = gaussian_samples(rng, 400, 6, 1.0);
  const auto b = gaussian_samples(rng, 400, 6, 1.0);
  auto b2 = b;
  for (auto& row : b2)
    for (double& v : row) v *= 2.0;
  CHECK(frechet_distance(fit_gaussian(a), fit_gaussian(b2)) > frechet_distance(fit_gaussian(a), fit_gaussian(b)));
}

TEST_CASE("fit_gaussian: mean, unbiased covariance, ridge") {
  const std::vector<std::vector<double>> x{{1.0, 2.0}, {3.0, 0.0}, {5.0, 4.0}};
  const FrechetStats s = fit_gaussian(x, 0.5);
  CHECK(s.count == 3);
  CHECK(s.mean == std::vector<double>{3.0, 2.0});
  // deviations (-2, 0), (0, -2), (2, 2): sums 8, 4, 8 over n - 1 = 2
  CHECK(s.cov == std::vector<double>{4.0 + 0.5, 2.0, 2.0, 4.0 + 0.5});
  CHECK(fit_gaussian({{1.0, 1.0}}).cov == std::vector<double>{kCovarianceRidge, 0.0, 0.0, kCovarianceRidge});
  CHECK_THROWS_AS(fit_gaussian({}), ValueError);
  CHECK_THROWS_AS(fit_gaussian({{1.0}, {1.0, 2.0}}), ShapeError);
}

TEST_CASE("feature extractor is fixed by its seed") {
  const LongVideo v = episode_videos(1, 40)[0];
  const FeatureExtractor a(7), b(7), c(8);
  CHECK(a.frame_features(v.frames) == b.frame_features(v.frames));
  CHECK(a.frame_features(v.frames) != c.frame_features(v.frames));
  CHECK(a.clip_features(v.clip(0, 16)) == b.clip_features(v.clip(0, 16)));
  CHECK(a.clip_features(v.clip(0, 16)).size() == 32);
  const auto features = a.frame_features(v.frames);
  for (double f : features[3]) CHECK(std::abs(f) <= 1.0);
  // temporal order matters for clips
  std::vector<Tensor> rev;
  for (std::size_t i = 16; i-- > 0;) rev.push_back(slice(v.frames, 0, i, 1));
  CHECK(a.clip_features(concat(rev, 0)) != a.clip_features(v.clip(0, 16)));
  CHECK_THROWS_AS(a.frame_features(Tensor(Shape{2, 3, 16, 16})), ShapeError);
  CHECK_THROWS_AS(a.clip_features(v.clip(0, 1)), ValueError);
}

TEST_CASE("avg_fid: identity, noise monotonicity, order invariance, sample minimum") {
  const FeatureExtractor fx(11);
  std::vector<Tensor> parts;
  for (const auto& v : episode_videos(4, 50)) parts.push_back(v.frames);
  const Tensor real = concat(parts, 0);
  CHECK(avg_fid(real, real, fx) < 1e-9);

  double last = 0.0;
  for (double sigma : {0.05, 0.2, 0.5, 1.0}) {
    const double fid = avg_fid(real, noisy(real, sigma, 5), fx);
    CAPTURE(sigma);
    CHECK(fid > last);
    last = fid;
  }

  const Tensor gen = noisy(real, 0.3, 6);
  std::vector<Tensor> shuffled;
  Rng rng(9);
  std::vector<std::size_t> order(gen.dim(0));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  for (std::size_t i : order) shuffled.push_back(slice(gen, 0, i, 1));
  CHECK(std::abs(avg_fid(real, gen, fx) - avg_fid(real, concat(shuffled, 0), fx)) < 1e-9);

  try {
    avg_fid(slice(real, 0, 0, 32), real, fx);
    FAIL("expected ValueError");
  } catch (const ValueError& e) {
    CHECK(std::string(e.what()).find("at least 33") != std::string::npos);
  }
}

TEST_CASE("b_fvd: identical sets score zero; one perturbed block shows up in that block only") {
  const FeatureExtractor fx(12);
  const auto real = episode_videos(6, 52);  // 3 full blocks of 16 plus 4 trailing frames
  BlockFvd same = b_fvd(real, real, 16, fx);
  CHECK(same.per_block.size() == 3);
  CHECK(same.value < 1e-9);

  auto gen = real;
  for (auto& v : gen) {
    Tensor f = v.frames.clone();
    auto d = f.mutable_data();
    const std::size_t frame = f.numel() / f.dim(0);
    Rng rng(v.frames.numel());
    for (std::size_t i = 16 * frame; i < 32 * frame; ++i) d[i] += 0.5 * rng.normal();   // block 1
    for (std::size_t i = 48 * frame; i < 52 * frame; ++i) d[i] = 1.0;                   // trailing partial block
    v.frames = f;
  }
  const BlockFvd r = b_fvd(real, gen, 16, fx);
  REQUIRE(r.per_block.size() == 3);
  CHECK(r.per_block[0] < 1e-9);
  CHECK(r.per_block[1] > 1e-3);
  CHECK(r.per_block[2] < 1e-9);
  CHECK(std::abs(r.value - r.per_block[1] / 3.0) < 1e-9);
}

TEST_CASE("b_fvd: a single block equals the plain clip Frechet distance") {
  const FeatureExtractor fx(13);
  const auto real = episode_videos(5, 16);
  const auto gen = episode_videos(5, 16, 5);
  std::vector<std::vector<double>> fr, fg;
  for (const auto& v : real) fr.push_back(fx.clip_features(v.frames));
  for (const auto& v : gen) fg.push_back(fx.clip_features(v.frames));
  const double want = frechet_distance(fit_gaussian(fr), fit_gaussian(fg));
  const BlockFvd r = b_fvd(real, gen, 16, fx);
  CHECK(r.per_block.size() == 1);
  CHECK(r.value == want);
  CHECK(want > 0.0);
  // single-video form: population of one per side
  CHECK(b_fvd(real[0], gen[0], 16, fx).value >= 0.0);
}

TEST_CASE("b_fvd: errors and the shortest video bounding the block count") {
  const FeatureExtractor fx(14);
  const auto a = episode_videos(2, 40);
  const auto b = episode_videos(2, 15);
  CHECK_THROWS_AS(b_fvd(a, b, 16, fx), ValueError);
  CHECK_THROWS_AS(b_fvd(a, a, 1, fx), ValueError);
  CHECK_THROWS_AS(b_fvd(a, {}, 16, fx), ValueError);
  const auto c = episode_videos(2, 33);
  CHECK(b_fvd(a, c, 16, fx).per_block.size() == 2);
}
