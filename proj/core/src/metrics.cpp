#include "dod/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dod/rng.hpp"

namespace dod {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<double> projection(std::uint64_t seed, std::size_t rows, std::size_t cols) {
  Rng rng(seed);
  std::vector<double> w(rows * cols);
  const double s = 1.0 / std::sqrt(static_cast<double>(cols));
  for (double& v : w) v = s * rng.normal();
  return w;
}

Eigen::MatrixXd to_matrix(const FrechetStats& s) {
  return Eigen::Map<const RowMatrix>(s.cov.data(), static_cast<Eigen::Index>(s.dim()), static_cast<Eigen::Index>(s.dim()));
}

}  // namespace

FeatureExtractor::FeatureExtractor(std::uint64_t seed, std::size_t frame_dim, std::size_t feature_dim)
    : seed_(seed), frame_dim_(frame_dim), feature_dim_(feature_dim) {
  if (frame_dim == 0 || feature_dim == 0) throw ValueError("FeatureExtractor: dimensions must be positive");
  frame_proj_ = projection(hash_seed({seed, hash_string("frame-projection")}), feature_dim, frame_dim);
}

std::vector<std::vector<double>> FeatureExtractor::frame_features(const Tensor& frames) const {
  if (frames.rank() < 2 || frames.numel() != frames.dim(0) * frame_dim_) {
    throw ShapeError("FeatureExtractor: frames " + shape_str(frames.shape()) + " do not flatten to " +
                     std::to_string(frame_dim_) + " values each");
  }
  const auto n = static_cast<Eigen::Index>(frames.dim(0));
  const auto fd = static_cast<Eigen::Index>(frame_dim_), d = static_cast<Eigen::Index>(feature_dim_);
  Eigen::Map<const RowMatrix> x(frames.data().data(), n, fd);
  Eigen::Map<const RowMatrix> w(frame_proj_.data(), d, fd);
  const RowMatrix f = (x * w.transpose()).array().tanh().matrix();
  std::vector<std::vector<double>> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)].assign(f.row(i).data(), f.row(i).data() + d);
  return out;
}

std::vector<double> FeatureExtractor::clip_features(const Tensor& clip) const {
  Tensor frames = clip;
  if (clip.rank() == 5) {
    if (clip.dim(0) != 1) throw ShapeError("FeatureExtractor::clip_features: expects a single clip");
    frames = Tensor(Shape(clip.shape().begin() + 1, clip.shape().end()), std::vector<double>(clip.data().begin(), clip.data().end()));
  }
  const auto f = frame_features(frames);
  const std::size_t X = f.size(), d = feature_dim_;
  if (X < 2) throw ValueError("FeatureExtractor::clip_features: a clip needs at least 2 frames");
  std::vector<double> in;
  in.reserve((2 * X - 1) * d);
  for (const auto& row : f) in.insert(in.end(), row.begin(), row.end());
  for (std::size_t t = 1; t < X; ++t)
    for (std::size_t j = 0; j < d; ++j) in.push_back(f[t][j] - f[t - 1][j]);
  const std::vector<double>& p = *clip_projection(X);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) acc += p[i * in.size() + j] * in[j];
    out[i] = std::tanh(acc);
  }
  return out;
}

std::shared_ptr<const std::vector<double>> FeatureExtractor::clip_projection(std::size_t X) const {
  std::lock_guard lock(clip_cache_->mutex);
  auto& slot = clip_cache_->by_length[X];
  if (!slot) {
    slot = std::make_shared<const std::vector<double>>(
        projection(hash_seed({seed_, hash_string("clip-projection"), X}), feature_dim_, (2 * X - 1) * feature_dim_));
  }
  return slot;
}

FrechetStats fit_gaussian(const std::vector<std::vector<double>>& samples, double ridge) {
  if (samples.empty()) throw ValueError("fit_gaussian: no samples");
  const std::size_t n = samples.size(), d = samples.front().size();
  FrechetStats s;
  s.count = n;
  s.mean.assign(d, 0.0);
  for (const auto& x : samples) {
    if (x.size() != d) throw ShapeError("fit_gaussian: ragged samples");
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += x[j];
  }
  for (double& v : s.mean) v /= static_cast<double>(n);
  s.cov.assign(d * d, 0.0);
  for (const auto& x : samples)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) s.cov[i * d + j] += (x[i] - s.mean[i]) * (x[j] - s.mean[j]);
  const double denom = static_cast<double>(std::max<std::size_t>(n - 1, 1));
  for (double& v : s.cov) v /= denom;
  for (std::size_t i = 0; i < d; ++i) s.cov[i * d + i] += ridge;
  return s;
}

double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
  if (a.dim() != b.dim() || a.cov.size() != a.dim() * a.dim() || b.cov.size() != b.dim() * b.dim()) {
    throw ShapeError("frechet_distance: dimension mismatch (" + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()) + ")");
  }
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const Eigen::MatrixXd sa = to_matrix(a), sb = to_matrix(b);

  // Tr (S_a S_b)^(1/2) = Tr (S_a^(1/2) S_b S_a^(1/2))^(1/2), the inner product being symmetric.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(0.5 * (sa + sa.transpose()));
  const Eigen::VectorXd la = ea.eigenvalues().cwiseMax(0.0);
  const Eigen::MatrixXd root_a = ea.eigenvectors() * la.cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = root_a * sb * root_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  const double most_negative = std::min(ea.eigenvalues().minCoeff(), em.eigenvalues().minCoeff());
  if (most_negative < -1e-8) {
    std::cerr << "warning: frechet_distance clamped eigenvalue " << most_negative << " to 0\n";
  }
  const double cross = em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  return std::max(0.0, mean_term + sa.trace() + sb.trace() - 2.0 * cross);
}

double avg_fid(const Tensor& real_frames, const Tensor& gen_frames, const FeatureExtractor& extractor) {
  const std::size_t need = extractor.feature_dim() + 1;
  for (const Tensor* t : {&real_frames, &gen_frames}) {
    if (!t->defined() || t->rank() == 0 || t->dim(0) < need) {
      throw ValueError("avg_fid: need at least " + std::to_string(need) + " frames per side, got " +
                       std::to_string(t->defined() && t->rank() ? t->dim(0) : 0));
    }
  }
  return frechet_distance(fit_gaussian(extractor.frame_features(real_frames)),
                          fit_gaussian(extractor.frame_features(gen_frames)));
}

BlockFvd b_fvd(const std::vector<LongVideo>& real, const std::vector<LongVideo>& gen, std::size_t X,
               const FeatureExtractor& extractor) {
  if (X < 2) throw ValueError("b_fvd: block length X must be at least 2");
  if (real.empty() || gen.empty()) throw ValueError("b_fvd: empty video set");
  std::size_t shortest = real.front().length();
  for (const auto* side : {&real, &gen})
    for (const LongVideo& v : *side) {
      if (v.length() < X) {
        throw ValueError("b_fvd: video of " + std::to_string(v.length()) + " frames is shorter than X = " + std::to_string(X));
      }
      shortest = std::min(shortest, v.length());
    }
  BlockFvd out;
  const std::size_t blocks = shortest / X;
  for (std::size_t k = 0; k < blocks; ++k) {
    std::vector<std::vector<double>> fr, fg;
    for (const LongVideo& v : real) fr.push_back(extractor.clip_features(v.clip(k * X, X)));
    for (const LongVideo& v : gen) fg.push_back(extractor.clip_features(v.clip(k * X, X)));
    out.per_block.push_back(frechet_distance(fit_gaussian(fr), fit_gaussian(fg)));
  }
  double acc = 0.0;
  for (double v : out.per_block) acc += v;
  out.value = acc / static_cast<double>(blocks);
  return out;
}

BlockFvd b_fvd(const LongVideo& real, const LongVideo& gen, std::size_t X, const FeatureExtractor& extractor) {
  return b_fvd(std::vector<LongVideo>{real}, std::vector<LongVideo>{gen}, X, extractor);
}

}  // namespace dod
