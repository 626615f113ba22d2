#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <vector>

#include "dod/hierarchy.hpp"
#include "dod/tensor.hpp"

// Frechet distances between Gaussian fits of fixed random-projection features: a per-frame
// score (Avg-FID analog) and a block-wise video score (B-FVD-X analog). Values are only
// comparable with each other, not with Inception/I3D-based numbers.

namespace dod {

class FeatureExtractor {
 public:
  /// frame_dim = C*H*W of the frames it will see.
  explicit FeatureExtractor(std::uint64_t seed, std::size_t frame_dim = 3 * 32 * 32, std::size_t feature_dim = 32);

  std::uint64_t seed() const { return seed_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t frame_dim() const { return frame_dim_; }

  /// (n, C, H, W) -> n rows of tanh(W x).
  std::vector<std::vector<double>> frame_features(const Tensor& frames) const;
  /// One X-frame clip (X, C, H, W) or (1, X, C, H, W) -> tanh(P [f_1..f_X, f_2-f_1, ..., f_X-f_{X-1}]),
  /// with P seeded by (seed, X).
  std::vector<double> clip_features(const Tensor& clip) const;

 private:
  std::uint64_t seed_;
  std::size_t frame_dim_, feature_dim_;
  std::vector<double> frame_proj_;  // feature_dim x frame_dim, row-major
  struct ClipCache {
    std::mutex mutex;
    std::map<std::size_t, std::shared_ptr<const std::vector<double>>> by_length;
  };
  std::shared_ptr<ClipCache> clip_cache_ = std::make_shared<ClipCache>();  // derived from seed_, shared by copies

  std::shared_ptr<const std::vector<double>> clip_projection(std::size_t X) const;
};

struct FrechetStats {
  std::vector<double> mean;  // d
  std::vector<double> cov;   // d x d, row-major
  std::size_t count = 0;

  std::size_t dim() const { return mean.size(); }
};

inline constexpr double kCovarianceRidge = 1e-6;

/// Sample mean and unbiased covariance plus ridge * I.
FrechetStats fit_gaussian(const std::vector<std::vector<double>>& samples, double ridge = kCovarianceRidge);

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). Negative eigenvalues of the
/// symmetrized product are clamped at zero (with a warning on stderr below -1e-8).
double frechet_distance(const FrechetStats& a, const FrechetStats& b);

/// Frechet distance between frame-feature fits; each side needs feature_dim + 1 frames.
double avg_fid(const Tensor& real_frames, const Tensor& gen_frames, const FeatureExtractor& extractor);

struct BlockFvd {
  double value = 0.0;               // mean over blocks
  std::vector<double> per_block;
};

/// Non-overlapping X-frame blocks; block k's population is clip k of every video on that
/// side. A trailing partial block is dropped.
BlockFvd b_fvd(const std::vector<LongVideo>& real, const std::vector<LongVideo>& gen, std::size_t X,
               const FeatureExtractor& extractor);
BlockFvd b_fvd(const LongVideo& real, const LongVideo& gen, std::size_t X, const FeatureExtractor& extractor);

}  // namespace dod
