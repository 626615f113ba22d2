#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dod/ops.hpp"
#include "dod/tensor.hpp"

// Parameter containers and the small set of layers shared by the VAE and the denoiser.

namespace dod {

/// Named parameters in a stable (lexicographic) order.
class ParamSet {
 public:
  const Tensor& add(const std::string& name, Tensor t);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return items_.count(name) != 0; }
  std::size_t size() const { return items_.size(); }
  std::size_t element_count() const;

  /// Parameters whose names start with `prefix`.
  std::vector<Tensor> tensors(const std::string& prefix = "") const;
  std::vector<std::string> names(const std::string& prefix = "") const;
  const std::map<std::string, Tensor>& items() const { return items_; }

  void set_requires_grad(const std::string& prefix, bool value);
  /// Copies values from `other`, which must hold the same names and shapes.
  void assign(const ParamSet& other);
  /// Deep copy with fresh storage.
  ParamSet clone() const;

 private:
  std::map<std::string, Tensor> items_;
};

struct Conv2dLayer {
  Tensor weight, bias;
  std::size_t stride = 1;
  std::size_t padding = 1;
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
};

struct Conv1dLayer {
  Tensor weight, bias;
  std::size_t padding = 1;
  Tensor operator()(const Tensor& x) const { return conv1d(x, weight, bias, padding); }
};

struct LinearLayer {
  Tensor weight, bias;
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

/// Layer normalization over one axis with learned affine.
struct NormLayer {
  Tensor gamma, beta;
  std::size_t axis = 1;
  Tensor operator()(const Tensor& x) const { return layer_norm(x, axis, gamma, beta); }
};

/// Pre-norm residual attention: x + out(attn(q(norm x), k(ctx), v(ctx))).
/// Tokens are (N, n, C); context is (N, m, C_ctx) or the normalized tokens themselves.
struct AttentionLayer {
  NormLayer norm;
  LinearLayer query, key, value, out;
  Tensor operator()(const Tensor& tokens, const Tensor& context = Tensor()) const;
};

/// Temporal kernel (c, c, k) that is zero except w[i][i][(k-1)/2] = 1, so the
/// same-padded conv1d is the identity.
Tensor init_temporal_conv_identity(std::size_t channels, std::size_t kernel);

/// Creates parameters in a ParamSet. Each parameter's random values come from
/// hash(seed, name), so adding or removing other parameters never changes them.
class ParamBuilder {
 public:
  ParamBuilder(ParamSet& params, std::uint64_t seed) : params_(params), seed_(seed) {}

  Tensor normal(const std::string& name, Shape shape, double stddev);
  Tensor constant(const std::string& name, Shape shape, double value);

  Conv2dLayer conv2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                     std::size_t stride = 1);
  Conv2dLayer zero_conv2d(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k);
  /// Temporal convolution initialized to the identity map.
  Conv1dLayer identity_conv1d(const std::string& name, std::size_t channels, std::size_t k);
  LinearLayer linear(const std::string& name, std::size_t in, std::size_t out);
  LinearLayer zero_linear(const std::string& name, std::size_t in, std::size_t out);
  NormLayer norm(const std::string& name, std::size_t channels, std::size_t axis);
  AttentionLayer attention(const std::string& name, std::size_t channels, std::size_t context,
                           std::size_t inner, bool zero_out);

 private:
  ParamSet& params_;
  std::uint64_t seed_;
};

/// Frame-batch layout used inside the networks: (b*L, C, H, W) plus the (b, L) split.
struct ClipDims {
  std::size_t batch = 1;
  std::size_t length = 1;
  std::size_t frames() const { return batch * length; }
};

/// (b*L, C, H, W) -> (b*H*W, C, L) for temporal convolution, and back.
Tensor frames_to_time_series(const Tensor& x, ClipDims dims);
Tensor time_series_to_frames(const Tensor& x, ClipDims dims, std::size_t height, std::size_t width);

/// Temporal convolution applied with spatial positions as batch.
Tensor temporal_conv(const Tensor& x, ClipDims dims, const Conv1dLayer& conv);

/// (b*L, C, H, W) -> (b*L, H*W, C) tokens, and back.
Tensor frames_to_spatial_tokens(const Tensor& x);
Tensor spatial_tokens_to_frames(const Tensor& tokens, std::size_t height, std::size_t width);

/// (b*L, C, H, W) -> (b*H*W, L, C) tokens, and back.
Tensor frames_to_temporal_tokens(const Tensor& x, ClipDims dims);
Tensor temporal_tokens_to_frames(const Tensor& tokens, ClipDims dims, std::size_t height,
                                 std::size_t width);

/// Residual spatial self-attention over H*W tokens per frame.
Tensor spatial_self_attention(const Tensor& x, const AttentionLayer& attn);
/// Residual temporal self-attention over L frames per spatial position.
Tensor temporal_self_attention(const Tensor& x, ClipDims dims, const AttentionLayer& attn);

}  // namespace dod
