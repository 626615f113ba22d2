#include "dod/nn.hpp"

#include <cmath>

#include "dod/rng.hpp"

namespace dod {

const Tensor& ParamSet::add(const std::string& name, Tensor t) {
  if (contains(name)) throw ValueError("ParamSet: duplicate parameter '" + name + "'");
  t.set_requires_grad(true);
  return items_.emplace(name, std::move(t)).first->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
  auto it = items_.find(name);
  if (it == items_.end()) throw ValueError("ParamSet: no parameter '" + name + "'");
  return it->second;
}

std::size_t ParamSet::element_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.numel();
  return n;
}

std::vector<Tensor> ParamSet::tensors(const std::string& prefix) const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : items_) {
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  }
  return out;
}

std::vector<std::string> ParamSet::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [name, _] : items_) {
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  }
  return out;
}

void ParamSet::set_requires_grad(const std::string& prefix, bool value) {
  for (auto& [name, t] : items_) {
    if (name.rfind(prefix, 0) == 0) t.set_requires_grad(value);
  }
}

void ParamSet::assign(const ParamSet& other) {
  for (auto& [name, t] : items_) {
    const Tensor& src = other.at(name);
    if (src.shape() != t.shape()) {
      throw ShapeError("ParamSet::assign: '" + name + "' is " + shape_str(t.shape()) + ", source is " +
                       shape_str(src.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), t.mutable_data().begin());
  }
  if (other.size() != size()) throw ValueError("ParamSet::assign: parameter count mismatch");
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [name, t] : items_) {
    Tensor c = t.clone();
    out.add(name, c).impl()->requires_grad = t.requires_grad();
  }
  return out;
}

Tensor ParamBuilder::normal(const std::string& name, Shape shape, double stddev) {
  Rng rng(hash_seed({seed_, hash_string(name)}));
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = stddev * rng.normal();
  return params_.add(name, t);
}

Tensor ParamBuilder::constant(const std::string& name, Shape shape, double value) {
  return params_.add(name, Tensor(std::move(shape), value));
}

Conv2dLayer ParamBuilder::conv2d(const std::string& name, std::size_t cin, std::size_t cout,
                                 std::size_t k, std::size_t stride) {
  const double std = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  return {normal(name + ".weight", {cout, cin, k, k}, std), constant(name + ".bias", {cout}, 0.0), stride,
          (k - 1) / 2};
}

Conv2dLayer ParamBuilder::zero_conv2d(const std::string& name, std::size_t cin, std::size_t cout,
                                      std::size_t k) {
  return {constant(name + ".weight", {cout, cin, k, k}, 0.0), constant(name + ".bias", {cout}, 0.0), 1,
          (k - 1) / 2};
}

Tensor init_temporal_conv_identity(std::size_t channels, std::size_t kernel) {
  if (kernel % 2 == 0) throw ValueError("init_temporal_conv_identity: even kernel has no center tap");
  if (channels == 0) throw ValueError("init_temporal_conv_identity: need at least one channel");
  Tensor w(Shape{channels, channels, kernel}, 0.0);
  for (std::size_t i = 0; i < channels; ++i) w.mutable_data()[(i * channels + i) * kernel + (kernel - 1) / 2] = 1.0;
  return w;
}

Conv1dLayer ParamBuilder::identity_conv1d(const std::string& name, std::size_t channels,
                                          std::size_t k) {
  return {params_.add(name + ".weight", init_temporal_conv_identity(channels, k)), constant(name + ".bias", {channels}, 0.0), (k - 1) / 2};
}

LinearLayer ParamBuilder::linear(const std::string& name, std::size_t in, std::size_t out) {
  return {normal(name + ".weight", {in, out}, 1.0 / std::sqrt(static_cast<double>(in))),
          constant(name + ".bias", {out}, 0.0)};
}

LinearLayer ParamBuilder::zero_linear(const std::string& name, std::size_t in, std::size_t out) {
  return {constant(name + ".weight", {in, out}, 0.0), constant(name + ".bias", {out}, 0.0)};
}

NormLayer ParamBuilder::norm(const std::string& name, std::size_t channels, std::size_t axis) {
  return {constant(name + ".gamma", {channels}, 1.0), constant(name + ".beta", {channels}, 0.0), axis};
}

AttentionLayer ParamBuilder::attention(const std::string& name, std::size_t channels,
                                       std::size_t context, std::size_t inner, bool zero_out) {
  AttentionLayer a;
  a.norm = norm(name + ".norm", channels, 2);
  a.query = linear(name + ".q", channels, inner);
  a.key = linear(name + ".k", context, inner);
  a.value = linear(name + ".v", context, inner);
  a.out = zero_out ? zero_linear(name + ".out", inner, channels) : linear(name + ".out", inner, channels);
  return a;
}

Tensor AttentionLayer::operator()(const Tensor& tokens, const Tensor& context) const {
  Tensor h = norm(tokens);
  const Tensor& ctx = context.defined() ? context : h;
  return add(tokens, out(attention(query(h), key(ctx), value(ctx))));
}

Tensor frames_to_time_series(const Tensor& x, ClipDims dims) {
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (x.dim(0) != dims.frames()) {
    throw ShapeError("frames_to_time_series: axis 0 is " + std::to_string(x.dim(0)) + ", expected b*L = " +
                     std::to_string(dims.frames()));
  }
  Tensor t = permute(reshape(x, {dims.batch, dims.length, c, hw}), {0, 3, 2, 1});
  return reshape(t, {dims.batch * hw, c, dims.length});
}

Tensor time_series_to_frames(const Tensor& x, ClipDims dims, std::size_t height, std::size_t width) {
  const std::size_t c = x.dim(1), hw = height * width;
  Tensor t = permute(reshape(x, {dims.batch, hw, c, dims.length}), {0, 3, 2, 1});
  return reshape(t, {dims.frames(), c, height, width});
}

Tensor temporal_conv(const Tensor& x, ClipDims dims, const Conv1dLayer& conv) {
  return time_series_to_frames(conv(frames_to_time_series(x, dims)), dims, x.dim(2), x.dim(3));
}

Tensor frames_to_spatial_tokens(const Tensor& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return permute(reshape(x, {n, c, hw}), {0, 2, 1});
}

Tensor spatial_tokens_to_frames(const Tensor& tokens, std::size_t height, std::size_t width) {
  const std::size_t n = tokens.dim(0), c = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {n, c, height, width});
}

Tensor frames_to_temporal_tokens(const Tensor& x, ClipDims dims) {
  const std::size_t c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor t = permute(reshape(x, {dims.batch, dims.length, c, hw}), {0, 3, 1, 2});
  return reshape(t, {dims.batch * hw, dims.length, c});
}

Tensor temporal_tokens_to_frames(const Tensor& tokens, ClipDims dims, std::size_t height,
                                 std::size_t width) {
  const std::size_t c = tokens.dim(2), hw = height * width;
  Tensor t = permute(reshape(tokens, {dims.batch, hw, dims.length, c}), {0, 2, 3, 1});
  return reshape(t, {dims.frames(), c, height, width});
}

Tensor spatial_self_attention(const Tensor& x, const AttentionLayer& attn) {
  return spatial_tokens_to_frames(attn(frames_to_spatial_tokens(x)), x.dim(2), x.dim(3));
}

Tensor temporal_self_attention(const Tensor& x, ClipDims dims, const AttentionLayer& attn) {
  return temporal_tokens_to_frames(attn(frames_to_temporal_tokens(x, dims)), dims, x.dim(2), x.dim(3));
}

}  // namespace dod
