#include "dod/mtd.hpp"

#include <algorithm>
#include <cmath>

#include "dod/adam.hpp"
#include "dod/ops.hpp"
#include "dod/serialize.hpp"

namespace dod {

// ---------------------------------------------------------------- schedule

double DiffusionSchedule::beta_at(std::size_t t) const { return beta.at(t - 1); }
double DiffusionSchedule::alpha_at(std::size_t t) const { return alpha.at(t - 1); }
double DiffusionSchedule::alpha_bar_at(std::size_t t) const { return t == 0 ? 1.0 : alpha_bar.at(t - 1); }

DiffusionSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ValueError("schedule: need at least one step");
  DiffusionSchedule s;
  double running = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ValueError("schedule: every beta must lie in (0, 1), got " + std::to_string(b));
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bar.push_back(running);
  }
  return s;
}

DiffusionSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 2) throw ValueError("make_schedule: T must be at least 2, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ValueError("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(T);
  for (std::size_t i = 0; i < T; ++i) {
    betas[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
  }
  return schedule_from_betas(std::move(betas));
}

namespace {

void check_step(const DiffusionSchedule& sched, std::size_t t, const char* op) {
  if (t < 1 || t > sched.steps()) {
    throw ValueError(std::string(op) + ": t=" + std::to_string(t) + " outside [1, " + std::to_string(sched.steps()) +
                     "]");
  }
}

}  // namespace

Tensor q_sample(const Tensor& x0, const std::vector<std::size_t>& t, const Tensor& eps,
                const DiffusionSchedule& sched) {
  if (x0.shape() != eps.shape()) {
    throw ShapeError("q_sample: noise " + shape_str(eps.shape()) + " must match x0 " + shape_str(x0.shape()));
  }
  if (x0.rank() == 0 || t.size() != x0.dim(0)) throw ShapeError("q_sample: need one timestep per batch item");
  for (std::size_t ti : t) check_step(sched, ti, "q_sample");
  const std::size_t per = x0.numel() / t.size();
  Tensor out(x0.shape());
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double ab = sched.alpha_bar_at(t[i]);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) d[j] = a * x0.data()[j] + s * eps.data()[j];
  }
  return out;
}

Tensor q_sample(const Tensor& x0, std::size_t t, const Tensor& eps, const DiffusionSchedule& sched) {
  check_step(sched, t, "q_sample");
  if (x0.shape() != eps.shape()) {
    throw ShapeError("q_sample: noise " + shape_str(eps.shape()) + " must match x0 " + shape_str(x0.shape()));
  }
  const double ab = sched.alpha_bar_at(t);
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  Tensor out(x0.shape());
  auto d = out.mutable_data();
  for (std::size_t j = 0; j < d.size(); ++j) d[j] = a * x0.data()[j] + s * eps.data()[j];
  return out;
}

double sampling_noise_scale(const DiffusionSchedule& sched, std::size_t t, bool literal) {
  check_step(sched, t, "sampling_noise_scale");
  if (t == 1) return 0.0;
  const double v = (1.0 - sched.alpha_bar_at(t - 1)) * sched.beta_at(t) / (1.0 - sched.alpha_bar_at(t));
  return literal ? v : std::sqrt(v);
}

Tensor ddpm_sample_step(const Tensor& x_t, std::size_t t, const Tensor& eps_hat, const DiffusionSchedule& sched,
                        const Tensor& noise, bool literal_variance) {
  check_step(sched, t, "ddpm_sample_step");
  if (eps_hat.shape() != x_t.shape()) throw ShapeError("ddpm_sample_step: eps_hat shape must match x_t");
  const double sigma = sampling_noise_scale(sched, t, literal_variance);
  if (sigma != 0.0 && noise.shape() != x_t.shape()) throw ShapeError("ddpm_sample_step: noise shape must match x_t");
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha_at(t));
  const double coef = sched.beta_at(t) / std::sqrt(1.0 - sched.alpha_bar_at(t));
  Tensor out(x_t.shape());
  auto d = out.mutable_data();
  for (std::size_t j = 0; j < d.size(); ++j) {
    d[j] = inv_sqrt_alpha * (x_t.data()[j] - coef * eps_hat.data()[j]);
    if (sigma != 0.0) d[j] += sigma * noise.data()[j];
  }
  return out;
}

std::string to_string(DiffusionMode mode) { return mode == DiffusionMode::global ? "global" : "local"; }

DiffusionMode diffusion_mode_from_string(const std::string& s) {
  if (s == "global") return DiffusionMode::global;
  if (s == "local") return DiffusionMode::local;
  throw ValueError("unknown diffusion mode '" + s + "' (expected global or local)");
}

// ---------------------------------------------------------------- conditions

Tensor LatentCodec::encode(const Tensor& video) const {
  if (!vae) throw ValueError("LatentCodec: no VAE");
  return scale == 1.0 ? vae->encode(video).mean : dod::scale(vae->encode(video).mean, scale);
}

Tensor LatentCodec::decode(const Tensor& latent) const {
  if (!vae) throw ValueError("LatentCodec: no VAE");
  return vae->decode(scale == 1.0 ? latent : dod::scale(latent, 1.0 / scale));
}

VisualCondition build_visual_condition(const Tensor& video, DiffusionMode mode, const LatentCodec& codec) {
  if (video.rank() != 5) throw ShapeError("build_visual_condition: video must be (b, L, C, H, W)");
  const std::size_t b = video.dim(0), L = video.dim(1);
  const std::size_t lh = codec.vae->latent_size(video.dim(3)), lw = codec.vae->latent_size(video.dim(4));
  const std::size_t c = codec.vae->config().latent_channels;
  VisualCondition out;
  out.mask = Tensor(Shape{b, L, 1, lh, lw}, 0.0);
  if (mode == DiffusionMode::global) {
    // The encoding of the all-zero video, masked everywhere, is identically zero.
    out.latent = Tensor(Shape{b, L, c, lh, lw}, 0.0);
    return out;
  }
  if (L < 3) throw ValueError("build_visual_condition: local mode needs L >= 3, got " + std::to_string(L));
  Tensor masked = video.clone();
  const std::size_t frame = video.numel() / (b * L);
  auto md = masked.mutable_data();
  for (std::size_t i = 0; i < b; ++i)
    std::fill(md.begin() + static_cast<std::ptrdiff_t>((i * L + 1) * frame),
              md.begin() + static_cast<std::ptrdiff_t>((i * L + L - 1) * frame), 0.0);
  out.latent = codec.encode(masked);
  const std::size_t lat_frame = c * lh * lw, mask_frame = lh * lw;
  auto ld = out.latent.mutable_data();
  auto mk = out.mask.mutable_data();
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t f = 1; f + 1 < L; ++f)
      std::fill_n(ld.begin() + static_cast<std::ptrdiff_t>((i * L + f) * lat_frame), lat_frame, 0.0);
    for (std::size_t f : {std::size_t{0}, L - 1})
      std::fill_n(mk.begin() + static_cast<std::ptrdiff_t>((i * L + f) * mask_frame), mask_frame, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------- UNet

nlohmann::json UNetConfig::to_json() const {
  return {{"latent_channels", latent_channels},
          {"base_width", base_width},
          {"prompt_tokens", prompt_tokens},
          {"prompt_dim", prompt_dim},
          {"temporal_kernel", temporal_kernel},
          {"multi_scale_injection", multi_scale_injection},
          {"symmetric_injection", symmetric_injection},
          {"seed", seed}};
}

UNetConfig UNetConfig::from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.latent_channels = j.at("latent_channels");
  c.base_width = j.at("base_width");
  c.prompt_tokens = j.at("prompt_tokens");
  c.prompt_dim = j.at("prompt_dim");
  c.temporal_kernel = j.at("temporal_kernel");
  c.multi_scale_injection = j.at("multi_scale_injection");
  c.symmetric_injection = j.at("symmetric_injection");
  c.seed = j.at("seed");
  return c;
}

Tensor timestep_embedding(const std::vector<std::size_t>& t, std::size_t dim) {
  if (dim < 2 || dim % 2) throw ValueError("timestep_embedding: dim must be even and >= 2");
  const std::size_t half = dim / 2;
  Tensor out(Shape{t.size(), dim});
  auto d = out.mutable_data();
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(t[i]) * freq;
      d[i * dim + k] = std::sin(arg);
      d[i * dim + half + k] = std::cos(arg);
    }
  }
  return out;
}

Tensor inject_condition(const Tensor& h, const Conv2dLayer& conv, const Tensor& cond) {
  if (cond.rank() != 4 || cond.dim(0) != h.dim(0) || cond.dim(2) != h.dim(2) || cond.dim(3) != h.dim(3)) {
    throw ShapeError("condition injection: condition " + shape_str(cond.shape()) +
                     " does not match the block resolution " + shape_str(h.shape()));
  }
  const std::size_t c = h.dim(1);
  Tensor wb = conv(cond);
  return add(add(h, mul(slice(wb, 1, 0, c), h)), slice(wb, 1, c, c));
}

Tensor block_forward(const UNetBlock& block, const BlockInputs& in) {
  Tensor h = in.skip.defined() ? concat({in.h, in.skip}, 1) : in.h;
  h = block.channel_conv(h);
  h = add_group_bias(h, block.time_proj(silu(in.time)));
  h = add(h, block.spatial_conv(silu(block.spatial_norm(h))));
  h = temporal_conv(h, in.dims, block.temporal_conv);
  if (block.inject_latent) h = inject_condition(h, *block.inject_latent, in.cond_latent);
  if (block.inject_mask) h = inject_condition(h, *block.inject_mask, in.cond_mask);
  h = spatial_self_attention(h, block.spatial_attn);
  const std::size_t H = h.dim(2), W = h.dim(3);
  h = spatial_tokens_to_frames(block.prompt_attn(frames_to_spatial_tokens(h), in.prompt), H, W);
  return temporal_self_attention(h, in.dims, block.temporal_attn);
}

Tensor upblock_forward(const UNetBlock& block, const Conv2dLayer& upsample, const BlockInputs& in) {
  return upsample(upsample_nearest2x(block_forward(block, in)));
}

namespace {

bool is_fine(const std::string& block) { return block == "down0" || block == "up0"; }
bool is_up(const std::string& block) { return block == "up0" || block == "up1"; }

}  // namespace

bool Mask3DUNet::injects(const std::string& block) const {
  if (block != "down0" && block != "down1" && block != "up0" && block != "up1") {
    throw ValueError("unknown UNet block '" + block + "'");
  }
  return (config_.multi_scale_injection || is_fine(block)) && (config_.symmetric_injection || is_up(block));
}

Mask3DUNet::Mask3DUNet(UNetConfig config) : config_(config) {
  const std::size_t w = config_.base_width, c = config_.latent_channels, kt = config_.temporal_kernel;
  if (w < 2 || w % 2) throw ValueError("UNetConfig: base_width must be even and >= 2");
  ParamBuilder pb(params_, config_.seed);
  const std::size_t tdim = 2 * w;

  auto make_block = [&](const std::string& name, std::size_t cin, std::size_t ch) {
    UNetBlock b;
    b.channels = ch;
    b.time_proj = pb.linear(name + ".time_proj", tdim, ch);
    b.channel_conv = pb.conv2d(name + ".channel_conv", cin, ch, 1);
    b.spatial_norm = pb.norm(name + ".spatial_norm", ch, 1);
    b.spatial_conv = pb.conv2d(name + ".spatial_conv", ch, ch, 3);
    b.temporal_conv = pb.identity_conv1d(name + ".temporal_conv", ch, kt);
    if (injects(name)) {
      b.inject_latent = pb.zero_conv2d(name + ".inject_latent", c, 2 * ch, 3);
      b.inject_mask = pb.zero_conv2d(name + ".inject_mask", 1, 2 * ch, 3);
    }
    b.spatial_attn = pb.attention(name + ".spatial_attn", ch, ch, ch, false);
    b.prompt_attn = pb.attention(name + ".prompt_attn", ch, config_.prompt_dim, ch, false);
    b.temporal_attn = pb.attention(name + ".temporal_attn", ch, ch, ch, true);
    return b;
  };

  time_mlp1_ = pb.linear("time.mlp1", w, tdim);
  time_mlp2_ = pb.linear("time.mlp2", tdim, tdim);
  conv_in_ = pb.conv2d("conv_in", c, w, 3);
  down0_ = make_block("down0", w, w);
  down_conv_ = pb.conv2d("down_conv", w, 2 * w, 3, 2);
  down1_ = make_block("down1", 2 * w, 2 * w);
  up1_ = make_block("up1", 4 * w, 2 * w);
  up_conv_ = pb.conv2d("up_conv", 2 * w, w, 3);
  up0_ = make_block("up0", 2 * w, w);
  out_norm_ = pb.norm("out_norm", w, 1);
  conv_out_ = pb.conv2d("conv_out", w, c, 3);
  has_pyramid_ = injects("down1") || injects("up1");
  if (has_pyramid_) {
    pyramid_latent_ = pb.conv2d("pyramid.latent", c, c, 3, 2);
    pyramid_mask_ = pb.conv2d("pyramid.mask", 1, 1, 3, 2);
  }
}

const UNetBlock& Mask3DUNet::block(const std::string& name) const {
  if (name == "down0") return down0_;
  if (name == "down1") return down1_;
  if (name == "up1") return up1_;
  if (name == "up0") return up0_;
  throw ValueError("unknown UNet block '" + name + "'");
}

Tensor Mask3DUNet::forward(const Tensor& x_t, const Tensor& prompt, const std::vector<std::size_t>& t,
                           const Tensor& cond_latent, const Tensor& cond_mask) const {
  const std::size_t c = config_.latent_channels;
  if (x_t.rank() != 5 || x_t.dim(2) != c) {
    throw ShapeError("denoiser: x_t must be (b, L, " + std::to_string(c) + ", h, w), got " + shape_str(x_t.shape()));
  }
  const std::size_t b = x_t.dim(0), L = x_t.dim(1), h = x_t.dim(3), w = x_t.dim(4);
  if (h % 2 || w % 2) throw ShapeError("denoiser: latent height and width must be even");
  if (prompt.shape() != Shape{b, L, config_.prompt_tokens, config_.prompt_dim}) {
    throw ShapeError("denoiser: prompt " + shape_str(prompt.shape()) + " must be (" + std::to_string(b) + ", " +
                     std::to_string(L) + ", " + std::to_string(config_.prompt_tokens) + ", " +
                     std::to_string(config_.prompt_dim) + ") — one row per frame");
  }
  if (cond_latent.shape() != x_t.shape()) throw ShapeError("denoiser: x0c must match x_t");
  if (cond_mask.shape() != Shape{b, L, 1, h, w}) throw ShapeError("denoiser: x0m must be (b, L, 1, h, w)");
  if (t.size() != b) throw ShapeError("denoiser: need one timestep per batch item");

  const ClipDims dims{b, L};
  const std::size_t n = dims.frames();
  const Tensor x = reshape(x_t, {n, c, h, w});
  const Tensor cl0 = reshape(cond_latent, {n, c, h, w});
  const Tensor cm0 = reshape(cond_mask, {n, 1, h, w});
  const Tensor p = reshape(prompt, {n, config_.prompt_tokens, config_.prompt_dim});
  Tensor cl1, cm1;
  if (has_pyramid_) {
    cl1 = pyramid_latent_(cl0);
    cm1 = pyramid_mask_(cm0);
  }
  const Tensor temb = time_mlp2_(silu(time_mlp1_(timestep_embedding(t, config_.base_width))));

  const Tensor h0 = conv_in_(x);
  const Tensor d0 = block_forward(down0_, {h0, {}, temb, cl0, cm0, p, dims});
  const Tensor s1 = down_conv_(d0);
  const Tensor d1 = block_forward(down1_, {s1, {}, temb, cl1, cm1, p, dims});
  const Tensor u1 = upblock_forward(up1_, up_conv_, {d1, s1, temb, cl1, cm1, p, dims});
  const Tensor u0 = block_forward(up0_, {u1, d0, temb, cl0, cm0, p, dims});
  const Tensor out = conv_out_(silu(out_norm_(u0)));
  return reshape(out, {b, L, c, h, w});
}

Tensor training_loss(const Mask3DUNet& net, const Tensor& x0, const Tensor& prompt, const VisualCondition& cond,
                     const std::vector<std::size_t>& t, const Tensor& eps, const DiffusionSchedule& sched) {
  const Tensor x_t = q_sample(x0, t, eps, sched);
  return mse(net.forward(x_t, prompt, t, cond.latent, cond.mask), eps);
}

// ---------------------------------------------------------------- models and sampling

DiffusionModel make_diffusion_model(const UNetConfig& net, std::size_t T, double beta_start, double beta_end,
                                    DiffusionMode mode, std::size_t depth, std::size_t stride) {
  DiffusionModel m;
  m.net = Mask3DUNet(net);
  m.schedule = make_schedule(T, beta_start, beta_end);
  m.beta_start = beta_start;
  m.beta_end = beta_end;
  m.mode = mode;
  m.depth = depth;
  m.stride = stride;
  return m;
}

Tensor sample(const DiffusionModel& model, const TemporalVae& vae, const Tensor& prompt,
              const Tensor& condition_video, std::uint64_t seed, const SampleOptions& options) {
  if (model.trained_steps == 0 && !options.allow_untrained) {
    throw ValueError("sample: diffusion model (depth " + std::to_string(model.depth) + ") is untrained");
  }
  if (prompt.rank() != 4) throw ShapeError("sample: prompt must be (b, L, l_p, d_p)");
  const std::size_t b = prompt.dim(0), L = prompt.dim(1);
  if (model.mode == DiffusionMode::local &&
      (!condition_video.defined() || condition_video.rank() != 5 || condition_video.dim(0) != b || condition_video.dim(1) != L)) {
    throw ShapeError("sample: local mode needs a (b, L, C, H, W) condition video matching the prompt");
  }
  const LatentCodec codec{&vae, model.latent_scale};
  const Tensor video_like = condition_video.defined() ? condition_video : Tensor(Shape{b, L, vae.config().image_channels, model.frame_size, model.frame_size}, 0.0);
  const VisualCondition cond = build_visual_condition(video_like, model.mode, codec);

  Rng rng(seed);
  Tensor x = rng.normal_tensor(cond.latent.shape());
  for (std::size_t t = model.schedule.steps(); t >= 1; --t) {
    const Tensor eps_hat = model.net.forward(x, prompt, std::vector<std::size_t>(b, t), cond.latent, cond.mask);
    const Tensor noise = rng.normal_tensor(x.shape());
    x = ddpm_sample_step(x, t, eps_hat, model.schedule, noise, model.literal_variance);
  }
  Tensor video = codec.decode(x);
  if (model.mode == DiffusionMode::local) {
    const std::size_t frame = video.numel() / (b * L);
    auto vd = video.mutable_data();
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t f : {std::size_t{0}, L - 1}) {
        const auto off = static_cast<std::ptrdiff_t>((i * L + f) * frame);
        std::copy_n(condition_video.data().begin() + off, frame, vd.begin() + off);
      }
  }
  return video;
}

// ---------------------------------------------------------------- training

ClipPool build_clip_pool(const std::vector<SyntheticEpisode>& episodes, const std::vector<std::size_t>& depths,
                         std::size_t L, std::size_t m, DiffusionMode mode, const LatentCodec& codec,
                         std::size_t count, std::uint64_t seed) {
  if (episodes.empty() || depths.empty()) throw ValueError("build_clip_pool: need episodes and depths");
  Rng rng(hash_seed({seed, hash_string("clip-pool")}));
  ClipPool pool;
  for (std::size_t i = 0; i < count; ++i) {
    const SyntheticEpisode& ep = episodes[rng.below(episodes.size())];
    const std::size_t depth = depths[rng.below(depths.size())];
    const TrainingClip clip = sample_training_clip(ep, depth, L, m, rng);
    pool.x0.push_back(codec.encode(clip.video));
    pool.prompt.push_back(clip.prompt);
    pool.cond.push_back(build_visual_condition(clip.video, mode, codec));
  }
  return pool;
}

double estimate_latent_scale(const TemporalVae& vae, const std::vector<SyntheticEpisode>& episodes,
                             std::size_t L, std::size_t m, std::size_t count, std::uint64_t seed) {
  Rng rng(hash_seed({seed, hash_string("latent-scale")}));
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const SyntheticEpisode& ep = episodes[rng.below(episodes.size())];
    const TrainingClip clip = sample_training_clip(ep, 1 + rng.below(m), L, m, rng);
    for (double v : vae.encode(clip.video).mean.data()) {
      acc += v * v;
      ++n;
    }
  }
  if (n == 0 || acc == 0.0) throw ValueError("estimate_latent_scale: degenerate latents");
  return 1.0 / std::sqrt(acc / static_cast<double>(n));
}

namespace {

struct Batch {
  Tensor x0, prompt;
  VisualCondition cond;
};

Batch gather(const ClipPool& pool, const std::vector<std::size_t>& idx) {
  std::vector<Tensor> x0, p, cl, cm;
  for (std::size_t i : idx) {
    x0.push_back(pool.x0[i]);
    p.push_back(pool.prompt[i]);
    cl.push_back(pool.cond[i].latent);
    cm.push_back(pool.cond[i].mask);
  }
  return {concat(x0, 0), concat(p, 0), {concat(cl, 0), concat(cm, 0)}};
}

}  // namespace

double fixed_eval_loss(const DiffusionModel& model, const ClipPool& pool, std::size_t triples, std::uint64_t seed) {
  if (pool.size() == 0 || triples == 0) throw ValueError("fixed_eval_loss: empty pool");
  Rng rng(hash_seed({seed, hash_string("eval-triples")}));
  const std::size_t T = model.schedule.steps();
  double acc = 0.0;
  for (std::size_t i = 0; i < triples; ++i) {
    const std::size_t clip = i % pool.size();
    const std::size_t t = 1 + (i * T) / triples;
    const Tensor eps = rng.normal_tensor(pool.x0[clip].shape());
    acc += training_loss(model.net, pool.x0[clip], pool.prompt[clip], pool.cond[clip], {t}, eps, model.schedule)
               .item();
  }
  return acc / static_cast<double>(triples);
}

DiffusionTrainReport train_diffusion(DiffusionModel& model, const ClipPool& pool, const DiffusionTrainConfig& config,
                                     const std::function<void(std::size_t, double)>& on_step) {
  if (pool.size() == 0) throw ValueError("train_diffusion: empty pool");
  DiffusionTrainReport report;
  const std::uint64_t eval_seed = hash_seed({config.seed, hash_string("eval")});
  report.initial_eval_loss = fixed_eval_loss(model, pool, config.eval_triples, eval_seed);
  Rng rng(hash_seed({config.seed, hash_string("diffusion-train")}));
  std::vector<Tensor> params = model.net.params().tensors();
  for (Tensor& p : params) p.set_requires_grad(true);
  AdamState adam;
  adam.config.lr = config.lr;
  const std::size_t T = model.schedule.steps();
  for (std::size_t step = 0; step < config.steps; ++step) {
    std::vector<std::size_t> idx(config.batch), t(config.batch);
    for (std::size_t i = 0; i < config.batch; ++i) {
      idx[i] = rng.below(pool.size());
      t[i] = 1 + rng.below(T);
    }
    const Batch batch = gather(pool, idx);
    const Tensor eps = rng.normal_tensor(batch.x0.shape());
    zero_grad(params);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = training_loss(model.net, batch.x0, batch.prompt, batch.cond, t, eps, model.schedule);
    }
    tape.backward(loss);
    adam_step(params, adam);
    report.loss.push_back(loss.item());
    if (on_step) on_step(step + 1, loss.item());
  }
  for (Tensor& p : params) p.set_requires_grad(false);
  model.trained_steps += config.steps;
  model.train_seed = config.seed;
  report.final_eval_loss = fixed_eval_loss(model, pool, config.eval_triples, eval_seed);
  return report;
}

// ---------------------------------------------------------------- checkpoints

void save_diffusion(const std::filesystem::path& dir, const DiffusionModel& model, const nlohmann::json& extra) {
  nlohmann::json meta = {{"kind", "mtd"},
                         {"unet", model.net.config().to_json()},
                         {"T", model.schedule.steps()},
                         {"beta_start", model.beta_start},
                         {"beta_end", model.beta_end},
                         {"mode", to_string(model.mode)},
                         {"depth", model.depth},
                         {"stride", model.stride},
                         {"frame_size", model.frame_size},
                         {"latent_scale", model.latent_scale},
                         {"literal_variance", model.literal_variance},
                         {"trained_steps", model.trained_steps},
                         {"train_seed", model.train_seed},
                         {"extra", extra}};
  save_checkpoint(dir, model.net.params(), meta);
}

DiffusionModel load_diffusion(const std::filesystem::path& dir) {
  const nlohmann::json meta = read_manifest(dir).at("meta");
  if (meta.value("kind", "") != "mtd") throw CheckpointError("not a diffusion checkpoint: " + dir.string());
  DiffusionModel m = make_diffusion_model(UNetConfig::from_json(meta.at("unet")), meta.at("T"),
                                          meta.at("beta_start"), meta.at("beta_end"),
                                          diffusion_mode_from_string(meta.at("mode")), meta.at("depth"),
                                          meta.at("stride"));
  m.frame_size = meta.at("frame_size");
  m.latent_scale = meta.at("latent_scale");
  m.literal_variance = meta.at("literal_variance");
  m.trained_steps = meta.at("trained_steps");
  m.train_seed = meta.at("train_seed");
  load_checkpoint(dir, m.net.params());
  return m;
}

}  // namespace dod
