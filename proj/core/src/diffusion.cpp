#include "csdiff/diffusion.hpp"

#include <cmath>
#include <limits>

#include <torch/nn/functional/upsampling.h>

namespace csdiff {

// ---------------------------------------------------------------------------
// NoiseSchedule

NoiseSchedule::NoiseSchedule(std::int64_t train_steps, double beta_start, double beta_end)
    : train_steps_(train_steps) {
  if (train_steps < 1) throw InvalidArgument("schedule needs at least one timestep");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw InvalidArgument("schedule needs 0 < beta_start <= beta_end < 1");
  }
  betas_.assign(static_cast<std::size_t>(train_steps + 1), 0.0);
  alpha_bars_.assign(static_cast<std::size_t>(train_steps + 1), 1.0);
  for (std::int64_t t = 1; t <= train_steps; ++t) {
    const double frac = train_steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(train_steps - 1);
    const auto i = static_cast<std::size_t>(t);
    betas_[i] = beta_start + frac * (beta_end - beta_start);
    alpha_bars_[i] = alpha_bars_[i - 1] * (1.0 - betas_[i]);
  }
}

NoiseSchedule::NoiseSchedule(const ModelConfig& config)
    : NoiseSchedule(config.train_timesteps, config.beta_start, config.beta_end) {}

void NoiseSchedule::check_timestep(std::int64_t t) const {
  if (t < 1 || t > train_steps_) {
    throw InvalidArgument("timestep " + std::to_string(t) + " outside [1, " + std::to_string(train_steps_) + "]");
  }
}

double NoiseSchedule::beta(std::int64_t t) const {
  check_timestep(t);
  return betas_[static_cast<std::size_t>(t)];
}

double NoiseSchedule::alpha_bar(std::int64_t t) const {
  if (t < 0 || t > train_steps_) throw InvalidArgument("timestep " + std::to_string(t) + " outside schedule");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

torch::Tensor NoiseSchedule::alpha_bar_at(const torch::Tensor& t, torch::ScalarType dtype) const {
  auto table = torch::tensor(alpha_bars_, torch::kFloat64);
  return table.index_select(0, t.to(torch::kInt64)).to(dtype).view({-1, 1, 1, 1});
}

torch::Tensor NoiseSchedule::add_noise(const torch::Tensor& z0, const torch::Tensor& t,
                                       const torch::Tensor& noise) const {
  auto ab = alpha_bar_at(t, z0.scalar_type());
  return ab.sqrt() * z0 + (1.0 - ab).sqrt() * noise;
}

std::vector<std::int64_t> NoiseSchedule::ddim_timesteps(std::int64_t steps) const {
  if (steps < 1) throw InvalidArgument("DDIM needs at least one step");
  if (steps > train_steps_) {
    throw InvalidArgument("DDIM steps " + std::to_string(steps) + " exceed training timesteps " +
                          std::to_string(train_steps_));
  }
  std::vector<std::int64_t> out;
  out.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t i = steps; i >= 1; --i) out.push_back(i * train_steps_ / steps);
  return out;
}

// ---------------------------------------------------------------------------
// Conditions and cross-attention

ConditionPack ConditionPack::with_style(torch::Tensor new_style) const {
  ConditionPack out = *this;
  out.style = std::move(new_style);
  out.style_is_null = false;
  return out;
}

const char* to_string(BlockRole role) {
  switch (role) {
    case BlockRole::down:
      return "down";
    case BlockRole::middle:
      return "middle";
    case BlockRole::up:
      return "up";
  }
  return "?";
}

MclCrossAttentionImpl::MclCrossAttentionImpl(std::int64_t latent_dim, std::int64_t cond_dim, std::int64_t heads,
                                             BlockRole role)
    : role_(role), heads_(heads) {
  if (latent_dim % heads != 0) throw InvalidArgument("MCL width must be divisible by its head count");
  auto no_bias = [](std::int64_t in, std::int64_t out) {
    return torch::nn::Linear(torch::nn::LinearOptions(in, out).bias(false));
  };
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({latent_dim})));
  to_q = register_module("to_q", no_bias(latent_dim, latent_dim));
  content_k = register_module("content_k", no_bias(cond_dim, latent_dim));
  content_v = register_module("content_v", no_bias(cond_dim, latent_dim));
  if (role == BlockRole::middle) {
    style_k = register_module("style_k", no_bias(cond_dim, latent_dim));
    style_v = register_module("style_v", no_bias(cond_dim, latent_dim));
  }
}

std::pair<torch::Tensor, torch::Tensor> MclCrossAttentionImpl::keys_values(const torch::Tensor& content,
                                                                           const torch::Tensor& style) {
  auto k = content_k(content);
  auto v = content_v(content);
  if (style.defined()) {
    k = torch::cat({k, style_k(style)}, 1);
    v = torch::cat({v, style_v(style)}, 1);
  }
  return {split_heads(k, heads_), split_heads(v, heads_)};
}

torch::Tensor MclCrossAttentionImpl::allowed_mask(const torch::Tensor& content_mask, std::int64_t style_rows) const {
  if (!content_mask.defined()) return {};
  auto mask = content_mask;
  if (style_rows > 0) {
    mask = torch::cat({mask, torch::ones({mask.size(0), style_rows}, mask.options())}, 1);
  }
  return key_padding_to_allowed(mask);
}

torch::Tensor MclCrossAttentionImpl::attend_sequences(const torch::Tensor& z, const torch::Tensor& content,
                                                      const torch::Tensor& content_mask, const torch::Tensor& style,
                                                      bool include_residual) {
  if (style.defined() && !has_style_projections()) {
    throw InvalidArgument(std::string("MCL layer in the ") + to_string(role_) +
                          " block has no style projections; style conditioning is middle-block only");
  }
  if (z.dim() != 3 || content.dim() != 3 || z.size(0) != content.size(0)) {
    throw InvalidArgument("MCL expects Z [B, n, d_z] and conditions [B, k, d_sd]");
  }
  auto q = split_heads(to_q(norm(z)), heads_);
  auto [k, v] = keys_values(content, style);
  auto out = merge_heads(attend(q, k, v, allowed_mask(content_mask, style.defined() ? style.size(1) : 0)));
  return include_residual ? z + out : out;
}

torch::Tensor MclCrossAttentionImpl::forward(const torch::Tensor& z, const ConditionPack& cond) {
  const bool use_style = role_ == BlockRole::middle;
  return attend_sequences(z, cond.content, cond.content_mask, use_style ? cond.style : torch::Tensor());
}

torch::Tensor MclCrossAttentionImpl::attention_probabilities(const torch::Tensor& z, const ConditionPack& cond) {
  const bool use_style = role_ == BlockRole::middle;
  const auto style = use_style ? cond.style : torch::Tensor();
  auto q = split_heads(to_q(norm(z)), heads_);
  auto [k, v] = keys_values(cond.content, style);
  auto scores = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(q.size(-1)));
  if (auto allowed = allowed_mask(cond.content_mask, style.defined() ? style.size(1) : 0); allowed.defined()) {
    scores = scores.masked_fill(allowed.logical_not(), -std::numeric_limits<double>::infinity());
  }
  return torch::softmax(scores, -1);
}

MclStackImpl::MclStackImpl(const std::vector<std::int64_t>& widths, std::int64_t cond_dim, std::int64_t heads) {
  down = register_module("down", torch::nn::ModuleList());
  up = register_module("up", torch::nn::ModuleList());
  for (auto w : widths) {
    down->push_back(MclCrossAttention(w, cond_dim, heads, BlockRole::down));
    up->push_back(MclCrossAttention(w, cond_dim, heads, BlockRole::up));
  }
  middle = register_module("middle", MclCrossAttention(widths.back(), cond_dim, heads, BlockRole::middle));
}

MclCrossAttention MclStackImpl::down_layer(std::size_t level) const {
  return MclCrossAttention(down->ptr<MclCrossAttentionImpl>(level));
}

MclCrossAttention MclStackImpl::up_layer(std::size_t level) const {
  return MclCrossAttention(up->ptr<MclCrossAttentionImpl>(level));
}

std::vector<MclCrossAttention> MclStackImpl::layers() const {
  std::vector<MclCrossAttention> out;
  for (std::size_t i = 0; i < down->size(); ++i) out.push_back(down_layer(i));
  out.push_back(middle);
  for (std::size_t i = 0; i < up->size(); ++i) out.push_back(up_layer(i));
  return out;
}

BackboneTextEncoderImpl::BackboneTextEncoderImpl(const ModelConfig& config) {
  embedding = register_module("embedding", TokenEmbedding(kVocabSize, config.max_text_len, config.cond_dim));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < config.backbone_text_blocks; ++i) {
    blocks->push_back(TransformerBlock(config.cond_dim, config.backbone_text_heads));
  }
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.cond_dim})));
}

torch::Tensor BackboneTextEncoderImpl::forward(const TokenBatch& tokens) {
  const auto allowed = key_padding_to_allowed(tokens.mask);
  auto x = embedding(tokens.ids);
  for (const auto& block : *blocks) x = block->as<TransformerBlock>()->forward(x, allowed);
  return norm(x);
}

// ---------------------------------------------------------------------------
// UNet

torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim) {
  const auto half = dim / 2;
  auto freqs = torch::exp(torch::arange(half, torch::kFloat64) * (-std::log(10000.0) / static_cast<double>(half)));
  auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::sin(args), torch::cos(args)}, 1);
  if (dim % 2 == 1) emb = torch::cat({emb, torch::zeros({t.size(0), 1}, emb.options())}, 1);
  return emb;
}

ResBlockImpl::ResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t time_dim,
                           std::int64_t groups) {
  norm1 = register_module("norm1", torch::nn::GroupNorm(groups, in_channels));
  conv1 = register_module("conv1",
                          torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out_channels));
  norm2 = register_module("norm2", torch::nn::GroupNorm(groups, out_channels));
  conv2 = register_module("conv2",
                          torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels) {
    skip = register_module("skip", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& time_features) {
  auto h = conv1(torch::silu(norm1(x)));
  h = h + time_proj(time_features).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return (skip.is_empty() ? x : skip(x)) + h;
}

UNetImpl::UNetImpl(const ModelConfig& config)
    : latent_channels_(config.latent_channels),
      latent_size_(config.latent_size),
      base_width_(config.unet_widths.front()),
      train_steps_(config.train_timesteps),
      widths_(config.unet_widths) {
  const auto groups = config.norm_groups;
  const auto time_dim = 4 * base_width_;
  conv_in = register_module("conv_in", torch::nn::Conv2d(torch::nn::Conv2dOptions(latent_channels_, base_width_, 3).padding(1)));
  time_in = register_module("time_in", torch::nn::Linear(base_width_, time_dim));
  time_out = register_module("time_out", torch::nn::Linear(time_dim, time_dim));

  res_down = register_module("res_down", torch::nn::ModuleList());
  downsample = register_module("downsample", torch::nn::ModuleList());
  res_up = register_module("res_up", torch::nn::ModuleList());
  upsample = register_module("upsample", torch::nn::ModuleList());
  const auto levels = widths_.size();
  for (std::size_t i = 0; i < levels; ++i) {
    const auto w = widths_[i];
    res_down->push_back(ResBlock(w, w, time_dim, groups));
    res_up->push_back(ResBlock(2 * w, w, time_dim, groups));
    if (i + 1 < levels) {
      downsample->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(w, widths_[i + 1], 3).stride(2).padding(1)));
      upsample->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(widths_[i + 1], w, 3).padding(1)));
    }
  }
  mid_res1 = register_module("mid_res1", ResBlock(widths_.back(), widths_.back(), time_dim, groups));
  mid_res2 = register_module("mid_res2", ResBlock(widths_.back(), widths_.back(), time_dim, groups));
  norm_out = register_module("norm_out", torch::nn::GroupNorm(groups, base_width_));
  conv_out = register_module("conv_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(base_width_, latent_channels_, 3).padding(1)));
  text_encoder = register_module("text_encoder", BackboneTextEncoder(config));
}

torch::Tensor UNetImpl::cross_attend(MclCrossAttention& layer, const torch::Tensor& h, const ConditionPack& cond) {
  const auto b = h.size(0), c = h.size(1), height = h.size(2), width = h.size(3);
  auto tokens = h.flatten(2).transpose(1, 2);
  return layer->forward(tokens, cond).transpose(1, 2).reshape({b, c, height, width});
}

torch::Tensor UNetImpl::forward(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionPack& cond,
                                MclStack& mcl, UNetTrace* trace, bool ablate_middle) {
  if (z_t.dim() != 4 || z_t.size(1) != latent_channels_ || z_t.size(2) != latent_size_ ||
      z_t.size(3) != latent_size_) {
    throw InvalidArgument("denoiser expects latents [B, " + std::to_string(latent_channels_) + ", " +
                          std::to_string(latent_size_) + ", " + std::to_string(latent_size_) + "]");
  }
  if (t.dim() != 1 || t.size(0) != z_t.size(0)) throw InvalidArgument("timesteps must be [B]");
  if (cond.batch_size() != z_t.size(0)) throw InvalidArgument("condition batch does not match latent batch");
  const auto t_min = t.min().item<std::int64_t>(), t_max = t.max().item<std::int64_t>();
  if (t_min < 1 || t_max > train_steps_) {
    throw InvalidArgument("timesteps must lie in [1, " + std::to_string(train_steps_) + "]");
  }

  auto temb = timestep_embedding(t, base_width_).to(z_t.scalar_type());
  temb = time_out(torch::silu(time_in(temb)));

  const auto levels = widths_.size();
  std::vector<torch::Tensor> skips;
  auto h = conv_in(z_t);
  for (std::size_t i = 0; i < levels; ++i) {
    h = res_down[i]->as<ResBlock>()->forward(h, temb);
    auto layer = mcl->down_layer(i);
    h = cross_attend(layer, h, cond);
    if (trace) trace->down.push_back(h);
    skips.push_back(h);
    if (i + 1 < levels) h = downsample[i]->as<torch::nn::Conv2d>()->forward(h);
  }

  h = mid_res1(h, temb);
  if (!ablate_middle) h = cross_attend(mcl->middle, h, cond);
  if (trace) trace->middle = h;
  h = mid_res2(h, temb);

  if (trace) trace->up.assign(levels, torch::Tensor());
  namespace F = torch::nn::functional;
  for (std::size_t i = levels; i-- > 0;) {
    h = res_up[i]->as<ResBlock>()->forward(torch::cat({h, skips[i]}, 1), temb);
    auto layer = mcl->up_layer(i);
    h = cross_attend(layer, h, cond);
    if (trace) trace->up[i] = h;
    if (i > 0) {
      h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
      h = upsample[i - 1]->as<torch::nn::Conv2d>()->forward(h);
    }
  }
  return conv_out(torch::silu(norm_out(h)));
}

// ---------------------------------------------------------------------------
// Objectives and sampling

torch::Tensor reconstruction_loss(const EpsilonPredictor& model, const NoiseSchedule& schedule,
                                  const torch::Tensor& z0, const torch::Tensor& t, const ConditionPack& cond,
                                  const torch::Tensor& noise) {
  if (t.dim() != 1 || t.size(0) != z0.size(0)) throw InvalidArgument("timesteps must be [B]");
  for (std::int64_t i = 0; i < t.size(0); ++i) schedule.check_timestep(t[i].item<std::int64_t>());
  if (noise.sizes() != z0.sizes()) throw InvalidArgument("noise shape must match z0");
  auto z_t = schedule.add_noise(z0, t, noise);
  auto predicted = model(z_t, t, cond);
  return (noise - predicted).pow(2).mean();
}

ReconstructionSample reconstruction_loss(const EpsilonPredictor& model, const NoiseSchedule& schedule,
                                         const torch::Tensor& z0, const torch::Tensor& t,
                                         const ConditionPack& cond, Rng& rng) {
  auto gen = rng.torch_generator();
  auto noise = torch::randn(z0.sizes(), gen, z0.options());
  return {reconstruction_loss(model, schedule, z0, t, cond, noise), noise};
}

torch::Tensor cfg_combine(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double scale) {
  if (eps_uncond.sizes() != eps_cond.sizes()) throw InvalidArgument("cfg_combine: shape mismatch");
  if (scale == 1.0) return eps_cond;
  if (scale == 0.0) return eps_uncond;
  return eps_uncond + scale * (eps_cond - eps_uncond);
}

torch::Tensor ddim_initial_noise(torch::IntArrayRef shape, std::uint64_t seed, torch::ScalarType dtype) {
  auto gen = Rng(seed).split("ddim.z_T").torch_generator();
  return torch::randn(shape, gen, torch::TensorOptions().dtype(dtype));
}

torch::Tensor ddim_sample(const EpsilonPredictor& model, const NoiseSchedule& schedule, const ConditionPack& cond,
                          const ConditionPack& null_cond, torch::IntArrayRef shape, const DdimOptions& options,
                          torch::ScalarType dtype) {
  const auto timesteps = schedule.ddim_timesteps(options.steps);
  torch::NoGradGuard no_grad;
  auto z = ddim_initial_noise(shape, options.seed, dtype);
  const auto batch = z.size(0);

  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    const auto t = timesteps[i];
    const auto t_prev = i + 1 < timesteps.size() ? timesteps[i + 1] : 0;
    auto t_batch = torch::full({batch}, t, torch::kInt64);
    auto eps_cond = model(z, t_batch, cond);
    auto eps = options.guidance_scale == 1.0 ? eps_cond
                                             : cfg_combine(model(z, t_batch, null_cond), eps_cond, options.guidance_scale);
    const double ab = schedule.alpha_bar(t);
    const double ab_prev = schedule.alpha_bar(t_prev);
    auto x0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    z = std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps;
  }
  return z;
}

}  // namespace csdiff
