#pragma once

#include <functional>
#include <vector>

#include <torch/nn/module.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/normalization.h>

#include "csdiff/attention.hpp"
#include "csdiff/common.hpp"
#include "csdiff/encoders.hpp"
#include "csdiff/model_config.hpp"
#include "csdiff/tokenizer.hpp"

namespace csdiff {

/// Linear-β variance schedule. Timesteps are 1-based; ᾱ_0 = 1.
class NoiseSchedule {
 public:
  NoiseSchedule(std::int64_t train_steps, double beta_start, double beta_end);
  explicit NoiseSchedule(const ModelConfig& config);

  std::int64_t train_steps() const { return train_steps_; }
  double beta(std::int64_t t) const;
  double alpha_bar(std::int64_t t) const;

  /// ᾱ_t gathered per batch entry and shaped [B, 1, 1, 1].
  torch::Tensor alpha_bar_at(const torch::Tensor& t, torch::ScalarType dtype) const;
  /// z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε
  torch::Tensor add_noise(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& noise) const;

  /// Descending, uniformly strided timesteps ending at T/steps; sample
  /// trajectories step from each entry to the next and finally to t = 0.
  std::vector<std::int64_t> ddim_timesteps(std::int64_t steps) const;

  void check_timestep(std::int64_t t) const;

 private:
  std::int64_t train_steps_;
  std::vector<double> betas_;       // index 0 unused
  std::vector<double> alpha_bars_;  // index 0 == 1
};

/// Conditions consumed by the cross-attention layers.
///
/// `content` is the backbone text features of the content prompt followed by
/// the projected content embeddings; `style` is the projected style
/// embeddings. Null packs carry the learned null embeddings, never zeros.
struct ConditionPack {
  torch::Tensor content;       // [B, k_c, d_sd]
  torch::Tensor content_mask;  // [B, k_c] bool, true on real rows
  torch::Tensor style;         // [B, k_s, d_sd]
  bool content_is_null = false;
  bool style_is_null = false;

  std::int64_t batch_size() const { return content.size(0); }
  ConditionPack with_style(torch::Tensor new_style) const;
};

enum class BlockRole { down, middle, up };
const char* to_string(BlockRole role);

/// One multi-step cross-attention layer.
///
/// Q = W_Q·norm(Z). Outside the middle block K/V come from the content
/// sequence alone; in the middle block they are the row-wise concatenation
/// of the content and style projections. Output is attention + Z.
class MclCrossAttentionImpl : public torch::nn::Module {
 public:
  MclCrossAttentionImpl(std::int64_t latent_dim, std::int64_t cond_dim, std::int64_t heads, BlockRole role);

  /// Z [B, n_z, d_z] -> Z_new [B, n_z, d_z]. Routes the pack by role: the
  /// style sequence is never read outside the middle block.
  torch::Tensor forward(const torch::Tensor& z, const ConditionPack& cond);

  /// Explicit-sequence form. Passing a style sequence to a layer without
  /// style projections is an error. `include_residual=false` returns the
  /// bare attention output.
  torch::Tensor attend_sequences(const torch::Tensor& z, const torch::Tensor& content,
                                 const torch::Tensor& content_mask, const torch::Tensor& style = {},
                                 bool include_residual = true);

  /// Attention probabilities [B, H, n_z, k] for the pack (rows sum to 1).
  torch::Tensor attention_probabilities(const torch::Tensor& z, const ConditionPack& cond);

  BlockRole role() const { return role_; }
  bool has_style_projections() const { return !style_k.is_empty(); }
  std::int64_t heads() const { return heads_; }

  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear to_q{nullptr};                         // W_Q
  torch::nn::Linear content_k{nullptr}, content_v{nullptr};  // W_c^K, W_c^V
  torch::nn::Linear style_k{nullptr}, style_v{nullptr};      // W_s^K, W_s^V (middle only)

 private:
  std::pair<torch::Tensor, torch::Tensor> keys_values(const torch::Tensor& content, const torch::Tensor& style);
  torch::Tensor allowed_mask(const torch::Tensor& content_mask, std::int64_t style_rows) const;

  BlockRole role_;
  std::int64_t heads_;
};
TORCH_MODULE(MclCrossAttention);

/// Parameter group `mcl.*`: one layer per resolution level on each path plus
/// the middle block. Parameters are shared across every denoising step.
class MclStackImpl : public torch::nn::Module {
 public:
  MclStackImpl(const std::vector<std::int64_t>& widths, std::int64_t cond_dim, std::int64_t heads);

  MclCrossAttention down_layer(std::size_t level) const;
  MclCrossAttention up_layer(std::size_t level) const;
  /// Every layer, down path first, then middle, then up path.
  std::vector<MclCrossAttention> layers() const;

  torch::nn::ModuleList down{nullptr};
  MclCrossAttention middle{nullptr};
  torch::nn::ModuleList up{nullptr};
};
TORCH_MODULE(MclStack);

/// Small token-embedding + self-attention stack producing content-prompt
/// features for the denoiser. External text features of the same shape can
/// be supplied through `build_content_condition` instead.
class BackboneTextEncoderImpl : public torch::nn::Module {
 public:
  BackboneTextEncoderImpl(const ModelConfig& config);

  /// [B, L, d_sd]; PAD positions are computed but masked downstream.
  torch::Tensor forward(const TokenBatch& tokens);

 private:
  TokenEmbedding embedding{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(BackboneTextEncoder);

/// Sinusoidal embedding of (possibly fractional) timesteps: [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, std::int64_t dim);

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t time_dim, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& time_features);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// MCL outputs captured during one denoiser pass, indexed by level.
struct UNetTrace {
  std::vector<torch::Tensor> down;
  torch::Tensor middle;
  std::vector<torch::Tensor> up;
};

/// Parameter group `unet.*`: convolutional encoder/decoder with skip
/// connections around a middle block, plus the backbone text encoder.
class UNetImpl : public torch::nn::Module {
 public:
  explicit UNetImpl(const ModelConfig& config);

  /// ε̂ for z_t [B, C, H, W] at timesteps t [B] (int64, 1..T). With
  /// `ablate_middle` the middle cross-attention layer is skipped.
  torch::Tensor forward(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionPack& cond,
                        MclStack& mcl, UNetTrace* trace = nullptr, bool ablate_middle = false);

  BackboneTextEncoder text_encoder{nullptr};

 private:
  torch::Tensor cross_attend(MclCrossAttention& layer, const torch::Tensor& h, const ConditionPack& cond);

  std::int64_t latent_channels_, latent_size_, base_width_, train_steps_;
  std::vector<std::int64_t> widths_;
  torch::nn::Conv2d conv_in{nullptr};
  torch::nn::Linear time_in{nullptr}, time_out{nullptr};
  torch::nn::ModuleList res_down{nullptr}, downsample{nullptr};
  ResBlock mid_res1{nullptr}, mid_res2{nullptr};
  torch::nn::ModuleList res_up{nullptr}, upsample{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(UNet);

/// ε_θ(z_t, t, cond). t is an int64 tensor [B].
using EpsilonPredictor =
    std::function<torch::Tensor(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionPack& cond)>;

/// ‖ε − ε_θ(z_t, t, c, s)‖² averaged over elements, for a supplied ε.
torch::Tensor reconstruction_loss(const EpsilonPredictor& model, const NoiseSchedule& schedule,
                                  const torch::Tensor& z0, const torch::Tensor& t, const ConditionPack& cond,
                                  const torch::Tensor& noise);

struct ReconstructionSample {
  torch::Tensor loss;
  torch::Tensor noise;  // the ε that was drawn
};

/// Draws ε ~ N(0, I) from `rng`, then evaluates the loss above.
ReconstructionSample reconstruction_loss(const EpsilonPredictor& model, const NoiseSchedule& schedule,
                                         const torch::Tensor& z0, const torch::Tensor& t,
                                         const ConditionPack& cond, Rng& rng);

/// ε_u + scale·(ε_c − ε_u). scale 1 returns ε_c and scale 0 returns ε_u exactly.
torch::Tensor cfg_combine(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double scale);

struct DdimOptions {
  std::int64_t steps = 50;
  double guidance_scale = 7.5;
  std::uint64_t seed = 0;
};

/// The seeded z_T that `ddim_sample` starts from.
torch::Tensor ddim_initial_noise(torch::IntArrayRef shape, std::uint64_t seed, torch::ScalarType dtype = torch::kFloat32);

/// Deterministic (η = 0) DDIM with classifier-free guidance, starting from
/// seeded Gaussian z_T of `shape`. `null_cond` feeds the unconditional branch.
torch::Tensor ddim_sample(const EpsilonPredictor& model, const NoiseSchedule& schedule, const ConditionPack& cond,
                          const ConditionPack& null_cond, torch::IntArrayRef shape, const DdimOptions& options,
                          torch::ScalarType dtype = torch::kFloat32);

}  // namespace csdiff
