#pragma once

#include <string>
#include <vector>

#include <torch/nn/module.h>

#include "csdiff/csdn.hpp"
#include "csdiff/diffusion.hpp"
#include "csdiff/encoders.hpp"
#include "csdiff/losses.hpp"
#include "csdiff/model_config.hpp"
#include "csdiff/tokenizer.hpp"

namespace csdiff {

/// Parameter group `null.*`: learned unconditional sequences for CFG.
class NullEmbeddingsImpl : public torch::nn::Module {
 public:
  NullEmbeddingsImpl(std::int64_t content_rows, std::int64_t style_rows, std::int64_t dim);
  torch::Tensor content;  // [n_qc, d_sd]
  torch::Tensor style;    // [n_qs, d_sd]
};
TORCH_MODULE(NullEmbeddings);

/// Names of the checkpoint parameter groups, in archive order.
const std::vector<std::string>& parameter_groups();

/// Every network of the pipeline under one module tree. Top-level child
/// names are the checkpoint group prefixes.
class ModelImpl : public torch::nn::Module {
 public:
  explicit ModelImpl(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  Tokenizer tokenizer() const { return Tokenizer(static_cast<int>(config_.max_text_len)); }
  DisentangleModules disentangle_modules() { return {encoders, csdn, itm, itg}; }

  /// Parameters whose qualified name starts with `group.`.
  std::vector<torch::Tensor> group_parameters(const std::string& group) const;

  /// e_s / e_c sequences from images [B, C, S, S].
  DisentangledEmbeddings embed_images(const torch::Tensor& images);
  /// Pooled text embedding tiled to `rows` rows: [B, rows, d_q].
  torch::Tensor embed_text_tiled(const TokenBatch& tokens, TextMode mode, std::int64_t rows);
  torch::Tensor style_from_text(const TokenBatch& tokens);
  torch::Tensor content_from_text(const TokenBatch& tokens);

  /// c = [backbone text features; proj_c(e_c)] with a key mask. Either part
  /// may be absent (undefined tokens pointer / tensor) but not both.
  ConditionPack build_content_condition(const TokenBatch* content_tokens, const torch::Tensor& e_c);
  /// Same, with text features coming from an external encoder ([B, L, d_sd]).
  ConditionPack build_content_condition(const torch::Tensor& text_features, const torch::Tensor& text_mask,
                                        const torch::Tensor& e_c);
  /// Sets s = proj_s(e_s), or the learned null style when `e_s` is undefined.
  ConditionPack attach_style(ConditionPack pack, const torch::Tensor& e_s);
  /// Both sequences replaced by the learned null embeddings.
  ConditionPack null_condition(std::int64_t batch);

  /// Images [B, C, S, S] average-pooled to the latent resolution; the
  /// denoiser works on downsampled images in place of autoencoder latents.
  torch::Tensor latents_from_images(const torch::Tensor& images) const;

  torch::Tensor predict_epsilon(const torch::Tensor& z_t, const torch::Tensor& t, const ConditionPack& cond,
                                UNetTrace* trace = nullptr, bool ablate_middle = false);
  EpsilonPredictor epsilon_predictor(bool ablate_middle = false);

  Encoders encoders{nullptr};
  Csdn csdn{nullptr};
  ItmHeads itm{nullptr};
  ItgDecoder itg{nullptr};
  Projections proj{nullptr};
  MclStack mcl{nullptr};
  UNet unet{nullptr};
  NullEmbeddings null{nullptr};

 private:
  ModelConfig config_;
};
TORCH_MODULE(Model);

}  // namespace csdiff
