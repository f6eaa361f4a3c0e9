#pragma once

#include <torch/nn/module.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/conv.h>
#include <torch/nn/modules/embedding.h>
#include <torch/nn/modules/normalization.h>

#include "csdiff/attention.hpp"
#include "csdiff/model_config.hpp"
#include "csdiff/tokenizer.hpp"

namespace csdiff {

/// F_I for one image: [n_patches, d_enc].
struct ImageFeatureGrid {
  torch::Tensor features;
  std::int64_t n_patches = 0;
  std::int64_t d_enc = 0;
};

/// Patch embedding followed by a small pre-norm self-attention stack.
class ImageEncoderImpl : public torch::nn::Module {
 public:
  explicit ImageEncoderImpl(const ModelConfig& config);

  /// [B, C, S, S] -> [B, n_patches, d_enc]
  torch::Tensor forward(const torch::Tensor& images);
  /// Single-image convenience: [C, S, S] -> ImageFeatureGrid.
  ImageFeatureGrid encode(const torch::Tensor& image);

 private:
  std::int64_t channels_, image_size_, patch_size_, dim_;
  torch::nn::Conv2d patchify{nullptr};
  torch::Tensor position;
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(ImageEncoder);

/// Shared token table with learned absolute positions.
class TokenEmbeddingImpl : public torch::nn::Module {
 public:
  TokenEmbeddingImpl(std::int64_t vocab, std::int64_t max_len, std::int64_t dim);

  /// [B, M] int64 -> [B, M, dim]; row m = table[ids[m]] + position[m].
  torch::Tensor forward(const torch::Tensor& ids);

  torch::nn::Embedding table{nullptr};
  torch::Tensor position;

 private:
  std::int64_t vocab_, max_len_;
};
TORCH_MODULE(TokenEmbedding);

/// Parameter group `encoders.*`.
class EncodersImpl : public torch::nn::Module {
 public:
  explicit EncodersImpl(const ModelConfig& config);

  ImageEncoder image{nullptr};
  TokenEmbedding tokens{nullptr};
};
TORCH_MODULE(Encoders);

}  // namespace csdiff
