#include "csdiff/encoders.hpp"

#include "csdiff/common.hpp"

namespace csdiff {

ImageEncoderImpl::ImageEncoderImpl(const ModelConfig& config)
    : channels_(config.image_channels),
      image_size_(config.image_size),
      patch_size_(config.patch_size),
      dim_(config.encoder_dim) {
  if (image_size_ % patch_size_ != 0) {
    throw InvalidArgument("image size " + std::to_string(image_size_) + " is not divisible by patch size " +
                          std::to_string(patch_size_));
  }
  patchify = register_module(
      "patchify", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels_, dim_, patch_size_).stride(patch_size_)));
  position = register_parameter("position", torch::randn({config.patches(), dim_}) * 0.02);
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < config.encoder_blocks; ++i) blocks->push_back(TransformerBlock(dim_, config.encoder_heads));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim_})));
}

torch::Tensor ImageEncoderImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != channels_) {
    throw InvalidArgument("image encoder expects [B," + std::to_string(channels_) + ",S,S] input");
  }
  if (images.size(2) % patch_size_ != 0 || images.size(3) % patch_size_ != 0) {
    throw InvalidArgument("image side " + std::to_string(images.size(2)) + " is not divisible by patch size " +
                          std::to_string(patch_size_));
  }
  if (images.size(2) != image_size_ || images.size(3) != image_size_) {
    throw InvalidArgument("image encoder was built for " + std::to_string(image_size_) + "x" +
                          std::to_string(image_size_) + " images");
  }
  auto x = patchify(images).flatten(2).transpose(1, 2) + position;
  for (const auto& block : *blocks) x = block->as<TransformerBlock>()->forward(x);
  return norm(x);
}

ImageFeatureGrid ImageEncoderImpl::encode(const torch::Tensor& image) {
  if (image.dim() != 3) throw InvalidArgument("encode expects a [C,S,S] image");
  auto features = forward(image.unsqueeze(0)).squeeze(0);
  return {features, features.size(0), features.size(1)};
}

TokenEmbeddingImpl::TokenEmbeddingImpl(std::int64_t vocab, std::int64_t max_len, std::int64_t dim)
    : vocab_(vocab), max_len_(max_len) {
  table = register_module("table", torch::nn::Embedding(vocab, dim));
  position = register_parameter("position", torch::randn({max_len, dim}) * 0.02);
}

torch::Tensor TokenEmbeddingImpl::forward(const torch::Tensor& ids) {
  if (ids.dim() != 2) throw InvalidArgument("token ids must be [B, M]");
  if (ids.size(1) > max_len_) {
    throw InvalidArgument("token sequence of length " + std::to_string(ids.size(1)) + " exceeds max length " +
                          std::to_string(max_len_));
  }
  if (ids.numel() > 0 && (ids.min().item<std::int64_t>() < 0 || ids.max().item<std::int64_t>() >= vocab_)) {
    throw InvalidArgument("token id out of range [0, " + std::to_string(vocab_) + ")");
  }
  return table(ids) + position.slice(0, 0, ids.size(1));
}

EncodersImpl::EncodersImpl(const ModelConfig& config) {
  image = register_module("image", ImageEncoder(config));
  tokens = register_module("tokens", TokenEmbedding(kVocabSize, config.max_text_len, config.query_dim));
}

}  // namespace csdiff
