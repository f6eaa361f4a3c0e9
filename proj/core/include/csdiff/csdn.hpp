#pragma once

#include <torch/nn/module.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/normalization.h>

#include "csdiff/attention.hpp"
#include "csdiff/encoders.hpp"
#include "csdiff/model_config.hpp"

namespace csdiff {

enum class TextMode { style, content };
enum class Head { style, content };

/// Two physically separate sets of learnable queries.
class QueryBankImpl : public torch::nn::Module {
 public:
  QueryBankImpl(std::int64_t style_count, std::int64_t content_count, std::int64_t dim);

  torch::Tensor style;    // [n_qs, d]
  torch::Tensor content;  // [n_qc, d]
};
TORCH_MODULE(QueryBank);

/// Outputs of the query path for a batch of images. Pooled rows are the mean
/// of their sequence rows.
struct DisentangledEmbeddings {
  torch::Tensor style_seq;       // I_s sequence [B, n_qs, d]
  torch::Tensor content_seq;     // I_c sequence [B, n_qc, d]
  torch::Tensor style_pooled;    // I_s [B, d]
  torch::Tensor content_pooled;  // I_c [B, d]
};

struct TextEmbedding {
  torch::Tensor seq;     // [B, M, d]
  torch::Tensor pooled;  // [B, d], mean over non-PAD positions
  TextMode mode = TextMode::content;
};

/// Mean over the row axis (-2). Throws when there are no rows.
torch::Tensor pool(const torch::Tensor& seq);
/// Mean over rows where `mask` is true; `mask` is [B, n]. Throws on an all-false row.
torch::Tensor masked_pool(const torch::Tensor& seq, const torch::Tensor& mask);

/// Querying transformer. The query path runs self-attention across all
/// queries plus cross-attention to image features; the text path reuses the
/// same self-attention and feed-forward weights without cross-attention.
class QFormerImpl : public torch::nn::Module {
 public:
  explicit QFormerImpl(const ModelConfig& config);

  torch::Tensor forward_queries(const torch::Tensor& queries, const torch::Tensor& image_features);
  torch::Tensor forward_text(const torch::Tensor& token_embeds, const torch::Tensor& mask);

  std::int64_t context_dim() const { return context_dim_; }

 private:
  std::int64_t context_dim_;
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(QFormer);

/// Parameter group `csdn.*`: query banks plus the querying transformer.
class CsdnImpl : public torch::nn::Module {
 public:
  explicit CsdnImpl(const ModelConfig& config);

  /// F_I [B, n_patches, d_enc] (or [n_patches, d_enc]) -> I_s / I_c. Rows
  /// 0..n_qs-1 of the joint output become the style sequence, the rest the
  /// content sequence. Externally computed feature grids can be passed here
  /// directly in place of the built-in image encoder.
  DisentangledEmbeddings extract_visual(const torch::Tensor& image_features);

  /// T_s or T_c from embedded tokens. `mode` only labels the result.
  TextEmbedding encode_text(const torch::Tensor& token_embeds, const torch::Tensor& mask, TextMode mode);

  QueryBank queries{nullptr};
  QFormer qformer{nullptr};

 private:
  bool joint_;
};
TORCH_MODULE(Csdn);

/// Row-wise affine map from the query width to the denoiser's condition width.
class ProjectionHeadImpl : public torch::nn::Module {
 public:
  ProjectionHeadImpl(std::int64_t in_dim, std::int64_t out_dim);

  /// [..., d_q] -> [..., d_sd]
  torch::Tensor forward(const torch::Tensor& e);
  /// Weight ← I, bias ← 0. Requires a square projection.
  void set_identity();

  torch::nn::Linear linear{nullptr};

 private:
  std::int64_t in_dim_;
};
TORCH_MODULE(ProjectionHead);

/// Parameter group `proj.*`: separate style and content heads.
class ProjectionsImpl : public torch::nn::Module {
 public:
  ProjectionsImpl(std::int64_t in_dim, std::int64_t out_dim);

  torch::Tensor project(const torch::Tensor& e, Head head);

  ProjectionHead style{nullptr};
  ProjectionHead content{nullptr};
};
TORCH_MODULE(Projections);

}  // namespace csdiff
