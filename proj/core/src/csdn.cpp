#include "csdiff/csdn.hpp"

#include <torch/nn/init.h>

#include "csdiff/common.hpp"

namespace csdiff {

QueryBankImpl::QueryBankImpl(std::int64_t style_count, std::int64_t content_count, std::int64_t dim) {
  if (style_count < 1 || content_count < 1) throw InvalidArgument("query banks need at least one query each");
  style = register_parameter("style", torch::randn({style_count, dim}) * 0.5);
  content = register_parameter("content", torch::randn({content_count, dim}) * 0.5);
}

torch::Tensor pool(const torch::Tensor& seq) {
  if (seq.dim() < 2 || seq.size(-2) == 0) throw InvalidArgument("pool: need at least one row");
  return seq.mean(-2);
}

torch::Tensor masked_pool(const torch::Tensor& seq, const torch::Tensor& mask) {
  auto counts = mask.sum(1, /*keepdim=*/true);
  if ((counts == 0).any().item<bool>()) throw InvalidArgument("cannot pool a sequence with no real tokens");
  auto weights = mask.to(seq.scalar_type()).unsqueeze(-1);
  return (seq * weights).sum(1) / counts.to(seq.scalar_type());
}

QFormerImpl::QFormerImpl(const ModelConfig& config) : context_dim_(config.encoder_dim) {
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < config.qformer_blocks; ++i) {
    const bool cross = i % config.cross_attention_every == 0;
    blocks->push_back(TransformerBlock(config.query_dim, config.query_heads, cross ? config.encoder_dim : 0));
  }
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({config.query_dim})));
}

torch::Tensor QFormerImpl::forward_queries(const torch::Tensor& queries, const torch::Tensor& image_features) {
  auto x = queries;
  for (const auto& block : *blocks) x = block->as<TransformerBlock>()->forward(x, torch::Tensor(), image_features);
  return norm(x);
}

torch::Tensor QFormerImpl::forward_text(const torch::Tensor& token_embeds, const torch::Tensor& mask) {
  const auto allowed = key_padding_to_allowed(mask);
  auto x = token_embeds;
  for (const auto& block : *blocks) x = block->as<TransformerBlock>()->forward(x, allowed);
  return norm(x);
}

CsdnImpl::CsdnImpl(const ModelConfig& config) : joint_(config.joint_queries) {
  queries = register_module("queries", QueryBank(config.style_queries, config.content_queries, config.query_dim));
  qformer = register_module("qformer", QFormer(config));
}

DisentangledEmbeddings CsdnImpl::extract_visual(const torch::Tensor& image_features) {
  auto features = image_features.dim() == 2 ? image_features.unsqueeze(0) : image_features;
  if (features.dim() != 3 || features.size(2) != qformer->context_dim()) {
    throw InvalidArgument("image features must be [B, n, " + std::to_string(qformer->context_dim()) + "]");
  }
  const auto batch = features.size(0);
  const auto n_style = queries->style.size(0);
  const auto dim = queries->style.size(1);
  DisentangledEmbeddings out;
  if (joint_) {
    auto joint = torch::cat({queries->style, queries->content}, 0).unsqueeze(0).expand({batch, -1, dim});
    auto processed = qformer->forward_queries(joint, features);
    out.style_seq = processed.slice(1, 0, n_style);
    out.content_seq = processed.slice(1, n_style);
  } else {
    out.style_seq = qformer->forward_queries(queries->style.unsqueeze(0).expand({batch, -1, dim}), features);
    out.content_seq = qformer->forward_queries(queries->content.unsqueeze(0).expand({batch, -1, dim}), features);
  }
  out.style_pooled = pool(out.style_seq);
  out.content_pooled = pool(out.content_seq);
  return out;
}

TextEmbedding CsdnImpl::encode_text(const torch::Tensor& token_embeds, const torch::Tensor& mask, TextMode mode) {
  if (token_embeds.dim() != 3 || token_embeds.size(2) != queries->style.size(1)) {
    throw InvalidArgument("token embeddings must be [B, M, query_dim]");
  }
  TextEmbedding out;
  out.seq = qformer->forward_text(token_embeds, mask);
  out.pooled = masked_pool(out.seq, mask);
  out.mode = mode;
  return out;
}

ProjectionHeadImpl::ProjectionHeadImpl(std::int64_t in_dim, std::int64_t out_dim) : in_dim_(in_dim) {
  linear = register_module("linear", torch::nn::Linear(in_dim, out_dim));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& e) {
  if (e.size(-1) != in_dim_) {
    throw InvalidArgument("projection expects last dimension " + std::to_string(in_dim_) + ", got " +
                          std::to_string(e.size(-1)));
  }
  return linear(e);
}

void ProjectionHeadImpl::set_identity() {
  if (linear->weight.size(0) != linear->weight.size(1)) throw InvalidArgument("identity needs a square projection");
  torch::NoGradGuard guard;
  linear->weight.copy_(torch::eye(in_dim_, linear->weight.options()));
  linear->bias.zero_();
}

ProjectionsImpl::ProjectionsImpl(std::int64_t in_dim, std::int64_t out_dim) {
  style = register_module("style", ProjectionHead(in_dim, out_dim));
  content = register_module("content", ProjectionHead(in_dim, out_dim));
}

torch::Tensor ProjectionsImpl::project(const torch::Tensor& e, Head head) {
  return head == Head::style ? style(e) : content(e);
}

}  // namespace csdiff
