#include "csdiff/attention.hpp"

#include <cmath>
#include <limits>

#include <torch/nn/functional/activation.h>

#include "csdiff/common.hpp"

namespace csdiff {

torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                     const torch::Tensor& allowed) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size(-1)));
  auto scores = torch::matmul(q, k.transpose(-2, -1)) * scale;
  if (allowed.defined()) {
    scores = scores.masked_fill(allowed.logical_not(), -std::numeric_limits<double>::infinity());
  }
  return torch::matmul(torch::softmax(scores, -1), v);
}

torch::Tensor split_heads(const torch::Tensor& x, std::int64_t heads) {
  const auto b = x.size(0), n = x.size(1), d = x.size(2);
  return x.view({b, n, heads, d / heads}).transpose(1, 2);
}

torch::Tensor merge_heads(const torch::Tensor& x) {
  const auto b = x.size(0), h = x.size(1), n = x.size(2), d = x.size(3);
  return x.transpose(1, 2).reshape({b, n, h * d});
}

torch::Tensor key_padding_to_allowed(const torch::Tensor& key_mask) {
  return key_mask.unsqueeze(1).unsqueeze(1);
}

MultiHeadAttentionImpl::MultiHeadAttentionImpl(std::int64_t dim, std::int64_t heads, std::int64_t context_dim)
    : heads_(heads) {
  if (heads <= 0 || dim % heads != 0) {
    throw InvalidArgument("attention width " + std::to_string(dim) + " is not divisible by " +
                          std::to_string(heads) + " heads");
  }
  const std::int64_t kv_dim = context_dim > 0 ? context_dim : dim;
  to_q = register_module("to_q", torch::nn::Linear(dim, dim));
  to_k = register_module("to_k", torch::nn::Linear(kv_dim, dim));
  to_v = register_module("to_v", torch::nn::Linear(kv_dim, dim));
  to_out = register_module("to_out", torch::nn::Linear(dim, dim));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& context,
                                              const torch::Tensor& allowed) {
  const auto& source = context.defined() ? context : x;
  auto q = split_heads(to_q(x), heads_);
  auto k = split_heads(to_k(source), heads_);
  auto v = split_heads(to_v(source), heads_);
  return to_out(merge_heads(attend(q, k, v, allowed)));
}

FeedForwardImpl::FeedForwardImpl(std::int64_t dim, std::int64_t mult) {
  in = register_module("in", torch::nn::Linear(dim, dim * mult));
  out = register_module("out", torch::nn::Linear(dim * mult, dim));
}

torch::Tensor FeedForwardImpl::forward(const torch::Tensor& x) { return out(torch::gelu(in(x))); }

TransformerBlockImpl::TransformerBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t context_dim) {
  norm_self = register_module("norm_self", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  self_attn = register_module("self_attn", MultiHeadAttention(dim, heads));
  if (context_dim > 0) {
    norm_cross = register_module("norm_cross", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
    cross_attn = register_module("cross_attn", MultiHeadAttention(dim, heads, context_dim));
  }
  norm_ff = register_module("norm_ff", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ff = register_module("ff", FeedForward(dim));
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& self_allowed,
                                            const torch::Tensor& context) {
  auto h = x + self_attn(norm_self(x), torch::Tensor(), self_allowed);
  if (context.defined() && has_cross_attention()) h = h + cross_attn(norm_cross(h), context);
  return h + ff(norm_ff(h));
}

}  // namespace csdiff
