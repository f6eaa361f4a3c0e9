#pragma once

#include <torch/nn/module.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/normalization.h>
#include <torch/nn/pimpl.h>

namespace csdiff {

/// softmax(q·kᵀ/√d_head)·v over [B, H, n, d_head] tensors.
///
/// `allowed` is a boolean mask broadcastable to [B, H, n_q, n_k]; false
/// entries are excluded from the softmax. Every query row must keep at
/// least one key.
torch::Tensor attend(const torch::Tensor& q, const torch::Tensor& k, const torch::Tensor& v,
                     const torch::Tensor& allowed = {});

/// [B, n, H·d] -> [B, H, n, d]
torch::Tensor split_heads(const torch::Tensor& x, std::int64_t heads);
/// [B, H, n, d] -> [B, n, H·d]
torch::Tensor merge_heads(const torch::Tensor& x);

/// Expands a [B, n_k] key padding mask to broadcast against [B, H, n_q, n_k].
torch::Tensor key_padding_to_allowed(const torch::Tensor& key_mask);

class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(std::int64_t dim, std::int64_t heads, std::int64_t context_dim = 0);

  /// Self-attention when `context` is undefined.
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context = {},
                        const torch::Tensor& allowed = {});

  std::int64_t heads() const { return heads_; }

 private:
  std::int64_t heads_;
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
};
TORCH_MODULE(MultiHeadAttention);

class FeedForwardImpl : public torch::nn::Module {
 public:
  FeedForwardImpl(std::int64_t dim, std::int64_t mult = 4);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Linear in{nullptr}, out{nullptr};
};
TORCH_MODULE(FeedForward);

/// Pre-norm transformer block: self-attention, optional cross-attention to a
/// context sequence, feed-forward. The cross-attention sublayer is skipped
/// when no context is passed, which is how the text path shares weights with
/// the query path.
class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(std::int64_t dim, std::int64_t heads, std::int64_t context_dim = 0);

  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& self_allowed = {},
                        const torch::Tensor& context = {});

  bool has_cross_attention() const { return !cross_attn.is_empty(); }

 private:
  torch::nn::LayerNorm norm_self{nullptr}, norm_cross{nullptr}, norm_ff{nullptr};
  MultiHeadAttention self_attn{nullptr}, cross_attn{nullptr};
  FeedForward ff{nullptr};
};
TORCH_MODULE(TransformerBlock);

}  // namespace csdiff
