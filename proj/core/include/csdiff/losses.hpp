#pragma once

#include <string>

#include <json.hpp>
#include <torch/nn/module.h>
#include <torch/nn/modules/container/modulelist.h>
#include <torch/nn/modules/linear.h>
#include <torch/nn/modules/normalization.h>

#include "csdiff/common.hpp"
#include "csdiff/csdn.hpp"
#include "csdiff/encoders.hpp"
#include "csdiff/tokenizer.hpp"

namespace csdiff {

/// Symmetric InfoNCE over cosine similarities:
///   L = −(1/N) Σ_n [ log softmax_j(cos(I_n,T_j)/τ)_n + log softmax_j(cos(T_n,I_j)/τ)_n ]
/// Inputs are [N, d] with N ≥ 2 and no zero-norm rows.
torch::Tensor itc_loss(const torch::Tensor& image_pooled, const torch::Tensor& text_pooled, double temperature);

/// Row-aligned image/text pairs with binary match labels.
struct MatchPairs {
  torch::Tensor image;   // [P, d]
  torch::Tensor text;    // [P, d]
  torch::Tensor labels;  // [P], 1 = match
  std::int64_t size() const { return labels.size(0); }
};

/// The N aligned pairs (label 1) followed by N negatives that pair image i
/// with text π(i) for a uniformly drawn derangement π (label 0).
MatchPairs sample_itm_pairs(const torch::Tensor& image_pooled, const torch::Tensor& text_pooled, Rng& rng);

/// Uniformly random permutation of 0..n-1 without fixed points (n ≥ 2).
std::vector<std::int64_t> random_derangement(std::int64_t n, Rng& rng);

/// P(match) = sigmoid(weight · cos(image, text) + bias).
class ItmHeadImpl : public torch::nn::Module {
 public:
  ItmHeadImpl();

  torch::Tensor logits(const torch::Tensor& image, const torch::Tensor& text);
  torch::Tensor probability(const torch::Tensor& image, const torch::Tensor& text);

  torch::Tensor weight;  // scalar
  torch::Tensor bias;    // scalar
};
TORCH_MODULE(ItmHead);

/// Parameter group `itm.*`: one classifier per factor.
class ItmHeadsImpl : public torch::nn::Module {
 public:
  ItmHeadsImpl();
  ItmHead style{nullptr};
  ItmHead content{nullptr};
};
TORCH_MODULE(ItmHeads);

/// Mean binary cross-entropy of the head's match probabilities.
torch::Tensor itm_loss(const MatchPairs& pairs, ItmHead& head);

/// Cosine similarity along the last axis; throws on zero-norm rows.
torch::Tensor cosine_similarity_checked(const torch::Tensor& a, const torch::Tensor& b);

/// Causal prefix decoder (parameter group `itg.*`).
///
/// The sequence is [prefix; tokens]. Prefix positions see only the prefix;
/// token position m sees the whole prefix and tokens 0..m. Hidden states go
/// through a dense → GELU → LayerNorm transform and a vocabulary projection.
class ItgDecoderImpl : public torch::nn::Module {
 public:
  ItgDecoderImpl(std::int64_t dim, std::int64_t heads, std::int64_t blocks, std::int64_t vocab);

  /// prefix [B, n_q, d], token_embeds [B, M, d] -> logits [B, M, vocab];
  /// row m scores the token that follows position m.
  torch::Tensor forward(const torch::Tensor& prefix, const torch::Tensor& token_embeds);

  static torch::Tensor causal_prefix_mask(std::int64_t prefix_len, std::int64_t token_len);

  torch::nn::ModuleList blocks{nullptr};
  torch::nn::Linear transform{nullptr};
  torch::nn::LayerNorm transform_norm{nullptr};
  torch::nn::Linear vocab{nullptr};
};
TORCH_MODULE(ItgDecoder);

struct ItgLoss {
  torch::Tensor sum;             // batch mean of per-sequence summed cross-entropy
  torch::Tensor per_token_mean;  // mean over every non-PAD target (logging only)
};

/// Teacher-forced next-token cross-entropy of `tokens` given per-position
/// logits; targets are ids[1..M) and PAD targets are excluded.
ItgLoss itg_cross_entropy(const torch::Tensor& logits, const TokenBatch& tokens);

/// Runs the decoder on [prefix; embed(ids)] then scores the shifted targets.
ItgLoss itg_loss(ItgDecoder& decoder, TokenEmbedding& embedding, const torch::Tensor& prefix,
                 const TokenBatch& tokens);

/// Greedy text generation from a single prefix [1, n_q, d] for inspection.
std::string greedy_decode(ItgDecoder& decoder, TokenEmbedding& embedding, const Tokenizer& tokenizer,
                          const torch::Tensor& prefix);

/// The six terms and their sums as differentiable scalars.
struct LossBreakdown {
  torch::Tensor total, style, content;
  torch::Tensor itc_style, itm_style, itg_style;
  torch::Tensor itc_content, itm_content, itg_content;
  // per-token ITG means, for logging
  double itg_style_per_token = 0.0, itg_content_per_token = 0.0;

  /// {L, L_s, L_c, itc_s, itm_s, itg_s, itc_c, itm_c, itg_c} as doubles.
  nlohmann::json to_json() const;
};

struct DisentangleModules {
  Encoders& encoders;
  Csdn& csdn;
  ItmHeads& itm;
  ItgDecoder& itg;
};

struct DisentangleInputs {
  torch::Tensor images;  // [N, C, S, S]
  TokenBatch style_tokens;
  TokenBatch content_tokens;
};

/// L = L_s + L_c, with L_x = ITC + ITM + ITG for factor x. `rng` draws the
/// ITM negatives (one stream for style, one for content).
LossBreakdown disentangle_loss(const DisentangleModules& modules, const DisentangleInputs& inputs,
                               double temperature, Rng& rng);

}  // namespace csdiff
