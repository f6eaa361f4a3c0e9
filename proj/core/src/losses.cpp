#include "csdiff/losses.hpp"

#include <numeric>

#include <torch/nn/functional/loss.h>

namespace csdiff {
namespace {

constexpr double kMinNorm = 1e-12;

void require_rows(const torch::Tensor& image, const torch::Tensor& text, const char* op) {
  if (image.dim() != 2 || text.dim() != 2 || image.sizes() != text.sizes()) {
    throw InvalidArgument(std::string(op) + ": image and text embeddings must both be [N, d]");
  }
}

torch::Tensor unit_rows(const torch::Tensor& x) {
  auto norms = x.norm(2, -1, /*keepdim=*/true);
  if ((norms < kMinNorm).any().item<bool>()) throw InvalidArgument("zero-norm embedding");
  return x / norms;
}

}  // namespace

torch::Tensor cosine_similarity_checked(const torch::Tensor& a, const torch::Tensor& b) {
  return (unit_rows(a) * unit_rows(b)).sum(-1);
}

torch::Tensor itc_loss(const torch::Tensor& image_pooled, const torch::Tensor& text_pooled, double temperature) {
  require_rows(image_pooled, text_pooled, "itc_loss");
  const auto n = image_pooled.size(0);
  if (n < 2) throw InvalidArgument("itc_loss needs a batch of at least 2");
  if (!(temperature > 0.0)) throw InvalidArgument("itc_loss: temperature must be positive");
  auto logits = torch::matmul(unit_rows(image_pooled), unit_rows(text_pooled).t()) / temperature;
  auto image_to_text = torch::log_softmax(logits, 1).diagonal().sum();
  auto text_to_image = torch::log_softmax(logits.t(), 1).diagonal().sum();
  return -(image_to_text + text_to_image) / static_cast<double>(n);
}

std::vector<std::int64_t> random_derangement(std::int64_t n, Rng& rng) {
  if (n < 2) throw InvalidArgument("a derangement needs at least 2 elements");
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  for (;;) {
    std::iota(perm.begin(), perm.end(), 0);
    for (std::int64_t i = n - 1; i > 0; --i) {
      const auto j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
    }
    bool fixed_point = false;
    for (std::int64_t i = 0; i < n && !fixed_point; ++i) fixed_point = perm[static_cast<std::size_t>(i)] == i;
    if (!fixed_point) return perm;
  }
}

MatchPairs sample_itm_pairs(const torch::Tensor& image_pooled, const torch::Tensor& text_pooled, Rng& rng) {
  require_rows(image_pooled, text_pooled, "sample_itm_pairs");
  const auto n = image_pooled.size(0);
  if (n < 2) throw InvalidArgument("sample_itm_pairs needs a batch of at least 2");
  const auto perm = random_derangement(n, rng);
  auto index = torch::tensor(perm, torch::kInt64);
  MatchPairs pairs;
  pairs.image = torch::cat({image_pooled, image_pooled}, 0);
  pairs.text = torch::cat({text_pooled, text_pooled.index_select(0, index)}, 0);
  pairs.labels = torch::cat({torch::ones({n}, image_pooled.options()), torch::zeros({n}, image_pooled.options())});
  return pairs;
}

ItmHeadImpl::ItmHeadImpl() {
  weight = register_parameter("weight", torch::ones({}));
  bias = register_parameter("bias", torch::zeros({}));
}

torch::Tensor ItmHeadImpl::logits(const torch::Tensor& image, const torch::Tensor& text) {
  return weight * cosine_similarity_checked(image, text) + bias;
}

torch::Tensor ItmHeadImpl::probability(const torch::Tensor& image, const torch::Tensor& text) {
  return torch::sigmoid(logits(image, text));
}

ItmHeadsImpl::ItmHeadsImpl() {
  style = register_module("style", ItmHead());
  content = register_module("content", ItmHead());
}

torch::Tensor itm_loss(const MatchPairs& pairs, ItmHead& head) {
  if (pairs.size() < 1) throw InvalidArgument("itm_loss needs at least one pair");
  return torch::nn::functional::binary_cross_entropy_with_logits(head->logits(pairs.image, pairs.text),
                                                                 pairs.labels.to(pairs.image.scalar_type()));
}

ItgDecoderImpl::ItgDecoderImpl(std::int64_t dim, std::int64_t heads, std::int64_t block_count, std::int64_t vocab_size) {
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (std::int64_t i = 0; i < block_count; ++i) blocks->push_back(TransformerBlock(dim, heads));
  transform = register_module("transform", torch::nn::Linear(dim, dim));
  transform_norm = register_module("transform_norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  vocab = register_module("vocab", torch::nn::Linear(dim, vocab_size));
}

torch::Tensor ItgDecoderImpl::causal_prefix_mask(std::int64_t prefix_len, std::int64_t token_len) {
  const auto total = prefix_len + token_len;
  auto allowed = torch::zeros({total, total}, torch::kBool);
  allowed.slice(0, 0, prefix_len).slice(1, 0, prefix_len).fill_(true);
  allowed.slice(0, prefix_len).slice(1, 0, prefix_len).fill_(true);
  allowed.slice(0, prefix_len).slice(1, prefix_len).copy_(torch::ones({token_len, token_len}, torch::kBool).tril());
  return allowed;
}

torch::Tensor ItgDecoderImpl::forward(const torch::Tensor& prefix, const torch::Tensor& token_embeds) {
  if (prefix.dim() != 3 || token_embeds.dim() != 3 || prefix.size(0) != token_embeds.size(0) ||
      prefix.size(2) != token_embeds.size(2)) {
    throw InvalidArgument("decoder expects prefix [B, n, d] and tokens [B, M, d]");
  }
  const auto n_prefix = prefix.size(1);
  const auto allowed = causal_prefix_mask(n_prefix, token_embeds.size(1));
  auto x = torch::cat({prefix, token_embeds}, 1);
  for (const auto& block : *blocks) x = block->as<TransformerBlock>()->forward(x, allowed);
  auto h = x.slice(1, n_prefix);
  return vocab(transform_norm(torch::gelu(transform(h))));
}

ItgLoss itg_cross_entropy(const torch::Tensor& logits, const TokenBatch& tokens) {
  if (tokens.max_length() < 2) throw InvalidArgument("ITG needs sequences of at least 2 tokens");
  if (logits.size(0) != tokens.batch_size() || logits.size(1) != tokens.max_length()) {
    throw InvalidArgument("ITG logits do not match the token batch");
  }
  const auto m = tokens.max_length();
  auto log_probs = torch::log_softmax(logits.slice(1, 0, m - 1), -1);
  auto targets = tokens.ids.slice(1, 1);
  auto valid = tokens.mask.slice(1, 1).to(log_probs.scalar_type());
  auto nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1) * valid;
  ItgLoss out;
  out.sum = nll.sum(1).mean();
  out.per_token_mean = nll.sum() / valid.sum().clamp_min(1.0);
  return out;
}

ItgLoss itg_loss(ItgDecoder& decoder, TokenEmbedding& embedding, const torch::Tensor& prefix,
                 const TokenBatch& tokens) {
  if (tokens.max_length() < 2) throw InvalidArgument("ITG needs sequences of at least 2 tokens");
  return itg_cross_entropy(decoder(prefix, embedding(tokens.ids)), tokens);
}

std::string greedy_decode(ItgDecoder& decoder, TokenEmbedding& embedding, const Tokenizer& tokenizer,
                          const torch::Tensor& prefix) {
  torch::NoGradGuard guard;
  std::vector<std::int64_t> ids{kBosId};
  while (static_cast<int>(ids.size()) < tokenizer.max_len()) {
    auto input = torch::tensor(ids, torch::kInt64).unsqueeze(0);
    auto logits = decoder(prefix, embedding(input));
    const auto next = logits[0][-1].argmax().item<std::int64_t>();
    if (next == kEosId || next == kPadId) break;
    ids.push_back(next);
  }
  return tokenizer.detokenize(ids);
}

nlohmann::json LossBreakdown::to_json() const {
  auto v = [](const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; };
  return {{"L", v(total)},          {"L_s", v(style)},       {"L_c", v(content)},
          {"itc_s", v(itc_style)},  {"itm_s", v(itm_style)}, {"itg_s", v(itg_style)},
          {"itc_c", v(itc_content)}, {"itm_c", v(itm_content)}, {"itg_c", v(itg_content)}};
}

LossBreakdown disentangle_loss(const DisentangleModules& modules, const DisentangleInputs& inputs,
                               double temperature, Rng& rng) {
  if (inputs.images.size(0) < 2) throw InvalidArgument("disentangle_loss needs a batch of at least 2");
  auto& encoders = modules.encoders;
  auto& csdn = modules.csdn;

  auto visual = csdn->extract_visual(encoders->image(inputs.images));
  auto style_text = csdn->encode_text(encoders->tokens(inputs.style_tokens.ids), inputs.style_tokens.mask,
                                      TextMode::style);
  auto content_text = csdn->encode_text(encoders->tokens(inputs.content_tokens.ids), inputs.content_tokens.mask,
                                        TextMode::content);

  Rng style_rng = rng.split("itm.style");
  Rng content_rng = rng.split("itm.content");

  LossBreakdown out;
  out.itc_style = itc_loss(visual.style_pooled, style_text.pooled, temperature);
  out.itm_style = itm_loss(sample_itm_pairs(visual.style_pooled, style_text.pooled, style_rng), modules.itm->style);
  auto itg_s = itg_loss(modules.itg, encoders->tokens, visual.style_seq, inputs.style_tokens);
  out.itg_style = itg_s.sum;

  out.itc_content = itc_loss(visual.content_pooled, content_text.pooled, temperature);
  out.itm_content =
      itm_loss(sample_itm_pairs(visual.content_pooled, content_text.pooled, content_rng), modules.itm->content);
  auto itg_c = itg_loss(modules.itg, encoders->tokens, visual.content_seq, inputs.content_tokens);
  out.itg_content = itg_c.sum;

  out.style = out.itc_style + out.itm_style + out.itg_style;
  out.content = out.itc_content + out.itm_content + out.itg_content;
  out.total = out.style + out.content;
  out.itg_style_per_token = itg_s.per_token_mean.item<double>();
  out.itg_content_per_token = itg_c.per_token_mean.item<double>();
  return out;
}

}  // namespace csdiff
