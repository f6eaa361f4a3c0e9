#include "csdiff/tokenizer.hpp"

#include <algorithm>

#include "csdiff/common.hpp"

namespace csdiff {

Tokenizer::Tokenizer(int max_len) : max_len_(max_len) {
  if (max_len < 3) throw InvalidArgument("tokenizer max_len must be at least 3");
}

TokenSequence Tokenizer::tokenize(std::string_view text) const {
  const std::string trimmed = trim(text);
  if (trimmed.empty()) throw InvalidArgument("cannot tokenize empty text");
  const std::size_t keep = std::min<std::size_t>(trimmed.size(), static_cast<std::size_t>(max_len_ - 2));
  TokenSequence seq;
  seq.ids.reserve(keep + 2);
  seq.ids.push_back(kBosId);
  for (std::size_t i = 0; i < keep; ++i) seq.ids.push_back(static_cast<unsigned char>(trimmed[i]));
  seq.ids.push_back(kEosId);
  return seq;
}

std::string Tokenizer::detokenize(std::span<const std::int64_t> ids) const {
  std::string out;
  for (std::int64_t id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

TokenBatch Tokenizer::batch(const std::vector<std::string>& texts) const {
  std::vector<TokenSequence> sequences;
  sequences.reserve(texts.size());
  for (const auto& text : texts) sequences.push_back(tokenize(text));
  return make_token_batch(sequences);
}

TokenBatch make_token_batch(std::span<const TokenSequence> sequences, std::int64_t pad_to) {
  if (sequences.empty()) throw InvalidArgument("make_token_batch: empty batch");
  std::int64_t width = pad_to;
  for (const auto& seq : sequences) width = std::max(width, seq.length());
  const auto batch = static_cast<std::int64_t>(sequences.size());
  auto ids = torch::full({batch, width}, kPadId, torch::kInt64);
  auto mask = torch::zeros({batch, width}, torch::kBool);
  auto ids_a = ids.accessor<std::int64_t, 2>();
  auto mask_a = mask.accessor<bool, 2>();
  for (std::int64_t b = 0; b < batch; ++b) {
    const auto& seq = sequences[static_cast<std::size_t>(b)];
    for (std::int64_t m = 0; m < seq.length(); ++m) {
      ids_a[b][m] = seq.ids[static_cast<std::size_t>(m)];
      mask_a[b][m] = seq.ids[static_cast<std::size_t>(m)] != kPadId;
    }
  }
  return {ids, mask};
}

}  // namespace csdiff
