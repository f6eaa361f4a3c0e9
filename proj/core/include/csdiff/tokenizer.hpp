#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/types.h>

namespace csdiff {

// Byte-level vocabulary: 256 byte values plus three specials.
inline constexpr std::int64_t kBosId = 256;
inline constexpr std::int64_t kEosId = 257;
inline constexpr std::int64_t kPadId = 258;
inline constexpr std::int64_t kVocabSize = 259;

/// BOS, bytes..., EOS (unpadded).
struct TokenSequence {
  std::vector<std::int64_t> ids;

  std::int64_t length() const { return static_cast<std::int64_t>(ids.size()); }
  bool operator==(const TokenSequence&) const = default;
};

/// Right-padded batch. `mask` is true on real (non-PAD) positions.
struct TokenBatch {
  torch::Tensor ids;   // [B, L] int64
  torch::Tensor mask;  // [B, L] bool

  std::int64_t batch_size() const { return ids.size(0); }
  std::int64_t max_length() const { return ids.size(1); }
};

class Tokenizer {
 public:
  explicit Tokenizer(int max_len = 32);

  int max_len() const { return max_len_; }

  /// Trims, then encodes bytes between BOS and EOS. Over-long text is cut so
  /// that the sequence is exactly max_len long and still ends with EOS.
  TokenSequence tokenize(std::string_view text) const;
  /// Concatenates the byte tokens, skipping specials.
  std::string detokenize(std::span<const std::int64_t> ids) const;
  TokenBatch batch(const std::vector<std::string>& texts) const;

 private:
  int max_len_;
};

/// Pads sequences with PAD to the longest one (or to `pad_to` when larger).
TokenBatch make_token_batch(std::span<const TokenSequence> sequences, std::int64_t pad_to = 0);

}  // namespace csdiff
