#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace actdec {

using TokenId = std::uint32_t;

class TokenizeError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Byte-level tokenizer with greedy longest-match over the vocabulary strings.
///
/// When every single byte value is present in the vocabulary the tokenizer is
/// total and decode(encode(x)) == x for every byte string. Vocabularies
/// without full byte coverage (tiny test models) throw TokenizeError on input
/// they cannot cover.
class Tokenizer {
public:
  Tokenizer() = default;
  explicit Tokenizer(std::vector<std::string> vocab);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> tokens) const;

  const std::string& token_text(TokenId id) const { return vocab_.at(id); }
  std::size_t size() const { return vocab_.size(); }
  const std::vector<std::string>& vocab() const { return vocab_; }

  bool covers_all_bytes() const { return byte_coverage_ == 256; }
  std::optional<TokenId> find(std::string_view piece) const;

  /// Id of the end-of-sequence entry (kEndOfText), if the vocabulary has one.
  std::optional<TokenId> eos() const { return find(kEndOfText); }

  static constexpr std::string_view kEndOfText = "<|endoftext|>";

private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_piece_len_ = 0;
  std::size_t byte_coverage_ = 0;
};

/// Deterministic vocabulary used by generated models: the 256 single bytes,
/// then the end-of-text marker, then common English pieces and letter n-grams
/// until `vocab_size` entries exist. Sizes below 256 keep only the first
/// `vocab_size` byte values.
std::vector<std::string> default_vocabulary(std::size_t vocab_size);

}  // namespace actdec
