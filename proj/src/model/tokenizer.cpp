#include "actdec/tokenizer.hpp"

#include <array>
#include <unordered_set>

namespace actdec {

Tokenizer::Tokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
  index_.reserve(vocab_.size());
  for (std::size_t id = 0; id < vocab_.size(); ++id) {
    const auto& piece = vocab_[id];
    if (piece.empty()) continue;
    // First occurrence wins for duplicate strings.
    if (index_.emplace(piece, static_cast<TokenId>(id)).second) {
      max_piece_len_ = std::max(max_piece_len_, piece.size());
      if (piece.size() == 1) ++byte_coverage_;
    }
  }
}

std::optional<TokenId> Tokenizer::find(std::string_view piece) const {
  if (auto it = index_.find(std::string(piece)); it != index_.end()) return it->second;
  return std::nullopt;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::string probe;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t longest = std::min(max_piece_len_, text.size() - pos);
    bool matched = false;
    for (std::size_t len = longest; len >= 1; --len) {
      probe.assign(text.substr(pos, len));
      if (auto it = index_.find(probe); it != index_.end()) {
        out.push_back(it->second);
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) {
      throw TokenizeError("byte " + std::to_string(static_cast<unsigned char>(text[pos])) +
                          " at offset " + std::to_string(pos) + " is not in the vocabulary");
    }
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> tokens) const {
  std::string out;
  for (TokenId id : tokens) {
    if (id >= vocab_.size()) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab_.size()));
    }
    out += vocab_[id];
  }
  return out;
}

namespace {

constexpr std::array kCommonPieces = {
    " the", " of", " and", " to", " in", " is", " was", " for", " on", " as",
    " by", " with", " that", " at", " from", " his", " her", " it", " an", " are",
    " which", " be", " has", " born", " city", " capital", " owned", " located", " died", " language",
    " native", " country", " music", " team", " plays", " works", " speaks", " official", " name", " known",
    "The", "ing", "ed", "er", "ion", "es", "ly", "ent", "al", "an",
    "ar", "or", "on", "en", "re", "st", "th", "he", "in", "at",
    " Paris", " Rome", " London", " Berlin", " Tokyo", " France", " Italy", " Japan", " English", " French",
};

}  // namespace

std::vector<std::string> default_vocabulary(std::size_t vocab_size) {
  std::vector<std::string> vocab;
  vocab.reserve(vocab_size);
  for (std::size_t b = 0; b < 256 && vocab.size() < vocab_size; ++b) {
    vocab.emplace_back(1, static_cast<char>(b));
  }
  if (vocab.size() >= vocab_size) return vocab;

  std::unordered_set<std::string> seen(vocab.begin(), vocab.end());
  auto push = [&](std::string piece) {
    if (vocab.size() < vocab_size && seen.insert(piece).second) vocab.push_back(std::move(piece));
  };
  push(std::string(Tokenizer::kEndOfText));
  for (auto piece : kCommonPieces) push(std::string(piece));
  for (char c = 'a'; c <= 'z'; ++c) push(std::string(" ") + c);
  for (char c = 'A'; c <= 'Z'; ++c) push(std::string(" ") + c);
  for (char a = 'a'; a <= 'z'; ++a) {
    for (char b = 'a'; b <= 'z'; ++b) push(std::string{a, b});
  }
  // Letter triples are enough to fill any practical desk-scale vocabulary
  // (256 + 1 + ~70 + 52 + 676 + 17576 entries).
  for (char a = 'a'; a <= 'z'; ++a) {
    for (char b = 'a'; b <= 'z'; ++b) {
      for (char c = 'a'; c <= 'z'; ++c) push(std::string{a, b, c});
    }
  }
  for (std::size_t n = 0; vocab.size() < vocab_size; ++n) push("<|extra_" + std::to_string(n) + "|>");
  return vocab;
}

}  // namespace actdec
