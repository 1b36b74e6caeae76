#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "actdec/activation.hpp"
#include "actdec/model.hpp"

namespace actdec {

// ---- records ----------------------------------------------------------------

/// Half-open [start, end) range of Unicode code points in the prompt.
struct CharSpan {
  std::size_t start = 0;
  std::size_t end = 0;
};

struct DetectionRecord {
  std::string prompt;
  std::string answer_true;
  std::string answer_false;
  std::optional<CharSpan> subject;
  std::optional<std::string> gold;
  std::optional<bool> label;  // correctness of the model's answer
  std::size_t line = 0;       // 1-based source line, 0 when built in code
};

struct ScoredPair {
  double score_true = 0.0;
  double score_false = 0.0;
  std::string scorer;
};

struct ConfusionCounts {
  std::size_t activated_correct = 0;
  std::size_t activated_incorrect = 0;
  std::size_t unactivated_correct = 0;
  std::size_t unactivated_incorrect = 0;

  std::size_t total() const {
    return activated_correct + activated_incorrect + unactivated_correct + unactivated_incorrect;
  }
  double activated_rate_correct() const;
  double activated_rate_incorrect() const;

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct EvalReport {
  std::map<std::string, double> auroc;
  std::optional<double> em;
  std::optional<double> f1;
  std::optional<ConfusionCounts> confusion;
};

/// `{ "auroc": {...}, "em": x|null, "f1": x|null, "confusion": {...}|null }`
nlohmann::json to_json(const EvalReport& report);

class DatasetError : public std::runtime_error {
public:
  DatasetError(std::size_t line, const std::string& message);
  std::size_t line() const { return line_; }

private:
  std::size_t line_;
};

/// One JSON object per line; blank lines are skipped. Field types are
/// checked here, presence of task-specific fields by the require_* helpers.
std::vector<DetectionRecord> parse_dataset(std::istream& in);
std::vector<DetectionRecord> load_dataset(const std::string& path);

/// Throws DatasetError for the first record missing answer_true/answer_false
/// (or with an empty one) or with a subject span outside the prompt.
void require_detection_fields(std::span<const DetectionRecord> records);
/// Throws DatasetError for the first record without `gold`.
void require_qa_fields(std::span<const DetectionRecord> records);

// ---- scorers ----------------------------------------------------------------

/// Per-token log-probabilities and prompt-bound entropies of an answer.
struct AnswerScore {
  std::vector<double> log_probs;
  std::vector<double> entropies;

  double logit() const;
  double logit_entropy(double lambda) const;
};

/// One forward pass over prompt + answer. Entropies come from the prompt
/// positions only, at `layer`; pass layer 0 to skip them.
AnswerScore score_answer(const TinyTransformer& model, std::span<const TokenId> prompt,
                         std::span<const TokenId> answer, std::size_t layer, const ActivationOptions& options = {});

/// sum_k ln P(answer_k | prompt, answer_<k) from the final layer.
double logit_score(const TinyTransformer& model, std::span<const TokenId> prompt, std::span<const TokenId> answer);

/// sum_k [ ln P(answer_k | ...) - lambda * E(answer_k, prompt) ].
double logit_entropy_score(const TinyTransformer& model, std::span<const TokenId> prompt,
                           std::span<const TokenId> answer, double lambda, std::size_t layer);

/// Inclusive token index range.
struct TokenSpan {
  std::size_t first = 0;
  std::size_t last = 0;
};

/// Byte offset of the `index`-th code point of UTF-8 `text` (invalid bytes
/// count as one code point each; index == length maps to text.size()).
std::size_t utf8_byte_offset(std::string_view text, std::size_t index);

/// Smallest run of prompt tokens covering the byte range [begin, end).
/// Throws std::invalid_argument when the range is empty or outside the prompt.
TokenSpan covering_token_span(const Tokenizer& tokenizer, std::span<const TokenId> prompt, std::size_t byte_begin,
                              std::size_t byte_end);

/// s(i*, v) at `layer`, where i* is the last token of the subject span.
double subject_activation_score(const TinyTransformer& model, std::span<const TokenId> prompt, TokenSpan subject,
                                TokenId answer_first, std::size_t layer);

// ---- metrics ----------------------------------------------------------------

/// Mann-Whitney AUROC: fraction of (pos, neg) pairs with pos > neg, ties
/// counting one half. Throws std::invalid_argument on empty or non-finite input.
double auroc(std::span<const double> positive, std::span<const double> negative);

/// SQuAD normalization: lowercase, strip punctuation, drop a/an/the,
/// collapse whitespace.
std::string normalize_answer(std::string_view text);
bool exact_match(std::string_view prediction, std::string_view gold);
double f1_score(std::string_view prediction, std::string_view gold);

// ---- activation confusion ---------------------------------------------------

struct ConfusionItem {
  std::vector<TokenId> prompt;
  std::size_t subject_last = 0;  // token index of the last subject token
  TokenId answer_first = 0;
  bool correct = false;
};

ConfusionCounts activation_confusion(const TinyTransformer& model, std::span<const ConfusionItem> items,
                                     std::size_t layer, std::size_t k = kDefaultActivationTopK);

/// Builds confusion items from labelled records. The model's answer is
/// answer_true when `label` is true and answer_false otherwise. Throws
/// DatasetError when a record lacks a subject span or a label.
std::vector<ConfusionItem> confusion_items(const Tokenizer& tokenizer, std::span<const DetectionRecord> records);

// ---- planted-activation experiment ------------------------------------------

struct PlantedPair {
  std::vector<TokenId> prompt;
  std::size_t subject_pos = 0;
  TokenId answer_true = 0;
  TokenId answer_false = 0;
};

struct PlantedDataset {
  TinyTransformer model;
  std::vector<PlantedPair> pairs;
  std::size_t layer = 0;
};

struct SyntheticOptions {
  std::size_t pairs = 128;
  double lambda = 1.0;
};

/// Seeded model whose embeddings make each true answer sharply activated at
/// its subject position while the paired false answer stays diffuse; final-
/// layer probabilities of both answers are drawn from the same distribution.
PlantedDataset build_planted_dataset(std::uint64_t seed, std::size_t pairs);

/// Scores every planted pair with logit, logit_entropy, entropy and subject
/// scorers and reports their AUROCs and the activation confusion table.
EvalReport synthetic_detection_experiment(std::uint64_t seed, const SyntheticOptions& options = {});

}  // namespace actdec
