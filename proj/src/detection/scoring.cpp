#include <algorithm>
#include <cmath>

#include "actdec/detection.hpp"

namespace actdec {

double AnswerScore::logit() const {
  double sum = 0.0;
  for (double lp : log_probs) sum += lp;
  return sum;
}

double AnswerScore::logit_entropy(double lambda) const {
  double sum = 0.0;
  for (std::size_t k = 0; k < log_probs.size(); ++k) {
    sum += log_probs[k] - (k < entropies.size() ? lambda * entropies[k] : 0.0);
  }
  return sum;
}

namespace {

double log_softmax_at(std::span<const double> logits, std::size_t index) {
  const double max = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double x : logits) sum += std::exp(x - max);
  return logits[index] - max - std::log(sum);
}

}  // namespace

AnswerScore score_answer(const TinyTransformer& model, std::span<const TokenId> prompt,
                         std::span<const TokenId> answer, std::size_t layer, const ActivationOptions& options) {
  if (prompt.empty()) throw std::invalid_argument("prompt must not be empty");
  if (answer.empty()) throw std::invalid_argument("answer must not be empty");
  std::vector<TokenId> sequence(prompt.begin(), prompt.end());
  sequence.insert(sequence.end(), answer.begin(), answer.end() - 1);
  for (TokenId a : answer) {
    if (a >= model.spec().vocab_size) throw std::out_of_range("answer token outside vocabulary");
  }
  const auto hidden = model.forward(sequence);

  AnswerScore score;
  const std::size_t t = prompt.size();
  for (std::size_t k = 0; k < answer.size(); ++k) {
    const auto logits = model.lens_logits(hidden.at(model.spec().num_layers, t - 1 + k));
    score.log_probs.push_back(log_softmax_at(logits, answer[k]));
  }
  if (layer != 0) {
    // Causality makes the first t positions identical to a prompt-only pass.
    const auto entropies = precompute_entropy_vector(hidden.prefix(t), model, layer, options);
    for (TokenId a : answer) score.entropies.push_back(entropies[a]);
  }
  return score;
}

double logit_score(const TinyTransformer& model, std::span<const TokenId> prompt, std::span<const TokenId> answer) {
  return score_answer(model, prompt, answer, 0).logit();
}

double logit_entropy_score(const TinyTransformer& model, std::span<const TokenId> prompt,
                           std::span<const TokenId> answer, double lambda, std::size_t layer) {
  check_layer(model.spec(), layer);
  return score_answer(model, prompt, answer, layer).logit_entropy(lambda);
}

std::size_t utf8_byte_offset(std::string_view text, std::size_t index) {
  std::size_t pos = 0;
  for (std::size_t cp = 0; cp < index; ++cp) {
    if (pos >= text.size()) throw std::out_of_range("character offset beyond the end of the text");
    const auto lead = static_cast<unsigned char>(text[pos]);
    std::size_t len = 1;
    if (lead >= 0xF0 && lead < 0xF8) len = 4;
    else if (lead >= 0xE0) len = lead < 0xF0 ? 3 : 1;
    else if (lead >= 0xC0) len = 2;
    if (pos + len > text.size()) len = 1;
    for (std::size_t i = 1; i < len; ++i) {
      if ((static_cast<unsigned char>(text[pos + i]) & 0xC0) != 0x80) {
        len = 1;
        break;
      }
    }
    pos += len;
  }
  return pos;
}

TokenSpan covering_token_span(const Tokenizer& tokenizer, std::span<const TokenId> prompt, std::size_t byte_begin,
                              std::size_t byte_end) {
  if (byte_begin >= byte_end) throw std::invalid_argument("subject span is empty");
  std::size_t offset = 0;
  std::optional<std::size_t> first;
  std::size_t last = 0;
  for (std::size_t i = 0; i < prompt.size(); ++i) {
    const std::size_t begin = offset;
    offset += tokenizer.token_text(prompt[i]).size();
    if (offset > byte_begin && begin < byte_end) {
      if (!first) first = i;
      last = i;
    }
  }
  if (!first || byte_end > offset) throw std::invalid_argument("subject span lies outside the prompt");
  return {*first, last};
}

double subject_activation_score(const TinyTransformer& model, std::span<const TokenId> prompt, TokenSpan subject,
                                TokenId answer_first, std::size_t layer) {
  check_layer(model.spec(), layer);
  if (subject.first > subject.last || subject.last >= prompt.size()) {
    throw std::invalid_argument("subject span does not resolve to prompt tokens");
  }
  if (answer_first >= model.spec().vocab_size) throw std::out_of_range("answer token outside vocabulary");
  // Only the prefix up to the last subject token is needed.
  const auto hidden = model.forward(prompt.first(subject.last + 1));
  const auto probs = softmax(model.lens_logits(hidden.at(layer, subject.last)));
  return probs[answer_first];
}

ConfusionCounts activation_confusion(const TinyTransformer& model, std::span<const ConfusionItem> items,
                                     std::size_t layer, std::size_t k) {
  check_layer(model.spec(), layer);
  ConfusionCounts counts;
  for (const auto& item : items) {
    if (item.subject_last >= item.prompt.size()) throw std::invalid_argument("subject position outside the prompt");
    const auto hidden = model.forward(std::span(item.prompt).first(item.subject_last + 1));
    const auto matrix = activation_matrix(hidden, model, layer);
    const bool activated = is_activated(matrix, item.subject_last, item.answer_first, k);
    if (activated) {
      ++(item.correct ? counts.activated_correct : counts.activated_incorrect);
    } else {
      ++(item.correct ? counts.unactivated_correct : counts.unactivated_incorrect);
    }
  }
  return counts;
}

std::vector<ConfusionItem> confusion_items(const Tokenizer& tokenizer, std::span<const DetectionRecord> records) {
  std::vector<ConfusionItem> items;
  items.reserve(records.size());
  for (const auto& r : records) {
    if (!r.subject) throw DatasetError(r.line, "record has no subject span");
    if (!r.label) throw DatasetError(r.line, "record has no correctness label");
    ConfusionItem item;
    item.prompt = tokenizer.encode(r.prompt);
    try {
      const auto begin = utf8_byte_offset(r.prompt, r.subject->start);
      const auto end = utf8_byte_offset(r.prompt, r.subject->end);
      item.subject_last = covering_token_span(tokenizer, item.prompt, begin, end).last;
    } catch (const std::exception& e) {
      throw DatasetError(r.line, e.what());
    }
    const auto answer = tokenizer.encode(*r.label ? r.answer_true : r.answer_false);
    if (answer.empty()) throw DatasetError(r.line, "model answer is empty");
    item.answer_first = answer.front();
    item.correct = *r.label;
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace actdec
