#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "actdec/detection.hpp"

namespace actdec {

double ConfusionCounts::activated_rate_correct() const {
  const std::size_t n = activated_correct + unactivated_correct;
  return n == 0 ? 0.0 : static_cast<double>(activated_correct) / static_cast<double>(n);
}

double ConfusionCounts::activated_rate_incorrect() const {
  const std::size_t n = activated_incorrect + unactivated_incorrect;
  return n == 0 ? 0.0 : static_cast<double>(activated_incorrect) / static_cast<double>(n);
}

double auroc(std::span<const double> positive, std::span<const double> negative) {
  if (positive.empty() || negative.empty()) throw std::invalid_argument("AUROC needs non-empty score lists");
  auto finite = [](double x) { return std::isfinite(x); };
  if (!std::all_of(positive.begin(), positive.end(), finite) ||
      !std::all_of(negative.begin(), negative.end(), finite)) {
    throw std::invalid_argument("AUROC scores must be finite");
  }
  // Sort-and-search form of the pairwise count. Every term is a multiple of
  // one half, so the sum is exact and equals the brute-force pair count.
  std::vector<double> neg(negative.begin(), negative.end());
  std::sort(neg.begin(), neg.end());
  double wins = 0.0;
  for (double p : positive) {
    const auto lo = std::lower_bound(neg.begin(), neg.end(), p);
    const auto hi = std::upper_bound(lo, neg.end(), p);
    wins += static_cast<double>(lo - neg.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(positive.size()) * static_cast<double>(negative.size()));
}

namespace {

bool is_punct(unsigned char c) { return c < 128 && std::ispunct(c); }

std::vector<std::string> answer_tokens(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (unsigned char c : text) {
    if (is_punct(c)) continue;
    cleaned.push_back(c < 128 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
  }
  std::vector<std::string> tokens;
  std::istringstream words(cleaned);
  for (std::string w; words >> w;) {
    if (w == "a" || w == "an" || w == "the") continue;
    tokens.push_back(std::move(w));
  }
  return tokens;
}

}  // namespace

std::string normalize_answer(std::string_view text) {
  std::string out;
  for (const auto& tok : answer_tokens(text)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

bool exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_answer(prediction) == normalize_answer(gold);
}

double f1_score(std::string_view prediction, std::string_view gold) {
  const auto pred = answer_tokens(prediction);
  const auto ref = answer_tokens(gold);
  if (pred.empty() || ref.empty()) return pred == ref ? 1.0 : 0.0;
  std::map<std::string, std::size_t> counts;
  for (const auto& t : ref) ++counts[t];
  std::size_t common = 0;
  for (const auto& t : pred) {
    if (auto it = counts.find(t); it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  // Harmonic mean of precision common/|pred| and recall common/|ref|,
  // reduced to a single division.
  return 2.0 * static_cast<double>(common) / static_cast<double>(pred.size() + ref.size());
}

}  // namespace actdec
