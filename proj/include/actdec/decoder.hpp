#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "actdec/activation.hpp"
#include "actdec/model.hpp"

namespace actdec {

class StaleEntropyError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Activation-decoding hyperparameters.
///
/// `lambda` scales the entropy penalty.
/// `informative_layer` defaults to round(0.8125 * num_layers), i.e. 26 of 32.
struct DecodingConfig {
  double lambda = 0.5;
  std::optional<std::size_t> informative_layer;
  double tau = 0.1;
  std::size_t max_new_tokens = 64;
  std::vector<TokenId> stop_tokens;
  std::size_t activation_top_k = kDefaultActivationTopK;
  bool record_trace = false;
  ActivationOptions activation;

  /// Throws std::invalid_argument (or std::out_of_range for the layer).
  void validate(const ModelSpec& spec) const;
  std::size_t layer(const ModelSpec& spec) const;
};

std::size_t default_informative_layer(std::size_t num_layers);

/// Newline plus the end-of-text entry when the vocabulary has them.
std::vector<TokenId> default_stop_tokens(const Tokenizer& tokenizer);

struct StepTrace {
  std::size_t step = 0;
  std::vector<TokenId> candidates;  // ascending ids
  std::vector<double> original;     // P(v) for each candidate
  std::vector<double> entropy;      // E(v) for each candidate (0 when unused)
  std::vector<double> adjusted;     // renormalized over the candidates
  TokenId chosen = 0;
};

struct GenerationResult {
  std::vector<TokenId> prompt;
  std::vector<TokenId> generated;  // includes the stop token when one was emitted
  std::string text;                // decoded continuation without a trailing stop token
  bool stopped = false;            // ended on a stop token
  std::vector<StepTrace> traces;
  double seconds = 0.0;
  double tokens_per_second = 0.0;
};

/// External adjustment over the filtered candidates, applied before the
/// entropy penalty. `probs` is aligned with `candidates`; entries must stay
/// finite and non-negative.
using DistributionHook = std::function<void(std::span<const TokenId> candidates, std::span<double> probs)>;

/// { v : P(v) >= tau * max_w P(w) } in ascending id order. Never empty.
std::vector<TokenId> filter_candidates(const TokenDistribution& dist, double tau);

/// P'(v) proportional to exp(-lambda * E(v)) * P(v) over `candidates`, zero
/// elsewhere. Throws StaleEntropyError when `entropies` was built for a
/// different prompt than `expected_prompt_hash`.
TokenDistribution adjust_distribution(const TokenDistribution& dist, const EntropyVector& entropies,
                                      std::span<const TokenId> candidates, double lambda,
                                      std::uint64_t expected_prompt_hash);

/// One decoding step on a full context (prompt followed by generated tokens).
/// `entropies` must have been built for context[0, entropies.prompt_len).
std::pair<TokenId, StepTrace> decode_step(const TinyTransformer& model, std::span<const TokenId> context,
                                          const EntropyVector& entropies, const DecodingConfig& config,
                                          std::span<const DistributionHook> hooks = {});

/// How generation obtains contextual entropies.
enum class EntropyStrategy {
  precomputed,          // once per prompt, then O(1) lookups
  recompute_each_step,  // rebuild the whole vector every step
  none,                 // plain greedy decoding, no filter or penalty
};

GenerationResult generate(const TinyTransformer& model, std::span<const TokenId> prompt, const DecodingConfig& config,
                          std::span<const DistributionHook> hooks = {},
                          EntropyStrategy strategy = EntropyStrategy::precomputed);

inline GenerationResult greedy_generate(const TinyTransformer& model, std::span<const TokenId> prompt,
                                        const DecodingConfig& config) {
  return generate(model, prompt, config, {}, EntropyStrategy::none);
}

// ---- latency benchmark ------------------------------------------------------

enum class BenchMode { greedy, cached, naive };

const char* to_string(BenchMode mode);

struct BenchTiming {
  BenchMode mode = BenchMode::greedy;
  std::size_t tokens = 0;      // generated tokens per repeat
  double seconds = 0.0;        // best (minimum) wall-clock over repeats
  double ms_per_token = 0.0;
  std::vector<std::vector<TokenId>> outputs;
};

/// Times one mode over all prompts; wall-clock includes the prompt pass and,
/// for cached/naive, entropy construction.
BenchTiming benchmark_decode(const TinyTransformer& model, std::span<const std::vector<TokenId>> prompts,
                             const DecodingConfig& config, BenchMode mode, std::size_t repeats = 1);

struct BenchReport {
  std::vector<BenchTiming> rows;  // greedy, cached, naive
  bool outputs_identical = false; // cached vs naive
  double overhead(BenchMode mode) const;  // relative to greedy, e.g. 0.12 = +12%
  const BenchTiming& row(BenchMode mode) const;
};

/// Verifies cached and naive generations match, then times all three modes
/// with interleaved repeats and keeps each mode's best run.
BenchReport run_benchmark(const TinyTransformer& model, std::span<const std::vector<TokenId>> prompts,
                          const DecodingConfig& config, std::size_t repeats = 3);

}  // namespace actdec
