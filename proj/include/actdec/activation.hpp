#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <vector>

#include "actdec/model.hpp"

namespace actdec {

/// Activation scores s(i, v): the softmax of the LM-head projection of the
/// state at context position i, read at token v. Rows are positions.
struct ActivationMatrix {
  std::size_t layer = 0;
  std::size_t prompt_len = 0;
  std::size_t vocab_size = 0;
  std::vector<double> scores;  // [prompt_len][vocab_size]

  double at(std::size_t pos, TokenId token) const { return scores[pos * vocab_size + token]; }
  std::span<const double> row(std::size_t pos) const { return {scores.data() + pos * vocab_size, vocab_size}; }
  /// s(1..t, v) gathered into a contiguous vector.
  std::vector<double> column(TokenId token) const;
};

/// Softmax over context positions of one token's activation scores.
struct ContextActivationDistribution {
  std::vector<double> probs;
};

/// Contextual entropy of every vocabulary token against one prompt, in nats.
struct EntropyVector {
  std::vector<double> entropy;
  std::size_t layer = 0;
  std::size_t prompt_len = 0;
  std::uint64_t prompt_hash = 0;

  double operator[](TokenId v) const { return entropy[v]; }
  std::size_t size() const { return entropy.size(); }
};

enum class NormalizationMode { softmax, l2 };

/// Which per-position quantity the position softmax is taken over.
/// probabilities is the reference behavior; logits is an experimental
/// variant and is never used by default.
enum class ScoreSource { probabilities, logits };

struct ActivationOptions {
  LensMode lens = LensMode::final_norm;
  ScoreSource source = ScoreSource::probabilities;
  /// Vocabulary chunk per work item in the column reduction (0 = whole vocabulary).
  std::size_t chunk_size = 256;
  /// Worker threads for the column reduction (1 = inline).
  std::size_t threads = 1;
};

/// FNV-1a over the little-endian bytes of each token id.
std::uint64_t prompt_hash(std::span<const TokenId> tokens);

/// Checks 1 <= layer <= num_layers; throws std::out_of_range otherwise.
void check_layer(const ModelSpec& spec, std::size_t layer);

/// One projection per prompt position at `layer` (t projections in total).
ActivationMatrix activation_matrix(const HiddenStates& hidden, const TinyTransformer& model, std::size_t layer,
                                   const ActivationOptions& options = {});

/// P~(i) = exp(s_i) / sum_m exp(s_m), applied to the scores exactly as given.
/// Throws std::invalid_argument on empty or non-finite input.
ContextActivationDistribution context_activation_distribution(std::span<const double> scores);

/// -sum p ln p with 0 ln 0 = 0.
double contextual_entropy(std::span<const double> probs);
inline double contextual_entropy(const ContextActivationDistribution& dist) {
  return contextual_entropy(dist.probs);
}

/// Entropy of every vocabulary column of an existing activation matrix.
/// The result does not depend on options.chunk_size or options.threads.
EntropyVector entropy_vector_from(const ActivationMatrix& matrix, std::uint64_t prompt_hash,
                                  const ActivationOptions& options = {});

/// Builds the activation matrix for the prompt in `hidden` once, then reduces
/// each vocabulary column to its contextual entropy.
EntropyVector precompute_entropy_vector(const HiddenStates& hidden, const TinyTransformer& model, std::size_t layer,
                                        const ActivationOptions& options = {});

/// 1-based rank of s(pos, token) among the scores at `pos`; ties go to the lower id.
std::size_t activation_rank(const ActivationMatrix& matrix, std::size_t pos, TokenId token);

inline constexpr std::size_t kDefaultActivationTopK = 50;

bool is_activated(const ActivationMatrix& matrix, std::size_t pos, TokenId token,
                  std::size_t k = kDefaultActivationTopK);

// ---- heatmap export ---------------------------------------------------------

struct HeatmapCell {
  std::size_t layer;
  std::size_t position;
  TokenId token;
  double value;
};

/// For every layer 1..H, token of interest and prompt position: the token's
/// activation normalized over positions (softmax: position softmax; l2: unit
/// L2 norm). Rows are ordered by layer, then token, then position.
std::vector<HeatmapCell> export_activation_heatmap(const HiddenStates& hidden, const TinyTransformer& model,
                                                   std::span<const TokenId> tokens_of_interest,
                                                   NormalizationMode mode,
                                                   const ActivationOptions& options = {});

/// CSV with header `layer,position,token_id,token_text,value`, LF endings.
void write_heatmap_csv(std::ostream& out, std::span<const HeatmapCell> cells, const Tokenizer& tokenizer);

// ---- AENT entropy cache -----------------------------------------------------
//   "AENT", u32 layer, u32 prompt_len, u32 vocab_size, u64 prompt_hash,
//   vocab_size x f32 entropy. Little-endian.

std::vector<std::uint8_t> serialize_entropy_vector(const EntropyVector& entropies);
EntropyVector deserialize_entropy_vector(std::span<const std::uint8_t> bytes);
void save_entropy_vector(const EntropyVector& entropies, const std::filesystem::path& path);
EntropyVector load_entropy_vector(const std::filesystem::path& path);

}  // namespace actdec
