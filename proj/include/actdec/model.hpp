#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "actdec/tokenizer.hpp"

namespace actdec {

class ModelFormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ContextOverflowError : public std::length_error {
public:
  using std::length_error::length_error;
};

/// Model dimensions. Field order matches the TTM1 header except that the
/// header stores num_heads before vocab_size.
struct ModelSpec {
  std::uint32_t num_layers = 4;
  std::uint32_t hidden_dim = 128;
  std::uint32_t num_heads = 4;
  std::uint32_t vocab_size = 1024;
  std::uint32_t max_context = 256;

  /// Throws std::invalid_argument when a dimension invariant is violated.
  void validate() const;
  std::uint32_t head_dim() const { return hidden_dim / num_heads; }
  std::uint32_t mlp_dim() const { return 4 * hidden_dim; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Weights of one pre-LayerNorm block. Matrices are row-major [out][in].
struct BlockWeights {
  std::vector<float> ln1_gain, ln1_bias;
  std::vector<float> qkv_weight, qkv_bias;            // [3d][d], [3d]
  std::vector<float> attn_out_weight, attn_out_bias;  // [d][d], [d]
  std::vector<float> ln2_gain, ln2_bias;
  std::vector<float> fc_weight, fc_bias;              // [4d][d], [4d]
  std::vector<float> proj_weight, proj_bias;          // [d][4d], [d]
};

struct ModelWeights {
  std::vector<float> token_embedding;     // [V][d]
  std::vector<float> position_embedding;  // [max_context][d]
  std::vector<BlockWeights> blocks;
  std::vector<float> final_norm_gain, final_norm_bias;
  std::vector<float> lm_head;             // [V][d], untied from the embedding

  /// All-zero weights with the shapes implied by `spec`.
  static ModelWeights zeros(const ModelSpec& spec);

  /// Visits every tensor in serialization order.
  template <typename Self, typename F>
  static void for_each_tensor(Self& self, F&& f) {
    f(self.token_embedding);
    f(self.position_embedding);
    for (auto& b : self.blocks) {
      f(b.ln1_gain); f(b.ln1_bias);
      f(b.qkv_weight); f(b.qkv_bias);
      f(b.attn_out_weight); f(b.attn_out_bias);
      f(b.ln2_gain); f(b.ln2_bias);
      f(b.fc_weight); f(b.fc_bias);
      f(b.proj_weight); f(b.proj_bias);
    }
    f(self.final_norm_gain);
    f(self.final_norm_bias);
    f(self.lm_head);
  }
};

/// Residual-stream states for every layer and position.
/// Layer 0 is the embedding output; layer l >= 1 is the output of block l.
class HiddenStates {
public:
  HiddenStates() = default;
  HiddenStates(std::size_t num_layers, std::size_t dim, std::vector<TokenId> tokens);

  std::size_t num_layers() const { return layers_ - 1; }  // H; layers() = H + 1
  std::size_t layers() const { return layers_; }
  std::size_t positions() const { return tokens_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<TokenId>& tokens() const { return tokens_; }

  std::span<const float> at(std::size_t layer, std::size_t pos) const;
  std::span<float> at(std::size_t layer, std::size_t pos);

  /// States for the first `len` positions (valid because the model is causal).
  HiddenStates prefix(std::size_t len) const;

private:
  std::size_t layers_ = 0;
  std::size_t dim_ = 0;
  std::vector<TokenId> tokens_;
  std::vector<float> data_;  // [position][layer][dim]
};

/// Probability vector over the vocabulary, kept in double precision.
struct TokenDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t v) const { return probs[v]; }
  TokenId argmax() const;  // lowest id among maximizers
};

/// How an intermediate state is mapped before the LM head.
/// final_norm applies the model's final LayerNorm first (logit lens);
/// raw projects the residual stream directly.
enum class LensMode { final_norm, raw };

/// Numerically stable softmax with double accumulation.
std::vector<double> softmax(std::span<const double> logits);

class TinyTransformer;

/// Incremental forward pass with a key/value cache. Appending tokens one at a
/// time runs the same arithmetic as TinyTransformer::forward, so the two paths
/// agree bit-for-bit.
class InferenceSession {
public:
  explicit InferenceSession(const TinyTransformer& model);

  /// Runs one position. Throws ContextOverflowError past max_context.
  void append(TokenId token);

  std::size_t length() const { return length_; }
  /// State of the most recently appended position at `layer` (0..H).
  std::span<const float> last_state(std::size_t layer) const;

private:
  const TinyTransformer* model_;
  std::size_t length_ = 0;
  std::vector<std::vector<float>> keys_, values_;  // per block: [max_context][d]
  std::vector<float> states_;                      // [H + 1][d] of the last position
  std::vector<float> normed_, qkv_, attn_, scratch_, mlp_;
  std::vector<double> scores_;
};

class TinyTransformer {
public:
  /// Validates the spec, every tensor shape, weight finiteness and the
  /// vocabulary size. Throws ModelFormatError on mismatch.
  TinyTransformer(ModelSpec spec, ModelWeights weights, Tokenizer tokenizer);

  const ModelSpec& spec() const { return spec_; }
  const ModelWeights& weights() const { return weights_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }

  /// Full forward pass. Throws std::invalid_argument on empty input,
  /// ContextOverflowError beyond max_context, std::out_of_range on bad ids.
  HiddenStates forward(std::span<const TokenId> tokens) const;

  /// Final LayerNorm of one state.
  std::vector<float> final_norm(std::span<const float> state) const;

  /// Raw LM-head logits W * state.
  std::vector<double> logits(std::span<const float> state) const;

  /// softmax(W * state). No normalization is applied to `state`.
  TokenDistribution project(std::span<const float> state) const;

  /// Logits of an intermediate state under the chosen lens.
  std::vector<double> lens_logits(std::span<const float> state, LensMode mode = LensMode::final_norm) const;

  /// Next-token distribution P(v_{i+1} | v_{1..i}) read from the last layer at `pos`.
  TokenDistribution next_token_distribution(const HiddenStates& hidden, std::size_t pos) const;
  TokenDistribution next_token_distribution(const InferenceSession& session) const;

private:
  friend class InferenceSession;

  ModelSpec spec_;
  ModelWeights weights_;
  Tokenizer tokenizer_;
};

/// Free-function spellings of the model API.
HiddenStates forward(const TinyTransformer& model, std::span<const TokenId> tokens);
TokenDistribution project_to_vocab(const TinyTransformer& model, std::span<const float> state);

// ---- TTM1 weight files ----------------------------------------------------

std::vector<std::uint8_t> serialize_model(const TinyTransformer& model);
TinyTransformer deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const TinyTransformer& model, const std::filesystem::path& path);
TinyTransformer load_model(const std::filesystem::path& path);

/// Seeded model: every matrix and embedding drawn from Gaussian(0, 0.02) via
/// Pcg32(seed); LayerNorm gains 1, all biases 0; vocabulary from
/// default_vocabulary(spec.vocab_size).
TinyTransformer random_model(const ModelSpec& spec, std::uint64_t seed);

}  // namespace actdec
