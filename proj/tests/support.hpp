// Test-only helpers and independent oracles. Nothing here calls into the
// activation or decoder modules; the oracles recompute from model weights.
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "actdec/model.hpp"
#include "actdec/rng.hpp"

namespace actdec::testing {

inline ModelSpec small_spec(std::uint32_t layers = 2, std::uint32_t dim = 16, std::uint32_t heads = 2,
                            std::uint32_t vocab = 64, std::uint32_t context = 64) {
  return {layers, dim, heads, vocab, context};
}

inline std::vector<TokenId> random_tokens(Pcg32& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> out(n);
  for (auto& t : out) t = rng.uniform_below(static_cast<std::uint32_t>(vocab));
  return out;
}

inline std::vector<double> random_distribution(Pcg32& rng, std::size_t n) {
  std::vector<double> p(n);
  double sum = 0.0;
  for (double& x : p) sum += (x = rng.uniform() * rng.uniform());
  for (double& x : p) x /= sum;
  return p;
}

// LayerNorm + LM head + softmax written out independently of the library.
inline std::vector<double> oracle_lens_probs(const TinyTransformer& model, std::span<const float> state) {
  const auto& w = model.weights();
  const std::size_t d = state.size();
  double mean = 0.0, var = 0.0;
  for (float x : state) mean += x;
  mean /= static_cast<double>(d);
  for (float x : state) var += (x - mean) * (x - mean);
  var /= static_cast<double>(d);
  std::vector<double> normed(d);
  for (std::size_t i = 0; i < d; ++i) {
    normed[i] = (state[i] - mean) / std::sqrt(var + 1e-5) * w.final_norm_gain[i] + w.final_norm_bias[i];
  }
  std::vector<double> logits(model.spec().vocab_size);
  for (std::size_t v = 0; v < logits.size(); ++v) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += w.lm_head[v * d + i] * normed[i];
    logits[v] = acc;
  }
  double max = logits[0];
  for (double x : logits) max = std::max(max, x);
  double z = 0.0;
  for (double& x : logits) z += (x = std::exp(x - max));
  for (double& x : logits) x /= z;
  return logits;
}

// Contextual entropy of a single token, straight from the definitions: softmax over
// positions of the activation scores, then -sum p ln p.
inline double oracle_entropy(const TinyTransformer& model, const HiddenStates& hidden, std::size_t layer,
                             TokenId v) {
  const std::size_t t = hidden.positions();
  std::vector<double> s(t);
  for (std::size_t i = 0; i < t; ++i) s[i] = oracle_lens_probs(model, hidden.at(layer, i))[v];
  double z = 0.0;
  for (double x : s) z += std::exp(x);
  double h = 0.0;
  for (double x : s) {
    const double p = std::exp(x) / z;
    h -= p * std::log(p);
  }
  return h;
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "actdec_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

/// d = |V| = 2 model with an identity LM head and zero final-norm gain; used for
/// hand-checkable projections (project_to_vocab applies no normalization).
inline TinyTransformer identity_head_model() {
  ModelSpec spec{1, 2, 1, 2, 4};
  auto w = ModelWeights::zeros(spec);
  w.lm_head = {1.f, 0.f, 0.f, 1.f};
  return TinyTransformer(spec, std::move(w), Tokenizer({"a", "b"}));
}

}  // namespace actdec::testing
