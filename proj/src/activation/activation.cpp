#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "actdec/activation.hpp"

namespace actdec {

std::vector<double> ActivationMatrix::column(TokenId token) const {
  if (token >= vocab_size) throw std::out_of_range("token outside vocabulary");
  std::vector<double> out(prompt_len);
  for (std::size_t i = 0; i < prompt_len; ++i) out[i] = at(i, token);
  return out;
}

std::uint64_t prompt_hash(std::span<const TokenId> tokens) {
  std::uint64_t h = 14695981039346656037ULL;
  for (TokenId id : tokens) {
    for (int shift = 0; shift < 32; shift += 8) {
      h ^= (id >> shift) & 0xffu;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

void check_layer(const ModelSpec& spec, std::size_t layer) {
  if (layer < 1 || layer > spec.num_layers) {
    throw std::out_of_range("layer " + std::to_string(layer) + " outside [1, " + std::to_string(spec.num_layers) +
                            "]");
  }
}

ActivationMatrix activation_matrix(const HiddenStates& hidden, const TinyTransformer& model, std::size_t layer,
                                   const ActivationOptions& options) {
  check_layer(model.spec(), layer);
  if (hidden.num_layers() != model.spec().num_layers || hidden.dim() != model.spec().hidden_dim) {
    throw std::invalid_argument("hidden states do not belong to this model");
  }
  ActivationMatrix m;
  m.layer = layer;
  m.prompt_len = hidden.positions();
  m.vocab_size = model.spec().vocab_size;
  m.scores.resize(m.prompt_len * m.vocab_size);
  for (std::size_t i = 0; i < m.prompt_len; ++i) {
    auto logits = model.lens_logits(hidden.at(layer, i), options.lens);
    if (options.source == ScoreSource::probabilities) logits = softmax(logits);
    std::copy(logits.begin(), logits.end(), m.scores.begin() + static_cast<std::ptrdiff_t>(i * m.vocab_size));
  }
  return m;
}

ContextActivationDistribution context_activation_distribution(std::span<const double> scores) {
  if (scores.empty()) throw std::invalid_argument("context activation needs at least one position");
  if (!std::all_of(scores.begin(), scores.end(), [](double s) { return std::isfinite(s); })) {
    throw std::invalid_argument("activation scores must be finite");
  }
  return {softmax(scores)};
}

double contextual_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

namespace {

// Entropy of softmax(scores[., v]) for v in [begin, end), written to out.
// Uses E = ln Z - sum_i w_i (s_i - m) / Z with w_i = exp(s_i - m), which equals
// -sum p ln p without forming the logarithm of each probability. Accumulation
// runs over positions in ascending order for every token, so the result is
// independent of how the vocabulary is partitioned.
void reduce_columns(const ActivationMatrix& m, std::size_t begin, std::size_t end, std::span<double> out) {
  const std::size_t n = end - begin;
  std::vector<double> max(n, -INFINITY), z(n, 0.0), weighted(n, 0.0);
  for (std::size_t i = 0; i < m.prompt_len; ++i) {
    const double* row = m.scores.data() + i * m.vocab_size + begin;
    for (std::size_t j = 0; j < n; ++j) max[j] = std::max(max[j], row[j]);
  }
  for (std::size_t i = 0; i < m.prompt_len; ++i) {
    const double* row = m.scores.data() + i * m.vocab_size + begin;
    for (std::size_t j = 0; j < n; ++j) {
      const double shifted = row[j] - max[j];
      const double w = std::exp(shifted);
      z[j] += w;
      weighted[j] += w * shifted;
    }
  }
  for (std::size_t j = 0; j < n; ++j) out[begin + j] = std::log(z[j]) - weighted[j] / z[j];
}

}  // namespace

EntropyVector entropy_vector_from(const ActivationMatrix& matrix, std::uint64_t hash,
                                  const ActivationOptions& options) {
  if (matrix.prompt_len == 0) throw std::invalid_argument("entropy needs a non-empty prompt");
  EntropyVector ev;
  ev.layer = matrix.layer;
  ev.prompt_len = matrix.prompt_len;
  ev.prompt_hash = hash;
  ev.entropy.resize(matrix.vocab_size);

  const std::size_t chunk = options.chunk_size == 0 ? matrix.vocab_size : options.chunk_size;
  const std::size_t num_chunks = (matrix.vocab_size + chunk - 1) / chunk;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t c = next++; c < num_chunks; c = next++) {
      const std::size_t begin = c * chunk;
      reduce_columns(matrix, begin, std::min(begin + chunk, matrix.vocab_size), ev.entropy);
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, num_chunks);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t k = 0; k < threads; ++k) pool.emplace_back(worker);
  }
  return ev;
}

EntropyVector precompute_entropy_vector(const HiddenStates& hidden, const TinyTransformer& model, std::size_t layer,
                                        const ActivationOptions& options) {
  return entropy_vector_from(activation_matrix(hidden, model, layer, options), prompt_hash(hidden.tokens()), options);
}

std::size_t activation_rank(const ActivationMatrix& matrix, std::size_t pos, TokenId token) {
  if (pos >= matrix.prompt_len) throw std::out_of_range("position outside the activation matrix");
  if (token >= matrix.vocab_size) throw std::out_of_range("token outside vocabulary");
  const auto row = matrix.row(pos);
  const double score = row[token];
  std::size_t rank = 1;
  for (std::size_t v = 0; v < row.size(); ++v) {
    if (row[v] > score || (row[v] == score && v < token)) ++rank;
  }
  return rank;
}

bool is_activated(const ActivationMatrix& matrix, std::size_t pos, TokenId token, std::size_t k) {
  if (k < 1) throw std::invalid_argument("activation rank threshold must be >= 1");
  return activation_rank(matrix, pos, token) <= k;
}

}  // namespace actdec
