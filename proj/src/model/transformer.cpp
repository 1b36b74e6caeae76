#include <algorithm>
#include <cmath>
#include <numbers>

#include "actdec/model.hpp"
#include "actdec/rng.hpp"

namespace actdec {

namespace {

constexpr float kLayerNormEps = 1e-5f;

// out[o] = bias[o] + sum_i weight[o][i] * in[i]
void matvec(std::span<const float> weight, std::span<const float> bias, std::span<const float> in,
            std::span<float> out) {
  const std::size_t n_in = in.size();
  for (std::size_t o = 0; o < out.size(); ++o) {
    const float* row = weight.data() + o * n_in;
    float acc0 = 0.f, acc1 = 0.f, acc2 = 0.f, acc3 = 0.f;
    std::size_t i = 0;
    for (; i + 4 <= n_in; i += 4) {
      acc0 += row[i] * in[i];
      acc1 += row[i + 1] * in[i + 1];
      acc2 += row[i + 2] * in[i + 2];
      acc3 += row[i + 3] * in[i + 3];
    }
    for (; i < n_in; ++i) acc0 += row[i] * in[i];
    out[o] = bias[o] + ((acc0 + acc1) + (acc2 + acc3));
  }
}

void layer_norm(std::span<const float> x, std::span<const float> gain, std::span<const float> bias,
                std::span<float> out) {
  const auto n = static_cast<double>(x.size());
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= n;
  const double inv_std = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = static_cast<float>((x[i] - mean) * inv_std) * gain[i] + bias[i];
  }
}

float gelu(float x) {
  constexpr float kSqrt2OverPi = 0.7978845608028654f;
  return 0.5f * x * (1.0f + std::tanh(kSqrt2OverPi * (x + 0.044715f * x * x * x)));
}

void expect_shape(const std::vector<float>& t, std::size_t n, const char* name) {
  if (t.size() != n) {
    throw ModelFormatError(std::string("tensor ") + name + " has " + std::to_string(t.size()) +
                           " values, expected " + std::to_string(n));
  }
}

}  // namespace

void ModelSpec::validate() const {
  if (num_layers < 1) throw std::invalid_argument("num_layers must be >= 1");
  if (hidden_dim < 1) throw std::invalid_argument("hidden_dim must be >= 1");
  if (num_heads < 1) throw std::invalid_argument("num_heads must be >= 1");
  if (vocab_size < 2) throw std::invalid_argument("vocab_size must be >= 2");
  if (max_context < 1) throw std::invalid_argument("max_context must be >= 1");
  if (hidden_dim % num_heads != 0) {
    throw std::invalid_argument("hidden_dim " + std::to_string(hidden_dim) + " is not divisible by num_heads " +
                                std::to_string(num_heads));
  }
}

ModelWeights ModelWeights::zeros(const ModelSpec& spec) {
  const std::size_t d = spec.hidden_dim, v = spec.vocab_size, m = spec.mlp_dim();
  ModelWeights w;
  w.token_embedding.assign(v * d, 0.f);
  w.position_embedding.assign(std::size_t{spec.max_context} * d, 0.f);
  w.blocks.resize(spec.num_layers);
  for (auto& b : w.blocks) {
    b.ln1_gain.assign(d, 0.f);
    b.ln1_bias.assign(d, 0.f);
    b.qkv_weight.assign(3 * d * d, 0.f);
    b.qkv_bias.assign(3 * d, 0.f);
    b.attn_out_weight.assign(d * d, 0.f);
    b.attn_out_bias.assign(d, 0.f);
    b.ln2_gain.assign(d, 0.f);
    b.ln2_bias.assign(d, 0.f);
    b.fc_weight.assign(m * d, 0.f);
    b.fc_bias.assign(m, 0.f);
    b.proj_weight.assign(d * m, 0.f);
    b.proj_bias.assign(d, 0.f);
  }
  w.final_norm_gain.assign(d, 0.f);
  w.final_norm_bias.assign(d, 0.f);
  w.lm_head.assign(v * d, 0.f);
  return w;
}

// ---- HiddenStates ----------------------------------------------------------

HiddenStates::HiddenStates(std::size_t num_layers, std::size_t dim, std::vector<TokenId> tokens)
    : layers_(num_layers + 1), dim_(dim), tokens_(std::move(tokens)), data_(layers_ * dim_ * tokens_.size()) {}

std::span<const float> HiddenStates::at(std::size_t layer, std::size_t pos) const {
  if (layer >= layers_ || pos >= tokens_.size()) throw std::out_of_range("hidden state index out of range");
  return {data_.data() + (pos * layers_ + layer) * dim_, dim_};
}

std::span<float> HiddenStates::at(std::size_t layer, std::size_t pos) {
  if (layer >= layers_ || pos >= tokens_.size()) throw std::out_of_range("hidden state index out of range");
  return {data_.data() + (pos * layers_ + layer) * dim_, dim_};
}

HiddenStates HiddenStates::prefix(std::size_t len) const {
  if (len > tokens_.size()) throw std::out_of_range("prefix longer than the sequence");
  HiddenStates out(layers_ - 1, dim_, std::vector<TokenId>(tokens_.begin(), tokens_.begin() + len));
  std::copy_n(data_.begin(), out.data_.size(), out.data_.begin());
  return out;
}

// ---- distributions ---------------------------------------------------------

TokenId TokenDistribution::argmax() const {
  return static_cast<TokenId>(std::max_element(probs.begin(), probs.end()) - probs.begin());
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double max = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - max);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

// ---- InferenceSession ------------------------------------------------------

InferenceSession::InferenceSession(const TinyTransformer& model) : model_(&model) {
  const auto& s = model.spec();
  const std::size_t d = s.hidden_dim;
  keys_.assign(s.num_layers, std::vector<float>(std::size_t{s.max_context} * d));
  values_.assign(s.num_layers, std::vector<float>(std::size_t{s.max_context} * d));
  states_.assign((s.num_layers + 1) * d, 0.f);
  normed_.resize(d);
  qkv_.resize(3 * d);
  attn_.resize(d);
  scratch_.resize(d);
  mlp_.resize(s.mlp_dim());
  scores_.resize(s.max_context);
}

std::span<const float> InferenceSession::last_state(std::size_t layer) const {
  const std::size_t d = model_->spec().hidden_dim;
  if (length_ == 0) throw std::logic_error("no token appended yet");
  if (layer > model_->spec().num_layers) throw std::out_of_range("layer out of range");
  return {states_.data() + layer * d, d};
}

void InferenceSession::append(TokenId token) {
  const auto& spec = model_->spec();
  const auto& w = model_->weights_;
  const std::size_t d = spec.hidden_dim;
  const std::size_t hd = spec.head_dim();
  const std::size_t pos = length_;
  if (pos >= spec.max_context) {
    throw ContextOverflowError("context of " + std::to_string(pos + 1) + " tokens exceeds max_context " +
                               std::to_string(spec.max_context));
  }
  if (token >= spec.vocab_size) {
    throw std::out_of_range("token id " + std::to_string(token) + " outside vocabulary of " +
                            std::to_string(spec.vocab_size));
  }

  std::span<float> x(states_.data(), d);
  for (std::size_t i = 0; i < d; ++i) {
    x[i] = w.token_embedding[token * d + i] + w.position_embedding[pos * d + i];
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    const auto& b = w.blocks[l];
    std::span<float> next(states_.data() + (l + 1) * d, d);
    std::copy(x.begin(), x.end(), next.begin());
    x = next;

    layer_norm(x, b.ln1_gain, b.ln1_bias, normed_);
    matvec(b.qkv_weight, b.qkv_bias, normed_, qkv_);
    std::copy_n(qkv_.begin() + d, d, keys_[l].begin() + pos * d);
    std::copy_n(qkv_.begin() + 2 * d, d, values_[l].begin() + pos * d);

    for (std::size_t h = 0; h < spec.num_heads; ++h) {
      const float* q = qkv_.data() + h * hd;
      double max = -INFINITY;
      for (std::size_t j = 0; j <= pos; ++j) {
        const float* k = keys_[l].data() + j * d + h * hd;
        double dot = 0.0;
        for (std::size_t i = 0; i < hd; ++i) dot += static_cast<double>(q[i]) * k[i];
        scores_[j] = dot * scale;
        max = std::max(max, scores_[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j <= pos; ++j) {
        scores_[j] = std::exp(scores_[j] - max);
        sum += scores_[j];
      }
      float* out = attn_.data() + h * hd;
      std::fill_n(out, hd, 0.f);
      for (std::size_t j = 0; j <= pos; ++j) {
        const auto weight = static_cast<float>(scores_[j] / sum);
        const float* v = values_[l].data() + j * d + h * hd;
        for (std::size_t i = 0; i < hd; ++i) out[i] += weight * v[i];
      }
    }
    matvec(b.attn_out_weight, b.attn_out_bias, attn_, scratch_);
    for (std::size_t i = 0; i < d; ++i) x[i] += scratch_[i];

    layer_norm(x, b.ln2_gain, b.ln2_bias, normed_);
    matvec(b.fc_weight, b.fc_bias, normed_, mlp_);
    for (float& v : mlp_) v = gelu(v);
    matvec(b.proj_weight, b.proj_bias, mlp_, scratch_);
    for (std::size_t i = 0; i < d; ++i) x[i] += scratch_[i];
  }
  ++length_;
}

// ---- TinyTransformer -------------------------------------------------------

TinyTransformer::TinyTransformer(ModelSpec spec, ModelWeights weights, Tokenizer tokenizer)
    : spec_(spec), weights_(std::move(weights)), tokenizer_(std::move(tokenizer)) {
  try {
    spec_.validate();
  } catch (const std::invalid_argument& e) {
    throw ModelFormatError(std::string("invalid model spec: ") + e.what());
  }
  const std::size_t d = spec_.hidden_dim, v = spec_.vocab_size, m = spec_.mlp_dim();
  expect_shape(weights_.token_embedding, v * d, "token_embedding");
  expect_shape(weights_.position_embedding, std::size_t{spec_.max_context} * d, "position_embedding");
  if (weights_.blocks.size() != spec_.num_layers) throw ModelFormatError("block count does not match num_layers");
  for (const auto& b : weights_.blocks) {
    expect_shape(b.ln1_gain, d, "ln1_gain");
    expect_shape(b.ln1_bias, d, "ln1_bias");
    expect_shape(b.qkv_weight, 3 * d * d, "qkv_weight");
    expect_shape(b.qkv_bias, 3 * d, "qkv_bias");
    expect_shape(b.attn_out_weight, d * d, "attn_out_weight");
    expect_shape(b.attn_out_bias, d, "attn_out_bias");
    expect_shape(b.ln2_gain, d, "ln2_gain");
    expect_shape(b.ln2_bias, d, "ln2_bias");
    expect_shape(b.fc_weight, m * d, "fc_weight");
    expect_shape(b.fc_bias, m, "fc_bias");
    expect_shape(b.proj_weight, d * m, "proj_weight");
    expect_shape(b.proj_bias, d, "proj_bias");
  }
  expect_shape(weights_.final_norm_gain, d, "final_norm_gain");
  expect_shape(weights_.final_norm_bias, d, "final_norm_bias");
  expect_shape(weights_.lm_head, v * d, "lm_head");
  ModelWeights::for_each_tensor(weights_, [](const std::vector<float>& t) {
    if (!std::all_of(t.begin(), t.end(), [](float x) { return std::isfinite(x); })) {
      throw ModelFormatError("non-finite weight");
    }
  });
  if (tokenizer_.size() != spec_.vocab_size) {
    throw ModelFormatError("vocabulary has " + std::to_string(tokenizer_.size()) + " entries, spec says " +
                           std::to_string(spec_.vocab_size));
  }
}

HiddenStates TinyTransformer::forward(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("forward requires at least one token");
  if (tokens.size() > spec_.max_context) {
    throw ContextOverflowError("context of " + std::to_string(tokens.size()) + " tokens exceeds max_context " +
                               std::to_string(spec_.max_context));
  }
  HiddenStates hidden(spec_.num_layers, spec_.hidden_dim, {tokens.begin(), tokens.end()});
  InferenceSession session(*this);
  for (std::size_t pos = 0; pos < tokens.size(); ++pos) {
    session.append(tokens[pos]);
    for (std::size_t l = 0; l <= spec_.num_layers; ++l) {
      auto src = session.last_state(l);
      std::copy(src.begin(), src.end(), hidden.at(l, pos).begin());
    }
  }
  return hidden;
}

std::vector<float> TinyTransformer::final_norm(std::span<const float> state) const {
  if (state.size() != spec_.hidden_dim) throw std::invalid_argument("state dimension mismatch");
  std::vector<float> out(state.size());
  layer_norm(state, weights_.final_norm_gain, weights_.final_norm_bias, out);
  return out;
}

std::vector<double> TinyTransformer::logits(std::span<const float> state) const {
  const std::size_t d = spec_.hidden_dim;
  if (state.size() != d) {
    throw std::invalid_argument("state has dimension " + std::to_string(state.size()) + ", model expects " +
                                std::to_string(d));
  }
  std::vector<double> out(spec_.vocab_size);
  for (std::size_t v = 0; v < out.size(); ++v) {
    const float* row = weights_.lm_head.data() + v * d;
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) acc += static_cast<double>(row[i]) * state[i];
    out[v] = acc;
  }
  return out;
}

TokenDistribution TinyTransformer::project(std::span<const float> state) const {
  if (!std::all_of(state.begin(), state.end(), [](float x) { return std::isfinite(x); })) {
    throw std::invalid_argument("state contains non-finite values");
  }
  return {softmax(logits(state))};
}

std::vector<double> TinyTransformer::lens_logits(std::span<const float> state, LensMode mode) const {
  if (mode == LensMode::raw) return logits(state);
  return logits(final_norm(state));
}

TokenDistribution TinyTransformer::next_token_distribution(const HiddenStates& hidden, std::size_t pos) const {
  return {softmax(lens_logits(hidden.at(spec_.num_layers, pos)))};
}

TokenDistribution TinyTransformer::next_token_distribution(const InferenceSession& session) const {
  return {softmax(lens_logits(session.last_state(spec_.num_layers)))};
}

HiddenStates forward(const TinyTransformer& model, std::span<const TokenId> tokens) {
  return model.forward(tokens);
}

TokenDistribution project_to_vocab(const TinyTransformer& model, std::span<const float> state) {
  return model.project(state);
}

TinyTransformer random_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelWeights w = ModelWeights::zeros(spec);
  Pcg32 rng(seed);
  constexpr double kStd = 0.02;
  auto gaussian = [&](std::vector<float>& t) {
    for (float& x : t) x = static_cast<float>(rng.normal(0.0, kStd));
  };
  auto ones = [](std::vector<float>& t) { std::fill(t.begin(), t.end(), 1.f); };
  // Draw order follows serialization order; biases stay zero.
  gaussian(w.token_embedding);
  gaussian(w.position_embedding);
  for (auto& b : w.blocks) {
    ones(b.ln1_gain);
    gaussian(b.qkv_weight);
    gaussian(b.attn_out_weight);
    ones(b.ln2_gain);
    gaussian(b.fc_weight);
    gaussian(b.proj_weight);
  }
  ones(w.final_norm_gain);
  gaussian(w.lm_head);
  return TinyTransformer(spec, std::move(w), Tokenizer(default_vocabulary(spec.vocab_size)));
}

}  // namespace actdec
