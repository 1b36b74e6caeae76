#include <algorithm>
#include <chrono>
#include <cmath>

#include "actdec/decoder.hpp"

namespace actdec {

void DecodingConfig::validate(const ModelSpec& spec) const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("lambda must be finite and >= 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("tau must lie in [0, 1]");
  if (max_new_tokens < 1) throw std::invalid_argument("max_new_tokens must be >= 1");
  if (activation_top_k < 1) throw std::invalid_argument("activation_top_k must be >= 1");
  for (TokenId t : stop_tokens) {
    if (t >= spec.vocab_size) throw std::invalid_argument("stop token outside vocabulary");
  }
  check_layer(spec, layer(spec));
}

std::size_t DecodingConfig::layer(const ModelSpec& spec) const {
  return informative_layer.value_or(default_informative_layer(spec.num_layers));
}

std::size_t default_informative_layer(std::size_t num_layers) {
  const auto layer = static_cast<std::size_t>(std::lround(0.8125 * static_cast<double>(num_layers)));
  return std::clamp<std::size_t>(layer, 1, std::max<std::size_t>(num_layers, 1));
}

std::vector<TokenId> default_stop_tokens(const Tokenizer& tokenizer) {
  std::vector<TokenId> stops;
  if (auto nl = tokenizer.find("\n")) stops.push_back(*nl);
  if (auto eos = tokenizer.eos()) stops.push_back(*eos);
  return stops;
}

std::vector<TokenId> filter_candidates(const TokenDistribution& dist, double tau) {
  if (dist.probs.empty()) throw std::invalid_argument("empty distribution");
  const double threshold = tau * *std::max_element(dist.probs.begin(), dist.probs.end());
  std::vector<TokenId> out;
  for (std::size_t v = 0; v < dist.size(); ++v) {
    if (dist[v] >= threshold) out.push_back(static_cast<TokenId>(v));
  }
  return out;
}

TokenDistribution adjust_distribution(const TokenDistribution& dist, const EntropyVector& entropies,
                                      std::span<const TokenId> candidates, double lambda,
                                      std::uint64_t expected_prompt_hash) {
  if (entropies.prompt_hash != expected_prompt_hash) {
    throw StaleEntropyError("entropy vector was built for a different prompt");
  }
  if (candidates.empty()) throw std::invalid_argument("candidate set is empty");
  if (entropies.size() != dist.size()) throw std::invalid_argument("entropy vector size does not match vocabulary");
  TokenDistribution out{std::vector<double>(dist.size(), 0.0)};
  double sum = 0.0;
  for (TokenId v : candidates) {
    if (v >= dist.size()) throw std::out_of_range("candidate outside vocabulary");
    out.probs[v] = std::exp(-lambda * entropies[v]) * dist[v];
    sum += out.probs[v];
  }
  if (!(sum > 0.0)) throw std::invalid_argument("candidates carry no probability mass");
  for (TokenId v : candidates) out.probs[v] /= sum;
  return out;
}

namespace {

// Filter, hooks, entropy penalty, argmax. `entropy_of` is only consulted for
// non-singleton candidate sets.
template <typename EntropyOf>
TokenId select_token(const TokenDistribution& dist, EntropyOf&& entropy_of, const DecodingConfig& config,
                     std::span<const DistributionHook> hooks, StepTrace* trace) {
  auto candidates = filter_candidates(dist, config.tau);
  std::vector<double> probs(candidates.size());
  for (std::size_t k = 0; k < candidates.size(); ++k) probs[k] = dist[candidates[k]];
  for (const auto& hook : hooks) {
    hook(candidates, probs);
    for (double p : probs) {
      if (!(p >= 0.0) || !std::isfinite(p)) throw std::runtime_error("distribution hook produced an invalid weight");
    }
  }

  std::vector<double> entropy(candidates.size(), 0.0);
  std::vector<double> weights = probs;
  if (candidates.size() > 1) {
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      entropy[k] = entropy_of(candidates[k]);
      weights[k] = std::exp(-config.lambda * entropy[k]) * probs[k];
    }
  }
  // First maximum, i.e. the lowest id among ties.
  const auto best = static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) - weights.begin());
  const TokenId chosen = candidates[best];

  if (trace != nullptr) {
    double sum = 0.0;
    for (double w : weights) sum += w;
    if (!(sum > 0.0)) throw std::runtime_error("hooks removed all probability mass");
    for (double& w : weights) w /= sum;
    trace->candidates = std::move(candidates);
    trace->original = std::move(probs);
    trace->entropy = std::move(entropy);
    trace->adjusted = std::move(weights);
    trace->chosen = chosen;
  }
  return chosen;
}

}  // namespace

std::pair<TokenId, StepTrace> decode_step(const TinyTransformer& model, std::span<const TokenId> context,
                                          const EntropyVector& entropies, const DecodingConfig& config,
                                          std::span<const DistributionHook> hooks) {
  config.validate(model.spec());
  if (context.empty()) throw std::invalid_argument("decode_step requires a non-empty context");
  if (entropies.prompt_len == 0 || entropies.prompt_len > context.size() ||
      prompt_hash(context.first(entropies.prompt_len)) != entropies.prompt_hash) {
    throw StaleEntropyError("entropy vector does not belong to this context's prompt");
  }
  if (entropies.size() != model.spec().vocab_size) {
    throw std::invalid_argument("entropy vector size does not match vocabulary");
  }
  const auto hidden = model.forward(context);
  const auto dist = model.next_token_distribution(hidden, context.size() - 1);
  StepTrace trace;
  trace.step = context.size() - entropies.prompt_len;
  const TokenId chosen = select_token(dist, [&](TokenId v) { return entropies[v]; }, config, hooks, &trace);
  return {chosen, std::move(trace)};
}

GenerationResult generate(const TinyTransformer& model, std::span<const TokenId> prompt, const DecodingConfig& config,
                          std::span<const DistributionHook> hooks, EntropyStrategy strategy) {
  config.validate(model.spec());
  if (prompt.empty()) throw std::invalid_argument("generate requires a non-empty prompt");
  const auto start = std::chrono::steady_clock::now();
  const std::size_t layer = config.layer(model.spec());

  GenerationResult result;
  result.prompt.assign(prompt.begin(), prompt.end());

  // Prompt pass: one token at a time through the session, keeping every layer
  // so the entropy vector can be built from the same states.
  InferenceSession session(model);
  HiddenStates prompt_states(model.spec().num_layers, model.spec().hidden_dim, result.prompt);
  for (std::size_t pos = 0; pos < prompt.size(); ++pos) {
    session.append(prompt[pos]);
    if (strategy != EntropyStrategy::none) {
      auto src = session.last_state(layer);
      std::copy(src.begin(), src.end(), prompt_states.at(layer, pos).begin());
    }
  }

  EntropyVector cached;
  if (strategy == EntropyStrategy::precomputed) {
    cached = precompute_entropy_vector(prompt_states, model, layer, config.activation);
  }

  const auto is_stop = [&](TokenId t) {
    return std::find(config.stop_tokens.begin(), config.stop_tokens.end(), t) != config.stop_tokens.end();
  };

  for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
    const auto dist = model.next_token_distribution(session);
    StepTrace trace;
    trace.step = step;
    StepTrace* trace_ptr = config.record_trace ? &trace : nullptr;
    TokenId chosen = 0;
    switch (strategy) {
      case EntropyStrategy::none:
        chosen = dist.argmax();
        if (trace_ptr != nullptr) {
          trace = StepTrace{step, {chosen}, {dist[chosen]}, {0.0}, {1.0}, chosen};
        }
        break;
      case EntropyStrategy::precomputed:
        chosen = select_token(dist, [&](TokenId v) { return cached[v]; }, config, hooks, trace_ptr);
        break;
      case EntropyStrategy::recompute_each_step: {
        const auto fresh = precompute_entropy_vector(prompt_states, model, layer, config.activation);
        chosen = select_token(dist, [&](TokenId v) { return fresh[v]; }, config, hooks, trace_ptr);
        break;
      }
    }
    result.generated.push_back(chosen);
    if (config.record_trace) result.traces.push_back(std::move(trace));
    if (is_stop(chosen)) {
      result.stopped = true;
      break;
    }
    if (step + 1 < config.max_new_tokens) session.append(chosen);
  }

  std::span<const TokenId> visible = result.generated;
  if (result.stopped) visible = visible.first(visible.size() - 1);
  result.text = model.tokenizer().decode(visible);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  result.tokens_per_second =
      result.seconds > 0.0 ? static_cast<double>(result.generated.size()) / result.seconds : 0.0;
  return result;
}

}  // namespace actdec
