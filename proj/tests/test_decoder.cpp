#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "actdec/activation.hpp"
#include "actdec/decoder.hpp"
#include "actdec/rng.hpp"
#include "support.hpp"

using namespace actdec;
using namespace actdec::testing;

namespace {

EntropyVector entropies_for(std::vector<double> e, std::uint64_t hash = 0) {
  EntropyVector ev;
  ev.entropy = std::move(e);
  ev.prompt_len = 1;
  ev.prompt_hash = hash;
  return ev;
}

// Activation-decoding step recomputed from scratch: fresh forward pass over the
// whole context, entropies from the definition, filter and penalty written out.
TokenId oracle_step(const TinyTransformer& model, std::span<const TokenId> context, std::size_t prompt_len,
                    std::size_t layer, double lambda, double tau) {
  const auto hidden = forward(model, context);
  const auto prompt_hidden = forward(model, context.first(prompt_len));
  // next-token distribution: last layer through the final norm
  const auto p = oracle_lens_probs(model, hidden.at(model.spec().num_layers, context.size() - 1));
  const double max_p = *std::max_element(p.begin(), p.end());
  std::vector<TokenId> cand;
  for (TokenId v = 0; v < p.size(); ++v)
    if (p[v] >= tau * max_p) cand.push_back(v);
  if (cand.size() == 1) return cand[0];
  TokenId best = cand[0];
  double best_w = -1.0;
  for (TokenId v : cand) {
    const double weight = std::exp(-lambda * oracle_entropy(model, prompt_hidden, layer, v)) * p[v];
    if (weight > best_w) {
      best_w = weight;
      best = v;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("default layer and stop tokens") {
  CHECK(default_informative_layer(32) == 26);
  CHECK(default_informative_layer(4) == 3);
  CHECK(default_informative_layer(2) == 2);
  CHECK(default_informative_layer(1) == 1);
  CHECK(DecodingConfig{}.lambda == 0.5);
  CHECK(DecodingConfig{}.activation_top_k == 50);
  CHECK(kDefaultActivationTopK == 50);
  Tokenizer tok(default_vocabulary(512));
  const auto stops = default_stop_tokens(tok);
  CHECK(std::find(stops.begin(), stops.end(), TokenId{'\n'}) != stops.end());
  CHECK(std::find(stops.begin(), stops.end(), TokenId{256}) != stops.end());
}

TEST_CASE("config validation") {
  const auto spec = small_spec(4);
  DecodingConfig c;
  CHECK_NOTHROW(c.validate(spec));
  CHECK(c.layer(spec) == 3);
  c.lambda = -0.1;
  CHECK_THROWS_AS(c.validate(spec), std::invalid_argument);
  c = {};
  c.tau = 1.5;
  CHECK_THROWS_AS(c.validate(spec), std::invalid_argument);
  c = {};
  c.informative_layer = 0;
  CHECK_THROWS(c.validate(spec));
  c.informative_layer = 5;
  CHECK_THROWS(c.validate(spec));
  c.informative_layer = 4;
  CHECK_NOTHROW(c.validate(spec));
  c = {};
  c.max_new_tokens = 0;
  CHECK_THROWS_AS(c.validate(spec), std::invalid_argument);
}

TEST_CASE("candidate filter examples") {
  const TokenDistribution d{{0.6, 0.3, 0.1}};
  CHECK(filter_candidates(d, 0.25) == std::vector<TokenId>{0, 1});
  CHECK(filter_candidates(d, 0.0) == std::vector<TokenId>{0, 1, 2});
  CHECK(filter_candidates(d, 1.0) == std::vector<TokenId>{0});
  const TokenDistribution tie{{0.4, 0.2, 0.4}};
  CHECK(filter_candidates(tie, 1.0) == std::vector<TokenId>{0, 2});
}

TEST_CASE("candidate filter agrees with a scan") {
  Pcg32 rng(6);
  for (int trial = 0; trial < 300; ++trial) {
    const TokenDistribution d{random_distribution(rng, 1 + rng.uniform_below(50))};
    const double tau = rng.uniform();
    const double max_p = *std::max_element(d.probs.begin(), d.probs.end());
    std::vector<TokenId> expected;
    for (TokenId v = 0; v < d.size(); ++v)
      if (d[v] >= tau * max_p) expected.push_back(v);
    const auto got = filter_candidates(d, tau);
    CHECK(got == expected);
    CHECK(std::find(got.begin(), got.end(), d.argmax()) != got.end());
  }
}

TEST_CASE("adjusted distribution examples") {
  const TokenDistribution d{{0.5, 0.5}};
  const std::vector<TokenId> both{0, 1};
  const auto a = adjust_distribution(d, entropies_for({0.0, std::log(2.0)}), both, 1.0, 0);
  CHECK(std::abs(a[0] - 2.0 / 3.0) < 1e-9);
  CHECK(std::abs(a[1] - 1.0 / 3.0) < 1e-9);

  const TokenDistribution e{{0.5, 0.2, 0.3}};
  const auto same = adjust_distribution(e, entropies_for({0.7, 0.7, 0.7}), std::vector<TokenId>{0, 1, 2}, 2.0, 0);
  for (std::size_t v = 0; v < 3; ++v) CHECK(std::abs(same[v] - e[v]) < 1e-12);

  const auto zero = adjust_distribution(e, entropies_for({0.1, 2.0, 0.4}), std::vector<TokenId>{0, 2}, 0.0, 0);
  CHECK(std::abs(zero[0] - 0.5 / 0.8) < 1e-12);
  CHECK(zero[1] == 0.0);
  CHECK(std::abs(zero[2] - 0.3 / 0.8) < 1e-12);

  CHECK_THROWS_AS(adjust_distribution(d, entropies_for({0, 0}, 1), both, 1.0, 2), StaleEntropyError);
  CHECK_THROWS_AS(adjust_distribution(d, entropies_for({0, 0}), std::vector<TokenId>{}, 1.0, 0),
                  std::invalid_argument);
}

TEST_CASE("adjusted distribution properties") {
  Pcg32 rng(19);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng.uniform_below(30);
    const TokenDistribution d{random_distribution(rng, n)};
    std::vector<double> e(n);
    for (double& x : e) x = rng.uniform() * 3.0;
    const auto ev = entropies_for(e);
    const auto cand = filter_candidates(d, rng.uniform() * 0.5);
    const double lambda = rng.uniform() * 2.0;
    const auto adj = adjust_distribution(d, ev, cand, lambda, 0);
    double sum = 0.0;
    for (TokenId v = 0; v < n; ++v) {
      const bool in = std::find(cand.begin(), cand.end(), v) != cand.end();
      if (!in) CHECK(adj[v] == 0.0);
      CHECK(adj[v] >= 0.0);
      sum += adj[v];
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);

    // Ratio between a lower- and higher-entropy candidate grows with lambda.
    if (cand.size() >= 2) {
      TokenId a = cand[0], b = cand[1];
      if (e[a] > e[b]) std::swap(a, b);
      if (e[a] < e[b]) {
        double prev = -1.0;
        for (double lam : {0.0, 0.25, 0.5, 1.0, 2.0}) {
          const auto x = adjust_distribution(d, ev, cand, lam, 0);
          const double ratio = x[a] / x[b];
          CHECK(ratio > prev);
          prev = ratio;
        }
      }
    }
  }
}

TEST_CASE("lambda zero reproduces greedy decoding") {
  const auto spec = small_spec(4, 16, 2, 128, 64);
  const auto model = random_model(spec, 71);
  Pcg32 rng(72);
  for (int trial = 0; trial < 30; ++trial) {
    const auto prompt = random_tokens(rng, 1 + rng.uniform_below(20), spec.vocab_size);
    DecodingConfig c;
    c.lambda = 0.0;
    c.tau = rng.uniform();
    c.max_new_tokens = 24;
    CHECK(generate(model, prompt, c).generated == greedy_generate(model, prompt, c).generated);
  }
}

TEST_CASE("decode_step matches the from-scratch oracle") {
  const auto spec = small_spec(4, 16, 4, 96, 64);
  const auto model = random_model(spec, 5);
  Pcg32 rng(6);
  for (int trial = 0; trial < 12; ++trial) {
    const auto prompt = random_tokens(rng, 2 + rng.uniform_below(12), spec.vocab_size);
    DecodingConfig c;
    c.lambda = 0.5 + 2.0 * rng.uniform();
    c.tau = 0.02;
    c.max_new_tokens = 6;
    c.informative_layer = 1 + rng.uniform_below(spec.num_layers);
    const auto ev = precompute_entropy_vector(forward(model, prompt), model, *c.informative_layer);
    std::vector<TokenId> context = prompt;
    const auto result = generate(model, prompt, c);
    for (std::size_t step = 0; step < result.generated.size(); ++step) {
      const auto [tok, trace] = decode_step(model, context, ev, c);
      CHECK(tok == oracle_step(model, context, prompt.size(), *c.informative_layer, c.lambda, c.tau));
      CHECK(tok == result.generated[step]);
      CHECK(trace.step == step);
      CHECK(std::find(trace.candidates.begin(), trace.candidates.end(), tok) != trace.candidates.end());
      context.push_back(tok);
    }
  }
}

TEST_CASE("decode_step rejects entropies from another prompt") {
  const auto spec = small_spec();
  const auto model = random_model(spec, 5);
  const std::vector<TokenId> prompt{1, 2, 3};
  const auto ev = precompute_entropy_vector(forward(model, prompt), model, 1);
  DecodingConfig c;
  c.informative_layer = 1;
  CHECK_NOTHROW(decode_step(model, std::vector<TokenId>{1, 2, 3, 9}, ev, c));
  CHECK_THROWS_AS(decode_step(model, std::vector<TokenId>{1, 2, 4, 9}, ev, c), StaleEntropyError);
  CHECK_THROWS_AS(decode_step(model, std::vector<TokenId>{1, 2}, ev, c), StaleEntropyError);
}

TEST_CASE("strategies agree and traces are consistent") {
  const auto spec = small_spec(3, 16, 2, 200, 64);
  const auto model = random_model(spec, 44);
  Pcg32 rng(45);
  for (int trial = 0; trial < 10; ++trial) {
    const auto prompt = random_tokens(rng, 3 + rng.uniform_below(15), spec.vocab_size);
    DecodingConfig c;
    c.lambda = 1.0;
    c.tau = 0.05;
    c.max_new_tokens = 12;
    c.record_trace = true;
    const auto cached = generate(model, prompt, c, {}, EntropyStrategy::precomputed);
    const auto naive = generate(model, prompt, c, {}, EntropyStrategy::recompute_each_step);
    CHECK(cached.generated == naive.generated);
    REQUIRE(cached.traces.size() == cached.generated.size());
    for (std::size_t s = 0; s < cached.traces.size(); ++s) {
      const auto& t = cached.traces[s];
      CHECK(t.chosen == cached.generated[s]);
      CHECK(std::is_sorted(t.candidates.begin(), t.candidates.end()));
      CHECK(std::find(t.candidates.begin(), t.candidates.end(), t.chosen) != t.candidates.end());
      double sum = 0.0;
      for (double a : t.adjusted) sum += a;
      CHECK(std::abs(sum - 1.0) < 1e-9);
      const auto best = std::max_element(t.adjusted.begin(), t.adjusted.end()) - t.adjusted.begin();
      CHECK(t.candidates[static_cast<std::size_t>(best)] == t.chosen);
    }
  }
}

TEST_CASE("stopping rules") {
  const auto spec = small_spec(2, 16, 2, 64, 128);
  const auto model = random_model(spec, 3);
  Pcg32 rng(4);
  std::size_t stopped_runs = 0, full_runs = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto prompt = random_tokens(rng, 1 + rng.uniform_below(10), spec.vocab_size);
    DecodingConfig c;
    c.max_new_tokens = 1 + rng.uniform_below(30);
    for (TokenId v = 0; v < spec.vocab_size; ++v)
      if (rng.uniform_below(6) == 0) c.stop_tokens.push_back(v);
    const auto r = generate(model, prompt, c);
    CHECK(r.generated.size() <= c.max_new_tokens);
    CHECK(!r.generated.empty());
    const bool last_is_stop =
        std::find(c.stop_tokens.begin(), c.stop_tokens.end(), r.generated.back()) != c.stop_tokens.end();
    CHECK(r.stopped == last_is_stop);
    for (std::size_t i = 0; i + 1 < r.generated.size(); ++i) {
      CHECK(std::find(c.stop_tokens.begin(), c.stop_tokens.end(), r.generated[i]) == c.stop_tokens.end());
    }
    if (r.generated.size() < c.max_new_tokens) CHECK(r.stopped);
    (r.stopped ? stopped_runs : full_runs)++;
    std::vector<TokenId> visible = r.generated;
    if (r.stopped) visible.pop_back();
    CHECK(r.text == model.tokenizer().decode(visible));
  }
  CHECK(stopped_runs > 0);
  CHECK(full_runs > 0);

  DecodingConfig one;
  one.max_new_tokens = 1;
  CHECK(generate(model, std::vector<TokenId>{1, 2}, one).generated.size() == 1);
}

TEST_CASE("context limits") {
  const auto spec = small_spec(2, 16, 2, 64, 8);
  const auto model = random_model(spec, 3);
  DecodingConfig c;
  c.max_new_tokens = 1;
  CHECK_NOTHROW(generate(model, std::vector<TokenId>(8, 1), c));
  c.max_new_tokens = 2;
  CHECK_THROWS_AS(generate(model, std::vector<TokenId>(8, 1), c), ContextOverflowError);
  CHECK_THROWS_AS(generate(model, std::vector<TokenId>(9, 1), c), ContextOverflowError);
  CHECK_THROWS_AS(generate(model, std::vector<TokenId>{}, c), std::invalid_argument);
}

TEST_CASE("hooks run before the penalty") {
  const auto spec = small_spec(2, 16, 2, 64, 64);
  const auto model = random_model(spec, 8);
  Pcg32 rng(9);
  for (int trial = 0; trial < 10; ++trial) {
    const auto prompt = random_tokens(rng, 4, spec.vocab_size);
    DecodingConfig c;
    c.tau = 0.0;
    c.max_new_tokens = 5;
    c.record_trace = true;
    const TokenId forced = rng.uniform_below(spec.vocab_size);
    std::vector<DistributionHook> hooks{[&](std::span<const TokenId> cand, std::span<double> probs) {
      for (std::size_t k = 0; k < cand.size(); ++k)
        if (cand[k] != forced) probs[k] = 0.0;
    }};
    const auto r = generate(model, prompt, c, hooks);
    for (TokenId t : r.generated) CHECK(t == forced);
    for (const auto& t : r.traces) CHECK(t.original[t.chosen] > 0.0);

    // With lambda = 0 the result is the argmax of the hooked weights.
    c.lambda = 0.0;
    std::vector<double> bias(spec.vocab_size);
    for (double& b : bias) b = rng.uniform();
    std::vector<DistributionHook> scale{[&](std::span<const TokenId> cand, std::span<double> probs) {
      for (std::size_t k = 0; k < cand.size(); ++k) probs[k] *= bias[cand[k]];
    }};
    const auto s = generate(model, prompt, c, scale);
    for (const auto& t : s.traces) {
      const auto best = std::max_element(t.original.begin(), t.original.end()) - t.original.begin();
      CHECK(t.candidates[static_cast<std::size_t>(best)] == t.chosen);
    }
  }
}

TEST_CASE("benchmark modes") {
  const auto spec = small_spec(2, 32, 4, 256, 64);
  const auto model = random_model(spec, 10);
  Pcg32 rng(11);
  std::vector<std::vector<TokenId>> prompts{random_tokens(rng, 16, 256), random_tokens(rng, 24, 256)};
  DecodingConfig c;
  c.max_new_tokens = 8;
  const auto report = run_benchmark(model, prompts, c, 1);
  CHECK(report.rows.size() == 3);
  CHECK(report.outputs_identical);
  CHECK(report.row(BenchMode::cached).outputs == report.row(BenchMode::naive).outputs);
  CHECK(report.row(BenchMode::greedy).tokens == 16);
  CHECK(std::string(to_string(BenchMode::naive)) == "naive");
  CHECK(report.overhead(BenchMode::greedy) == 0.0);
}
