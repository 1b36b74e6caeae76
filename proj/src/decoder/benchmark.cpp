#include <algorithm>
#include <chrono>
#include <limits>

#include "actdec/decoder.hpp"

namespace actdec {

namespace {

EntropyStrategy strategy_for(BenchMode mode) {
  switch (mode) {
    case BenchMode::greedy: return EntropyStrategy::none;
    case BenchMode::cached: return EntropyStrategy::precomputed;
    case BenchMode::naive: return EntropyStrategy::recompute_each_step;
  }
  return EntropyStrategy::none;
}

// One pass over every prompt; returns wall-clock seconds.
double run_once(const TinyTransformer& model, std::span<const std::vector<TokenId>> prompts,
                const DecodingConfig& config, BenchMode mode, BenchTiming& timing) {
  timing.outputs.clear();
  timing.tokens = 0;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& prompt : prompts) {
    auto result = generate(model, prompt, config, {}, strategy_for(mode));
    timing.tokens += result.generated.size();
    timing.outputs.push_back(std::move(result.generated));
  }
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void finish(BenchTiming& timing) {
  timing.ms_per_token = timing.tokens == 0 ? 0.0 : 1e3 * timing.seconds / static_cast<double>(timing.tokens);
}

}  // namespace

const char* to_string(BenchMode mode) {
  switch (mode) {
    case BenchMode::greedy: return "greedy";
    case BenchMode::cached: return "cached";
    case BenchMode::naive: return "naive";
  }
  return "?";
}

BenchTiming benchmark_decode(const TinyTransformer& model, std::span<const std::vector<TokenId>> prompts,
                             const DecodingConfig& config, BenchMode mode, std::size_t repeats) {
  if (prompts.empty()) throw std::invalid_argument("benchmark needs at least one prompt");
  DecodingConfig cfg = config;
  cfg.record_trace = false;
  BenchTiming timing;
  timing.mode = mode;
  timing.seconds = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
    timing.seconds = std::min(timing.seconds, run_once(model, prompts, cfg, mode, timing));
  }
  finish(timing);
  return timing;
}

double BenchReport::overhead(BenchMode mode) const {
  const double base = row(BenchMode::greedy).ms_per_token;
  return base > 0.0 ? row(mode).ms_per_token / base - 1.0 : 0.0;
}

const BenchTiming& BenchReport::row(BenchMode mode) const {
  for (const auto& r : rows) {
    if (r.mode == mode) return r;
  }
  throw std::out_of_range("benchmark mode not measured");
}

BenchReport run_benchmark(const TinyTransformer& model, std::span<const std::vector<TokenId>> prompts,
                          const DecodingConfig& config, std::size_t repeats) {
  if (prompts.empty()) throw std::invalid_argument("benchmark needs at least one prompt");
  DecodingConfig cfg = config;
  cfg.record_trace = false;

  BenchReport report;
  for (BenchMode mode : {BenchMode::greedy, BenchMode::cached, BenchMode::naive}) {
    BenchTiming t;
    t.mode = mode;
    t.seconds = std::numeric_limits<double>::infinity();
    report.rows.push_back(std::move(t));
  }
  // The first round doubles as the output-identity check and as warm-up.
  for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
    for (auto& row : report.rows) {
      BenchTiming scratch;
      const double s = run_once(model, prompts, cfg, row.mode, scratch);
      if (r == 0) {
        row.outputs = std::move(scratch.outputs);
        row.tokens = scratch.tokens;
      }
      row.seconds = std::min(row.seconds, s);
    }
    if (r == 0) {
      report.outputs_identical = report.row(BenchMode::cached).outputs == report.row(BenchMode::naive).outputs;
    }
  }
  for (auto& row : report.rows) finish(row);
  return report;
}

}  // namespace actdec
