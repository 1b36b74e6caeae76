#include "actdec/cli.hpp"

#include <atomic>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "actdec/activation.hpp"
#include "actdec/decoder.hpp"
#include "actdec/detection.hpp"
#include "actdec/model.hpp"
#include "actdec/rng.hpp"

namespace actdec::cli {

namespace {

using nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flags shared by every subcommand (also accepted from the --config file).
struct CliConfig {
  std::string model_path = "model.ttm";
  double lambda = 0.5;
  std::size_t layer = 0;  // 0 = round(0.8125 * H)
  double tau = 0.1;
  std::size_t max_new_tokens = 64;
  std::size_t activation_top_k = kDefaultActivationTopK;
  std::uint64_t seed = 0;
  bool trace = false;
  bool json = false;
  std::string output_path;
  std::string mode = "softmax";
  std::size_t workers = 1;
};

struct GenmodelArgs {
  ModelSpec spec;
};

struct GenerateArgs {
  std::string prompt;
  std::string prompt_file;
  bool greedy = false;
  std::vector<std::string> stops;
  bool no_stop = false;
};

struct DetectArgs {
  std::string dataset;
  std::vector<std::string> scorers;
};

struct EvalArgs {
  std::string dataset;
};

struct BenchArgs {
  std::string prompt_file;
  std::size_t random_prompts = 4;
  std::size_t prompt_len = 64;
  std::size_t repeats = 3;
};

struct ExportArgs {
  std::string prompt;
  std::vector<std::string> tokens;
};

// Output goes to --output when given, otherwise to the command's stdout.
class Sink {
public:
  Sink(const std::string& path, std::ostream& fallback) {
    if (!path.empty()) {
      file_.open(path, std::ios::binary | std::ios::trunc);
      if (!file_) throw std::runtime_error("cannot open " + path + " for writing");
    }
    out_ = path.empty() ? &fallback : &file_;
  }
  std::ostream& stream() { return *out_; }

private:
  std::ofstream file_;
  std::ostream* out_;
};

template <typename F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open prompt file " + path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

std::string escape_line(std::string_view text) {
  std::string out;
  for (char c : text) {
    if (c == '\\') out += "\\\\";
    else if (c == '\n') out += "\\n";
    else if (c == '\r') out += "\\r";
    else out += c;
  }
  return out;
}

DecodingConfig decoding_config(const CliConfig& cfg, const TinyTransformer& model) {
  DecodingConfig dc;
  dc.lambda = cfg.lambda;
  if (cfg.layer != 0) dc.informative_layer = cfg.layer;
  dc.tau = cfg.tau;
  dc.max_new_tokens = cfg.max_new_tokens;
  dc.activation_top_k = cfg.activation_top_k;
  dc.stop_tokens = default_stop_tokens(model.tokenizer());
  dc.record_trace = cfg.trace;
  dc.validate(model.spec());
  return dc;
}

json trace_json(const StepTrace& t) {
  return {{"step", t.step},         {"candidates", t.candidates}, {"original", t.original},
          {"entropy", t.entropy},   {"adjusted", t.adjusted},     {"chosen", t.chosen}};
}

// Tiny models emit arbitrary bytes; invalid UTF-8 is replaced rather than thrown on.
std::string dump(const json& j, int indent = -1) {
  return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

// ---- subcommands ------------------------------------------------------------

int cmd_genmodel(const CliConfig& cfg, const GenmodelArgs& args, std::ostream& out) {
  try {
    args.spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (cfg.output_path.empty()) throw UsageError("genmodel requires --output");
  const auto model = random_model(args.spec, cfg.seed);
  save_model(model, cfg.output_path);
  const auto& s = args.spec;
  if (cfg.json) {
    out << dump({{"path", cfg.output_path},
                      {"num_layers", s.num_layers},
                      {"hidden_dim", s.hidden_dim},
                      {"num_heads", s.num_heads},
                      {"vocab_size", s.vocab_size},
                      {"max_context", s.max_context},
                      {"seed", cfg.seed}})
        << '\n';
  } else {
    out << "wrote " << cfg.output_path << " (layers=" << s.num_layers << " dim=" << s.hidden_dim
        << " heads=" << s.num_heads << " vocab=" << s.vocab_size << " max_context=" << s.max_context
        << " seed=" << cfg.seed << ")\n";
  }
  return 0;
}

int cmd_generate(const CliConfig& cfg, const GenerateArgs& args, std::ostream& out) {
  if (args.prompt.empty() == args.prompt_file.empty()) throw UsageError("give exactly one of --prompt or --prompt-file");
  const auto model = load_model(cfg.model_path);
  auto dc = decoding_config(cfg, model);
  if (args.no_stop) {
    dc.stop_tokens.clear();
  } else if (!args.stops.empty()) {
    dc.stop_tokens.clear();
    for (const auto& s : args.stops) {
      auto id = model.tokenizer().find(s);
      if (!id) throw UsageError("stop string '" + s + "' is not a vocabulary entry");
      dc.stop_tokens.push_back(*id);
    }
  }
  const auto prompts = args.prompt_file.empty() ? std::vector<std::string>{args.prompt} : read_lines(args.prompt_file);
  if (prompts.empty()) throw UsageError("no prompts given");

  Sink sink(cfg.output_path, out);
  const auto strategy = args.greedy ? EntropyStrategy::none : EntropyStrategy::precomputed;
  for (const auto& text : prompts) {
    const auto tokens = model.tokenizer().encode(text);
    if (tokens.empty()) throw UsageError("prompt is empty");
    const auto result = generate(model, tokens, dc, {}, strategy);
    if (cfg.json || cfg.trace) {
      json j = {{"prompt", json(text)},
                {"continuation", json(result.text)},
                {"tokens", result.generated},
                {"stopped", result.stopped}};
      if (cfg.trace) {
        j["trace"] = json::array();
        for (const auto& t : result.traces) j["trace"].push_back(trace_json(t));
      }
      sink.stream() << dump(j) << '\n';
    } else {
      sink.stream() << escape_line(result.text) << '\n';
    }
  }
  return 0;
}

int cmd_detect(const CliConfig& cfg, const DetectArgs& args, std::ostream& out) {
  const auto records = load_dataset(args.dataset);
  if (records.empty()) throw UsageError("dataset " + args.dataset + " has no records");
  require_detection_fields(records);
  const auto model = load_model(cfg.model_path);
  const std::size_t layer = cfg.layer != 0 ? cfg.layer : default_informative_layer(model.spec().num_layers);
  check_layer(model.spec(), layer);

  auto scorers = args.scorers;
  if (scorers.empty()) scorers = {"logit", "logit_entropy"};
  for (const auto& s : scorers) {
    if (s != "logit" && s != "logit_entropy" && s != "entropy" && s != "subject") {
      throw UsageError("unknown scorer '" + s + "' (expected logit, logit_entropy, entropy or subject)");
    }
    if (s == "subject") {
      for (const auto& r : records) {
        if (!r.subject) throw DatasetError(r.line, "scorer 'subject' needs a subject span");
      }
    }
  }

  const auto& tok = model.tokenizer();
  std::vector<std::map<std::string, ScoredPair>> scored(records.size());
  parallel_for(records.size(), cfg.workers, [&](std::size_t i) {
    const auto& r = records[i];
    const auto prompt = tok.encode(r.prompt);
    const auto yes = tok.encode(r.answer_true);
    const auto no = tok.encode(r.answer_false);
    const auto st = score_answer(model, prompt, yes, layer);
    const auto sf = score_answer(model, prompt, no, layer);
    auto entropy_sum = [](const AnswerScore& a) {
      double s = 0.0;
      for (double e : a.entropies) s += e;
      return -s;
    };
    for (const auto& name : scorers) {
      ScoredPair p{0.0, 0.0, name};
      if (name == "logit") {
        p.score_true = st.logit();
        p.score_false = sf.logit();
      } else if (name == "logit_entropy") {
        p.score_true = st.logit_entropy(cfg.lambda);
        p.score_false = sf.logit_entropy(cfg.lambda);
      } else if (name == "entropy") {
        p.score_true = entropy_sum(st);
        p.score_false = entropy_sum(sf);
      } else {
        const auto span = covering_token_span(tok, prompt, utf8_byte_offset(r.prompt, r.subject->start),
                                              utf8_byte_offset(r.prompt, r.subject->end));
        p.score_true = subject_activation_score(model, prompt, span, yes.front(), layer);
        p.score_false = subject_activation_score(model, prompt, span, no.front(), layer);
      }
      scored[i][name] = p;
    }
  });

  EvalReport report;
  for (const auto& name : scorers) {
    std::vector<double> pos, neg;
    for (const auto& row : scored) {
      pos.push_back(row.at(name).score_true);
      neg.push_back(row.at(name).score_false);
    }
    report.auroc[name] = auroc(pos, neg);
  }
  const bool labelled = std::all_of(records.begin(), records.end(), [](const auto& r) { return r.subject && r.label; });
  if (labelled) {
    report.confusion = activation_confusion(model, confusion_items(tok, records), layer, cfg.activation_top_k);
  }

  json j = to_json(report);
  j["records"] = records.size();
  j["layer"] = layer;
  j["lambda"] = cfg.lambda;
  Sink sink(cfg.output_path, out);
  sink.stream() << dump(j, 2) << '\n';
  return 0;
}

int cmd_eval(const CliConfig& cfg, const EvalArgs& args, std::ostream& out) {
  const auto records = load_dataset(args.dataset);
  if (records.empty()) throw UsageError("dataset " + args.dataset + " has no records");
  require_qa_fields(records);
  const auto model = load_model(cfg.model_path);
  auto dc = decoding_config(cfg, model);
  dc.record_trace = false;

  struct Row {
    std::string activation, greedy;
  };
  std::vector<Row> rows(records.size());
  parallel_for(records.size(), cfg.workers, [&](std::size_t i) {
    const auto prompt = model.tokenizer().encode(records[i].prompt);
    if (prompt.empty()) throw DatasetError(records[i].line, "prompt is empty");
    rows[i].activation = generate(model, prompt, dc).text;
    rows[i].greedy = greedy_generate(model, prompt, dc).text;
  });

  double em_a = 0, f1_a = 0, em_g = 0, f1_g = 0;
  json per_record = json::array();
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& gold = *records[i].gold;
    const double ea = exact_match(rows[i].activation, gold), fa = f1_score(rows[i].activation, gold);
    const double eg = exact_match(rows[i].greedy, gold), fg = f1_score(rows[i].greedy, gold);
    em_a += ea, f1_a += fa, em_g += eg, f1_g += fg;
    per_record.push_back({{"line", records[i].line},
                          {"activation", json(rows[i].activation)},
                          {"greedy", json(rows[i].greedy)},
                          {"em", ea},
                          {"f1", fa},
                          {"greedy_em", eg},
                          {"greedy_f1", fg}});
  }
  const auto n = static_cast<double>(records.size());
  EvalReport report;
  report.em = em_a / n;
  report.f1 = f1_a / n;
  json j = to_json(report);
  j["greedy"] = {{"em", em_g / n}, {"f1", f1_g / n}};
  j["records"] = records.size();
  j["lambda"] = dc.lambda;
  j["layer"] = dc.layer(model.spec());
  j["predictions"] = std::move(per_record);
  Sink sink(cfg.output_path, out);
  sink.stream() << dump(j) << '\n';
  return 0;
}

int cmd_bench(const CliConfig& cfg, const BenchArgs& args, std::ostream& out) {
  const auto model = load_model(cfg.model_path);
  auto dc = decoding_config(cfg, model);
  dc.stop_tokens.clear();  // fixed-length generations keep modes comparable
  dc.record_trace = false;

  std::vector<std::vector<TokenId>> prompts;
  if (!args.prompt_file.empty()) {
    for (const auto& line : read_lines(args.prompt_file)) prompts.push_back(model.tokenizer().encode(line));
  } else {
    if (args.prompt_len == 0) throw UsageError("--prompt-len must be >= 1");
    Pcg32 rng(cfg.seed);
    for (std::size_t p = 0; p < args.random_prompts; ++p) {
      std::vector<TokenId> prompt(args.prompt_len);
      for (auto& t : prompt) t = rng.uniform_below(model.spec().vocab_size);
      prompts.push_back(std::move(prompt));
    }
  }
  if (prompts.empty()) throw UsageError("no prompts to benchmark");

  const auto report = run_benchmark(model, prompts, dc, args.repeats);
  if (!report.outputs_identical) throw std::runtime_error("cached and naive decoding produced different outputs");

  Sink sink(cfg.output_path, out);
  auto& o = sink.stream();
  if (cfg.json) {
    json rows = json::array();
    for (const auto& r : report.rows) {
      rows.push_back({{"mode", to_string(r.mode)},
                      {"tokens", r.tokens},
                      {"seconds", r.seconds},
                      {"ms_per_token", r.ms_per_token},
                      {"overhead_vs_greedy", report.overhead(r.mode)}});
    }
    o << dump({{"prompts", prompts.size()},
                    {"max_new_tokens", dc.max_new_tokens},
                    {"repeats", args.repeats},
                    {"outputs_identical", report.outputs_identical},
                    {"modes", rows}})
      << '\n';
  } else {
    o << "mode     tokens  ms/token   overhead\n";
    for (const auto& r : report.rows) {
      o << std::left << std::setw(8) << to_string(r.mode) << ' ' << std::right << std::setw(6) << r.tokens << "  "
        << std::fixed << std::setprecision(4) << std::setw(8) << r.ms_per_token << "  " << std::showpos
        << std::setprecision(1) << std::setw(7) << 100.0 * report.overhead(r.mode) << '%' << std::noshowpos
        << '\n';
    }
    o << "cached/naive outputs identical: yes\n";
  }
  return 0;
}

int cmd_export(const CliConfig& cfg, const ExportArgs& args, std::ostream& out) {
  NormalizationMode mode;
  if (cfg.mode == "softmax") mode = NormalizationMode::softmax;
  else if (cfg.mode == "l2") mode = NormalizationMode::l2;
  else throw UsageError("--mode must be softmax or l2");
  if (args.tokens.empty()) throw UsageError("export-activations needs at least one --token");

  const auto model = load_model(cfg.model_path);
  const auto& tok = model.tokenizer();
  const auto prompt = tok.encode(args.prompt);
  if (prompt.empty()) throw UsageError("prompt is empty");
  std::vector<TokenId> ids;
  for (const auto& s : args.tokens) {
    std::vector<TokenId> encoded;
    try {
      encoded = tok.encode(s);
    } catch (const TokenizeError&) {
    }
    if (encoded.empty()) throw UsageError("token string '" + s + "' does not resolve to a vocabulary token");
    ids.push_back(encoded.front());
  }
  const auto cells = export_activation_heatmap(model.forward(prompt), model, ids, mode);
  Sink sink(cfg.output_path, out);
  write_heatmap_csv(sink.stream(), cells, tok);
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Activation decoding on tiny deterministic transformers", "actdec"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "TOML file mirroring the command-line flags (flags win)");

  CliConfig cfg;
  app.add_option("--model", cfg.model_path, "TTM1 model file")->capture_default_str();
  app.add_option("--lambda", cfg.lambda, "entropy penalty weight")->capture_default_str()->check(CLI::NonNegativeNumber);
  app.add_option("--layer", cfg.layer, "informative layer (default round(0.8125 * layers))");
  app.add_option("--tau", cfg.tau, "plausibility filter threshold")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  app.add_option("--max-new-tokens", cfg.max_new_tokens, "generation budget")->capture_default_str()
      ->check(CLI::PositiveNumber);
  app.add_option("--top-k-activation", cfg.activation_top_k, "rank threshold for 'activated'")
      ->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--seed", cfg.seed, "seed for every random choice")->capture_default_str();
  app.add_flag("--trace", cfg.trace, "emit per-step decoding traces as JSON");
  app.add_flag("--json", cfg.json, "machine-readable output");
  app.add_option("-o,--output", cfg.output_path, "output file (default stdout)");
  app.add_option("--mode", cfg.mode, "heatmap normalization: softmax or l2")->capture_default_str();
  app.add_option("--workers", cfg.workers, "worker threads for dataset commands")->capture_default_str()
      ->check(CLI::PositiveNumber);

  GenmodelArgs gm;
  auto* genmodel = app.add_subcommand("genmodel", "write a seeded TTM1 model");
  genmodel->add_option("--layers", gm.spec.num_layers)->capture_default_str();
  genmodel->add_option("--dim", gm.spec.hidden_dim)->capture_default_str();
  genmodel->add_option("--heads", gm.spec.num_heads)->capture_default_str();
  genmodel->add_option("--vocab", gm.spec.vocab_size)->capture_default_str();
  genmodel->add_option("--max-context", gm.spec.max_context)->capture_default_str();

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "continue prompts with activation decoding");
  gen->add_option("--prompt", ga.prompt, "prompt text");
  gen->add_option("--prompt-file", ga.prompt_file, "file with one prompt per line");
  gen->add_flag("--greedy", ga.greedy, "plain greedy decoding");
  gen->add_option("--stop", ga.stops, "stop string (vocabulary entry); default newline and end-of-text");
  gen->add_flag("--no-stop", ga.no_stop, "generate exactly --max-new-tokens tokens");

  DetectArgs da;
  auto* detect = app.add_subcommand("detect", "AUROC of true vs false answers");
  detect->add_option("--dataset", da.dataset, "JSONL dataset")->required();
  detect->add_option("--scorer", da.scorers, "logit, logit_entropy, entropy, subject (repeatable)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "EM/F1 of activation vs greedy decoding");
  eval->add_option("--dataset", ea.dataset, "JSONL dataset with prompt and gold")->required();

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "per-token latency of greedy, cached and naive decoding");
  bench->add_option("--prompt-file", ba.prompt_file, "file with one prompt per line");
  bench->add_option("--random-prompts", ba.random_prompts, "seeded random prompts when no file is given")
      ->capture_default_str();
  bench->add_option("--prompt-len", ba.prompt_len, "length of random prompts")->capture_default_str();
  bench->add_option("--repeats", ba.repeats, "timing repeats; the best run is kept")->capture_default_str();

  ExportArgs xa;
  auto* exp = app.add_subcommand("export-activations", "CSV of per-layer, per-position activations");
  exp->add_option("--prompt", xa.prompt, "prompt text")->required();
  exp->add_option("--token", xa.tokens, "token string of interest (first token is used; repeatable)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*genmodel) return cmd_genmodel(cfg, gm, out);
    if (*gen) return cmd_generate(cfg, ga, out);
    if (*detect) return cmd_detect(cfg, da, out);
    if (*eval) return cmd_eval(cfg, ea, out);
    if (*bench) return cmd_bench(cfg, ba, out);
    if (*exp) return cmd_export(cfg, xa, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace actdec::cli
