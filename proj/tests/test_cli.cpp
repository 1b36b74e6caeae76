#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "actdec/cli.hpp"
#include "actdec/decoder.hpp"
#include "actdec/detection.hpp"
#include "json.hpp"
#include "support.hpp"

using namespace actdec;
using namespace actdec::testing;
using nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "actdec");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = actdec::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const std::string& model_path() {
  static const std::string path = [] {
    const auto p = temp_path("cli_model.ttm").string();
    const auto r = run_cli({"--seed", "3", "-o", p, "genmodel", "--layers", "2", "--dim", "32", "--heads", "4", "--vocab",
                        "512", "--max-context", "128"});
    REQUIRE(r.code == 0);
    return p;
  }();
  return path;
}

std::string write_file(const std::string& name, const std::string& content) {
  const auto p = temp_path(name).string();
  std::ofstream(p, std::ios::binary) << content;
  return p;
}

bool is_plain_ascii(std::string_view s) {
  for (unsigned char c : s)
    if (c < 32 || c > 126) return false;
  return true;
}

}  // namespace

TEST_CASE("genmodel is deterministic") {
  const auto a = temp_path("gm_a.ttm").string(), b = temp_path("gm_b.ttm").string();
  const std::vector<std::string> shape{"genmodel", "--layers", "2", "--dim", "16", "--heads", "2", "--vocab", "300"};
  auto args_a = shape, args_b = shape;
  args_a.insert(args_a.begin(), {"--seed", "11", "-o", a});
  args_b.insert(args_b.begin(), {"--seed", "11", "-o", b});
  REQUIRE(run_cli(args_a).code == 0);
  REQUIRE(run_cli(args_b).code == 0);
  CHECK(read_bytes(a) == read_bytes(b));
  const auto m = load_model(a);
  CHECK(m.spec().vocab_size == 300);
  CHECK(m.spec().num_layers == 2);
}

TEST_CASE("genmodel rejects inconsistent shapes") {
  const auto r = run_cli({"-o", temp_path("bad.ttm").string(), "genmodel", "--dim", "63", "--heads", "4"});
  CHECK(r.code != 0);
  CHECK(r.err.find('\n') == r.err.size() - 1);
  CHECK(run_cli({"genmodel"}).code != 0);
}

TEST_CASE("usage errors exit nonzero") {
  CHECK(run_cli({}).code != 0);
  CHECK(run_cli({"frobnicate"}).code != 0);
  CHECK(run_cli({"--model", model_path(), "generate"}).code == 2);
  CHECK(run_cli({"--model", model_path(), "--lambda", "-1", "generate", "--prompt", "x"}).code != 0);
  const auto missing = run_cli({"--model", temp_path("nope.ttm").string(), "generate", "--prompt", "x"});
  CHECK(missing.code == 1);
  CHECK_FALSE(missing.err.empty());
}

TEST_CASE("generate is reproducible and lambda zero equals greedy") {
  const std::vector<std::string> base{"--model", model_path(), "--max-new-tokens", "16"};
  auto with = [&](std::vector<std::string> extra) {
    auto args = base;
    args.insert(args.end(), extra.begin(), extra.end());
    return run_cli(args);
  };
  const auto a = with({"generate", "--prompt", "The capital of France is"});
  const auto b = with({"generate", "--prompt", "The capital of France is"});
  REQUIRE(a.code == 0);
  CHECK(a.out == b.out);
  const auto zero = with({"--lambda", "0", "generate", "--prompt", "Once upon a time", "--no-stop"});
  const auto greedy = with({"generate", "--prompt", "Once upon a time", "--no-stop", "--greedy"});
  REQUIRE(zero.code == 0);
  CHECK(zero.out == greedy.out);
}

TEST_CASE("generate trace output") {
  const auto prompts = write_file("prompts.txt", "alpha beta\n\ngamma delta\n");
  const auto r = run_cli({"--model", model_path(), "--max-new-tokens", "6", "--trace", "generate", "--prompt-file", prompts,
                      "--no-stop"});
  REQUIRE(r.code == 0);
  std::istringstream lines(r.out);
  std::size_t count = 0;
  for (std::string line; std::getline(lines, line); ++count) {
    const auto j = json::parse(line);
    CHECK(j["tokens"].size() == 6);
    REQUIRE(j["trace"].size() == 6);
    for (const auto& step : j["trace"]) {
      const auto cand = step["candidates"].get<std::vector<TokenId>>();
      const auto chosen = step["chosen"].get<TokenId>();
      CHECK(std::find(cand.begin(), cand.end(), chosen) != cand.end());
      double sum = 0.0;
      for (double x : step["adjusted"]) sum += x;
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
  CHECK(count == 2);
}

TEST_CASE("detect on a planted single-token dataset") {
  const auto model = load_model(model_path());
  const auto& tok = model.tokenizer();
  std::string jsonl;
  for (int i = 0; i < 12; ++i) {
    const std::string prompt = "record number " + std::to_string(i) + " says";
    const auto ids = tok.encode(prompt);
    const auto dist = model.next_token_distribution(forward(model, ids), ids.size() - 1);
    // most and least likely single tokens whose text maps back to themselves
    TokenId best = 0, worst = 0;
    double hi = -1, lo = 2;
    for (TokenId v = 0; v < dist.size(); ++v) {
      const auto& text = tok.token_text(v);
      if (!is_plain_ascii(text) || tok.encode(text) != std::vector<TokenId>{v}) continue;
      if (dist[v] > hi) hi = dist[v], best = v;
      if (dist[v] < lo) lo = dist[v], worst = v;
    }
    jsonl += json{{"prompt", prompt},
                  {"answer_true", tok.token_text(best)},
                  {"answer_false", tok.token_text(worst)},
                  {"subject", {{"start", 0}, {"end", 6}}},
                  {"label", i % 3 != 0}}
                 .dump() +
             "\n";
  }
  const auto dataset = write_file("planted.jsonl", jsonl);
  const auto r = run_cli({"--model", model_path(), "detect", "--dataset", dataset});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["auroc"]["logit"] == 1.0);
  CHECK(j["auroc"].contains("logit_entropy"));
  CHECK(j["records"] == 12);
  CHECK(j["confusion"]["activated_correct"].get<int>() + j["confusion"]["activated_incorrect"].get<int>() +
            j["confusion"]["unactivated_correct"].get<int>() + j["confusion"]["unactivated_incorrect"].get<int>() ==
        12);

  const auto all = run_cli({"--model", model_path(), "--workers", "3", "detect", "--dataset", dataset, "--scorer", "logit",
                        "--scorer", "entropy", "--scorer", "subject"});
  REQUIRE(all.code == 0);
  const auto k = json::parse(all.out);
  CHECK(k["auroc"]["logit"] == 1.0);
  CHECK(k["auroc"].contains("entropy"));
  CHECK(k["auroc"].contains("subject"));
  CHECK_FALSE(k["auroc"].contains("logit_entropy"));

  CHECK(run_cli({"--model", model_path(), "detect", "--dataset", dataset, "--scorer", "bogus"}).code == 2);
}

TEST_CASE("detect dataset errors") {
  const auto empty = write_file("empty.jsonl", "\n\n");
  CHECK(run_cli({"--model", model_path(), "detect", "--dataset", empty}).code != 0);
  const auto broken = write_file("broken.jsonl", "{\"prompt\":\"a\",\"answer_true\":\"b\",\"answer_false\":\"c\"}\n{oops\n");
  const auto r = run_cli({"--model", model_path(), "detect", "--dataset", broken});
  CHECK(r.code != 0);
  CHECK(r.err.find("line 2") != std::string::npos);
  const auto missing = write_file("missing.jsonl", "{\"prompt\":\"a\",\"answer_true\":\"b\"}\n");
  CHECK(run_cli({"--model", model_path(), "detect", "--dataset", missing}).err.find("answer_false") != std::string::npos);
}

TEST_CASE("eval with hand-checked gold answers") {
  const auto model = load_model(model_path());
  DecodingConfig dc;
  dc.max_new_tokens = 3;
  dc.stop_tokens = default_stop_tokens(model.tokenizer());
  // Prompts whose greedy continuation is plain ASCII with at least one word.
  std::vector<std::pair<std::string, std::string>> picked;
  for (int i = 0; i < 200 && picked.size() < 3; ++i) {
    const std::string prompt = "question " + std::to_string(i) + ":";
    const auto text = greedy_generate(model, model.tokenizer().encode(prompt), dc).text;
    if (is_plain_ascii(text) && !normalize_answer(text).empty()) picked.emplace_back(prompt, text);
  }
  REQUIRE(picked.size() == 3);
  std::size_t words = 0;
  {
    std::istringstream in(normalize_answer(picked[2].second));
    for (std::string w; in >> w;) ++words;
  }
  const std::string jsonl = json{{"prompt", picked[0].first}, {"gold", picked[0].second}}.dump() + "\n" +
                            json{{"prompt", picked[1].first}, {"gold", "zzqx wqvv"}}.dump() + "\n" +
                            json{{"prompt", picked[2].first}, {"gold", picked[2].second + " zzqx wqvv"}}.dump() + "\n";
  const auto dataset = write_file("qa.jsonl", jsonl);
  const auto r = run_cli({"--model", model_path(), "--lambda", "0", "--max-new-tokens", "3", "eval", "--dataset", dataset});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  const double w = static_cast<double>(words);
  const double expected_f1 = (1.0 + 0.0 + 2.0 * w / (w + w + 2.0)) / 3.0;
  CHECK(j["em"].get<double>() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(j["f1"].get<double>() == doctest::Approx(expected_f1).epsilon(1e-12));
  CHECK(j["greedy"]["em"] == j["em"]);
  CHECK(j["greedy"]["f1"] == j["f1"]);
  CHECK(j["f1"].get<double>() >= j["em"].get<double>());
  CHECK(j["predictions"].size() == 3);

  const auto nogold = write_file("nogold.jsonl", "{\"prompt\":\"x\"}\n");
  CHECK(run_cli({"--model", model_path(), "eval", "--dataset", nogold}).code != 0);
}

TEST_CASE("eval activation column with a penalty") {
  const auto dataset = write_file("qa2.jsonl", "{\"prompt\":\"one two\",\"gold\":\"three\"}\n"
                                               "{\"prompt\":\"red green\",\"gold\":\"blue\"}\n");
  const auto r = run_cli({"--model", model_path(), "--lambda", "1.0", "--max-new-tokens", "4", "--workers", "2", "eval",
                      "--dataset", dataset});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  for (const char* key : {"em", "f1"}) {
    CHECK(j[key].get<double>() >= 0.0);
    CHECK(j[key].get<double>() <= 1.0);
  }
  CHECK(j["f1"].get<double>() >= j["em"].get<double>());
  CHECK(j["greedy"]["f1"].get<double>() >= j["greedy"]["em"].get<double>());
}

TEST_CASE("bench reports all three modes") {
  const auto text = run_cli({"--model", model_path(), "--max-new-tokens", "4", "bench", "--random-prompts", "2",
                         "--prompt-len", "8", "--repeats", "1"});
  REQUIRE(text.code == 0);
  for (const char* mode : {"greedy", "cached", "naive"}) CHECK(text.out.find(mode) != std::string::npos);
  const auto js = run_cli({"--model", model_path(), "--max-new-tokens", "4", "--json", "bench", "--random-prompts", "2",
                       "--prompt-len", "8", "--repeats", "1"});
  REQUIRE(js.code == 0);
  const auto j = json::parse(js.out);
  REQUIRE(j["modes"].size() == 3);
  CHECK(j["modes"][0]["mode"] == "greedy");
  CHECK(j["modes"][1]["mode"] == "cached");
  CHECK(j["modes"][2]["mode"] == "naive");
  CHECK(j["outputs_identical"] == true);
  CHECK(j["modes"][0]["tokens"] == 8);
}

TEST_CASE("export-activations csv") {
  for (const std::string mode : {"softmax", "l2"}) {
    const auto r = run_cli({"--model", model_path(), "--mode", mode, "export-activations", "--prompt", "hello world",
                        "--token", "o", "--token", "w"});
    REQUIRE(r.code == 0);
    const auto prompt_len = load_model(model_path()).tokenizer().encode("hello world").size();
    std::istringstream in(r.out);
    std::string line;
    std::getline(in, line);
    CHECK(line == "layer,position,token_id,token_text,value");
    std::map<std::pair<int, int>, std::vector<double>> groups;
    std::size_t rows = 0;
    for (; std::getline(in, line); ++rows) {
      // token texts here contain no commas, so a plain split is enough
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string x; std::getline(ss, x, ',');) f.push_back(x);
      REQUIRE(f.size() == 5);
      groups[{std::stoi(f[0]), std::stoi(f[2])}].push_back(std::stod(f[4]));
    }
    CHECK(rows == 2 * 2 * prompt_len);
    CHECK(groups.size() == 4);
    for (const auto& [key, values] : groups) {
      CHECK(values.size() == prompt_len);
      double sum = 0.0, sq = 0.0;
      for (double v : values) sum += v, sq += v * v;
      if (mode == "softmax") CHECK(std::abs(sum - 1.0) < 1e-6);
      else CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-6);
    }
  }
  CHECK(run_cli({"--model", model_path(), "--mode", "bogus", "export-activations", "--prompt", "x", "--token", "o"}).code ==
        2);
}

TEST_CASE("config file precedence") {
  const auto dataset = write_file("cfg.jsonl", "{\"prompt\":\"a b\",\"gold\":\"c\"}\n");
  const auto config = write_file("actdec.toml", "lambda = 0.25\nmax-new-tokens = 2\n");
  auto lambda_of = [&](std::vector<std::string> args) {
    args.insert(args.end(), {"eval", "--dataset", dataset});
    const auto r = run_cli(args);
    REQUIRE(r.code == 0);
    return json::parse(r.out)["lambda"].get<double>();
  };
  CHECK(lambda_of({"--model", model_path(), "--max-new-tokens", "2"}) == 0.5);
  CHECK(lambda_of({"--model", model_path(), "--config", config}) == 0.25);
  CHECK(lambda_of({"--model", model_path(), "--config", config, "--lambda", "0.75"}) == 0.75);
}
