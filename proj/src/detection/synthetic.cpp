#include <cmath>

#include "actdec/detection.hpp"
#include "actdec/rng.hpp"

namespace actdec {

namespace {

constexpr std::size_t kRelationDims = 32;
constexpr std::size_t kFillers = 16;
constexpr std::size_t kRelations = 4;
constexpr double kAnswerNoise = 0.008;  // LM-head noise on relation dims, shared by true and false answers

}  // namespace

// Layout: dims [0, pairs) carry one planted direction per subject; dims
// [pairs, pairs + 32) carry relation/filler content. Token ids are
// subjects, true answers, false answers, fillers, relations in that order.
// Prompts are [subject, filler, filler, relation].
PlantedDataset build_planted_dataset(std::uint64_t seed, std::size_t pairs) {
  if (pairs == 0) throw std::invalid_argument("planted dataset needs at least one pair");
  ModelSpec spec;
  spec.num_layers = 2;
  spec.num_heads = 4;
  spec.hidden_dim = static_cast<std::uint32_t>((pairs + kRelationDims + 3) / 4 * 4);
  spec.vocab_size = static_cast<std::uint32_t>(std::max<std::size_t>(256, 3 * pairs + kFillers + kRelations));
  spec.max_context = 16;

  const auto base = random_model(spec, seed);
  ModelWeights w = base.weights();
  const std::size_t d = spec.hidden_dim;
  Pcg32 rng(seed ^ 0x9e3779b97f4a7c15ULL);

  std::fill(w.token_embedding.begin(), w.token_embedding.end(), 0.f);
  std::fill(w.position_embedding.begin(), w.position_embedding.end(), 0.f);
  std::fill(w.lm_head.begin(), w.lm_head.end(), 0.f);

  const TokenId first_true = static_cast<TokenId>(pairs);
  const TokenId first_false = static_cast<TokenId>(2 * pairs);
  const TokenId first_filler = static_cast<TokenId>(3 * pairs);
  const TokenId first_relation = first_filler + kFillers;

  auto relation_vector = [&](TokenId token) {
    // Zero-mean over the relation dims so LayerNorm leaves planted dims at 0.
    std::vector<double> v(kRelationDims);
    double mean = 0.0;
    for (double& x : v) mean += (x = rng.normal());
    mean /= kRelationDims;
    for (std::size_t r = 0; r < kRelationDims; ++r) {
      w.token_embedding[token * d + pairs + r] = static_cast<float>(v[r] - mean);
    }
  };
  for (std::size_t k = 0; k < pairs; ++k) w.token_embedding[k * d + k] = 1.f;
  for (std::size_t j = 0; j < kFillers + kRelations; ++j) relation_vector(first_filler + static_cast<TokenId>(j));

  for (std::size_t k = 0; k < pairs; ++k) {
    const TokenId t = first_true + static_cast<TokenId>(k);
    const TokenId f = first_false + static_cast<TokenId>(k);
    w.lm_head[t * d + k] = static_cast<float>(0.8 + 0.4 * rng.uniform());
    for (std::size_t r = 0; r < kRelationDims; ++r) {
      w.lm_head[t * d + pairs + r] = static_cast<float>(rng.normal(0.0, kAnswerNoise));
      w.lm_head[f * d + pairs + r] = static_cast<float>(rng.normal(0.0, kAnswerNoise));
    }
  }

  PlantedDataset data{TinyTransformer(spec, std::move(w), base.tokenizer()), {}, 2};
  for (std::size_t k = 0; k < pairs; ++k) {
    PlantedPair p;
    p.prompt = {static_cast<TokenId>(k), first_filler + rng.uniform_below(kFillers),
                first_filler + rng.uniform_below(kFillers), first_relation + rng.uniform_below(kRelations)};
    p.subject_pos = 0;
    p.answer_true = first_true + static_cast<TokenId>(k);
    p.answer_false = first_false + static_cast<TokenId>(k);
    data.pairs.push_back(std::move(p));
  }
  return data;
}

EvalReport synthetic_detection_experiment(std::uint64_t seed, const SyntheticOptions& options) {
  const auto data = build_planted_dataset(seed, options.pairs);
  const auto& model = data.model;

  std::vector<double> logit_t, logit_f, le_t, le_f, ent_t, ent_f, subj_t, subj_f;
  std::vector<ConfusionItem> items;
  for (const auto& p : data.pairs) {
    const TokenId answers[2] = {p.answer_true, p.answer_false};
    for (int which = 0; which < 2; ++which) {
      const auto score = score_answer(model, p.prompt, std::span(&answers[which], 1), data.layer);
      const double subj = subject_activation_score(model, p.prompt, {p.subject_pos, p.subject_pos}, answers[which],
                                                   data.layer);
      (which == 0 ? logit_t : logit_f).push_back(score.logit());
      (which == 0 ? le_t : le_f).push_back(score.logit_entropy(options.lambda));
      (which == 0 ? ent_t : ent_f).push_back(-score.entropies.front());
      (which == 0 ? subj_t : subj_f).push_back(subj);
      items.push_back({p.prompt, p.subject_pos, answers[which], which == 0});
    }
  }

  EvalReport report;
  report.auroc["logit"] = auroc(logit_t, logit_f);
  report.auroc["logit_entropy"] = auroc(le_t, le_f);
  report.auroc["entropy"] = auroc(ent_t, ent_f);
  report.auroc["subject"] = auroc(subj_t, subj_f);
  report.confusion = activation_confusion(model, items, data.layer);
  return report;
}

}  // namespace actdec
