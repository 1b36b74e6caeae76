#include <charconv>
#include <cmath>
#include <ostream>

#include "actdec/activation.hpp"

namespace actdec {

std::vector<HeatmapCell> export_activation_heatmap(const HiddenStates& hidden, const TinyTransformer& model,
                                                   std::span<const TokenId> tokens_of_interest,
                                                   NormalizationMode mode, const ActivationOptions& options) {
  if (tokens_of_interest.empty()) throw std::invalid_argument("heatmap export needs at least one token");
  for (TokenId v : tokens_of_interest) {
    if (v >= model.spec().vocab_size) throw std::out_of_range("token of interest outside vocabulary");
  }
  const std::size_t t = hidden.positions();
  std::vector<HeatmapCell> cells;
  cells.reserve(model.spec().num_layers * t * tokens_of_interest.size());
  for (std::size_t layer = 1; layer <= model.spec().num_layers; ++layer) {
    const auto matrix = activation_matrix(hidden, model, layer, options);
    for (TokenId v : tokens_of_interest) {
      auto values = matrix.column(v);
      if (mode == NormalizationMode::softmax) {
        values = context_activation_distribution(values).probs;
      } else {
        double norm = 0.0;
        for (double s : values) norm += s * s;
        norm = std::sqrt(norm);
        if (norm > 0.0) {
          for (double& s : values) s /= norm;
        }
      }
      for (std::size_t i = 0; i < t; ++i) cells.push_back({layer, i, v, values[i]});
    }
  }
  return cells;
}

namespace {

void write_csv_field(std::ostream& out, std::string_view field) {
  if (field.find_first_of(",\"\r\n") == std::string_view::npos) {
    out << field;
    return;
  }
  out << '"';
  for (char c : field) {
    if (c == '"') out << '"';
    out << c;
  }
  out << '"';
}

}  // namespace

void write_heatmap_csv(std::ostream& out, std::span<const HeatmapCell> cells, const Tokenizer& tokenizer) {
  out << "layer,position,token_id,token_text,value\n";
  char buf[32];
  for (const auto& c : cells) {
    out << c.layer << ',' << c.position << ',' << c.token << ',';
    write_csv_field(out, tokenizer.token_text(c.token));
    const auto res = std::to_chars(buf, buf + sizeof buf, c.value);
    out << ',' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf)) << '\n';
  }
}

}  // namespace actdec
