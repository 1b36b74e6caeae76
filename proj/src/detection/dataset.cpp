#include <fstream>
#include <istream>

#include "actdec/detection.hpp"

namespace actdec {

using nlohmann::json;

DatasetError::DatasetError(std::size_t line, const std::string& message)
    : std::runtime_error(line == 0 ? message : "line " + std::to_string(line) + ": " + message), line_(line) {}

namespace {

std::optional<std::string> string_field(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw DatasetError(line, std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

std::size_t offset_field(const json& span, const char* key, std::size_t line) {
  auto it = span.find(key);
  if (it == span.end() || !it->is_number_integer() || it->get<long long>() < 0) {
    throw DatasetError(line, std::string("subject.") + key + " must be a non-negative integer");
  }
  return it->get<std::size_t>();
}

}  // namespace

std::vector<DetectionRecord> parse_dataset(std::istream& in) {
  std::vector<DetectionRecord> records;
  std::string text;
  for (std::size_t line = 1; std::getline(in, text); ++line) {
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(text);
    } catch (const json::parse_error& e) {
      throw DatasetError(line, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw DatasetError(line, "expected a JSON object");

    DetectionRecord r;
    r.line = line;
    auto prompt = string_field(obj, "prompt", line);
    if (!prompt) throw DatasetError(line, "missing required field 'prompt'");
    r.prompt = std::move(*prompt);
    r.answer_true = string_field(obj, "answer_true", line).value_or("");
    r.answer_false = string_field(obj, "answer_false", line).value_or("");
    r.gold = string_field(obj, "gold", line);
    if (auto it = obj.find("label"); it != obj.end() && !it->is_null()) {
      if (!it->is_boolean()) throw DatasetError(line, "field 'label' must be a boolean");
      r.label = it->get<bool>();
    }
    if (auto it = obj.find("subject"); it != obj.end() && !it->is_null()) {
      if (!it->is_object()) throw DatasetError(line, "field 'subject' must be {start, end}");
      CharSpan span{offset_field(*it, "start", line), offset_field(*it, "end", line)};
      if (span.start >= span.end) throw DatasetError(line, "subject span is empty");
      r.subject = span;
    }
    records.push_back(std::move(r));
  }
  return records;
}

std::vector<DetectionRecord> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  return parse_dataset(in);
}

void require_detection_fields(std::span<const DetectionRecord> records) {
  for (const auto& r : records) {
    if (r.answer_true.empty()) throw DatasetError(r.line, "missing required field 'answer_true'");
    if (r.answer_false.empty()) throw DatasetError(r.line, "missing required field 'answer_false'");
    if (r.subject) {
      try {
        utf8_byte_offset(r.prompt, r.subject->end);
      } catch (const std::out_of_range&) {
        throw DatasetError(r.line, "subject span lies outside the prompt");
      }
    }
  }
}

void require_qa_fields(std::span<const DetectionRecord> records) {
  for (const auto& r : records) {
    if (!r.gold) throw DatasetError(r.line, "missing required field 'gold'");
  }
}

json to_json(const EvalReport& report) {
  json out;
  out["auroc"] = json::object();
  for (const auto& [scorer, value] : report.auroc) out["auroc"][scorer] = value;
  out["em"] = report.em ? json(*report.em) : json(nullptr);
  out["f1"] = report.f1 ? json(*report.f1) : json(nullptr);
  if (report.confusion) {
    const auto& c = *report.confusion;
    out["confusion"] = {
        {"activated_correct", c.activated_correct},
        {"activated_incorrect", c.activated_incorrect},
        {"unactivated_correct", c.unactivated_correct},
        {"unactivated_incorrect", c.unactivated_incorrect},
        {"activated_rate_correct", c.activated_rate_correct()},
        {"activated_rate_incorrect", c.activated_rate_incorrect()},
    };
  } else {
    out["confusion"] = nullptr;
  }
  return out;
}

}  // namespace actdec
