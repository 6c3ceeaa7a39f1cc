// Copyright 2026 The ROMA Pipeline Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "roma/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "roma/error.hpp"
#include "roma/jsonl.hpp"

namespace roma {
namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (char c : trim(s)) {
    if (is_space(c)) {
      pending_space = true;
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c;
  }
  return out;
}

bool is_trailing_punct(char c) { return std::string_view(".,;:!?").find(c) != std::string_view::npos; }

std::string strip_trailing_punct(std::string s) {
  while (!s.empty() && (is_trailing_punct(s.back()) || is_space(s.back()))) s.pop_back();
  return s;
}

std::string strip_markup(std::string s) {
  auto is_markup = [](char c) { return c == '*' || c == '`' || c == '"' || c == '\''; };
  std::size_t b = 0;
  while (b < s.size() && (is_markup(s[b]) || is_space(s[b]))) ++b;
  std::size_t e = s.size();
  while (e > b && (is_markup(s[e - 1]) || is_space(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

// Repeatedly drops "answer:" style lead-ins so normalization stays idempotent.
std::string strip_answer_prefix(std::string s) {
  static const std::string_view kPrefixes[] = {"final answer:", "final answer is", "the answer is",
                                               "answer:", "answer is", "answer"};
  bool changed = true;
  while (changed) {
    changed = false;
    s = strip_markup(s);
    for (std::string_view p : kPrefixes) {
      if (s.size() > p.size() && s.compare(0, p.size(), p) == 0) {
        const char next = s[p.size()];
        // "answer" followed by a letter is a word like "answers", not a prefix.
        if (p.back() != ':' && std::isalnum(static_cast<unsigned char>(next))) continue;
        s = std::string(trim(std::string_view(s).substr(p.size())));
        changed = true;
        break;
      }
    }
  }
  return s;
}

std::optional<char> leading_option_letter(std::string_view s) {
  if (s.size() >= 3 && (s[0] == '(' || s[0] == '[') && std::isalpha(static_cast<unsigned char>(s[1])) &&
      (s[2] == ')' || s[2] == ']')) {
    return s[1];
  }
  if (!s.empty() && std::isalpha(static_cast<unsigned char>(s[0]))) {
    if (s.size() == 1) return s[0];
    if (std::string_view(")].:").find(s[1]) != std::string_view::npos) return s[0];
  }
  return std::nullopt;
}

}  // namespace

LabelSpace LabelSpace::finite(std::vector<std::string> options) {
  std::set<std::string> seen;
  for (auto& o : options) {
    o = std::string(trim(o));
    if (o.empty()) throw ConfigError("label space option must be non-empty");
    if (!seen.insert(lower(o)).second) throw ConfigError("duplicate label space option: " + o);
  }
  LabelSpace s;
  s.finite_ = true;
  s.options_ = std::move(options);
  return s;
}

bool LabelSpace::contains(const Label& label) const {
  if (!finite_) return !label.value.empty();
  return std::find(options_.begin(), options_.end(), label.value) != options_.end();
}

Prediction normalize_label(std::string_view raw, const LabelSpace& space) {
  std::string s = strip_answer_prefix(collapse_whitespace(lower(raw)));
  if (!space.is_finite()) {
    s = strip_markup(strip_trailing_punct(std::move(s)));
    if (s.empty()) return std::nullopt;
    return Label{s};
  }
  const auto& options = space.options();
  auto match_exact = [&](const std::string& text) -> Prediction {
    for (const auto& o : options) {
      if (lower(o) == text) return Label{o};
    }
    return std::nullopt;
  };
  if (auto hit = match_exact(s)) return hit;
  if (auto hit = match_exact(strip_trailing_punct(s))) return hit;
  if (auto letter = leading_option_letter(s)) {
    for (const auto& o : options) {
      if (o.size() == 1 && std::tolower(static_cast<unsigned char>(o[0])) == *letter) return Label{o};
    }
  }
  return std::nullopt;
}

std::string normalize_pivot(std::string_view raw) { return collapse_whitespace(lower(raw)); }

std::vector<std::string> normalize_pivot_set(const std::vector<std::string>& raw) {
  std::set<std::string> out;
  for (const auto& p : raw) {
    auto n = normalize_pivot(p);
    if (!n.empty()) out.insert(std::move(n));
  }
  return {out.begin(), out.end()};
}

const Example* Dataset::find(std::string_view id) const {
  for (const auto& e : examples) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

std::filesystem::path schema_path_for(const std::filesystem::path& dataset_path) {
  auto p = dataset_path;
  p += ".schema.json";
  return p;
}

LabelSpace read_dataset_schema(const std::filesystem::path& dataset_path) {
  const auto path = schema_path_for(dataset_path);
  Json doc;
  try {
    doc = Json::parse(read_file(path));
  } catch (const Json::parse_error& e) {
    throw DataError("malformed schema file " + path.string() + ": " + e.what());
  }
  if (!doc.is_object() || doc.value("schema", "") != kDatasetSchema)
    throw DataError("schema file " + path.string() + " is not " + std::string(kDatasetSchema));
  const auto it = doc.find("label_space");
  if (it == doc.end()) throw DataError("schema file lacks label_space");
  if (it->is_string() && it->get<std::string>() == "free-form") return LabelSpace::free_form();
  if (!it->is_array()) throw DataError("label_space must be an array or \"free-form\"");
  return LabelSpace::finite(it->get<std::vector<std::string>>());
}

void write_dataset_schema(const std::filesystem::path& dataset_path, const LabelSpace& space) {
  Json doc;
  doc["schema"] = kDatasetSchema;
  if (space.is_finite())
    doc["label_space"] = space.options();
  else
    doc["label_space"] = "free-form";
  write_file_atomic(schema_path_for(dataset_path), doc.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& path, const LabelSpace& space) {
  Dataset d;
  d.label_space = space;
  std::set<std::string> ids;
  for_each_jsonl(path, [&](const Json& rec, std::size_t line) {
    Example ex;
    ex.id = require_string(rec, "id", line);
    if (ex.id.empty()) throw DataError("empty id", line);
    if (!ids.insert(ex.id).second) throw DataError("duplicate id \"" + ex.id + "\"", line);
    ex.question = require_string(rec, "question", line);
    const std::string raw_label = require_string(rec, "label", line);
    auto label = normalize_label(raw_label, space);
    if (!label || !space.contains(*label))
      throw DataError("label \"" + raw_label + "\" is outside the declared label space", line);
    ex.gold_label = *label;
    if (auto it = rec.find("pivots"); it != rec.end()) {
      if (!it->is_array()) throw DataError("\"pivots\" must be an array of strings", line);
      std::vector<std::string> raw;
      for (const auto& p : *it) {
        if (!p.is_string()) throw DataError("\"pivots\" must be an array of strings", line);
        raw.push_back(p.get<std::string>());
      }
      auto pivots = normalize_pivot_set(raw);
      if (pivots.empty()) throw DataError("\"pivots\" present but empty after normalization", line);
      ex.pivot_annotations = std::move(pivots);
    }
    if (auto it = rec.find("meta"); it != rec.end()) {
      if (!it->is_object()) throw DataError("\"meta\" must be an object of strings", line);
      for (const auto& [k, v] : it->items()) {
        if (!v.is_string()) throw DataError("meta value for \"" + k + "\" must be a string", line);
        ex.metadata.emplace(k, v.get<std::string>());
      }
    }
    d.examples.push_back(std::move(ex));
  });
  return d;
}

Dataset load_dataset(const std::filesystem::path& path) { return load_dataset(path, read_dataset_schema(path)); }

std::string serialize_dataset(const Dataset& dataset) {
  std::vector<Json> records;
  records.reserve(dataset.examples.size());
  for (const auto& ex : dataset.examples) {
    Json r;
    r["id"] = ex.id;
    r["question"] = ex.question;
    r["label"] = ex.gold_label.value;
    if (ex.pivot_annotations) r["pivots"] = normalize_pivot_set(*ex.pivot_annotations);
    if (!ex.metadata.empty()) {
      Json meta = Json::object();
      for (const auto& [k, v] : ex.metadata) meta[k] = v;
      r["meta"] = std::move(meta);
    }
    records.push_back(std::move(r));
  }
  return to_jsonl(records);
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_dataset(dataset));
  write_dataset_schema(path, dataset.label_space);
}

}  // namespace roma
