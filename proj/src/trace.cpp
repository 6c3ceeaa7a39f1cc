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

#include "roma/trace.hpp"

#include <cctype>
#include <cmath>

#include "roma/error.hpp"

namespace roma {
namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trimmed(std::string_view s) {
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return std::string(s);
}

}  // namespace

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::zero_shot:
      return "zero_shot";
    case Provenance::guided:
      return "guided";
    case Provenance::synthesized:
      return "synthesized";
  }
  return "zero_shot";
}

Provenance provenance_from_string(std::string_view s) {
  if (s == "zero_shot") return Provenance::zero_shot;
  if (s == "guided") return Provenance::guided;
  if (s == "synthesized") return Provenance::synthesized;
  throw DataError("unknown provenance \"" + std::string(s) + "\"");
}

std::vector<std::string> split_steps(std::string_view text) {
  std::vector<std::string> steps;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto piece = trimmed(text.substr(pos, end - pos));
    if (!piece.empty()) steps.push_back(std::move(piece));
    pos = end + 1;
  }
  if (steps.size() != 1) return steps;

  std::vector<std::string> sentences;
  const std::string& line = steps.front();
  std::size_t start = 0;
  for (std::size_t i = 0; i + 1 < line.size(); ++i) {
    if ((line[i] == '.' || line[i] == '!' || line[i] == '?') && is_space(line[i + 1])) {
      auto piece = trimmed(std::string_view(line).substr(start, i + 1 - start));
      if (!piece.empty()) sentences.push_back(std::move(piece));
      start = i + 1;
    }
  }
  auto tail = trimmed(std::string_view(line).substr(start));
  if (!tail.empty()) sentences.push_back(std::move(tail));
  return sentences;
}

std::size_t count_tokens(std::string_view text) {
  std::size_t n = 0;
  bool in_token = false;
  for (char c : text) {
    if (is_space(c)) {
      in_token = false;
    } else if (!in_token) {
      in_token = true;
      ++n;
    }
  }
  return n;
}

std::optional<ReasoningTrace> make_trace(std::string_view text, Prediction predicted, Provenance provenance) {
  ReasoningTrace t;
  t.steps = split_steps(text);
  if (t.steps.empty()) return std::nullopt;
  t.raw_text = trimmed(text);
  t.predicted_label = std::move(predicted);
  t.provenance = provenance;
  t.token_count = count_tokens(t.raw_text);
  return t;
}

ReasoningTrace make_trace_from_steps(std::vector<std::string> steps, Prediction predicted, Provenance provenance,
                                     std::optional<double> logprob) {
  ReasoningTrace t;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (i) t.raw_text += '\n';
    t.raw_text += steps[i];
  }
  t.steps = std::move(steps);
  t.predicted_label = std::move(predicted);
  t.provenance = provenance;
  t.token_count = count_tokens(t.raw_text);
  t.logprob = logprob;
  return t;
}

Json trace_to_json(const ReasoningTrace& trace) {
  Json j;
  j["text"] = trace.raw_text;
  j["steps"] = trace.steps;
  j["provenance"] = to_string(trace.provenance);
  if (trace.predicted_label)
    j["prediction"] = trace.predicted_label->value;
  else
    j["prediction"] = nullptr;
  j["tokens"] = trace.token_count;
  if (trace.logprob && std::isfinite(*trace.logprob))
    j["logprob"] = *trace.logprob;
  else if (trace.logprob)
    j["logprob"] = "-inf";
  return j;
}

ReasoningTrace trace_from_json(const Json& j, const LabelSpace& space, std::size_t line) {
  ReasoningTrace t;
  t.raw_text = require_string(j, "text", line);
  const Json& steps = require_field(j, "steps", line);
  if (!steps.is_array() || steps.empty()) throw DataError("trace \"steps\" must be a non-empty array", line);
  for (const auto& s : steps) {
    if (!s.is_string()) throw DataError("trace step must be a string", line);
    t.steps.push_back(s.get<std::string>());
  }
  try {
    t.provenance = provenance_from_string(require_string(j, "provenance", line));
  } catch (const DataError& e) {
    throw DataError(e.what(), line);
  }
  const Json& pred = require_field(j, "prediction", line);
  if (pred.is_string()) {
    t.predicted_label = normalize_label(pred.get<std::string>(), space);
    if (!t.predicted_label) throw DataError("stored prediction is not a canonical label", line);
  } else if (!pred.is_null()) {
    throw DataError("\"prediction\" must be a string or null", line);
  }
  const Json& tokens = require_field(j, "tokens", line);
  if (!tokens.is_number_unsigned()) throw DataError("\"tokens\" must be a nonnegative integer", line);
  t.token_count = tokens.get<std::size_t>();
  if (auto it = j.find("logprob"); it != j.end()) {
    if (it->is_number())
      t.logprob = it->get<double>();
    else if (it->is_string() && it->get<std::string>() == "-inf")
      t.logprob = -INFINITY;
    else
      throw DataError("\"logprob\" must be a number or \"-inf\"", line);
  }
  return t;
}

}  // namespace roma
