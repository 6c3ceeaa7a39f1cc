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

#include "roma/synthesis.hpp"

#include <algorithm>
#include <cctype>
#include <map>
#include <set>

#include "roma/error.hpp"
#include "roma/jsonl.hpp"

namespace roma {
namespace {

// Prompt text, split around the per-trace lines.
constexpr std::string_view kPromptHead =
    "You are an expert analyst. You will be given several correct reasoning paths. Rewrite a refined reasoning "
    "that focuses on shared key information/keywords.\n"
    "\n"
    "I have the following reasoning paths:\n";

constexpr std::string_view kPromptTail =
    "\n"
    "\n"
    "Begin by providing a list of shared decision pivots. Only include the decision pivots when they are visited "
    "by the majority of the provided reasoning paths in the candidate pool.\n"
    "\n"
    "Then, aggregate the multiple reasoning paths and provide a single refined reasoning that:\n"
    "\n"
    "1) focuses on the decision pivots (keywords/key information) that are shared across the candidate paths\n"
    "2) Avoids repetition";

std::string trim_copy(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool is_header(const std::string& line, std::string_view keyword) {
  const auto t = trim_copy(line);
  if (t.empty() || t.back() != ':' || strip_list_marker(t)) return false;
  return lower(t).find(keyword) != std::string::npos;
}

double gold_score(const Backend& reasoner, const Example& x, const ReasoningTrace& r, const SynthesisConfig& cfg,
                  Rng& rng) {
  if (cfg.check_mode == CheckMode::single_reprediction)
    return is_correct(reasoner.predict_given_reasoning(x, r, rng), x.gold_label) ? 1.0 : 0.0;
  return reasoner.label_probability(x, r, rng, cfg.label_samples).probability(x.gold_label);
}

// (passes, predicted label) for the correctness check on a candidate.
std::pair<bool, Prediction> run_check(const Backend& reasoner, const Example& x, const ReasoningTrace& r,
                                      const SynthesisConfig& cfg, Rng& rng) {
  if (cfg.check_mode == CheckMode::single_reprediction) {
    auto p = reasoner.predict_given_reasoning(x, r, rng);
    return {is_correct(p, x.gold_label), p};
  }
  auto top = reasoner.label_probability(x, r, rng, cfg.label_samples).argmax();
  return {is_correct(top, x.gold_label), top};
}

}  // namespace

std::vector<PivotSet::Entry> PivotSet::majority() const {
  std::vector<Entry> out;
  for (const auto& e : pivots) {
    if (is_majority(e.support, source_size)) out.push_back(e);
  }
  return out;
}

std::vector<std::string> PivotSet::majority_pivots() const {
  std::vector<std::string> out;
  for (const auto& e : majority()) out.push_back(e.pivot);
  return out;
}

PivotSet mine_pivots(const Example& x, std::span<const ReasoningTrace> successful, const PivotExtractor& extractor) {
  if (successful.empty()) throw DataError("cannot mine pivots from an empty R+ (example " + x.id + ")");
  std::map<std::string, std::size_t> support;
  for (const auto& r : successful) {
    for (const auto& p : normalize_pivot_set(extractor.extract(x, r))) ++support[p];
  }
  PivotSet set;
  set.source_size = successful.size();
  for (const auto& [p, c] : support) set.pivots.push_back({p, c});
  std::stable_sort(set.pivots.begin(), set.pivots.end(),
                   [](const PivotSet::Entry& a, const PivotSet::Entry& b) { return a.support > b.support; });
  return set;
}

std::string build_consolidation_prompt(std::span<const ReasoningTrace> successful) {
  std::string out(kPromptHead);
  for (std::size_t i = 0; i < successful.size(); ++i) {
    if (i) out += '\n';
    out += "Reasoning " + std::to_string(i + 1) + ": " + successful[i].raw_text;
  }
  out += kPromptTail;
  return out;
}

VerifierOutput parse_verifier_output(std::string_view text) {
  std::vector<std::string> lines;
  {
    std::size_t pos = 0;
    while (pos <= text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      lines.emplace_back(text.substr(pos, end - pos));
      pos = end + 1;
    }
  }
  auto skip_blank = [&](std::size_t i) {
    while (i < lines.size() && trim_copy(lines[i]).empty()) ++i;
    return i;
  };
  std::size_t i = skip_blank(0);
  if (i < lines.size() && is_header(lines[i], "pivot")) i = skip_blank(i + 1);
  std::vector<std::string> raw_pivots;
  while (i < lines.size()) {
    auto item = strip_list_marker(lines[i]);
    if (!item) break;
    raw_pivots.push_back(*item);
    ++i;
  }
  if (raw_pivots.empty()) return {{}, trim_copy(text)};
  i = skip_blank(i);
  if (i < lines.size() && is_header(lines[i], "reason")) i = skip_blank(i + 1);
  std::string reasoning;
  for (std::size_t j = i; j < lines.size(); ++j) {
    if (j > i) reasoning += '\n';
    reasoning += lines[j];
  }
  return {normalize_pivot_set(raw_pivots), trim_copy(reasoning)};
}

ShortPath synthesize_spr(const Backend& reasoner, const Verifier& verifier, const PivotExtractor& extractor,
                         const Example& x, std::span<const ReasoningTrace> successful, const SynthesisConfig& cfg,
                         Rng& rng) {
  if (successful.empty()) throw DataError("cannot synthesize a short path from an empty R+ (example " + x.id + ")");
  ShortPath spr;
  spr.example_id = x.id;
  spr.verifier_id = verifier.id();
  spr.shared_pivots = mine_pivots(x, successful, extractor);

  const std::string prompt = build_consolidation_prompt(successful);
  std::optional<ReasoningTrace> candidate;
  try {
    const ChannelledOutput out = verifier.consolidate(x, successful, prompt);
    VerifierOutput parsed = parse_verifier_output(out.output);
    spr.verifier_pivots = std::move(parsed.pivots);
    candidate = make_trace(parsed.reasoning, std::nullopt, Provenance::synthesized);
    if (!candidate) spr.failure = "verifier returned an empty reasoning";
  } catch (const BackendError& e) {
    spr.failure = std::string("verifier failed: ") + e.what();
  }

  if (candidate) {
    auto [passed, predicted] = run_check(reasoner, x, *candidate, cfg, rng);
    candidate->predicted_label = predicted;
    if (passed) {
      spr.trace = std::move(*candidate);
      spr.check_passed = true;
      return spr;
    }
    spr.failure = "synthesized reasoning failed the correctness check";
  }

  std::size_t best = 0;
  double best_score = -1.0;
  for (std::size_t i = 0; i < successful.size(); ++i) {
    const double s = gold_score(reasoner, x, successful[i], cfg, rng);
    if (s > best_score) {
      best = i;
      best_score = s;
    }
  }
  spr.trace = successful[best];
  spr.fallback_used = true;
  spr.fallback_index = best;
  return spr;
}

Json spr_to_json(const ShortPath& spr) {
  Json j;
  j["schema"] = kSprSchema;
  j["example_id"] = spr.example_id;
  Json pivots = Json::array();
  for (const auto& e : spr.shared_pivots.pivots) {
    Json p;
    p["pivot"] = e.pivot;
    p["support"] = e.support;
    p["majority"] = PivotSet::is_majority(e.support, spr.shared_pivots.source_size);
    pivots.push_back(std::move(p));
  }
  j["shared_pivots"] = std::move(pivots);
  j["source_size"] = spr.shared_pivots.source_size;
  j["verifier_pivots"] = spr.verifier_pivots;
  j["trace"] = trace_to_json(spr.trace);
  j["check_passed"] = spr.check_passed;
  j["fallback_used"] = spr.fallback_used;
  if (spr.fallback_index)
    j["fallback_index"] = *spr.fallback_index;
  else
    j["fallback_index"] = nullptr;
  j["verifier_id"] = spr.verifier_id;
  if (spr.failure) j["failure"] = *spr.failure;
  return j;
}

ShortPath spr_from_json(const Json& j, const LabelSpace& space, std::size_t line) {
  if (j.value("schema", "") != kSprSchema) throw DataError("record is not spr/v1", line);
  ShortPath s;
  try {
    s.example_id = require_string(j, "example_id", line);
    s.shared_pivots.source_size = require_field(j, "source_size", line).get<std::size_t>();
    for (const auto& p : require_field(j, "shared_pivots", line))
      s.shared_pivots.pivots.push_back({p.at("pivot").get<std::string>(), p.at("support").get<std::size_t>()});
    s.verifier_pivots = require_field(j, "verifier_pivots", line).get<std::vector<std::string>>();
    s.trace = trace_from_json(require_field(j, "trace", line), space, line);
    s.check_passed = require_field(j, "check_passed", line).get<bool>();
    s.fallback_used = require_field(j, "fallback_used", line).get<bool>();
    if (const Json& fi = require_field(j, "fallback_index", line); !fi.is_null())
      s.fallback_index = fi.get<std::size_t>();
    s.verifier_id = require_string(j, "verifier_id", line);
    if (auto it = j.find("failure"); it != j.end()) s.failure = it->get<std::string>();
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed spr: ") + e.what(), line);
  }
  if (!s.check_passed && !s.fallback_used) throw DataError("short path is neither verified nor a fallback", line);
  return s;
}

std::string serialize_sprs(const std::vector<ShortPath>& sprs) {
  std::vector<Json> recs;
  for (const auto& s : sprs) recs.push_back(spr_to_json(s));
  return to_jsonl(recs);
}

void save_sprs(const std::vector<ShortPath>& sprs, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_sprs(sprs));
}

std::vector<ShortPath> load_sprs(const std::filesystem::path& path, const LabelSpace& space) {
  std::vector<ShortPath> out;
  for_each_jsonl(path, [&](const Json& rec, std::size_t line) { out.push_back(spr_from_json(rec, space, line)); });
  return out;
}

}  // namespace roma
