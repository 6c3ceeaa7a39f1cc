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

#include "roma/preference.hpp"

#include <set>

#include "roma/error.hpp"
#include "roma/jsonl.hpp"

namespace roma {

std::vector<PreferencePair> build_pairs(const ShortPath& spr, std::span<const ReasoningTrace> successful) {
  std::vector<PreferencePair> out;
  for (std::size_t i = 0; i < successful.size(); ++i) {
    if (successful[i].raw_text == spr.trace.raw_text) continue;
    out.push_back({spr.example_id, spr.trace, successful[i], i});
  }
  return out;
}

std::vector<PreferencePair> build_pairs(const ShortPath& spr, const CandidatePool& pool) {
  std::vector<PreferencePair> out;
  for (std::size_t i : pool.successful) {
    const ReasoningTrace& r = pool.samples.at(i);
    if (r.raw_text == spr.trace.raw_text) continue;
    out.push_back({spr.example_id, spr.trace, r, i});
  }
  return out;
}

void DpoConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("DPO beta must be positive");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("DPO learning rate must be positive");
  if (epochs < 1) throw ConfigError("DPO epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("DPO batch size must be >= 1");
}

double pairwise_sum(std::span<const double> values) {
  if (values.empty()) return 0.0;
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

double dpo_loss(std::span<const PairLogProbs> pairs, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw DataError("DPO beta must be positive and finite");
  std::vector<double> terms;
  terms.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (!std::isfinite(p.policy_chosen) || !std::isfinite(p.policy_rejected) || !std::isfinite(p.ref_chosen) ||
        !std::isfinite(p.ref_rejected))
      throw DataError("DPO loss needs finite log-probabilities");
    terms.push_back(neg_log_sigmoid(dpo_margin(p, beta)));
  }
  return pairwise_sum(terms);
}

PairLogProbs toy_pair_logprobs(const sim::ToyPolicy& policy, const sim::ToyPolicy& ref, const sim::PivotWorld& world,
                               const PreferencePair& pair) {
  const auto c = sim::walk_from_trace(world, pair.chosen);
  const auto r = sim::walk_from_trace(world, pair.rejected);
  return {sim::walk_logprob(policy, world, c), sim::walk_logprob(policy, world, r), sim::walk_logprob(ref, world, c),
          sim::walk_logprob(ref, world, r)};
}

double dpo_loss_toy(const sim::ToyPolicy& policy, const sim::ToyPolicy& ref, const sim::PivotWorld& world,
                    std::span<const PreferencePair> pairs, double beta) {
  std::vector<PairLogProbs> lps;
  lps.reserve(pairs.size());
  for (const auto& p : pairs) lps.push_back(toy_pair_logprobs(policy, ref, world, p));
  return dpo_loss(lps, beta);
}

std::vector<double> dpo_grad_toy(const sim::ToyPolicy& policy, const sim::ToyPolicy& ref,
                                 const sim::PivotWorld& world, std::span<const PreferencePair> pairs, double beta) {
  if (!(beta > 0.0)) throw DataError("DPO beta must be positive");
  std::vector<double> grad(policy.edge_logits.size(), 0.0);
  for (const auto& p : pairs) {
    const auto c = sim::walk_from_trace(world, p.chosen);
    const auto r = sim::walk_from_trace(world, p.rejected);
    const PairLogProbs lp{sim::walk_logprob(policy, world, c), sim::walk_logprob(policy, world, r),
                          sim::walk_logprob(ref, world, c), sim::walk_logprob(ref, world, r)};
    const double m = dpo_margin(lp, beta);
    // d/dm [-log sigmoid(m)] = -sigmoid(-m)
    const double sig_neg = 1.0 / (1.0 + std::exp(m));
    const double coeff = -sig_neg * beta;
    sim::accumulate_walk_logprob_grad(policy, world, c, coeff, grad);
    sim::accumulate_walk_logprob_grad(policy, world, r, -coeff, grad);
  }
  return grad;
}

std::string label_conditioned_prompt(const Example& x) {
  return x.question + "\n\nThe correct answer is " + x.gold_label.value + ".";
}

std::string serialize_preferences(std::span<const PreferencePair> pairs, const Dataset& dataset) {
  std::vector<Json> recs;
  recs.reserve(pairs.size());
  for (const auto& p : pairs) {
    const Example* x = dataset.find(p.example_id);
    if (!x) throw DataError("pair refers to unknown example " + p.example_id);
    Json j;
    j["id"] = p.example_id + ":" + std::to_string(p.rejected_index);
    j["prompt"] = x->question;
    j["prompt_with_label"] = label_conditioned_prompt(*x);
    j["chosen"] = p.chosen.raw_text;
    j["rejected"] = p.rejected.raw_text;
    recs.push_back(std::move(j));
  }
  return to_jsonl(recs);
}

void export_preferences(std::span<const PreferencePair> pairs, const Dataset& dataset,
                        const std::filesystem::path& path) {
  write_file_atomic(path, serialize_preferences(pairs, dataset));
}

PrefValidationReport validate_preferences(const std::filesystem::path& path) {
  PrefValidationReport report;
  std::set<std::string> ids;
  const std::string text = read_file(path);
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    auto fail = [&](std::string why) {
      ++report.invalid;
      report.issues.emplace_back(line_no, std::move(why));
    };
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error&) {
      fail("malformed JSON");
      continue;
    }
    if (!j.is_object()) {
      fail("not an object");
      continue;
    }
    std::string missing;
    for (const char* key : {"id", "prompt", "chosen", "rejected"}) {
      auto it = j.find(key);
      if (it == j.end() || !it->is_string()) {
        missing = key;
        break;
      }
    }
    if (!missing.empty()) {
      fail("missing or non-string \"" + missing + "\"");
      continue;
    }
    if (auto it = j.find("prompt_with_label"); it != j.end() && !it->is_string()) {
      fail("\"prompt_with_label\" must be a string");
      continue;
    }
    const auto chosen = j["chosen"].get<std::string>();
    const auto rejected = j["rejected"].get<std::string>();
    if (chosen.empty() || rejected.empty()) {
      fail("empty chosen or rejected text");
      continue;
    }
    if (chosen == rejected) {
      fail("chosen equals rejected");
      continue;
    }
    if (!ids.insert(j["id"].get<std::string>()).second) {
      fail("duplicate id");
      continue;
    }
    ++report.valid;
  }
  return report;
}

std::string serialize_pairs(std::span<const PreferencePair> pairs) {
  std::vector<Json> recs;
  for (const auto& p : pairs) {
    Json j;
    j["schema"] = kPairsSchema;
    j["example_id"] = p.example_id;
    j["rejected_index"] = p.rejected_index;
    j["chosen"] = trace_to_json(p.chosen);
    j["rejected"] = trace_to_json(p.rejected);
    recs.push_back(std::move(j));
  }
  return to_jsonl(recs);
}

void save_pairs(std::span<const PreferencePair> pairs, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_pairs(pairs));
}

std::vector<PreferencePair> load_pairs(const std::filesystem::path& path, const LabelSpace& space) {
  std::vector<PreferencePair> out;
  for_each_jsonl(path, [&](const Json& rec, std::size_t line) {
    if (rec.value("schema", "") != kPairsSchema) throw DataError("record is not pairs/v1", line);
    PreferencePair p;
    p.example_id = require_string(rec, "example_id", line);
    const Json& idx = require_field(rec, "rejected_index", line);
    if (!idx.is_number_unsigned()) throw DataError("rejected_index must be a nonnegative integer", line);
    p.rejected_index = idx.get<std::size_t>();
    p.chosen = trace_from_json(require_field(rec, "chosen", line), space, line);
    p.rejected = trace_from_json(require_field(rec, "rejected", line), space, line);
    if (p.chosen.raw_text == p.rejected.raw_text) throw DataError("pair has chosen == rejected", line);
    out.push_back(std::move(p));
  });
  return out;
}

}  // namespace roma
