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

#include "roma/bootstrap.hpp"

#include <algorithm>

#include "roma/error.hpp"
#include "roma/jsonl.hpp"

namespace roma {

void BootstrapConfig::validate() const {
  if (K < 1) throw ConfigError("bootstrap K must be >= 1");
  if (verify_guided && verify_samples < 1) throw ConfigError("verify_samples must be >= 1");
}

CandidatePool collect_pool(const Backend& backend, const Example& example, const BootstrapConfig& cfg, Rng& rng) {
  cfg.validate();
  CandidatePool pool;
  pool.example_id = example.id;
  try {
    for (std::size_t k = 0; k < cfg.K; ++k) {
      ++pool.attempts;
      ReasoningTrace t = backend.predict_with_reasoning(example, cfg.zero_shot_decode, rng);
      t.provenance = Provenance::zero_shot;
      if (is_correct(t.predicted_label, example.gold_label)) pool.successful.push_back(pool.samples.size());
      pool.samples.push_back(std::move(t));
      ++pool.zero_shot_count;
    }
    for (std::size_t g = 0; g < cfg.guided_budget && pool.successful.empty(); ++g) {
      ++pool.attempts;
      ReasoningTrace t = backend.justify(example, example.gold_label, cfg.guided_decode, rng);
      t.provenance = Provenance::guided;
      t.predicted_label = example.gold_label;
      bool admit = true;
      if (cfg.verify_guided) {
        const auto dist = backend.label_probability(example, t, rng, cfg.verify_samples);
        admit = dist.argmax() == std::optional<Label>(example.gold_label);
      }
      if (admit) pool.successful.push_back(pool.samples.size());
      pool.samples.push_back(std::move(t));
    }
  } catch (const BackendError& e) {
    pool.failure = e.what();
  }
  return pool;
}

std::vector<ReasoningTrace> pool_to_rplus(const CandidatePool& pool) {
  std::vector<ReasoningTrace> out;
  out.reserve(pool.successful.size());
  for (std::size_t i : pool.successful) out.push_back(pool.samples.at(i));
  return out;
}

Json pool_to_json(const CandidatePool& pool) {
  Json j;
  j["schema"] = kPoolSchema;
  j["example_id"] = pool.example_id;
  Json samples = Json::array();
  for (const auto& s : pool.samples) samples.push_back(trace_to_json(s));
  j["samples"] = std::move(samples);
  j["zero_shot_count"] = pool.zero_shot_count;
  j["successful"] = pool.successful;
  j["attempts"] = pool.attempts;
  if (pool.failure) j["failure"] = *pool.failure;
  return j;
}

CandidatePool pool_from_json(const Json& j, const LabelSpace& space, std::size_t line) {
  if (j.value("schema", "") != kPoolSchema) throw DataError("record is not pool/v1", line);
  CandidatePool p;
  try {
    p.example_id = require_string(j, "example_id", line);
    for (const auto& s : require_field(j, "samples", line)) p.samples.push_back(trace_from_json(s, space, line));
    p.zero_shot_count = require_field(j, "zero_shot_count", line).get<std::size_t>();
    p.successful = require_field(j, "successful", line).get<std::vector<std::size_t>>();
    p.attempts = require_field(j, "attempts", line).get<std::size_t>();
    if (auto it = j.find("failure"); it != j.end()) p.failure = it->get<std::string>();
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed pool: ") + e.what(), line);
  }
  if (p.zero_shot_count > p.samples.size()) throw DataError("zero_shot_count exceeds sample count", line);
  for (std::size_t i : p.successful) {
    if (i >= p.samples.size()) throw DataError("successful index out of range", line);
  }
  if (!std::is_sorted(p.successful.begin(), p.successful.end())) throw DataError("successful must be ascending", line);
  return p;
}

std::string serialize_pools(const std::vector<CandidatePool>& pools) {
  std::vector<Json> recs;
  for (const auto& p : pools) recs.push_back(pool_to_json(p));
  return to_jsonl(recs);
}

void save_pools(const std::vector<CandidatePool>& pools, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_pools(pools));
}

std::vector<CandidatePool> load_pools(const std::filesystem::path& path, const LabelSpace& space) {
  std::vector<CandidatePool> out;
  for_each_jsonl(path, [&](const Json& rec, std::size_t line) { out.push_back(pool_from_json(rec, space, line)); });
  return out;
}

}  // namespace roma
