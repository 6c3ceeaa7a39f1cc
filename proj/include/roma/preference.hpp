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

#pragma once

// Stage C: chosen/rejected pairs, the DPO objective and its exact toy-policy gradient,
// and pref/v1 export for external trainers.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "roma/bootstrap.hpp"
#include "roma/corpus.hpp"
#include "roma/simulator.hpp"
#include "roma/synthesis.hpp"
#include "roma/trace.hpp"

namespace roma {

struct PreferencePair {
  std::string example_id;
  ReasoningTrace chosen;
  ReasoningTrace rejected;
  /// Pool index of the rejected trace (R+ index when built from a bare R+ list).
  std::size_t rejected_index = 0;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

/// One pair (spr, r) per r in R+ whose raw text differs from the short path's.
/// Repeated draws of the same text each yield a pair.
std::vector<PreferencePair> build_pairs(const ShortPath& spr, std::span<const ReasoningTrace> successful);
std::vector<PreferencePair> build_pairs(const ShortPath& spr, const CandidatePool& pool);

struct DpoConfig {
  double beta = 0.1;
  double lr = 1e-6;
  std::size_t epochs = 3;
  std::size_t batch_size = 8;

  void validate() const;
};

/// Log-probabilities of one pair under the policy and the frozen reference.
struct PairLogProbs {
  double policy_chosen = 0.0;
  double policy_rejected = 0.0;
  double ref_chosen = 0.0;
  double ref_rejected = 0.0;
};

/// beta * [(policy_chosen - policy_rejected) - (ref_chosen - ref_rejected)]
inline double dpo_margin(const PairLogProbs& lp, double beta) {
  return beta * ((lp.policy_chosen - lp.policy_rejected) - (lp.ref_chosen - lp.ref_rejected));
}

/// -log sigmoid(m), computed as softplus(-m) without overflow.
inline double neg_log_sigmoid(double m) {
  return m >= 0.0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
}

/// Sum with a fixed pairwise tree shape, so the result depends only on the input order.
double pairwise_sum(std::span<const double> values);

/// Sum over pairs of -log sigmoid(margin). Throws DataError on non-finite inputs or beta <= 0.
double dpo_loss(std::span<const PairLogProbs> pairs, double beta);

/// Same objective with log-probabilities supplied per pair by callables returning
/// (chosen, rejected).
template <typename PolicyLogp, typename RefLogp>
double dpo_loss(std::span<const PreferencePair> pairs, PolicyLogp&& policy_logp, RefLogp&& ref_logp, double beta) {
  std::vector<PairLogProbs> lps;
  lps.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto [pc, pr] = policy_logp(p);
    const auto [rc, rr] = ref_logp(p);
    lps.push_back({pc, pr, rc, rr});
  }
  return dpo_loss(lps, beta);
}

/// Log-probabilities of a pair's traces under toy policies of one world.
PairLogProbs toy_pair_logprobs(const sim::ToyPolicy& policy, const sim::ToyPolicy& ref, const sim::PivotWorld& world,
                               const PreferencePair& pair);

double dpo_loss_toy(const sim::ToyPolicy& policy, const sim::ToyPolicy& ref, const sim::PivotWorld& world,
                    std::span<const PreferencePair> pairs, double beta);

/// Exact gradient of dpo_loss_toy with respect to policy.edge_logits; `ref` is held fixed.
std::vector<double> dpo_grad_toy(const sim::ToyPolicy& policy, const sim::ToyPolicy& ref,
                                 const sim::PivotWorld& world, std::span<const PreferencePair> pairs, double beta);

inline constexpr std::string_view kPrefSchema = "pref/v1";
inline constexpr std::string_view kPairsSchema = "pairs/v1";

/// The label-conditioned prompt variant shipped alongside the plain question.
std::string label_conditioned_prompt(const Example& x);

/// pref/v1 lines, keys in the order id, prompt, prompt_with_label, chosen, rejected.
/// id is "<example_id>:<rejected_index>". Pairs keep their given order.
std::string serialize_preferences(std::span<const PreferencePair> pairs, const Dataset& dataset);
void export_preferences(std::span<const PreferencePair> pairs, const Dataset& dataset,
                        const std::filesystem::path& path);

struct PrefValidationReport {
  std::size_t valid = 0;
  std::size_t invalid = 0;
  /// (line, reason) for every invalid line.
  std::vector<std::pair<std::size_t, std::string>> issues;
};

/// Per-line pref/v1 schema check, including chosen != rejected and unique ids.
PrefValidationReport validate_preferences(const std::filesystem::path& path);

/// Internal pairs/v1 file keeping full traces, for stage-by-stage runs.
std::string serialize_pairs(std::span<const PreferencePair> pairs);
void save_pairs(std::span<const PreferencePair> pairs, const std::filesystem::path& path);
std::vector<PreferencePair> load_pairs(const std::filesystem::path& path, const LabelSpace& space);

}  // namespace roma
