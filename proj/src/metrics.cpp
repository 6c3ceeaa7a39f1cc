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

#include "roma/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "roma/error.hpp"
#include "roma/parallel.hpp"
#include "roma/rng.hpp"

namespace roma {

PivotScore pivot_f1(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                    double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("pivot_f1 epsilon must be positive");
  const auto ca = normalize_pivot_set(candidate);
  const auto cb = normalize_pivot_set(reference);
  const std::set<std::string> a(ca.begin(), ca.end());
  const std::set<std::string> b(cb.begin(), cb.end());
  PivotScore s;
  s.epsilon = epsilon;
  s.candidate_size = a.size();
  s.reference_size = b.size();
  for (const auto& p : a) s.intersection += b.count(p);
  s.value = 2.0 * static_cast<double>(s.intersection) /
            (static_cast<double>(s.candidate_size) + static_cast<double>(s.reference_size) + epsilon);
  return s;
}

bool mentions_pivot(const ReasoningTrace& trace, const std::string& pivot) {
  const std::string needle = normalize_pivot(pivot);
  if (needle.empty()) return false;
  return normalize_pivot(trace.raw_text).find(needle) != std::string::npos;
}

RetrievalReport pivot_retrieval_rate(const Backend& backend, const Dataset& annotated, std::size_t Q,
                                     const PivotMatcher& matcher, const DecodeParams& decode, std::uint64_t seed,
                                     std::size_t workers) {
  if (Q < 1) throw ConfigError("retrieval needs Q >= 1");
  if (annotated.examples.empty()) throw DataError("retrieval needs at least one annotated example");
  for (const auto& ex : annotated.examples) {
    if (!ex.pivot_annotations) throw DataError("example " + ex.id + " has no pivot annotations");
  }
  const PivotMatcher& match = matcher ? matcher : PivotMatcher(mentions_pivot);
  RetrievalReport report;
  report.Q = Q;
  report.hits.assign(annotated.examples.size(), 0);
  parallel_for(annotated.examples.size(), workers, [&](std::size_t i) {
    const Example& ex = annotated.examples[i];
    Rng rng = make_rng(seed, {i});
    std::size_t hits = 0;
    for (std::size_t q = 0; q < Q; ++q) {
      const ReasoningTrace t = backend.predict_with_reasoning(ex, decode, rng);
      const bool all = std::all_of(ex.pivot_annotations->begin(), ex.pivot_annotations->end(),
                                   [&](const std::string& p) { return match(t, p); });
      if (all) ++hits;
    }
    report.hits[i] = hits;
  });
  const double n = static_cast<double>(annotated.examples.size());
  const std::size_t total = std::accumulate(report.hits.begin(), report.hits.end(), std::size_t{0});
  const auto any = std::count_if(report.hits.begin(), report.hits.end(), [](std::size_t h) { return h > 0; });
  report.rate = static_cast<double>(total) / (static_cast<double>(Q) * n);
  report.any_rate = static_cast<double>(any) / n;
  return report;
}

LengthReport mean_output_length(std::span<const ReasoningTrace> traces) {
  if (traces.empty()) throw DataError("mean output length needs at least one trace");
  LengthReport r;
  r.count = traces.size();
  std::map<std::string, std::pair<double, std::size_t>> acc;
  double total = 0.0;
  for (const auto& t : traces) {
    total += static_cast<double>(t.token_count);
    auto& [sum, n] = acc[std::string(to_string(t.provenance))];
    sum += static_cast<double>(t.token_count);
    ++n;
  }
  r.mean = total / static_cast<double>(traces.size());
  for (const auto& [k, v] : acc) r.by_source[k] = v.first / static_cast<double>(v.second);
  return r;
}

EvalReport evaluate(const Backend& backend, const Dataset& testset, const DecodeParams& decode,
                    std::size_t samples_per_example, std::uint64_t seed, std::size_t workers) {
  if (testset.examples.empty()) throw DataError("evaluation needs a nonempty test set");
  if (samples_per_example < 1) throw ConfigError("evaluation needs at least one sample per example");
  const std::size_t n = testset.examples.size();
  std::vector<std::size_t> correct(n, 0), tokens(n, 0);
  parallel_for(n, workers, [&](std::size_t i) {
    const Example& ex = testset.examples[i];
    Rng rng = make_rng(seed, {i});
    for (std::size_t s = 0; s < samples_per_example; ++s) {
      const ReasoningTrace t = backend.predict_with_reasoning(ex, decode, rng);
      if (is_correct(t.predicted_label, ex.gold_label)) ++correct[i];
      tokens[i] += t.token_count;
    }
  });
  EvalReport r;
  r.samples = n * samples_per_example;
  const double denom = static_cast<double>(r.samples);
  r.accuracy = static_cast<double>(std::accumulate(correct.begin(), correct.end(), std::size_t{0})) / denom;
  r.mean_length = static_cast<double>(std::accumulate(tokens.begin(), tokens.end(), std::size_t{0})) / denom;
  return r;
}

double accuracy(const Backend& backend, const Dataset& testset, const DecodeParams& decode, std::uint64_t seed,
                std::size_t workers) {
  return evaluate(backend, testset, decode, 1, seed, workers).accuracy;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::vector<PreferencePair> select_pairs_by_score(const ShortPath& spr, std::span<const ReasoningTrace> successful,
                                                  std::span<const std::vector<std::string>> trace_pivots,
                                                  std::span<const double> external_scores, SelectionMode mode,
                                                  double epsilon) {
  const std::size_t n = successful.size();
  if (n < 2) return {};
  if (mode != SelectionMode::external_only && trace_pivots.size() != n)
    throw DataError("need pivots for every trace in R+");
  if (mode != SelectionMode::pivot_only && external_scores.size() != n)
    throw DataError("need an external score for every trace in R+");

  std::vector<double> pivot_scores(n, 0.0);
  if (mode != SelectionMode::external_only) {
    const auto reference = spr.shared_pivots.majority_pivots();
    for (std::size_t i = 0; i < n; ++i)
      pivot_scores[i] = pivot_f1(normalize_pivot_set(trace_pivots[i]), reference, epsilon).value;
  }
  std::vector<double> score(n);
  switch (mode) {
    case SelectionMode::pivot_only:
      score = pivot_scores;
      break;
    case SelectionMode::external_only:
      score.assign(external_scores.begin(), external_scores.end());
      break;
    case SelectionMode::combined: {
      const auto a = average_ranks(pivot_scores);
      const auto b = average_ranks(external_scores);
      for (std::size_t i = 0; i < n; ++i) score[i] = (a[i] + b[i]) / 2.0;
      break;
    }
  }
  std::size_t top = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (score[i] > score[top]) top = i;
  }
  std::optional<std::size_t> bottom;
  for (std::size_t i = 0; i < n; ++i) {
    if (i == top) continue;
    if (!bottom || score[i] < score[*bottom]) bottom = i;
  }
  PreferencePair p;
  p.example_id = spr.example_id;
  p.chosen = successful[top];
  p.rejected = successful[*bottom];
  p.rejected_index = *bottom;
  return {p};
}

}  // namespace roma
