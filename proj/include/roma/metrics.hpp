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

// Evaluation: pivot-F1 verifiability, pivot retrieval, accuracy, output length, and
// score-based preference selection.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "roma/backends.hpp"
#include "roma/corpus.hpp"
#include "roma/preference.hpp"
#include "roma/synthesis.hpp"
#include "roma/trace.hpp"

namespace roma {

struct PivotScore {
  double value = 0.0;
  std::size_t intersection = 0;
  std::size_t candidate_size = 0;
  std::size_t reference_size = 0;
  double epsilon = 1e-8;
};

inline constexpr double kDefaultPivotEpsilon = 1e-8;

/// 2|P_r ∩ P*| / (|P_r| + |P*| + epsilon). Inputs are treated as sets of normalized pivots.
PivotScore pivot_f1(const std::vector<std::string>& candidate, const std::vector<std::string>& reference,
                    double epsilon = kDefaultPivotEpsilon);

/// Whether a trace mentions a pivot.
using PivotMatcher = std::function<bool(const ReasoningTrace&, const std::string& pivot)>;

/// Normalized-substring containment.
bool mentions_pivot(const ReasoningTrace& trace, const std::string& pivot);

struct RetrievalReport {
  std::size_t Q = 0;
  /// Per example: how many of the Q traces mention every annotated pivot.
  std::vector<std::size_t> hits;
  /// Fraction of all traces that are hits: sum(hits) / (Q * #examples).
  double rate = 0.0;
  /// Fraction of examples where at least one of the Q traces is a hit.
  double any_rate = 0.0;
};

/// Runs Q zero-shot samples per annotated example. Example i uses the stream derived
/// from (seed, i), so the report does not depend on `workers`.
RetrievalReport pivot_retrieval_rate(const Backend& backend, const Dataset& annotated, std::size_t Q,
                                     const PivotMatcher& matcher, const DecodeParams& decode, std::uint64_t seed,
                                     std::size_t workers = 1);

struct LengthReport {
  double mean = 0.0;
  std::size_t count = 0;
  /// Mean token count keyed by provenance name.
  std::map<std::string, double> by_source;
};

/// Arithmetic mean of token_count. Throws DataError on empty input.
LengthReport mean_output_length(std::span<const ReasoningTrace> traces);

struct EvalReport {
  double accuracy = 0.0;
  double mean_length = 0.0;
  std::size_t samples = 0;
};

/// `samples_per_example` zero-shot predictions per example; accuracy is the fraction
/// matching gold after normalization, mean_length the mean token count of those traces.
EvalReport evaluate(const Backend& backend, const Dataset& testset, const DecodeParams& decode,
                    std::size_t samples_per_example, std::uint64_t seed, std::size_t workers = 1);

/// Fraction of examples whose zero-shot prediction matches gold. Throws DataError on an empty set.
double accuracy(const Backend& backend, const Dataset& testset, const DecodeParams& decode, std::uint64_t seed,
                std::size_t workers = 1);

enum class SelectionMode { pivot_only, external_only, combined };

/// Picks one (chosen, rejected) pair from R+: chosen is the best-scoring trace, rejected
/// the worst among the rest, lower index on ties. The pivot score of a trace is its
/// pivot_f1 against the short path's majority pivots; combined mode averages the
/// (tie-averaged) ranks of the pivot and external scores. Fewer than two traces yield
/// no pair.
std::vector<PreferencePair> select_pairs_by_score(const ShortPath& spr, std::span<const ReasoningTrace> successful,
                                                  std::span<const std::vector<std::string>> trace_pivots,
                                                  std::span<const double> external_scores, SelectionMode mode,
                                                  double epsilon = kDefaultPivotEpsilon);

/// Ascending ranks starting at 1; tied values share their average rank.
std::vector<double> average_ranks(std::span<const double> values);

}  // namespace roma
