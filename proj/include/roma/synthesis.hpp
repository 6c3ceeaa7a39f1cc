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

// Stage B: majority pivot mining, consolidation prompt, verified short-path reasoning.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "roma/backends.hpp"
#include "roma/corpus.hpp"
#include "roma/rng.hpp"
#include "roma/trace.hpp"

namespace roma {

struct PivotSet {
  struct Entry {
    std::string pivot;
    std::size_t support = 0;
    friend bool operator==(const Entry&, const Entry&) = default;
  };
  /// Every mined pivot, ordered by support (descending) then text.
  std::vector<Entry> pivots;
  /// |R+| the supports were counted over.
  std::size_t source_size = 0;

  /// Retained iff 2 * support > source_size.
  static bool is_majority(std::size_t support, std::size_t source_size) { return 2 * support > source_size; }
  std::vector<Entry> majority() const;
  std::vector<std::string> majority_pivots() const;

  friend bool operator==(const PivotSet&, const PivotSet&) = default;
};

/// Unions per-trace pivot mentions (deduplicated within a trace) into support counts.
/// Throws DataError on an empty R+.
PivotSet mine_pivots(const Example& x, std::span<const ReasoningTrace> successful, const PivotExtractor& extractor);

/// The consolidation prompt with the trace texts substituted, one "Reasoning {i+1}: {r}"
/// line per successful trace.
std::string build_consolidation_prompt(std::span<const ReasoningTrace> successful);

struct VerifierOutput {
  std::vector<std::string> pivots;
  std::string reasoning;
};

/// Expects a leading bulleted or numbered pivot block (optionally under a header line)
/// followed by the refined reasoning (optionally under a header). Without a pivot block
/// the whole output is the reasoning and the pivot list is empty.
VerifierOutput parse_verifier_output(std::string_view text);

enum class CheckMode {
  /// argmax over the reasoner's label distribution (empirical for sampling-only backends).
  distribution,
  /// one read-out of the reasoner's answer given the trace.
  single_reprediction,
};

struct SynthesisConfig {
  CheckMode check_mode = CheckMode::distribution;
  /// Re-prompts per distribution estimate on backends without direct probabilities.
  int label_samples = 8;
};

struct ShortPath {
  std::string example_id;
  ReasoningTrace trace;
  /// Mined from R+ and kept whichever branch produced the trace.
  PivotSet shared_pivots;
  /// Pivots the verifier listed in its own output.
  std::vector<std::string> verifier_pivots;
  bool check_passed = false;
  bool fallback_used = false;
  /// Index into R+ of the fallback trace.
  std::optional<std::size_t> fallback_index;
  std::string verifier_id;
  /// Why the synthesized candidate was rejected, when it was.
  std::optional<std::string> failure;

  friend bool operator==(const ShortPath&, const ShortPath&) = default;
};

/// Calls the verifier on the consolidation prompt, parses its output and keeps the
/// refined trace if the reasoner's read-out of it yields the gold label. Otherwise
/// (including verifier transport failure or an empty trace) falls back to the R+ trace
/// with the highest gold-label probability, lowest index on ties.
ShortPath synthesize_spr(const Backend& reasoner, const Verifier& verifier, const PivotExtractor& extractor,
                         const Example& x, std::span<const ReasoningTrace> successful, const SynthesisConfig& cfg,
                         Rng& rng);

inline constexpr std::string_view kSprSchema = "spr/v1";

Json spr_to_json(const ShortPath& spr);
ShortPath spr_from_json(const Json& j, const LabelSpace& space, std::size_t line = 0);
std::string serialize_sprs(const std::vector<ShortPath>& sprs);
void save_sprs(const std::vector<ShortPath>& sprs, const std::filesystem::path& path);
std::vector<ShortPath> load_sprs(const std::filesystem::path& path, const LabelSpace& space);

}  // namespace roma
