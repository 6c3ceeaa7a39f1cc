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

// Stage A: candidate pool S_i and successful subset R_i+ per example.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "roma/backends.hpp"
#include "roma/corpus.hpp"
#include "roma/rng.hpp"
#include "roma/trace.hpp"

namespace roma {

struct BootstrapConfig {
  /// Zero-shot samples per example. The "recipe" preset uses 5.
  std::size_t K = 7;
  /// Maximum guided resamples when no zero-shot sample is correct; defaults to 2K.
  std::size_t guided_budget = 14;
  DecodeParams zero_shot_decode{};
  DecodeParams guided_decode{};
  /// Re-check guided traces with the reasoner's label read-out before admitting them.
  bool verify_guided = false;
  int verify_samples = 8;

  static BootstrapConfig with_k(std::size_t k) {
    BootstrapConfig c;
    c.K = k;
    c.guided_budget = 2 * k;
    return c;
  }
  void validate() const;
};

struct CandidatePool {
  std::string example_id;
  /// Zero-shot samples first (zero_shot_count of them), then any guided samples.
  std::vector<ReasoningTrace> samples;
  std::size_t zero_shot_count = 0;
  /// Indices into samples whose traces form R+, ascending.
  std::vector<std::size_t> successful;
  std::size_t attempts = 0;
  /// Set when a backend failure stopped collection.
  std::optional<std::string> failure;

  bool failed() const noexcept { return failure.has_value(); }
  friend bool operator==(const CandidatePool&, const CandidatePool&) = default;
};

/// Draws K zero-shot samples, marking the correct ones successful. When none is correct,
/// issues up to guided_budget guided calls, admitting guided traces directly (or after
/// the read-out check under verify_guided) until one succeeds. Backend errors mark the
/// pool failed instead of propagating.
CandidatePool collect_pool(const Backend& backend, const Example& example, const BootstrapConfig& cfg, Rng& rng);

/// Traces at the successful indices, in pool order.
std::vector<ReasoningTrace> pool_to_rplus(const CandidatePool& pool);

inline constexpr std::string_view kPoolSchema = "pool/v1";

Json pool_to_json(const CandidatePool& pool);
CandidatePool pool_from_json(const Json& j, const LabelSpace& space, std::size_t line = 0);
std::string serialize_pools(const std::vector<CandidatePool>& pools);
void save_pools(const std::vector<CandidatePool>& pools, const std::filesystem::path& path);
std::vector<CandidatePool> load_pools(const std::filesystem::path& path, const LabelSpace& space);

}  // namespace roma
