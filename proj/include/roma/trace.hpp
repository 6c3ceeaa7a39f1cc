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

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "roma/corpus.hpp"
#include "roma/jsonl.hpp"

namespace roma {

enum class Provenance { zero_shot, guided, synthesized };

std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

/// A reasoning path r = (t_1..t_l) plus what the producing model concluded from it.
struct ReasoningTrace {
  std::vector<std::string> steps;
  std::string raw_text;
  Prediction predicted_label;
  Provenance provenance = Provenance::zero_shot;
  std::size_t token_count = 0;
  std::optional<double> logprob;

  friend bool operator==(const ReasoningTrace&, const ReasoningTrace&) = default;
};

/// Splits on newlines; a single-line text falls back to sentence boundaries
/// ('.', '!' or '?' followed by whitespace). Blank pieces are dropped.
std::vector<std::string> split_steps(std::string_view text);

/// Whitespace-delimited token count.
std::size_t count_tokens(std::string_view text);

/// Builds a trace from free text. Returns std::nullopt when the text has no steps.
std::optional<ReasoningTrace> make_trace(std::string_view text, Prediction predicted, Provenance provenance);

/// Builds a trace from explicit steps; raw_text is the steps joined by '\n'.
ReasoningTrace make_trace_from_steps(std::vector<std::string> steps, Prediction predicted, Provenance provenance,
                                     std::optional<double> logprob = std::nullopt);

Json trace_to_json(const ReasoningTrace& trace);
/// `space` re-validates the stored prediction; `line` is used for error messages.
ReasoningTrace trace_from_json(const Json& j, const LabelSpace& space, std::size_t line = 0);

}  // namespace roma
