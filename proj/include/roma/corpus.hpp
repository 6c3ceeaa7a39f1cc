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

// Dataset model, label normalization and dataset/v1 persistence.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace roma {

/// A canonical answer. Only produced by normalize_label, so equality is post-normalization.
struct Label {
  std::string value;
  friend bool operator==(const Label&, const Label&) = default;
  friend auto operator<=>(const Label&, const Label&) = default;
};

/// Result of normalizing a model answer: a label, or the explicit "unparseable" verdict
/// (std::nullopt). Unparseable predictions never compare equal to a gold label.
using Prediction = std::optional<Label>;

inline bool is_correct(const Prediction& predicted, const Label& gold) {
  return predicted.has_value() && *predicted == gold;
}

/// Either a declared finite answer set (e.g. A/B/C/D) or free-form answers.
class LabelSpace {
 public:
  static LabelSpace free_form() { return LabelSpace{}; }
  /// Options keep their declared spelling as the canonical form; they must be
  /// non-empty and distinct case-insensitively.
  static LabelSpace finite(std::vector<std::string> options);

  bool is_finite() const noexcept { return finite_; }
  const std::vector<std::string>& options() const noexcept { return options_; }
  bool contains(const Label& label) const;

  friend bool operator==(const LabelSpace&, const LabelSpace&) = default;

 private:
  bool finite_ = false;
  std::vector<std::string> options_;
};

/// Maps raw model text onto the label space.
///
/// Input is trimmed and lowercased. For finite spaces the text must equal an option
/// (case-insensitively) or start with a single-letter option marker such as "B)",
/// "(b)", "b." or "b:"; an optional leading "answer:" / "the answer is" is skipped.
/// Anything else is unparseable. Free-form answers are lowercased, trimmed,
/// internal whitespace collapsed, and trailing punctuation stripped.
Prediction normalize_label(std::string_view raw, const LabelSpace& space);

/// Pivot identity: lowercase, trim, collapse internal whitespace.
std::string normalize_pivot(std::string_view raw);

/// Normalizes, drops empties, dedupes and sorts.
std::vector<std::string> normalize_pivot_set(const std::vector<std::string>& raw);

struct Example {
  std::string id;
  std::string question;
  Label gold_label;
  std::optional<std::vector<std::string>> pivot_annotations;  // sorted, normalized, non-empty
  std::map<std::string, std::string> metadata;

  friend bool operator==(const Example&, const Example&) = default;
};

struct Dataset {
  LabelSpace label_space;
  std::vector<Example> examples;

  const Example* find(std::string_view id) const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline constexpr std::string_view kDatasetSchema = "dataset/v1";

/// Side file "<path>.schema.json" holding {"schema": "dataset/v1", "label_space": [...] | "free-form"}.
std::filesystem::path schema_path_for(const std::filesystem::path& dataset_path);
LabelSpace read_dataset_schema(const std::filesystem::path& dataset_path);
void write_dataset_schema(const std::filesystem::path& dataset_path, const LabelSpace& space);

/// Loads dataset/v1 JSONL. Labels are normalized into `space`; errors name the
/// offending line (missing field, duplicate id, label outside the space, bad pivots).
Dataset load_dataset(const std::filesystem::path& path, const LabelSpace& space);

/// Same, reading the label space from the schema side file.
Dataset load_dataset(const std::filesystem::path& path);

/// Writes one record per line with keys in the order id, question, label, pivots, meta.
/// `pivots` is omitted when absent, `meta` when empty. Also writes the schema side file.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);

/// The exact bytes save_dataset writes for the JSONL body.
std::string serialize_dataset(const Dataset& dataset);

}  // namespace roma
