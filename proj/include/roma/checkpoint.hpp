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
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace roma {

std::string sha256_hex(std::string_view data);

enum class Stage { baseline, bootstrap, synthesize, pairs, train };

std::string_view to_string(Stage s);
Stage stage_from_string(std::string_view s);

/// A stage boundary. Round 0 holds only the baseline stage.
struct StageId {
  std::size_t round = 0;
  Stage stage = Stage::baseline;

  friend bool operator==(const StageId&, const StageId&) = default;
  friend auto operator<=>(const StageId&, const StageId&) = default;
};

/// Parses "2:bootstrap" or "0:baseline".
StageId parse_stage_id(std::string_view text);
std::string format_stage_id(const StageId& id);

/// The stage that follows `id` in a run of `rounds` rounds, or std::nullopt after the last.
std::optional<StageId> next_stage(const StageId& id, std::size_t rounds);

inline constexpr std::string_view kCheckpointSchema = "checkpoint/v1";

/// checkpoint.json: every completed stage with the content hash of each file it wrote,
/// relative to the run directory.
struct Manifest {
  struct Entry {
    StageId stage;
    std::map<std::string, std::string> files;  // relative path -> sha256
  };
  std::string config_sha256;
  std::string dataset_sha256;
  std::vector<Entry> completed;
  std::optional<std::size_t> stopped_after_round;

  std::optional<StageId> last_completed() const;
  bool is_completed(const StageId& id) const;

  std::string serialize() const;
  static Manifest parse(std::string_view text);

  /// Re-hashes every recorded file; throws CheckpointError on a missing file or mismatch.
  void verify_files(const std::filesystem::path& run_dir) const;
};

Manifest load_manifest(const std::filesystem::path& run_dir);
void save_manifest(const Manifest& m, const std::filesystem::path& run_dir);

}  // namespace roma
