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

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace roma {

using Json = nlohmann::ordered_json;

/// Reads a whole file. Throws DataError when the file cannot be opened.
std::string read_file(const std::filesystem::path& path);

/// Writes `contents` via a sibling temp file and rename, so readers never see a torn file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Calls `fn(record, line_number)` for every non-blank line. Parse failures become
/// DataError naming the line.
void for_each_jsonl(const std::filesystem::path& path,
                    const std::function<void(const Json&, std::size_t)>& fn);

/// One compact record per line, '\n' terminated. Empty input yields an empty string.
std::string to_jsonl(const std::vector<Json>& records);

/// Field accessors that name the missing/mistyped key in their DataError.
const Json& require_field(const Json& record, std::string_view key, std::size_t line);
std::string require_string(const Json& record, std::string_view key, std::size_t line);

}  // namespace roma
