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

#include "roma/checkpoint.hpp"

#include <openssl/evp.h>

#include <charconv>
#include <memory>

#include "roma/error.hpp"
#include "roma/jsonl.hpp"

namespace roma {

std::string sha256_hex(std::string_view data) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1)
    throw Error("sha256 failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 0xf];
  }
  return out;
}

std::string_view to_string(Stage s) {
  switch (s) {
    case Stage::baseline:
      return "baseline";
    case Stage::bootstrap:
      return "bootstrap";
    case Stage::synthesize:
      return "synthesize";
    case Stage::pairs:
      return "pairs";
    case Stage::train:
      return "train";
  }
  return "baseline";
}

Stage stage_from_string(std::string_view s) {
  for (Stage st : {Stage::baseline, Stage::bootstrap, Stage::synthesize, Stage::pairs, Stage::train}) {
    if (to_string(st) == s) return st;
  }
  throw ConfigError("unknown stage \"" + std::string(s) + "\"");
}

StageId parse_stage_id(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) throw ConfigError("stage must look like ROUND:STAGE, got " + std::string(text));
  StageId id;
  const auto num = text.substr(0, colon);
  auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), id.round);
  if (ec != std::errc() || ptr != num.data() + num.size()) throw ConfigError("bad round in " + std::string(text));
  id.stage = stage_from_string(text.substr(colon + 1));
  if ((id.round == 0) != (id.stage == Stage::baseline))
    throw ConfigError("round 0 holds only the baseline stage: " + std::string(text));
  return id;
}

std::string format_stage_id(const StageId& id) { return std::to_string(id.round) + ":" + std::string(to_string(id.stage)); }

std::optional<StageId> next_stage(const StageId& id, std::size_t rounds) {
  switch (id.stage) {
    case Stage::baseline:
      return rounds >= 1 ? std::optional<StageId>(StageId{1, Stage::bootstrap}) : std::nullopt;
    case Stage::bootstrap:
      return StageId{id.round, Stage::synthesize};
    case Stage::synthesize:
      return StageId{id.round, Stage::pairs};
    case Stage::pairs:
      return StageId{id.round, Stage::train};
    case Stage::train:
      if (id.round >= rounds) return std::nullopt;
      return StageId{id.round + 1, Stage::bootstrap};
  }
  return std::nullopt;
}

std::optional<StageId> Manifest::last_completed() const {
  if (completed.empty()) return std::nullopt;
  return completed.back().stage;
}

bool Manifest::is_completed(const StageId& id) const {
  for (const auto& e : completed) {
    if (e.stage == id) return true;
  }
  return false;
}

std::string Manifest::serialize() const {
  Json j;
  j["schema"] = kCheckpointSchema;
  j["config_sha256"] = config_sha256;
  j["dataset_sha256"] = dataset_sha256;
  Json stages = Json::array();
  for (const auto& e : completed) {
    Json s;
    s["stage"] = format_stage_id(e.stage);
    Json files = Json::object();
    for (const auto& [k, v] : e.files) files[k] = v;
    s["files"] = std::move(files);
    stages.push_back(std::move(s));
  }
  j["completed"] = std::move(stages);
  if (stopped_after_round)
    j["stopped_after_round"] = *stopped_after_round;
  else
    j["stopped_after_round"] = nullptr;
  return j.dump(2) + "\n";
}

Manifest Manifest::parse(std::string_view text) {
  Manifest m;
  try {
    const Json j = Json::parse(text);
    if (j.value("schema", "") != kCheckpointSchema) throw CheckpointError("checkpoint is not checkpoint/v1");
    m.config_sha256 = j.at("config_sha256").get<std::string>();
    m.dataset_sha256 = j.at("dataset_sha256").get<std::string>();
    std::optional<StageId> prev;
    for (const auto& s : j.at("completed")) {
      Entry e;
      e.stage = parse_stage_id(s.at("stage").get<std::string>());
      for (const auto& [k, v] : s.at("files").items()) e.files[k] = v.get<std::string>();
      if (prev && e.stage <= *prev) throw CheckpointError("checkpoint stages out of order");
      prev = e.stage;
      m.completed.push_back(std::move(e));
    }
    if (const auto& r = j.at("stopped_after_round"); !r.is_null()) m.stopped_after_round = r.get<std::size_t>();
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  return m;
}

void Manifest::verify_files(const std::filesystem::path& run_dir) const {
  for (const auto& e : completed) {
    for (const auto& [rel, hash] : e.files) {
      const auto path = run_dir / rel;
      std::string contents;
      try {
        contents = read_file(path);
      } catch (const DataError&) {
        throw CheckpointError("checkpoint file missing: " + path.string());
      }
      if (sha256_hex(contents) != hash)
        throw CheckpointError("checkpoint hash mismatch for " + rel + " (stage " + format_stage_id(e.stage) + ")");
    }
  }
}

Manifest load_manifest(const std::filesystem::path& run_dir) {
  std::string text;
  try {
    text = read_file(run_dir / "checkpoint.json");
  } catch (const DataError&) {
    throw CheckpointError("no checkpoint in " + run_dir.string());
  }
  return Manifest::parse(text);
}

void save_manifest(const Manifest& m, const std::filesystem::path& run_dir) {
  write_file_atomic(run_dir / "checkpoint.json", m.serialize());
}

}  // namespace roma
