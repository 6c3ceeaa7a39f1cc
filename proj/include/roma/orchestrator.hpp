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

// The self-training loop: L rounds of bootstrap, short-path synthesis, pair building and
// DPO, checkpointed after every stage.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roma/backends.hpp"
#include "roma/bootstrap.hpp"
#include "roma/checkpoint.hpp"
#include "roma/corpus.hpp"
#include "roma/http_transport.hpp"
#include "roma/jsonl.hpp"
#include "roma/metrics.hpp"
#include "roma/preference.hpp"
#include "roma/simulator.hpp"
#include "roma/synthesis.hpp"

namespace roma {

enum class RunMode { simulation, live };

struct SimulationSettings {
  /// world/v1 file. Relative paths resolve against the config file's directory.
  std::filesystem::path worlds;
  /// Optional policy/v1 file with starting policies; missing worlds start uniform.
  std::optional<std::filesystem::path> policies;
  /// Starting logit on spine edges for worlds without a policy in `policies`.
  double initial_spine_bias = 0.0;
  /// Label options; used when no dataset file is given.
  std::vector<std::string> labels{"a", "b", "c", "d"};
  /// Zero-shot samples per question for accuracy and length.
  std::size_t eval_samples = 20;
  /// Traces per question for the retrieval statistics; 0 skips them.
  std::size_t retrieval_q = 0;
};

struct LiveSettings {
  EndpointConfig reasoner;
  EndpointConfig verifier;
  /// Pivot extraction endpoint; defaults to the verifier.
  std::optional<EndpointConfig> extractor;
  RetryPolicy retry;
  /// Requests per second shared by all endpoints; 0 disables limiting.
  double rate_limit = 0.0;
  double rate_burst = 1.0;
  DecodeParams verifier_decode{0.2, 0.95, 2048};
  /// How long the train stage waits for the trainer's status file; 0 checks once.
  double handshake_timeout_seconds = 0.0;
  double poll_interval_seconds = 5.0;
  /// LoRA settings forwarded to the trainer.
  std::size_t lora_rank = 16;
  std::size_t lora_alpha = 32;
};

struct LoopConfig {
  RunMode mode = RunMode::simulation;
  std::size_t L = 3;
  BootstrapConfig bootstrap{};
  SynthesisConfig synthesis{};
  DpoConfig dpo{};
  std::uint64_t seed = 0;
  /// Stop after this many rounds without a validation-accuracy improvement.
  std::optional<std::size_t> early_stop_patience;
  /// Keep the round-1 reference for every round instead of re-freezing each round.
  bool freeze_once = false;
  std::size_t workers = 1;
  /// dataset/v1 file (with its schema side file). Optional in simulation mode.
  std::optional<std::filesystem::path> dataset;
  /// Validation set for live accuracy and early stopping.
  std::optional<std::filesystem::path> validation;
  SimulationSettings simulation;
  LiveSettings live;

  void validate() const;

  /// K=7, L=3.
  static LoopConfig preset_default();
  /// K=5, L=1 (guided budget 10).
  static LoopConfig preset_recipe();
  /// Default settings with a step size suited to the simulator's logit parameterization.
  static LoopConfig preset_simulation();
};

/// Reads a JSON config. Unknown keys are rejected; "preset" picks the starting values.
LoopConfig config_from_json(const Json& j, const std::filesystem::path& base_dir = {});
LoopConfig load_config(const std::filesystem::path& path);
/// Canonical form with absolute paths; round-trips through config_from_json.
Json config_to_json(const LoopConfig& cfg);

struct PoolStats {
  std::size_t examples = 0;
  std::size_t with_rplus = 0;
  std::size_t skipped_empty = 0;
  std::size_t zero_shot_samples = 0;
  std::size_t zero_shot_correct = 0;
  std::size_t guided_samples = 0;
  std::size_t rplus_total = 0;
  std::size_t attempts = 0;
};

struct SprStats {
  std::size_t count = 0;
  std::size_t check_passed = 0;
  std::size_t fallback_used = 0;
  double check_rate() const { return count ? static_cast<double>(check_passed) / static_cast<double>(count) : 0.0; }
  double fallback_rate() const {
    return count ? static_cast<double>(fallback_used) / static_cast<double>(count) : 0.0;
  }
};

struct RoundReport {
  std::size_t round = 0;
  PoolStats pools;
  SprStats spr;
  std::size_t pairs = 0;
  /// Sum over examples of |R+ minus the short path|.
  std::size_t expected_pairs = 0;
  /// Total DPO loss over all pairs before training and after each epoch (simulation).
  std::vector<double> loss_curve;
  std::size_t updates = 0;
  bool no_signal = false;
  std::optional<EvalReport> eval;
  std::optional<RetrievalReport> retrieval;
  /// Live mode: model served after this round's training.
  std::optional<std::string> model_id;
  /// Simulation mode: content hashes of the reference and of the policy before/after.
  std::optional<std::string> reference_sha256;
  std::optional<std::string> policy_sha256_before;
  std::optional<std::string> policy_sha256_after;
};

struct RunReport {
  RunMode mode = RunMode::simulation;
  std::uint64_t seed = 0;
  std::size_t rounds_planned = 0;
  std::optional<EvalReport> baseline_eval;
  std::optional<RetrievalReport> baseline_retrieval;
  std::vector<RoundReport> rounds;
  std::optional<std::size_t> early_stopped_after;
  /// Live mode: waiting for the external trainer.
  bool awaiting_trainer = false;
  /// Last stage completed, when the run stopped before the end.
  std::optional<StageId> stopped_at;
  /// Wall-clock seconds per stage, in execution order. Not part of the serialized report.
  std::vector<std::pair<StageId, double>> timings;

  std::size_t total_pairs() const;
  /// True when every completed round produced zero pairs.
  bool no_signal() const;
  bool complete() const { return !awaiting_trainer && !stopped_at; }
};

inline constexpr std::string_view kReportSchema = "report/v1";

/// report/v1 JSONL: a header line, a baseline line, one line per round. Timings are excluded.
std::string serialize_report(const RunReport& report);
RunReport parse_report(std::string_view text);
/// Human-readable per-round table.
std::string format_report_table(const RunReport& report);

/// Reasoner, verifier and pivot extractor used by one round.
struct StageBackends {
  std::shared_ptr<const Backend> reasoner;
  std::shared_ptr<const Verifier> verifier;
  std::shared_ptr<const PivotExtractor> extractor;
};

/// Builds live backends for the given reasoner model id. The default uses HTTP endpoints.
using BackendFactory = std::function<StageBackends(const LoopConfig&, const LabelSpace&, const std::string& model)>;
StageBackends make_http_backends(const LoopConfig& cfg, const LabelSpace& space, const std::string& model);

/// Dataset, validation set and simulator state resolved from a config.
struct RunInputs {
  Dataset dataset;
  std::optional<Dataset> validation;
  std::shared_ptr<const sim::WorldBank> worlds;
  sim::PolicyBank initial_policies;
};

RunInputs load_inputs(const LoopConfig& cfg);

/// Simulator reasoner with `policies`, the minimal-walk verifier and the node-id extractor.
StageBackends simulation_backends(const RunInputs& inputs, sim::PolicyBank policies);

/// Stage A over the dataset. Example i of round r draws from the stream (seed, r, 1, i).
/// Throws BackendError naming the first example whose pool failed.
std::vector<CandidatePool> run_bootstrap_stage(const Backend& reasoner, const Dataset& dataset,
                                               const BootstrapConfig& cfg, std::uint64_t seed, std::size_t round,
                                               std::size_t workers);

/// Stage B for every pool with a nonempty R+, in dataset order.
std::vector<ShortPath> run_synthesis_stage(const StageBackends& backends, const Dataset& dataset,
                                           std::span<const CandidatePool> pools, const SynthesisConfig& cfg,
                                           std::uint64_t seed, std::size_t round, std::size_t workers);

/// Stage C pair building in pool order; examples without a short path contribute nothing.
std::vector<PreferencePair> run_pairs_stage(std::span<const CandidatePool> pools, std::span<const ShortPath> sprs);

struct RunOptions {
  /// Stop cleanly once this stage has been checkpointed.
  std::optional<StageId> stop_after;
  BackendFactory backend_factory;
  /// Used while waiting for the trainer; defaults to std::this_thread::sleep_for.
  std::function<void(std::chrono::milliseconds)> sleeper;
};

/// Starts a run in `run_dir`, which must not already hold a checkpoint.
RunReport run_loop(const LoopConfig& cfg, const std::filesystem::path& run_dir, const RunOptions& options = {});

/// Continues from the last checkpointed stage. Throws CheckpointError when the checkpoint,
/// config or any recorded artifact fails validation.
RunReport resume(const std::filesystem::path& run_dir, const RunOptions& options = {});

struct TrainResult {
  sim::PolicyBank policies;
  std::vector<double> loss_curve;
  std::size_t updates = 0;
};

/// Minibatch DPO over toy policies. Pair order is shuffled per epoch from `seed`; each
/// minibatch applies one summed-gradient step per world it touches. `reference` stays fixed.
TrainResult train_policies(const sim::WorldBank& worlds, const sim::PolicyBank& start,
                           const sim::PolicyBank& reference, std::span<const PreferencePair> pairs,
                           const DpoConfig& dpo, std::uint64_t seed);

/// Stream seeds. Evaluation and retrieval streams are shared by the baseline and every
/// round; training shuffles get one stream per round.
std::uint64_t evaluation_seed(std::uint64_t run_seed);
std::uint64_t retrieval_seed(std::uint64_t run_seed);
std::uint64_t training_seed(std::uint64_t run_seed, std::size_t round);

/// Total DPO loss of `pairs` under per-world policies and references.
double policy_bank_loss(const sim::WorldBank& worlds, const sim::PolicyBank& policies,
                        const sim::PolicyBank& reference, std::span<const PreferencePair> pairs, double beta);

inline constexpr std::string_view kHandshakeSchema = "handshake/v1";
inline constexpr std::string_view kTrainJobSchema = "trainjob/v1";

enum class JobStatus { queued, running, done, failed };
std::string_view to_string(JobStatus s);

struct Handshake {
  JobStatus status = JobStatus::queued;
  std::optional<std::string> model_id;
  Json metrics = Json::object();
  std::optional<std::string> error;
};

/// Reads job_dir/status.json; std::nullopt when the trainer has not written it yet.
/// Throws DataError on a malformed file or a "done" status without a model id.
std::optional<Handshake> read_handshake(const std::filesystem::path& job_dir);
void write_handshake(const Handshake& h, const std::filesystem::path& job_dir);

struct TrainJob {
  std::filesystem::path pref_file;
  std::string base_model;
  double lr = 1e-6;
  std::size_t epochs = 3;
  std::size_t lora_rank = 16;
  std::size_t lora_alpha = 32;
  double beta = 0.1;
  std::size_t pairs = 0;
};

Json train_job_to_json(const TrainJob& job);
void write_train_job(const TrainJob& job, const std::filesystem::path& job_dir);

/// Content hash of a policy bank's serialized form.
std::string policy_bank_sha256(const sim::PolicyBank& policies);

}  // namespace roma
