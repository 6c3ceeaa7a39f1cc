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

#include "roma/orchestrator.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "roma/error.hpp"
#include "roma/parallel.hpp"
#include "roma/rng.hpp"

namespace roma {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kBootstrapStream = 1;
constexpr std::uint64_t kSynthesisStream = 2;
constexpr std::uint64_t kTrainStream = 3;
constexpr std::uint64_t kEvalStream = 0xE7A1;
constexpr std::uint64_t kRetrievalStream = 0x2E72;

constexpr double kSimulationLr = 30.0;

// ---------------------------------------------------------------- config

void check_keys(const Json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw ConfigError("unknown key \"" + k + "\" in " + where);
  }
}

template <typename T>
void read_opt(const Json& j, std::string_view key, T& out, const std::string& where) {
  const std::string k(key);
  if (!j.contains(k)) return;
  try {
    out = j.at(k).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("bad value for \"" + k + "\" in " + where);
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty()) return p;
  const fs::path full = p.is_absolute() || base.empty() ? p : base / p;
  return fs::weakly_canonical(full);
}

std::optional<fs::path> read_path(const Json& j, std::string_view key, const fs::path& base, const std::string& where,
                                  std::optional<fs::path> current) {
  const std::string k(key);
  if (!j.contains(k)) return current;
  const auto& v = j.at(k);
  if (v.is_null()) return std::nullopt;
  if (!v.is_string() || v.get<std::string>().empty()) throw ConfigError("\"" + k + "\" in " + where + " must be a path");
  return resolve(v.get<std::string>(), base);
}

DecodeParams decode_from_json(const Json& j, DecodeParams d, const std::string& where) {
  check_keys(j, {"temperature", "top_p", "max_tokens"}, where);
  read_opt(j, "temperature", d.temperature, where);
  read_opt(j, "top_p", d.top_p, where);
  read_opt(j, "max_tokens", d.max_tokens, where);
  return d;
}

Json decode_to_json(const DecodeParams& d) {
  return Json{{"temperature", d.temperature}, {"top_p", d.top_p}, {"max_tokens", d.max_tokens}};
}

EndpointConfig endpoint_from_json(const Json& j, EndpointConfig e, const std::string& where) {
  check_keys(j, {"url", "model", "api_key_env", "timeout_seconds", "thinking"}, where);
  read_opt(j, "url", e.url, where);
  read_opt(j, "model", e.model, where);
  read_opt(j, "api_key_env", e.api_key_env, where);
  read_opt(j, "timeout_seconds", e.timeout_seconds, where);
  read_opt(j, "thinking", e.thinking, where);
  return e;
}

Json endpoint_to_json(const EndpointConfig& e) {
  return Json{{"url", e.url},
              {"model", e.model},
              {"api_key_env", e.api_key_env},
              {"timeout_seconds", e.timeout_seconds},
              {"thinking", e.thinking}};
}

Json path_json(const std::optional<fs::path>& p) { return p ? Json(p->string()) : Json(nullptr); }

// ---------------------------------------------------------------- report json

Json eval_to_json(const std::optional<EvalReport>& e) {
  if (!e) return nullptr;
  return Json{{"accuracy", e->accuracy}, {"mean_length", e->mean_length}, {"samples", e->samples}};
}

std::optional<EvalReport> eval_from_json(const Json& j) {
  if (j.is_null()) return std::nullopt;
  EvalReport e;
  e.accuracy = j.at("accuracy").get<double>();
  e.mean_length = j.at("mean_length").get<double>();
  e.samples = j.at("samples").get<std::size_t>();
  return e;
}

Json retrieval_to_json(const std::optional<RetrievalReport>& r) {
  if (!r) return nullptr;
  return Json{{"Q", r->Q}, {"per_trace_rate", r->rate}, {"any_of_q_rate", r->any_rate}, {"hits", r->hits}};
}

std::optional<RetrievalReport> retrieval_from_json(const Json& j) {
  if (j.is_null()) return std::nullopt;
  RetrievalReport r;
  r.Q = j.at("Q").get<std::size_t>();
  r.rate = j.at("per_trace_rate").get<double>();
  r.any_rate = j.at("any_of_q_rate").get<double>();
  r.hits = j.at("hits").get<std::vector<std::size_t>>();
  return r;
}

template <typename T>
Json opt_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

template <typename T>
std::optional<T> opt_from(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<T>();
}

Json round_to_json(const RoundReport& r) {
  Json j;
  j["kind"] = "round";
  j["round"] = r.round;
  j["pools"] = Json{{"examples", r.pools.examples},
                    {"with_rplus", r.pools.with_rplus},
                    {"skipped_empty", r.pools.skipped_empty},
                    {"zero_shot_samples", r.pools.zero_shot_samples},
                    {"zero_shot_correct", r.pools.zero_shot_correct},
                    {"guided_samples", r.pools.guided_samples},
                    {"rplus_total", r.pools.rplus_total},
                    {"attempts", r.pools.attempts}};
  j["spr"] = Json{{"count", r.spr.count},
                  {"check_passed", r.spr.check_passed},
                  {"fallback_used", r.spr.fallback_used},
                  {"check_rate", r.spr.check_rate()},
                  {"fallback_rate", r.spr.fallback_rate()}};
  j["pairs"] = r.pairs;
  j["expected_pairs"] = r.expected_pairs;
  j["loss_curve"] = r.loss_curve;
  j["updates"] = r.updates;
  j["no_signal"] = r.no_signal;
  j["eval"] = eval_to_json(r.eval);
  j["retrieval"] = retrieval_to_json(r.retrieval);
  j["model_id"] = opt_json(r.model_id);
  j["reference_sha256"] = opt_json(r.reference_sha256);
  j["policy_sha256_before"] = opt_json(r.policy_sha256_before);
  j["policy_sha256_after"] = opt_json(r.policy_sha256_after);
  return j;
}

RoundReport round_from_json(const Json& j) {
  RoundReport r;
  r.round = j.at("round").get<std::size_t>();
  const auto& p = j.at("pools");
  r.pools.examples = p.at("examples").get<std::size_t>();
  r.pools.with_rplus = p.at("with_rplus").get<std::size_t>();
  r.pools.skipped_empty = p.at("skipped_empty").get<std::size_t>();
  r.pools.zero_shot_samples = p.at("zero_shot_samples").get<std::size_t>();
  r.pools.zero_shot_correct = p.at("zero_shot_correct").get<std::size_t>();
  r.pools.guided_samples = p.at("guided_samples").get<std::size_t>();
  r.pools.rplus_total = p.at("rplus_total").get<std::size_t>();
  r.pools.attempts = p.at("attempts").get<std::size_t>();
  const auto& s = j.at("spr");
  r.spr.count = s.at("count").get<std::size_t>();
  r.spr.check_passed = s.at("check_passed").get<std::size_t>();
  r.spr.fallback_used = s.at("fallback_used").get<std::size_t>();
  r.pairs = j.at("pairs").get<std::size_t>();
  r.expected_pairs = j.at("expected_pairs").get<std::size_t>();
  r.loss_curve = j.at("loss_curve").get<std::vector<double>>();
  r.updates = j.at("updates").get<std::size_t>();
  r.no_signal = j.at("no_signal").get<bool>();
  r.eval = eval_from_json(j.at("eval"));
  r.retrieval = retrieval_from_json(j.at("retrieval"));
  r.model_id = opt_from<std::string>(j.at("model_id"));
  r.reference_sha256 = opt_from<std::string>(j.at("reference_sha256"));
  r.policy_sha256_before = opt_from<std::string>(j.at("policy_sha256_before"));
  r.policy_sha256_after = opt_from<std::string>(j.at("policy_sha256_after"));
  return r;
}

Json baseline_to_json(const std::optional<EvalReport>& e, const std::optional<RetrievalReport>& r) {
  Json j;
  j["kind"] = "baseline";
  j["eval"] = eval_to_json(e);
  j["retrieval"] = retrieval_to_json(r);
  return j;
}

std::string_view mode_name(RunMode m) { return m == RunMode::simulation ? "simulation" : "live"; }

RunMode mode_from(std::string_view s) {
  if (s == "simulation") return RunMode::simulation;
  if (s == "live") return RunMode::live;
  throw ConfigError("mode must be \"simulation\" or \"live\", got \"" + std::string(s) + "\"");
}

// ---------------------------------------------------------------- runner

struct TrainerPending {};

std::string round_dir_name(std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "round-%zu", round);
  return buf;
}

std::string file_sha(const fs::path& path) { return sha256_hex(read_file(path)); }

class Runner {
 public:
  Runner(LoopConfig cfg, fs::path dir, RunOptions options)
      : cfg_(std::move(cfg)), dir_(std::move(dir)), options_(std::move(options)) {
    if (!options_.backend_factory) options_.backend_factory = make_http_backends;
    if (!options_.sleeper) options_.sleeper = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
    in_ = roma::load_inputs(cfg_);
    dataset_sha_ = sha256_hex(serialize_dataset(in_.dataset));
  }

  const std::string& dataset_sha() const { return dataset_sha_; }

  RunReport run(Manifest manifest);

 private:
  std::map<std::string, std::string> run_stage(const StageId& id);
  std::map<std::string, std::string> stage_baseline();
  std::map<std::string, std::string> stage_bootstrap(std::size_t round);
  std::map<std::string, std::string> stage_synthesize(std::size_t round);
  std::map<std::string, std::string> stage_pairs(std::size_t round);
  std::map<std::string, std::string> stage_train(std::size_t round);

  fs::path round_dir(std::size_t round) const { return dir_ / round_dir_name(round); }
  std::string rel(std::size_t round, const std::string& name) const { return round_dir_name(round) + "/" + name; }

  sim::PolicyBank round_start_policies(std::size_t round) const;
  std::string round_model(std::size_t round) const;
  StageBackends backends_for_round(std::size_t round) const;
  std::unique_ptr<sim::SimulatorBackend> simulator(sim::PolicyBank policies) const;

  Handshake await_trainer(const fs::path& job_dir) const;
  bool should_stop(const RunReport& report) const;
  RunReport assemble(const Manifest& manifest) const;

  LoopConfig cfg_;
  fs::path dir_;
  RunOptions options_;
  RunInputs in_;
  std::string dataset_sha_;
};

std::unique_ptr<sim::SimulatorBackend> Runner::simulator(sim::PolicyBank policies) const {
  return std::make_unique<sim::SimulatorBackend>(in_.worlds, std::move(policies), in_.dataset.label_space);
}

sim::PolicyBank Runner::round_start_policies(std::size_t round) const {
  if (round <= 1) return in_.initial_policies;
  return sim::load_policies(round_dir(round - 1) / "policies.jsonl", *in_.worlds);
}

std::string Runner::round_model(std::size_t round) const {
  std::string model = cfg_.live.reasoner.model;
  for (std::size_t r = 1; r < round; ++r) {
    const fs::path p = round_dir(r) / "model.json";
    if (fs::exists(p)) model = Json::parse(read_file(p)).at("model_id").get<std::string>();
  }
  return model;
}

StageBackends Runner::backends_for_round(std::size_t round) const {
  if (cfg_.mode == RunMode::simulation) return simulation_backends(in_, round_start_policies(round));
  return options_.backend_factory(cfg_, in_.dataset.label_space, round_model(round));
}

std::map<std::string, std::string> Runner::run_stage(const StageId& id) {
  switch (id.stage) {
    case Stage::baseline:
      return stage_baseline();
    case Stage::bootstrap:
      return stage_bootstrap(id.round);
    case Stage::synthesize:
      return stage_synthesize(id.round);
    case Stage::pairs:
      return stage_pairs(id.round);
    case Stage::train:
      return stage_train(id.round);
  }
  throw std::logic_error("unknown stage");
}

std::map<std::string, std::string> Runner::stage_baseline() {
  std::optional<EvalReport> eval;
  std::optional<RetrievalReport> retrieval;
  if (cfg_.mode == RunMode::simulation) {
    const auto backend = simulator(in_.initial_policies);
    eval = evaluate(*backend, in_.dataset, cfg_.bootstrap.zero_shot_decode, cfg_.simulation.eval_samples,
                    evaluation_seed(cfg_.seed), cfg_.workers);
    if (cfg_.simulation.retrieval_q > 0)
      retrieval = pivot_retrieval_rate(*backend, in_.dataset, cfg_.simulation.retrieval_q, mentions_pivot,
                                       cfg_.bootstrap.zero_shot_decode, retrieval_seed(cfg_.seed),
                                       cfg_.workers);
  } else if (in_.validation) {
    const auto b = options_.backend_factory(cfg_, in_.dataset.label_space, cfg_.live.reasoner.model);
    eval = evaluate(*b.reasoner, *in_.validation, cfg_.bootstrap.zero_shot_decode, 1,
                    evaluation_seed(cfg_.seed), cfg_.workers);
  }
  const fs::path p = dir_ / "baseline.json";
  write_file_atomic(p, baseline_to_json(eval, retrieval).dump() + "\n");
  return {{"baseline.json", file_sha(p)}};
}

std::map<std::string, std::string> Runner::stage_bootstrap(std::size_t round) {
  const StageBackends b = backends_for_round(round);
  const auto pools = run_bootstrap_stage(*b.reasoner, in_.dataset, cfg_.bootstrap, cfg_.seed, round, cfg_.workers);
  const fs::path path = round_dir(round) / "pools.jsonl";
  save_pools(pools, path);
  return {{rel(round, "pools.jsonl"), file_sha(path)}};
}

std::map<std::string, std::string> Runner::stage_synthesize(std::size_t round) {
  const StageBackends b = backends_for_round(round);
  const auto pools = load_pools(round_dir(round) / "pools.jsonl", in_.dataset.label_space);
  const auto sprs = run_synthesis_stage(b, in_.dataset, pools, cfg_.synthesis, cfg_.seed, round, cfg_.workers);
  const fs::path path = round_dir(round) / "sprs.jsonl";
  save_sprs(sprs, path);
  return {{rel(round, "sprs.jsonl"), file_sha(path)}};
}

std::map<std::string, std::string> Runner::stage_pairs(std::size_t round) {
  const auto pools = load_pools(round_dir(round) / "pools.jsonl", in_.dataset.label_space);
  const auto sprs = load_sprs(round_dir(round) / "sprs.jsonl", in_.dataset.label_space);
  const auto pairs = run_pairs_stage(pools, sprs);
  const fs::path path = round_dir(round) / "pairs.jsonl";
  save_pairs(pairs, path);
  std::map<std::string, std::string> files{{rel(round, "pairs.jsonl"), file_sha(path)}};
  if (cfg_.mode == RunMode::live && !pairs.empty()) {
    const fs::path job_dir = round_dir(round) / "job";
    export_preferences(pairs, in_.dataset, job_dir / "pref.jsonl");
    TrainJob job;
    job.pref_file = "pref.jsonl";
    job.base_model = round_model(round);
    job.lr = cfg_.dpo.lr;
    job.epochs = cfg_.dpo.epochs;
    job.beta = cfg_.dpo.beta;
    job.lora_rank = cfg_.live.lora_rank;
    job.lora_alpha = cfg_.live.lora_alpha;
    job.pairs = pairs.size();
    write_train_job(job, job_dir);
    files[rel(round, "job/pref.jsonl")] = file_sha(job_dir / "pref.jsonl");
    files[rel(round, "job/job.json")] = file_sha(job_dir / "job.json");
  }
  return files;
}

Handshake Runner::await_trainer(const fs::path& job_dir) const {
  using namespace std::chrono;
  const auto timeout = duration_cast<milliseconds>(duration<double>(cfg_.live.handshake_timeout_seconds));
  const auto poll = duration_cast<milliseconds>(duration<double>(cfg_.live.poll_interval_seconds));
  milliseconds waited{0};
  for (;;) {
    if (auto h = read_handshake(job_dir)) {
      if (h->status == JobStatus::done) return *h;
      if (h->status == JobStatus::failed)
        throw BackendError("trainer job failed: " + h->error.value_or("no reason given"), 1, false);
    }
    if (waited >= timeout) throw TrainerPending{};
    const auto step = std::min(poll, timeout - waited);
    options_.sleeper(step);
    waited += step;
  }
}

std::map<std::string, std::string> Runner::stage_train(std::size_t round) {
  const auto pools = load_pools(round_dir(round) / "pools.jsonl", in_.dataset.label_space);
  const auto sprs = load_sprs(round_dir(round) / "sprs.jsonl", in_.dataset.label_space);
  const auto pairs = load_pairs(round_dir(round) / "pairs.jsonl", in_.dataset.label_space);

  RoundReport rep;
  rep.round = round;
  rep.pools.examples = pools.size();
  std::map<std::string, const CandidatePool*, std::less<>> pool_by_id;
  for (const auto& p : pools) {
    pool_by_id[p.example_id] = &p;
    if (!p.successful.empty()) ++rep.pools.with_rplus;
    rep.pools.zero_shot_samples += p.zero_shot_count;
    rep.pools.guided_samples += p.samples.size() - p.zero_shot_count;
    rep.pools.rplus_total += p.successful.size();
    rep.pools.attempts += p.attempts;
    rep.pools.zero_shot_correct += static_cast<std::size_t>(std::count_if(
        p.successful.begin(), p.successful.end(), [&](std::size_t i) { return i < p.zero_shot_count; }));
  }
  rep.pools.skipped_empty = rep.pools.examples - rep.pools.with_rplus;
  rep.spr.count = sprs.size();
  for (const auto& s : sprs) {
    if (s.check_passed) ++rep.spr.check_passed;
    if (s.fallback_used) ++rep.spr.fallback_used;
    const auto it = pool_by_id.find(s.example_id);
    if (it == pool_by_id.end()) throw CheckpointError("short path for unknown example " + s.example_id);
    for (const auto& r : pool_to_rplus(*it->second)) {
      if (r.raw_text != s.trace.raw_text) ++rep.expected_pairs;
    }
  }
  rep.pairs = pairs.size();
  if (rep.pairs != rep.expected_pairs)
    throw std::logic_error("pair count " + std::to_string(rep.pairs) + " differs from R+ accounting " +
                           std::to_string(rep.expected_pairs));
  rep.no_signal = pairs.empty();

  std::map<std::string, std::string> files;
  const DecodeParams& decode = cfg_.bootstrap.zero_shot_decode;
  if (cfg_.mode == RunMode::simulation) {
    const sim::PolicyBank start = round_start_policies(round);
    const sim::PolicyBank reference = cfg_.freeze_once ? in_.initial_policies : start;
    const std::string ref_sha = policy_bank_sha256(reference);
    TrainResult tr = train_policies(*in_.worlds, start, reference, pairs, cfg_.dpo, training_seed(cfg_.seed, round));
    if (policy_bank_sha256(reference) != ref_sha) throw std::logic_error("reference policy changed during a round");
    rep.loss_curve = std::move(tr.loss_curve);
    rep.updates = tr.updates;
    rep.reference_sha256 = ref_sha;
    rep.policy_sha256_before = policy_bank_sha256(start);
    rep.policy_sha256_after = policy_bank_sha256(tr.policies);

    const fs::path ppath = round_dir(round) / "policies.jsonl";
    sim::save_policies(tr.policies, ppath);
    files[rel(round, "policies.jsonl")] = file_sha(ppath);

    const auto backend = simulator(std::move(tr.policies));
    rep.eval = evaluate(*backend, in_.dataset, decode, cfg_.simulation.eval_samples, evaluation_seed(cfg_.seed),
                        cfg_.workers);
    if (cfg_.simulation.retrieval_q > 0)
      rep.retrieval = pivot_retrieval_rate(*backend, in_.dataset, cfg_.simulation.retrieval_q, mentions_pivot, decode,
                                           retrieval_seed(cfg_.seed), cfg_.workers);
  } else {
    std::string model = round_model(round);
    Json metrics = Json::object();
    if (!pairs.empty()) {
      const Handshake h = await_trainer(round_dir(round) / "job");
      model = *h.model_id;
      metrics = h.metrics;
    }
    rep.model_id = model;
    const fs::path mpath = round_dir(round) / "model.json";
    write_file_atomic(mpath, Json{{"model_id", model}, {"metrics", metrics}}.dump() + "\n");
    files[rel(round, "model.json")] = file_sha(mpath);
    if (in_.validation) {
      const auto b = options_.backend_factory(cfg_, in_.dataset.label_space, model);
      rep.eval = evaluate(*b.reasoner, *in_.validation, decode, 1, evaluation_seed(cfg_.seed), cfg_.workers);
    }
  }
  const fs::path rpath = round_dir(round) / "round.json";
  write_file_atomic(rpath, round_to_json(rep).dump() + "\n");
  files[rel(round, "round.json")] = file_sha(rpath);
  return files;
}

bool Runner::should_stop(const RunReport& report) const {
  if (!cfg_.early_stop_patience) return false;
  std::optional<double> best;
  if (report.baseline_eval) best = report.baseline_eval->accuracy;
  std::size_t since = 0;
  for (const auto& r : report.rounds) {
    if (!r.eval) return false;
    if (!best || r.eval->accuracy > *best) {
      best = r.eval->accuracy;
      since = 0;
    } else {
      ++since;
    }
  }
  return since >= *cfg_.early_stop_patience;
}

RunReport Runner::assemble(const Manifest& manifest) const {
  RunReport report;
  report.mode = cfg_.mode;
  report.seed = cfg_.seed;
  report.rounds_planned = cfg_.L;
  for (const auto& e : manifest.completed) {
    if (e.stage.stage == Stage::baseline) {
      const Json j = Json::parse(read_file(dir_ / "baseline.json"));
      report.baseline_eval = eval_from_json(j.at("eval"));
      report.baseline_retrieval = retrieval_from_json(j.at("retrieval"));
    } else if (e.stage.stage == Stage::train) {
      report.rounds.push_back(round_from_json(Json::parse(read_file(round_dir(e.stage.round) / "round.json"))));
    }
  }
  report.early_stopped_after = manifest.stopped_after_round;
  return report;
}

RunReport Runner::run(Manifest manifest) {
  if (manifest.dataset_sha256.empty()) manifest.dataset_sha256 = dataset_sha_;
  if (manifest.dataset_sha256 != dataset_sha_)
    throw CheckpointError("dataset no longer matches the checkpoint");
  manifest.verify_files(dir_);

  std::optional<StageId> next;
  if (const auto last = manifest.last_completed())
    next = next_stage(*last, cfg_.L);
  else
    next = StageId{0, Stage::baseline};
  if (manifest.stopped_after_round) next.reset();

  std::vector<std::pair<StageId, double>> timings;
  auto finish = [&](bool awaiting, std::optional<StageId> stopped_at) {
    RunReport report = assemble(manifest);
    report.awaiting_trainer = awaiting;
    report.stopped_at = stopped_at;
    report.timings = timings;
    write_file_atomic(dir_ / "report.jsonl", serialize_report(report));
    return report;
  };

  while (next) {
    const auto t0 = std::chrono::steady_clock::now();
    std::map<std::string, std::string> files;
    try {
      files = run_stage(*next);
    } catch (const TrainerPending&) {
      return finish(true, manifest.last_completed());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timings.emplace_back(*next, secs);
    manifest.completed.push_back({*next, std::move(files)});
    if (next->stage == Stage::train && should_stop(assemble(manifest))) manifest.stopped_after_round = next->round;
    save_manifest(manifest, dir_);
    {
      Json t{{"stage", format_stage_id(*next)}, {"seconds", secs}};
      const fs::path tp = dir_ / "timings.jsonl";
      std::string prev = fs::exists(tp) ? read_file(tp) : std::string();
      write_file_atomic(tp, prev + t.dump() + "\n");
    }
    const StageId done = *next;
    next = manifest.stopped_after_round ? std::nullopt : next_stage(done, cfg_.L);
    if (options_.stop_after && *options_.stop_after == done && next) return finish(false, done);
  }
  return finish(false, std::nullopt);
}

}  // namespace

RunInputs load_inputs(const LoopConfig& cfg) {
  RunInputs in;
  if (cfg.mode == RunMode::simulation) {
    in.worlds = std::make_shared<const sim::WorldBank>(sim::load_worlds(cfg.simulation.worlds));
    for (const auto& [id, w] : *in.worlds) w.validate();
    sim::PolicyBank seed_policies;
    if (cfg.simulation.policies) seed_policies = sim::load_policies(*cfg.simulation.policies, *in.worlds);
    in.initial_policies = sim::complete_policies(*in.worlds, seed_policies, cfg.simulation.initial_spine_bias);
    if (cfg.dataset)
      in.dataset = load_dataset(*cfg.dataset);
    else
      in.dataset = sim::make_dataset(*in.worlds, LabelSpace::finite(cfg.simulation.labels));
    for (const auto& ex : in.dataset.examples) {
      if (!in.worlds->contains(ex.id)) throw DataError("example " + ex.id + " has no simulator world");
    }
  } else {
    if (!cfg.dataset) throw ConfigError("live mode needs a dataset");
    in.dataset = load_dataset(*cfg.dataset);
  }
  if (in.dataset.examples.empty()) throw DataError("dataset is empty");
  if (cfg.validation) in.validation = load_dataset(*cfg.validation);
  return in;
}

StageBackends simulation_backends(const RunInputs& inputs, sim::PolicyBank policies) {
  if (!inputs.worlds) throw ConfigError("simulation backends need worlds");
  StageBackends b;
  b.reasoner = std::make_shared<sim::SimulatorBackend>(inputs.worlds, std::move(policies), inputs.dataset.label_space);
  b.verifier = std::make_shared<sim::MinimalWalkVerifier>(inputs.worlds);
  b.extractor = std::make_shared<sim::NodeIdExtractor>(inputs.worlds);
  return b;
}

std::vector<CandidatePool> run_bootstrap_stage(const Backend& reasoner, const Dataset& dataset,
                                               const BootstrapConfig& cfg, std::uint64_t seed, std::size_t round,
                                               std::size_t workers) {
  const auto& examples = dataset.examples;
  std::vector<CandidatePool> pools(examples.size());
  parallel_for(examples.size(), workers, [&](std::size_t i) {
    Rng rng = make_rng(seed, {round, kBootstrapStream, i});
    pools[i] = collect_pool(reasoner, examples[i], cfg, rng);
  });
  for (const auto& p : pools) {
    if (p.failed())
      throw BackendError("round " + std::to_string(round) + " aborted at example " + p.example_id + ": " + *p.failure,
                         static_cast<int>(p.attempts), false);
  }
  return pools;
}

std::vector<ShortPath> run_synthesis_stage(const StageBackends& backends, const Dataset& dataset,
                                           std::span<const CandidatePool> pools, const SynthesisConfig& cfg,
                                           std::uint64_t seed, std::size_t round, std::size_t workers) {
  const auto& examples = dataset.examples;
  if (pools.size() != examples.size()) throw DataError("pools do not match the dataset");
  std::vector<std::optional<ShortPath>> sprs(pools.size());
  parallel_for(pools.size(), workers, [&](std::size_t i) {
    if (pools[i].example_id != examples[i].id) throw DataError("pools do not match the dataset order");
    if (pools[i].successful.empty()) return;
    const auto rplus = pool_to_rplus(pools[i]);
    Rng rng = make_rng(seed, {round, kSynthesisStream, i});
    sprs[i] = synthesize_spr(*backends.reasoner, *backends.verifier, *backends.extractor, examples[i], rplus, cfg, rng);
  });
  std::vector<ShortPath> kept;
  for (auto& s : sprs) {
    if (s) kept.push_back(std::move(*s));
  }
  return kept;
}

std::vector<PreferencePair> run_pairs_stage(std::span<const CandidatePool> pools, std::span<const ShortPath> sprs) {
  std::map<std::string, const ShortPath*, std::less<>> by_id;
  for (const auto& s : sprs) by_id[s.example_id] = &s;
  std::vector<PreferencePair> pairs;
  for (const auto& pool : pools) {
    const auto it = by_id.find(pool.example_id);
    if (it == by_id.end()) continue;
    auto ps = build_pairs(*it->second, pool);
    pairs.insert(pairs.end(), std::make_move_iterator(ps.begin()), std::make_move_iterator(ps.end()));
  }
  return pairs;
}

// ---------------------------------------------------------------- public config API

void LoopConfig::validate() const {
  if (L < 1) throw ConfigError("rounds must be at least 1");
  bootstrap.validate();
  dpo.validate();
  if (synthesis.label_samples < 1) throw ConfigError("synthesis.label_samples must be at least 1");
  if (workers < 1) throw ConfigError("workers must be at least 1");
  if (early_stop_patience && *early_stop_patience < 1) throw ConfigError("early_stop_patience must be at least 1");
  if (mode == RunMode::simulation) {
    if (simulation.worlds.empty()) throw ConfigError("simulation mode needs simulation.worlds");
    if (simulation.eval_samples < 1) throw ConfigError("simulation.eval_samples must be at least 1");
  } else {
    if (!dataset) throw ConfigError("live mode needs a dataset");
    if (live.reasoner.url.empty() || live.reasoner.model.empty())
      throw ConfigError("live mode needs live.reasoner.url and live.reasoner.model");
    if (live.verifier.url.empty() || live.verifier.model.empty())
      throw ConfigError("live mode needs live.verifier.url and live.verifier.model");
    if (live.retry.max_attempts < 1) throw ConfigError("live.retry.max_attempts must be at least 1");
    if (live.rate_limit < 0.0) throw ConfigError("live.rate_limit must be non-negative");
    if (live.rate_limit > 0.0 && live.rate_burst < 1.0) throw ConfigError("live.rate_burst must be at least 1");
    if (live.handshake_timeout_seconds < 0.0 || !(live.poll_interval_seconds > 0.0))
      throw ConfigError("live handshake timing must be non-negative with a positive poll interval");
    if (early_stop_patience && !validation) throw ConfigError("early stopping in live mode needs a validation set");
  }
}

LoopConfig LoopConfig::preset_default() { return LoopConfig{}; }

LoopConfig LoopConfig::preset_recipe() {
  LoopConfig c;
  c.bootstrap = BootstrapConfig::with_k(5);
  c.L = 1;
  return c;
}

LoopConfig LoopConfig::preset_simulation() {
  LoopConfig c;
  c.dpo.lr = kSimulationLr;
  return c;
}

LoopConfig config_from_json(const Json& j, const fs::path& base_dir) {
  check_keys(j,
             {"preset", "mode", "rounds", "seed", "workers", "freeze_once", "early_stop_patience", "dataset",
              "validation", "bootstrap", "synthesis", "dpo", "simulation", "live"},
             "config");
  const RunMode mode = mode_from(j.value("mode", std::string("simulation")));
  const std::string preset = j.value("preset", std::string(mode == RunMode::simulation ? "simulation" : "default"));
  LoopConfig c;
  if (preset == "default")
    c = LoopConfig::preset_default();
  else if (preset == "recipe")
    c = LoopConfig::preset_recipe();
  else if (preset == "simulation")
    c = LoopConfig::preset_simulation();
  else
    throw ConfigError("unknown preset \"" + preset + "\" (expected default, recipe or simulation)");
  c.mode = mode;
  read_opt(j, "rounds", c.L, "config");
  read_opt(j, "seed", c.seed, "config");
  read_opt(j, "workers", c.workers, "config");
  read_opt(j, "freeze_once", c.freeze_once, "config");
  if (j.contains("early_stop_patience")) {
    const auto& v = j.at("early_stop_patience");
    if (v.is_null())
      c.early_stop_patience.reset();
    else if (v.is_number_unsigned())
      c.early_stop_patience = v.get<std::size_t>();
    else
      throw ConfigError("early_stop_patience must be a positive integer or null");
  }
  c.dataset = read_path(j, "dataset", base_dir, "config", c.dataset);
  c.validation = read_path(j, "validation", base_dir, "config", c.validation);

  if (j.contains("bootstrap")) {
    const auto& b = j.at("bootstrap");
    const std::string w = "bootstrap";
    check_keys(b, {"K", "guided_budget", "verify_guided", "verify_samples", "zero_shot_decode", "guided_decode"}, w);
    if (b.contains("K")) {
      read_opt(b, "K", c.bootstrap.K, w);
      c.bootstrap.guided_budget = 2 * c.bootstrap.K;
    }
    read_opt(b, "guided_budget", c.bootstrap.guided_budget, w);
    read_opt(b, "verify_guided", c.bootstrap.verify_guided, w);
    read_opt(b, "verify_samples", c.bootstrap.verify_samples, w);
    if (b.contains("zero_shot_decode"))
      c.bootstrap.zero_shot_decode = decode_from_json(b.at("zero_shot_decode"), c.bootstrap.zero_shot_decode, w);
    if (b.contains("guided_decode"))
      c.bootstrap.guided_decode = decode_from_json(b.at("guided_decode"), c.bootstrap.guided_decode, w);
  }
  if (j.contains("synthesis")) {
    const auto& s = j.at("synthesis");
    check_keys(s, {"check_mode", "label_samples"}, "synthesis");
    if (s.contains("check_mode")) {
      const std::string m = s.at("check_mode").get<std::string>();
      if (m == "distribution")
        c.synthesis.check_mode = CheckMode::distribution;
      else if (m == "single")
        c.synthesis.check_mode = CheckMode::single_reprediction;
      else
        throw ConfigError("synthesis.check_mode must be \"distribution\" or \"single\"");
    }
    read_opt(s, "label_samples", c.synthesis.label_samples, "synthesis");
  }
  if (j.contains("dpo")) {
    const auto& d = j.at("dpo");
    check_keys(d, {"beta", "lr", "epochs", "batch_size"}, "dpo");
    read_opt(d, "beta", c.dpo.beta, "dpo");
    read_opt(d, "lr", c.dpo.lr, "dpo");
    read_opt(d, "epochs", c.dpo.epochs, "dpo");
    read_opt(d, "batch_size", c.dpo.batch_size, "dpo");
  }
  if (j.contains("simulation")) {
    const auto& s = j.at("simulation");
    const std::string w = "simulation";
    check_keys(s, {"worlds", "policies", "initial_spine_bias", "labels", "eval_samples", "retrieval_q"}, w);
    if (auto p = read_path(s, "worlds", base_dir, w, c.simulation.worlds)) c.simulation.worlds = *p;
    c.simulation.policies = read_path(s, "policies", base_dir, w, c.simulation.policies);
    read_opt(s, "initial_spine_bias", c.simulation.initial_spine_bias, w);
    read_opt(s, "labels", c.simulation.labels, w);
    read_opt(s, "eval_samples", c.simulation.eval_samples, w);
    read_opt(s, "retrieval_q", c.simulation.retrieval_q, w);
  }
  if (j.contains("live")) {
    const auto& l = j.at("live");
    const std::string w = "live";
    check_keys(l,
               {"reasoner", "verifier", "extractor", "retry", "rate_limit", "rate_burst", "verifier_decode",
                "handshake_timeout_seconds", "poll_interval_seconds", "lora_rank", "lora_alpha"},
               w);
    if (l.contains("reasoner")) c.live.reasoner = endpoint_from_json(l.at("reasoner"), c.live.reasoner, "live.reasoner");
    if (l.contains("verifier")) c.live.verifier = endpoint_from_json(l.at("verifier"), c.live.verifier, "live.verifier");
    if (l.contains("extractor")) {
      if (l.at("extractor").is_null())
        c.live.extractor.reset();
      else
        c.live.extractor = endpoint_from_json(l.at("extractor"), EndpointConfig{}, "live.extractor");
    }
    if (l.contains("retry")) {
      const auto& r = l.at("retry");
      check_keys(r, {"max_attempts", "initial_backoff_ms", "multiplier", "max_backoff_ms"}, "live.retry");
      read_opt(r, "max_attempts", c.live.retry.max_attempts, "live.retry");
      read_opt(r, "multiplier", c.live.retry.multiplier, "live.retry");
      if (r.contains("initial_backoff_ms"))
        c.live.retry.initial_backoff = std::chrono::milliseconds(r.at("initial_backoff_ms").get<std::int64_t>());
      if (r.contains("max_backoff_ms"))
        c.live.retry.max_backoff = std::chrono::milliseconds(r.at("max_backoff_ms").get<std::int64_t>());
    }
    read_opt(l, "rate_limit", c.live.rate_limit, w);
    read_opt(l, "rate_burst", c.live.rate_burst, w);
    if (l.contains("verifier_decode"))
      c.live.verifier_decode = decode_from_json(l.at("verifier_decode"), c.live.verifier_decode, "live.verifier_decode");
    read_opt(l, "handshake_timeout_seconds", c.live.handshake_timeout_seconds, w);
    read_opt(l, "poll_interval_seconds", c.live.poll_interval_seconds, w);
    read_opt(l, "lora_rank", c.live.lora_rank, w);
    read_opt(l, "lora_alpha", c.live.lora_alpha, w);
  }
  c.validate();
  return c;
}

LoopConfig load_config(const fs::path& path) {
  Json j;
  try {
    j = Json::parse(read_file(path));
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return config_from_json(j, fs::absolute(path).parent_path());
}

Json config_to_json(const LoopConfig& c) {
  Json j;
  j["preset"] = "default";
  j["mode"] = mode_name(c.mode);
  j["rounds"] = c.L;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["freeze_once"] = c.freeze_once;
  j["early_stop_patience"] = opt_json(c.early_stop_patience);
  j["dataset"] = path_json(c.dataset);
  j["validation"] = path_json(c.validation);
  j["bootstrap"] = Json{{"K", c.bootstrap.K},
                        {"guided_budget", c.bootstrap.guided_budget},
                        {"verify_guided", c.bootstrap.verify_guided},
                        {"verify_samples", c.bootstrap.verify_samples},
                        {"zero_shot_decode", decode_to_json(c.bootstrap.zero_shot_decode)},
                        {"guided_decode", decode_to_json(c.bootstrap.guided_decode)}};
  j["synthesis"] = Json{
      {"check_mode", c.synthesis.check_mode == CheckMode::distribution ? "distribution" : "single"},
      {"label_samples", c.synthesis.label_samples}};
  j["dpo"] = Json{{"beta", c.dpo.beta}, {"lr", c.dpo.lr}, {"epochs", c.dpo.epochs}, {"batch_size", c.dpo.batch_size}};
  j["simulation"] = Json{{"worlds", c.simulation.worlds.empty() ? Json() : Json(c.simulation.worlds.string())},
                         {"policies", path_json(c.simulation.policies)},
                         {"initial_spine_bias", c.simulation.initial_spine_bias},
                         {"labels", c.simulation.labels},
                         {"eval_samples", c.simulation.eval_samples},
                         {"retrieval_q", c.simulation.retrieval_q}};
  j["live"] = Json{{"reasoner", endpoint_to_json(c.live.reasoner)},
                   {"verifier", endpoint_to_json(c.live.verifier)},
                   {"extractor", c.live.extractor ? endpoint_to_json(*c.live.extractor) : Json(nullptr)},
                   {"retry", Json{{"max_attempts", c.live.retry.max_attempts},
                                  {"initial_backoff_ms", c.live.retry.initial_backoff.count()},
                                  {"multiplier", c.live.retry.multiplier},
                                  {"max_backoff_ms", c.live.retry.max_backoff.count()}}},
                   {"rate_limit", c.live.rate_limit},
                   {"rate_burst", c.live.rate_burst},
                   {"verifier_decode", decode_to_json(c.live.verifier_decode)},
                   {"handshake_timeout_seconds", c.live.handshake_timeout_seconds},
                   {"poll_interval_seconds", c.live.poll_interval_seconds},
                   {"lora_rank", c.live.lora_rank},
                   {"lora_alpha", c.live.lora_alpha}};
  return j;
}

// ---------------------------------------------------------------- report

std::size_t RunReport::total_pairs() const {
  std::size_t n = 0;
  for (const auto& r : rounds) n += r.pairs;
  return n;
}

bool RunReport::no_signal() const { return !rounds.empty() && total_pairs() == 0; }

std::string serialize_report(const RunReport& report) {
  Json header;
  header["schema"] = kReportSchema;
  header["kind"] = "header";
  header["mode"] = mode_name(report.mode);
  header["seed"] = report.seed;
  header["rounds_planned"] = report.rounds_planned;
  header["rounds_completed"] = report.rounds.size();
  header["total_pairs"] = report.total_pairs();
  header["no_signal"] = report.no_signal();
  header["early_stopped_after"] = opt_json(report.early_stopped_after);
  header["awaiting_trainer"] = report.awaiting_trainer;
  header["stopped_at"] = report.stopped_at ? Json(format_stage_id(*report.stopped_at)) : Json(nullptr);
  std::string out = header.dump() + "\n";
  out += baseline_to_json(report.baseline_eval, report.baseline_retrieval).dump() + "\n";
  for (const auto& r : report.rounds) out += round_to_json(r).dump() + "\n";
  return out;
}

RunReport parse_report(std::string_view text) {
  RunReport report;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t n = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const Json j = Json::parse(line);
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "header") {
        if (j.at("schema").get<std::string>() != kReportSchema) throw DataError("not a report/v1 file", n);
        report.mode = mode_from(j.at("mode").get<std::string>());
        report.seed = j.at("seed").get<std::uint64_t>();
        report.rounds_planned = j.at("rounds_planned").get<std::size_t>();
        report.early_stopped_after = opt_from<std::size_t>(j.at("early_stopped_after"));
        report.awaiting_trainer = j.at("awaiting_trainer").get<bool>();
        if (!j.at("stopped_at").is_null()) report.stopped_at = parse_stage_id(j.at("stopped_at").get<std::string>());
        header_seen = true;
      } else if (kind == "baseline") {
        report.baseline_eval = eval_from_json(j.at("eval"));
        report.baseline_retrieval = retrieval_from_json(j.at("retrieval"));
      } else if (kind == "round") {
        report.rounds.push_back(round_from_json(j));
      } else {
        throw DataError("unknown report line kind \"" + kind + "\"", n);
      }
    } catch (const Json::exception& e) {
      throw DataError(std::string("bad report line: ") + e.what(), n);
    }
  }
  if (!header_seen) throw DataError("report has no header line");
  return report;
}

std::string format_report_table(const RunReport& report) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s %6s %6s %7s %7s %6s %9s %9s %9s %9s\n", "round", "R+", "skip", "check",
                "fallbk", "pairs", "loss0", "lossN", "acc", "len");
  out << buf;
  auto fmt = [](const std::optional<double>& v) {
    char b[32];
    if (!v) return std::string("-");
    std::snprintf(b, sizeof b, "%.4f", *v);
    return std::string(b);
  };
  if (report.baseline_eval) {
    std::snprintf(buf, sizeof buf, "%-8s %6s %6s %7s %7s %6s %9s %9s %9s %9.2f\n", "base", "-", "-", "-", "-", "-",
                  "-", "-", fmt(report.baseline_eval->accuracy).c_str(), report.baseline_eval->mean_length);
    out << buf;
  }
  for (const auto& r : report.rounds) {
    const std::optional<double> l0 = r.loss_curve.empty() ? std::nullopt : std::optional<double>(r.loss_curve.front());
    const std::optional<double> ln = r.loss_curve.empty() ? std::nullopt : std::optional<double>(r.loss_curve.back());
    std::snprintf(buf, sizeof buf, "%-8zu %6zu %6zu %7.3f %7.3f %6zu %9s %9s %9s %9s\n", r.round, r.pools.with_rplus,
                  r.pools.skipped_empty, r.spr.check_rate(), r.spr.fallback_rate(), r.pairs, fmt(l0).c_str(),
                  fmt(ln).c_str(), r.eval ? fmt(r.eval->accuracy).c_str() : "-",
                  r.eval ? fmt(r.eval->mean_length).c_str() : "-");
    out << buf;
  }
  if (report.no_signal()) out << "no signal: no preference pairs were produced\n";
  if (report.early_stopped_after) out << "stopped early after round " << *report.early_stopped_after << "\n";
  if (report.awaiting_trainer) out << "waiting for the external trainer\n";
  return out.str();
}

// ---------------------------------------------------------------- backends

StageBackends make_http_backends(const LoopConfig& cfg, const LabelSpace& space, const std::string& model) {
  std::shared_ptr<TokenBucket> limiter;
  if (cfg.live.rate_limit > 0.0) limiter = std::make_shared<TokenBucket>(cfg.live.rate_limit, cfg.live.rate_burst);
  auto wrap = [&](EndpointConfig e) -> std::shared_ptr<const ChatTransport> {
    return std::make_shared<ResilientTransport>(std::make_shared<HttpChatTransport>(std::move(e)), cfg.live.retry,
                                                limiter);
  };
  EndpointConfig reasoner = cfg.live.reasoner;
  reasoner.model = model;
  StageBackends b;
  b.reasoner = std::make_shared<LlmBackend>(wrap(reasoner), space);
  b.verifier = std::make_shared<LlmVerifier>(wrap(cfg.live.verifier), cfg.live.verifier_decode);
  b.extractor = std::make_shared<LlmKeyphraseExtractor>(wrap(cfg.live.extractor.value_or(cfg.live.verifier)),
                                                        cfg.live.verifier_decode);
  return b;
}

// ---------------------------------------------------------------- loop entry points

RunReport run_loop(const LoopConfig& cfg, const fs::path& run_dir, const RunOptions& options) {
  cfg.validate();
  if (fs::exists(run_dir / "checkpoint.json"))
    throw ConfigError("run directory " + run_dir.string() + " already holds a checkpoint; use resume");
  fs::create_directories(run_dir);
  Runner runner(cfg, run_dir, options);
  const std::string config_text = config_to_json(cfg).dump(2) + "\n";
  write_file_atomic(run_dir / "config.json", config_text);
  const fs::path timings = run_dir / "timings.jsonl";
  if (fs::exists(timings)) fs::remove(timings);
  Manifest m;
  m.config_sha256 = sha256_hex(config_text);
  m.dataset_sha256 = runner.dataset_sha();
  save_manifest(m, run_dir);
  return runner.run(std::move(m));
}

RunReport resume(const fs::path& run_dir, const RunOptions& options) {
  Manifest m = load_manifest(run_dir);
  std::string config_text;
  try {
    config_text = read_file(run_dir / "config.json");
  } catch (const DataError&) {
    throw CheckpointError("run directory has no config.json");
  }
  if (sha256_hex(config_text) != m.config_sha256) throw CheckpointError("config.json does not match the checkpoint");
  LoopConfig cfg;
  try {
    cfg = config_from_json(Json::parse(config_text));
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("config.json is corrupt: ") + e.what());
  }
  Runner runner(cfg, run_dir, options);
  return runner.run(std::move(m));
}

// ---------------------------------------------------------------- simulation training

double policy_bank_loss(const sim::WorldBank& worlds, const sim::PolicyBank& policies,
                        const sim::PolicyBank& reference, std::span<const PreferencePair> pairs, double beta) {
  std::vector<PairLogProbs> lps;
  lps.reserve(pairs.size());
  for (const auto& p : pairs) {
    const auto w = worlds.find(p.example_id);
    const auto pol = policies.find(p.example_id);
    const auto ref = reference.find(p.example_id);
    if (w == worlds.end() || pol == policies.end() || ref == reference.end())
      throw DataError("no world or policy for pair example " + p.example_id);
    lps.push_back(toy_pair_logprobs(pol->second, ref->second, w->second, p));
  }
  return dpo_loss(lps, beta);
}

TrainResult train_policies(const sim::WorldBank& worlds, const sim::PolicyBank& start,
                           const sim::PolicyBank& reference, std::span<const PreferencePair> pairs,
                           const DpoConfig& dpo, std::uint64_t seed) {
  dpo.validate();
  TrainResult out;
  out.policies = start;
  out.loss_curve.push_back(policy_bank_loss(worlds, out.policies, reference, pairs, dpo.beta));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < dpo.epochs; ++epoch) {
    Rng rng = make_rng(seed, {epoch});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    for (std::size_t b = 0; b < order.size(); b += dpo.batch_size) {
      const std::size_t e = std::min(order.size(), b + dpo.batch_size);
      std::map<std::string, std::vector<PreferencePair>, std::less<>> groups;
      for (std::size_t k = b; k < e; ++k) groups[pairs[order[k]].example_id].push_back(pairs[order[k]]);
      for (const auto& [id, group] : groups) {
        const auto& world = worlds.at(id);
        auto& policy = out.policies.at(id);
        const auto grad = dpo_grad_toy(policy, reference.at(id), world, group, dpo.beta);
        policy = sim::apply_dpo_update(policy, grad, dpo.lr);
      }
      ++out.updates;
    }
    out.loss_curve.push_back(policy_bank_loss(worlds, out.policies, reference, pairs, dpo.beta));
  }
  return out;
}

std::uint64_t evaluation_seed(std::uint64_t run_seed) { return derive_seed(run_seed, {kEvalStream}); }
std::uint64_t retrieval_seed(std::uint64_t run_seed) { return derive_seed(run_seed, {kRetrievalStream}); }
std::uint64_t training_seed(std::uint64_t run_seed, std::size_t round) {
  return derive_seed(run_seed, {round, kTrainStream});
}

std::string policy_bank_sha256(const sim::PolicyBank& policies) {
  return sha256_hex(sim::serialize_policies(policies));
}

// ---------------------------------------------------------------- handshake

std::string_view to_string(JobStatus s) {
  switch (s) {
    case JobStatus::queued:
      return "queued";
    case JobStatus::running:
      return "running";
    case JobStatus::done:
      return "done";
    case JobStatus::failed:
      return "failed";
  }
  return "queued";
}

std::optional<Handshake> read_handshake(const fs::path& job_dir) {
  const fs::path path = job_dir / "status.json";
  if (!fs::exists(path)) return std::nullopt;
  Handshake h;
  try {
    const Json j = Json::parse(read_file(path));
    if (!j.is_object() || j.value("schema", "") != kHandshakeSchema)
      throw DataError(path.string() + " is not a handshake/v1 file");
    const std::string status = j.at("status").get<std::string>();
    if (status == "queued")
      h.status = JobStatus::queued;
    else if (status == "running")
      h.status = JobStatus::running;
    else if (status == "done")
      h.status = JobStatus::done;
    else if (status == "failed")
      h.status = JobStatus::failed;
    else
      throw DataError(path.string() + ": unknown status \"" + status + "\"");
    if (j.contains("model_id") && !j.at("model_id").is_null()) h.model_id = j.at("model_id").get<std::string>();
    if (j.contains("metrics") && !j.at("metrics").is_null()) h.metrics = j.at("metrics");
    if (j.contains("error") && !j.at("error").is_null()) h.error = j.at("error").get<std::string>();
  } catch (const Json::exception& e) {
    throw DataError(path.string() + " is malformed: " + e.what());
  }
  if (h.status == JobStatus::done && (!h.model_id || h.model_id->empty()))
    throw DataError(path.string() + ": status done without a model_id");
  return h;
}

void write_handshake(const Handshake& h, const fs::path& job_dir) {
  Json j;
  j["schema"] = kHandshakeSchema;
  j["status"] = to_string(h.status);
  j["model_id"] = opt_json(h.model_id);
  j["metrics"] = h.metrics;
  j["error"] = opt_json(h.error);
  write_file_atomic(job_dir / "status.json", j.dump(2) + "\n");
}

Json train_job_to_json(const TrainJob& job) {
  Json j;
  j["schema"] = kTrainJobSchema;
  j["pref_file"] = job.pref_file.string();
  j["base_model"] = job.base_model;
  j["lr"] = job.lr;
  j["epochs"] = job.epochs;
  j["lora_rank"] = job.lora_rank;
  j["lora_alpha"] = job.lora_alpha;
  j["beta"] = job.beta;
  j["pairs"] = job.pairs;
  return j;
}

void write_train_job(const TrainJob& job, const fs::path& job_dir) {
  write_file_atomic(job_dir / "job.json", train_job_to_json(job).dump(2) + "\n");
}

}  // namespace roma
