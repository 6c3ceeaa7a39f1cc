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

// roma: command-line driver for the self-training pipeline.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "roma/error.hpp"
#include "roma/orchestrator.hpp"

namespace {

namespace fs = std::filesystem;
using namespace roma;

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kBackend = 3, kNoSignal = 4 };

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> rounds;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> k;
  bool freeze_once = false;
};

void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Run seed");
  cmd->add_option("--rounds", o.rounds, "Number of self-training rounds");
  cmd->add_option("--workers", o.workers, "Worker threads for per-example stages");
  cmd->add_option("-K,--samples-per-example", o.k, "Zero-shot samples per example (guided budget becomes 2K)");
  cmd->add_flag("--freeze-once", o.freeze_once, "Keep the first round's reference for all rounds");
}

LoopConfig load_with(const std::string& path, const Overrides& o) {
  LoopConfig cfg = load_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.rounds) cfg.L = *o.rounds;
  if (o.workers) cfg.workers = *o.workers;
  if (o.k) {
    cfg.bootstrap.K = *o.k;
    cfg.bootstrap.guided_budget = 2 * *o.k;
  }
  if (o.freeze_once) cfg.freeze_once = true;
  cfg.validate();
  return cfg;
}

StageBackends backends(const LoopConfig& cfg, const RunInputs& in, const std::optional<std::string>& policies,
                       const std::optional<std::string>& model) {
  if (cfg.mode == RunMode::simulation) {
    sim::PolicyBank bank = in.initial_policies;
    if (policies) bank = sim::complete_policies(*in.worlds, sim::load_policies(*policies, *in.worlds), cfg.simulation.initial_spine_bias);
    return simulation_backends(in, std::move(bank));
  }
  return make_http_backends(cfg, in.dataset.label_space, model.value_or(cfg.live.reasoner.model));
}

void print_json(const Json& j) { std::cout << j.dump(2) << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-training with short-path reasoning"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides ov;
  std::optional<std::string> policies, model;
  std::string out, pools_path, sprs_path, pairs_path, run_dir, stop_after;
  std::size_t round = 1;

  // gen-worlds
  auto* gen = app.add_subcommand("gen-worlds", "Generate random solvable simulator worlds");
  std::size_t count = 50;
  std::uint64_t gen_seed = 0;
  std::vector<std::string> labels{"a", "b", "c", "d"};
  std::optional<std::string> dataset_out;
  sim::WorldGenConfig wcfg;
  gen->add_option("--count", count, "Number of worlds")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--labels", labels, "Answer labels")->delimiter(',');
  gen->add_option("--min-nodes", wcfg.min_nodes);
  gen->add_option("--max-nodes", wcfg.max_nodes);
  gen->add_option("--min-pivots", wcfg.min_pivots);
  gen->add_option("--max-pivots", wcfg.max_pivots);
  gen->add_option("--out", out, "world/v1 output file")->required();
  gen->add_option("--dataset", dataset_out, "Also write the matching dataset/v1 file");

  auto* boot = app.add_subcommand("bootstrap", "Stage A: candidate pools and R+ for every example");
  auto* synth = app.add_subcommand("synthesize", "Stage B: verified short-path reasoning per example");
  auto* pairs = app.add_subcommand("pairs", "Stage C: chosen/rejected pairs from pools and short paths");
  auto* train = app.add_subcommand("train-sim", "DPO on simulator policies from a pairs file");
  auto* exp = app.add_subcommand("export", "Write pairs as pref/v1 for an external trainer");
  auto* eval = app.add_subcommand("evaluate", "Accuracy, output length and pivot retrieval");
  auto* loop = app.add_subcommand("loop", "Run the full self-training loop with checkpoints");
  auto* res = app.add_subcommand("resume", "Continue a checkpointed run");
  auto* vpref = app.add_subcommand("validate-pref", "Check a pref/v1 file line by line");

  for (auto* cmd : {boot, synth, pairs, train, exp, eval, loop}) {
    cmd->add_option("-c,--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    add_overrides(cmd, ov);
  }
  for (auto* cmd : {boot, synth, eval}) {
    cmd->add_option("--policies", policies, "Simulator policies (policy/v1); default from the config");
    cmd->add_option("--model", model, "Reasoner model id override (live mode)");
  }
  for (auto* cmd : {boot, synth}) cmd->add_option("--round", round, "Round index used for seeding")->check(CLI::PositiveNumber);
  boot->add_option("--out", out, "pool/v1 output")->required();
  synth->add_option("--pools", pools_path, "pool/v1 input")->required()->check(CLI::ExistingFile);
  synth->add_option("--out", out, "spr/v1 output")->required();
  pairs->add_option("--pools", pools_path, "pool/v1 input")->required()->check(CLI::ExistingFile);
  pairs->add_option("--sprs", sprs_path, "spr/v1 input")->required()->check(CLI::ExistingFile);
  pairs->add_option("--out", out, "pairs/v1 output")->required();
  std::optional<std::string> reference;
  train->add_option("--pairs", pairs_path, "pairs/v1 input")->required()->check(CLI::ExistingFile);
  train->add_option("--policies", policies, "Starting policies; default from the config");
  train->add_option("--reference", reference, "Reference policies; default the starting policies");
  train->add_option("--out", out, "policy/v1 output")->required();
  exp->add_option("--pairs", pairs_path, "pairs/v1 input")->required()->check(CLI::ExistingFile);
  exp->add_option("--out", out, "pref/v1 output")->required();
  std::size_t eval_samples = 0, retrieval_q = 0;
  eval->add_option("--eval-samples", eval_samples, "Samples per example (default from the config)");
  eval->add_option("--retrieval-q", retrieval_q, "Traces per example for pivot retrieval; 0 skips");
  loop->add_option("--run-dir", run_dir, "Run directory")->required();
  res->add_option("--run-dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  for (auto* cmd : {loop, res}) cmd->add_option("--stop-after", stop_after, "Stop once ROUND:STAGE is checkpointed");
  std::string pref_path;
  vpref->add_option("file", pref_path, "pref/v1 file")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (gen->parsed()) {
      const LabelSpace space = LabelSpace::finite(labels);
      const sim::WorldBank bank = sim::generate_worlds(count, wcfg, space, gen_seed);
      sim::save_worlds(bank, out);
      if (dataset_out) save_dataset(sim::make_dataset(bank, space), *dataset_out);
      print_json(Json{{"worlds", bank.size()}, {"out", out}});
      return kOk;
    }
    if (vpref->parsed()) {
      const auto rep = validate_preferences(pref_path);
      Json issues = Json::array();
      for (const auto& [line, why] : rep.issues) issues.push_back(Json{{"line", line}, {"reason", why}});
      print_json(Json{{"valid", rep.valid}, {"invalid", rep.invalid}, {"issues", issues}});
      if (rep.invalid > 0) return kFailure;
      return rep.valid == 0 ? kNoSignal : kOk;
    }
    if (res->parsed()) {
      RunOptions opts;
      if (!stop_after.empty()) opts.stop_after = parse_stage_id(stop_after);
      const RunReport report = resume(run_dir, opts);
      std::cout << format_report_table(report);
      return report.complete() && report.no_signal() ? kNoSignal : kOk;
    }

    const LoopConfig cfg = load_with(config_path, ov);
    if (loop->parsed()) {
      RunOptions opts;
      if (!stop_after.empty()) opts.stop_after = parse_stage_id(stop_after);
      const RunReport report = run_loop(cfg, run_dir, opts);
      std::cout << format_report_table(report);
      return report.complete() && report.no_signal() ? kNoSignal : kOk;
    }

    const RunInputs in = load_inputs(cfg);
    const LabelSpace& space = in.dataset.label_space;
    if (boot->parsed()) {
      const auto b = backends(cfg, in, policies, model);
      const auto pools = run_bootstrap_stage(*b.reasoner, in.dataset, cfg.bootstrap, cfg.seed, round, cfg.workers);
      save_pools(pools, out);
      std::size_t with_rplus = 0;
      for (const auto& p : pools) with_rplus += p.successful.empty() ? 0 : 1;
      print_json(Json{{"examples", pools.size()}, {"with_rplus", with_rplus}, {"out", out}});
      return kOk;
    }
    if (synth->parsed()) {
      const auto b = backends(cfg, in, policies, model);
      const auto pools = load_pools(pools_path, space);
      const auto sprs = run_synthesis_stage(b, in.dataset, pools, cfg.synthesis, cfg.seed, round, cfg.workers);
      save_sprs(sprs, out);
      std::size_t passed = 0;
      for (const auto& s : sprs) passed += s.check_passed ? 1 : 0;
      print_json(Json{{"short_paths", sprs.size()}, {"check_passed", passed}, {"out", out}});
      return kOk;
    }
    if (pairs->parsed()) {
      const auto pools = load_pools(pools_path, space);
      const auto sprs = load_sprs(sprs_path, space);
      const auto ps = run_pairs_stage(pools, sprs);
      save_pairs(ps, out);
      print_json(Json{{"pairs", ps.size()}, {"out", out}});
      return ps.empty() ? kNoSignal : kOk;
    }
    if (train->parsed()) {
      if (cfg.mode != RunMode::simulation) throw ConfigError("train-sim needs a simulation config");
      const auto ps = load_pairs(pairs_path, space);
      if (ps.empty()) {
        print_json(Json{{"pairs", 0}});
        return kNoSignal;
      }
      sim::PolicyBank start = in.initial_policies;
      if (policies) start = sim::complete_policies(*in.worlds, sim::load_policies(*policies, *in.worlds), cfg.simulation.initial_spine_bias);
      sim::PolicyBank ref = start;
      if (reference) ref = sim::complete_policies(*in.worlds, sim::load_policies(*reference, *in.worlds), cfg.simulation.initial_spine_bias);
      const auto tr = train_policies(*in.worlds, start, ref, ps, cfg.dpo, training_seed(cfg.seed, round));
      sim::save_policies(tr.policies, out);
      print_json(Json{{"pairs", ps.size()}, {"updates", tr.updates}, {"loss_curve", tr.loss_curve}, {"out", out}});
      return kOk;
    }
    if (exp->parsed()) {
      const auto ps = load_pairs(pairs_path, space);
      export_preferences(ps, in.dataset, out);
      print_json(Json{{"pairs", ps.size()}, {"out", out}});
      return ps.empty() ? kNoSignal : kOk;
    }
    if (eval->parsed()) {
      const auto b = backends(cfg, in, policies, model);
      const Dataset& target = in.validation ? *in.validation : in.dataset;
      const std::size_t samples =
          eval_samples ? eval_samples : (cfg.mode == RunMode::simulation ? cfg.simulation.eval_samples : 1);
      const auto e = evaluate(*b.reasoner, target, cfg.bootstrap.zero_shot_decode, samples,
                              evaluation_seed(cfg.seed), cfg.workers);
      Json j{{"accuracy", e.accuracy}, {"mean_length", e.mean_length}, {"samples", e.samples}};
      if (retrieval_q > 0) {
        const auto r = pivot_retrieval_rate(*b.reasoner, target, retrieval_q, mentions_pivot,
                                            cfg.bootstrap.zero_shot_decode, retrieval_seed(cfg.seed),
                                            cfg.workers);
        j["retrieval"] = Json{{"Q", r.Q}, {"per_trace_rate", r.rate}, {"any_of_q_rate", r.any_rate}};
      }
      print_json(j);
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const BackendError& e) {
    std::cerr << "backend failure: " << e.what() << "\n";
    return kBackend;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
