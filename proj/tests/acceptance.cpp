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

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits nonzero on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "roma/bootstrap.hpp"
#include "roma/metrics.hpp"
#include "roma/orchestrator.hpp"
#include "roma/preference.hpp"
#include "roma/simulator.hpp"
#include "roma/synthesis.hpp"
#include "support/oracles.hpp"

using namespace roma;
namespace fs = std::filesystem;

namespace {

// Tolerances and limits.
constexpr double kLossTol = 1e-10;
constexpr double kZeroMarginTol = 1e-12;
constexpr double kFdStep = 1e-6;
constexpr double kGradRelTol = 1e-5;
constexpr double kRetrievalTol = 0.03;

const LabelSpace kAbcd = LabelSpace::finite({"a", "b", "c", "d"});

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double time_limit_s;  // 0 = untimed
  std::function<Outcome()> run;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Outcome dpo_oracle() {
  Rng rng(20240601);
  double worst = 0.0, worst_zero = 0.0;
  for (int batch = 0; batch < 1000; ++batch) {
    const std::size_t n = 1 + uniform_index(rng, 64);
    const double beta = 0.01 + 2.0 * uniform01(rng);
    std::vector<PairLogProbs> lps;
    std::vector<oracle::Quad> quads;
    for (std::size_t i = 0; i < n; ++i) {
      PairLogProbs p{-40.0 * uniform01(rng), -40.0 * uniform01(rng), -40.0 * uniform01(rng), -40.0 * uniform01(rng)};
      lps.push_back(p);
      quads.push_back({p.policy_chosen, p.policy_rejected, p.ref_chosen, p.ref_rejected});
    }
    worst = std::max(worst, std::abs(dpo_loss(lps, beta) - static_cast<double>(oracle::dpo_loss(quads, beta))));

    // Zero margin: policy and reference agree on every pair.
    std::vector<PairLogProbs> zero;
    for (const auto& p : lps) zero.push_back({p.policy_chosen, p.policy_rejected, p.policy_chosen, p.policy_rejected});
    worst_zero = std::max(worst_zero, std::abs(dpo_loss(zero, beta) - static_cast<double>(n) * std::log(2.0)));
  }
  return {worst <= kLossTol && worst_zero <= kZeroMarginTol,
          fmt("max |loss - oracle| = %.3g, max zero-margin error = %.3g", worst, worst_zero)};
}

Outcome gradient_check() {
  Rng rng(77);
  const double beta = 0.1;
  double worst = 0.0;
  std::size_t components = 0;
  const int worlds = 60;
  for (int t = 0; t < worlds; ++t) {
    const auto w = sim::generate_world("g" + std::to_string(t), {}, kAbcd, rng);
    sim::ToyPolicy policy = sim::ToyPolicy::uniform(w);
    sim::ToyPolicy ref = sim::ToyPolicy::uniform(w);
    for (auto& z : policy.edge_logits) z = 2.0 * uniform01(rng) - 1.0;
    for (auto& z : ref.edge_logits) z = 2.0 * uniform01(rng) - 1.0;
    std::vector<PreferencePair> pairs;
    for (int k = 0; k < 6; ++k) {
      PreferencePair p;
      p.example_id = w.id();
      p.chosen = sim::sample_trace(policy, w, rng);
      p.rejected = sim::sample_trace(policy, w, rng);
      pairs.push_back(std::move(p));
    }
    const auto g = dpo_grad_toy(policy, ref, w, pairs, beta);
    for (std::size_t e = 0; e < g.size(); ++e) {
      auto plus = policy, minus = policy;
      plus.edge_logits[e] += kFdStep;
      minus.edge_logits[e] -= kFdStep;
      const double fd =
          (dpo_loss_toy(plus, ref, w, pairs, beta) - dpo_loss_toy(minus, ref, w, pairs, beta)) / (2.0 * kFdStep);
      const double scale = std::max({std::abs(g[e]), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(g[e] - fd) / scale);
      ++components;
    }
  }
  return {worst < kGradRelTol,
          fmt("%.0f worlds, %.0f components, max relative error = %.3g", worlds, static_cast<double>(components), worst)};
}

Outcome lemma_suite() {
  const auto worlds = std::make_shared<const sim::WorldBank>(sim::generate_worlds(1000, {}, kAbcd, 31337));
  sim::PolicyBank policies;
  Rng prng(5);
  for (const auto& [id, w] : *worlds) {
    sim::ToyPolicy p = sim::ToyPolicy::uniform(w);
    for (auto& z : p.edge_logits) z = 3.0 * uniform01(prng) - 1.5;
    policies.emplace(id, std::move(p));
  }
  RunInputs in;
  in.worlds = worlds;
  in.dataset = sim::make_dataset(*worlds, kAbcd);
  const auto b = simulation_backends(in, policies);
  std::size_t cover_ok = 0, majority_ok = 0, spr_ok = 0, total = 0;
  for (std::size_t i = 0; i < in.dataset.examples.size(); ++i) {
    const auto& x = in.dataset.examples[i];
    const auto& w = worlds->at(x.id);
    Rng rng = make_rng(99, {i});
    const auto pool = collect_pool(*b.reasoner, x, BootstrapConfig::with_k(5), rng);
    const auto rplus = pool_to_rplus(pool);
    ++total;
    const auto ids = w.pivot_ids();
    const std::set<std::string> truth(ids.begin(), ids.end());
    bool covers = !rplus.empty();
    for (const auto& r : rplus) {
      const std::set<std::string> seen(r.steps.begin(), r.steps.end());
      for (const auto& p : truth) covers = covers && seen.count(p);
    }
    cover_ok += covers;
    if (rplus.empty()) continue;
    const auto spr = synthesize_spr(*b.reasoner, *b.verifier, *b.extractor, x, rplus, {}, rng);
    const auto maj = spr.shared_pivots.majority_pivots();
    const std::set<std::string> majority(maj.begin(), maj.end());
    majority_ok += std::includes(majority.begin(), majority.end(), truth.begin(), truth.end());
    spr_ok += spr.check_passed && !spr.fallback_used;
  }
  const bool pass = cover_ok == total && majority_ok == total && spr_ok == total && total == 1000;
  std::ostringstream os;
  os << total << " worlds: R+ covers pivots " << cover_ok << ", majority contains pivots " << majority_ok
     << ", short path passes without fallback " << spr_ok;
  return {pass, os.str()};
}

Outcome minimal_walk_oracle() {
  const auto worlds = sim::generate_worlds(500, {}, kAbcd, 4242);
  std::size_t agree = 0, max_nodes = 0;
  for (const auto& [id, w] : worlds) {
    max_nodes = std::max(max_nodes, w.nodes().size());
    const auto ids = w.pivot_ids();
    const auto walk = sim::minimal_pivot_walk(w, std::set<std::string>(ids.begin(), ids.end()));
    const std::set<std::size_t> required(w.pivots().begin(), w.pivots().end());
    agree += walk.steps.size() == oracle::min_cover_length(w, required);
  }
  return {agree == worlds.size() && max_nodes <= 12,
          fmt("%.0f/%.0f worlds agree with enumeration (max %.0f nodes)", static_cast<double>(agree),
              static_cast<double>(worlds.size()), static_cast<double>(max_nodes))};
}

Outcome closed_loop() {
  oracle::TempDir dir("accept-loop");
  int acc_up = 0, len_down = 0;
  std::ostringstream os;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const fs::path wpath = dir / ("worlds-" + std::to_string(seed) + ".jsonl");
    sim::save_worlds(sim::generate_worlds(50, {}, kAbcd, seed), wpath);
    LoopConfig cfg = LoopConfig::preset_simulation();
    cfg.bootstrap = BootstrapConfig::with_k(5);
    cfg.L = 1;
    cfg.dpo.beta = 0.1;
    cfg.seed = seed;
    cfg.simulation.worlds = wpath;
    cfg.simulation.initial_spine_bias = 2.0;
    cfg.simulation.eval_samples = 20;
    const auto rep = run_loop(cfg, dir / ("run-" + std::to_string(seed)));
    const auto& before = *rep.baseline_eval;
    const auto& after = *rep.rounds.back().eval;
    acc_up += after.accuracy > before.accuracy;
    len_down += after.mean_length < before.mean_length;
    os << " [seed " << seed << ": acc " << before.accuracy << "->" << after.accuracy << ", len " << before.mean_length
       << "->" << after.mean_length << "]";
  }
  return {acc_up == 5 && len_down >= 4,
          "accuracy up " + std::to_string(acc_up) + "/5, length down " + std::to_string(len_down) + "/5;" + os.str()};
}

Outcome pair_accounting() {
  Rng rng(808);
  const std::vector<std::string> vocab{"alpha", "beta", "gamma", "delta"};
  std::size_t cases = 0, agree = 0, in_pool_cases = 0, out_pool_cases = 0;
  std::vector<CandidatePool> pools;
  std::vector<ShortPath> sprs;
  std::size_t expected_total = 0;
  for (int t = 0; t < 2000; ++t) {
    CandidatePool pool;
    pool.example_id = "x" + std::to_string(t);
    const std::size_t n = 1 + uniform_index(rng, 8);
    for (std::size_t i = 0; i < n; ++i) {
      auto tr = *make_trace(vocab[uniform_index(rng, vocab.size())], Label{"a"}, Provenance::zero_shot);
      pool.samples.push_back(tr);
      if (uniform01(rng) < 0.6) pool.successful.push_back(i);
    }
    pool.zero_shot_count = n;
    if (pool.successful.empty()) pool.successful.push_back(0);
    ShortPath spr;
    spr.example_id = pool.example_id;
    const bool in_pool = uniform01(rng) < 0.5;
    spr.trace = in_pool ? pool.samples[pool.successful[uniform_index(rng, pool.successful.size())]]
                        : *make_trace("short", Label{"a"}, Provenance::synthesized);
    (in_pool ? in_pool_cases : out_pool_cases)++;
    std::size_t expected = 0;
    for (auto idx : pool.successful) expected += pool.samples[idx].raw_text != spr.trace.raw_text;
    ++cases;
    agree += build_pairs(spr, pool).size() == expected;
    expected_total += expected;
    pools.push_back(pool);
    sprs.push_back(spr);
  }
  const bool stage_ok = run_pairs_stage(pools, sprs).size() == expected_total;
  return {agree == cases && stage_ok && in_pool_cases > 0 && out_pool_cases > 0,
          fmt("%.0f/%.0f pools exact (%.0f with the short path in the pool), stage total %.0f", static_cast<double>(agree),
              static_cast<double>(cases), static_cast<double>(in_pool_cases), static_cast<double>(expected_total))};
}

Outcome pivot_f1_properties() {
  const double eps = kDefaultPivotEpsilon;
  bool ok = true;
  ok &= pivot_f1({"a", "b"}, {"a", "b"}, eps).value == 4.0 / (4.0 + eps);
  ok &= pivot_f1({"a", "b"}, {"c"}, eps).value == 0.0;
  ok &= pivot_f1({"a", "b"}, {"a", "b", "c"}, eps).value == 4.0 / (5.0 + eps);
  const bool worked = ok;
  Rng rng(3);
  const std::vector<std::string> vocab{"p", "q", "r", "s", "t"};
  std::size_t checked = 0;
  for (int t = 0; t < 5000; ++t) {
    std::vector<std::string> a, b;
    for (const auto& v : vocab) {
      if (uniform01(rng) < 0.5) a.push_back(v);
      if (uniform01(rng) < 0.5) b.push_back(v);
    }
    const double ab = pivot_f1(a, b, eps).value, ba = pivot_f1(b, a, eps).value;
    bool disjoint = true;
    for (const auto& x : a) disjoint = disjoint && std::find(b.begin(), b.end(), x) == b.end();
    ok &= ab == ba && ab >= 0.0 && ab < 1.0 && ((ab == 0.0) == disjoint);
    ++checked;
  }
  return {ok, std::string("worked values ") + (worked ? "exact" : "WRONG") + ", " + std::to_string(checked) +
                  " random set pairs checked"};
}

Outcome retrieval_stats() {
  auto bank = std::make_shared<sim::WorldBank>();
  sim::PolicyBank policies;
  for (int i = 0; i < 50; ++i) {
    const std::string id = "d" + std::to_string(100 + i);
    bank->emplace(id, fixture::diamond(id));
    policies.emplace(id, fixture::policy_for_mass(0.6));
  }
  const LabelSpace labels = LabelSpace::finite({"a", "b", "c"});
  sim::SimulatorBackend backend(bank, policies, labels);
  const Dataset d = sim::make_dataset(*bank, labels);
  bool ok = true;
  std::ostringstream os;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto rep = pivot_retrieval_rate(backend, d, 100, mentions_pivot, {}, seed);
    ok &= std::abs(rep.rate - 0.6) <= kRetrievalTol && rep.any_rate >= rep.rate;
    os << " [rate " << rep.rate << ", any " << rep.any_rate << "]";
  }
  return {ok, "5 runs:" + os.str()};
}

Outcome determinism() {
  oracle::TempDir dir("accept-det");
  sim::save_worlds(sim::generate_worlds(30, {}, kAbcd, 17), dir / "worlds.jsonl");
  LoopConfig cfg = LoopConfig::preset_simulation();
  cfg.L = 2;
  cfg.seed = 17;
  cfg.bootstrap = BootstrapConfig::with_k(5);
  cfg.simulation.worlds = dir / "worlds.jsonl";
  cfg.simulation.initial_spine_bias = 2.0;
  cfg.simulation.retrieval_q = 10;
  const auto a = run_loop(cfg, dir / "a");
  const auto b = run_loop(cfg, dir / "b");
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "a")) {
    if (!e.is_regular_file() || e.path().filename() == "timings.jsonl") continue;
    ++files;
    const fs::path other = dir / "b" / fs::relative(e.path(), dir / "a");
    same += fs::exists(other) && read_file(other) == read_file(e.path());
  }
  const bool report_same = serialize_report(a) == serialize_report(b);
  return {report_same && files > 0 && same == files,
          std::string("report ") + (report_same ? "identical" : "DIFFERS") + ", " + std::to_string(same) + "/" +
              std::to_string(files) + " artifact files identical"};
}

Outcome prompt_fidelity() {
  const std::vector<ReasoningTrace> rplus{
      *make_trace("The creatinine is elevated, which points to reduced renal clearance.", Label{"b"},
                  Provenance::zero_shot),
      *make_trace("Renal clearance is reduced.\nDose must drop.", Label{"b"}, Provenance::zero_shot),
      *make_trace("Half-life grows when clearance falls; reduce the dose.", Label{"b"}, Provenance::zero_shot),
  };
  const std::string golden = read_file(fs::path(ROMA_TEST_DATA_DIR) / "golden" / "consolidation_prompt.txt");
  const std::string built = build_consolidation_prompt(rplus);
  return {built == golden, std::to_string(built.size()) + " bytes built, " + std::to_string(golden.size()) +
                               " bytes golden"};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"dpo-loss-oracle", 5, dpo_oracle},
      {"gradient-check", 30, gradient_check},
      {"simulator-lemmas", 60, lemma_suite},
      {"minimal-walk-oracle", 60, minimal_walk_oracle},
      {"closed-loop-improvement", 300, closed_loop},
      {"pair-accounting", 5, pair_accounting},
      {"pivot-f1-properties", 1, pivot_f1_properties},
      {"retrieval-statistics", 60, retrieval_stats},
      {"determinism", 0, determinism},
      {"consolidation-prompt-golden", 0, prompt_fidelity},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.time_limit_s <= 0 || secs < c.time_limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s %-28s %.2fs%s  %s\n", pass ? "PASS" : "FAIL", c.name.c_str(), secs,
                in_time ? "" : fmt(" (limit %.0fs)", c.time_limit_s).c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
