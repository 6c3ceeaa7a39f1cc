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

#include <gtest/gtest.h>

#include <fstream>

#include "roma/bootstrap.hpp"
#include "roma/error.hpp"
#include "roma/preference.hpp"
#include "roma/simulator.hpp"
#include "roma/synthesis.hpp"
#include "support/fakes.hpp"
#include "support/oracles.hpp"

using namespace roma;

namespace {

const LabelSpace kAbcd = LabelSpace::finite({"A", "B", "C", "D"});

Example example(const std::string& id, const std::string& gold) { return Example{id, "Question " + id, Label{gold}, std::nullopt, {}}; }

ReasoningTrace text_trace(const std::string& text, const std::string& label = "B") {
  return *make_trace(text, Label{label}, Provenance::zero_shot);
}

/// Pivots are the words of the trace that start with '#'.
class HashtagExtractor final : public PivotExtractor {
 public:
  std::vector<std::string> extract(const Example&, const ReasoningTrace& r) const override {
    std::vector<std::string> out;
    std::string word;
    for (char c : r.raw_text + " ") {
      if (c == ' ' || c == '\n') {
        if (word.size() > 1 && word[0] == '#') out.push_back(word.substr(1));
        word.clear();
      } else {
        word += c;
      }
    }
    return out;
  }
};

class FixedVerifier final : public Verifier {
 public:
  explicit FixedVerifier(std::string out, bool fail = false) : out_(std::move(out)), fail_(fail) {}
  std::string id() const override { return "fixed"; }
  ChannelledOutput consolidate(const Example&, std::span<const ReasoningTrace>, const std::string& prompt) const override {
    last_prompt = prompt;
    if (fail_) throw BackendError("verifier down", 3, true);
    return {std::string("private scratch"), out_};
  }
  mutable std::string last_prompt;

 private:
  std::string out_;
  bool fail_;
};

}  // namespace

// ---------------------------------------------------------------- bootstrap

TEST(Bootstrap, ZeroShotSuccessesFormRPlus) {
  fake::ScriptedBackend b(kAbcd, {"B", "A", "b)", "", "C", "B", "D"});
  Rng rng(1);
  const auto pool = collect_pool(b, example("q", "B"), BootstrapConfig{}, rng);
  EXPECT_EQ(pool.zero_shot_count, 7u);
  EXPECT_EQ(pool.samples.size(), 7u);
  EXPECT_EQ(pool.successful, (std::vector<std::size_t>{0, 2, 5}));
  EXPECT_EQ(b.guided_calls(), 0u);
  EXPECT_FALSE(pool.failed());
}

TEST(Bootstrap, GuidedFallbackOnlyWhenNothingIsCorrect) {
  fake::ScriptedBackend b(kAbcd, {"A", "C"});
  BootstrapConfig cfg = BootstrapConfig::with_k(5);
  Rng rng(1);
  const auto pool = collect_pool(b, example("q", "B"), cfg, rng);
  EXPECT_EQ(pool.zero_shot_count, 5u);
  ASSERT_EQ(pool.samples.size(), 6u);
  EXPECT_EQ(pool.successful, (std::vector<std::size_t>{5}));
  EXPECT_EQ(pool.samples[5].provenance, Provenance::guided);
  EXPECT_EQ(pool.samples[5].predicted_label, Prediction(Label{"B"}));
  EXPECT_EQ(pool.attempts, 6u);
}

TEST(Bootstrap, GuidedBudgetBoundsRetriesUnderVerification) {
  fake::ScriptedBackend b(kAbcd, {"A"});
  b.guided_readout("C");  // the reasoner never reads the gold label back out of its own justification
  BootstrapConfig cfg = BootstrapConfig::with_k(3);
  cfg.verify_guided = true;
  cfg.verify_samples = 1;
  Rng rng(1);
  const auto pool = collect_pool(b, example("q", "B"), cfg, rng);
  EXPECT_TRUE(pool.successful.empty());
  EXPECT_EQ(b.guided_calls(), cfg.guided_budget);
  EXPECT_EQ(pool.samples.size(), 3u + cfg.guided_budget);
  EXPECT_EQ(pool.zero_shot_count, 3u);
}

TEST(Bootstrap, OutageMarksThePoolFailed) {
  fake::ScriptedBackend b(kAbcd, {"B"});
  b.fail_after(2);
  Rng rng(1);
  const auto pool = collect_pool(b, example("q", "B"), BootstrapConfig{}, rng);
  ASSERT_TRUE(pool.failed());
  EXPECT_NE(pool.failure->find("scripted outage"), std::string::npos);
  EXPECT_EQ(pool.samples.size(), 2u);
}

TEST(Bootstrap, ConfigValidation) {
  BootstrapConfig c;
  c.K = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(BootstrapConfig{}.K, 7u);
  EXPECT_EQ(BootstrapConfig::with_k(5).guided_budget, 10u);
}

TEST(Bootstrap, SuccessCountIsBinomial) {
  const auto bank = std::make_shared<sim::WorldBank>(sim::WorldBank{{"w", fixture::diamond("w")}});
  sim::SimulatorBackend b(bank, {{"w", fixture::policy_for_mass(0.6)}}, LabelSpace::finite({"a", "b", "c"}));
  const Example x{"w", "q", Label{"a"}, std::nullopt, {}};
  const BootstrapConfig cfg = BootstrapConfig::with_k(5);
  const int runs = 10000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < runs; ++i) {
    Rng rng = make_rng(2024, {static_cast<std::uint64_t>(i)});
    const auto pool = collect_pool(b, x, cfg, rng);
    std::size_t zs = 0;
    for (auto idx : pool.successful) zs += idx < pool.zero_shot_count ? 1 : 0;
    sum += static_cast<double>(zs);
    sumsq += static_cast<double>(zs * zs);
  }
  const double mean = sum / runs;
  EXPECT_NEAR(mean, 3.0, 0.05);
  EXPECT_NEAR(sumsq / runs - mean * mean, 5 * 0.6 * 0.4, 0.06);
}

TEST(Bootstrap, PoolJsonRoundTrip) {
  oracle::TempDir dir("pool");
  fake::ScriptedBackend b(kAbcd, {"A", "B", ""});
  Rng rng(3);
  std::vector<CandidatePool> pools{collect_pool(b, example("x", "B"), BootstrapConfig::with_k(4), rng),
                                   collect_pool(b, example("y", "D"), BootstrapConfig::with_k(2), rng)};
  save_pools(pools, dir / "p.jsonl");
  EXPECT_EQ(load_pools(dir / "p.jsonl", kAbcd), pools);
}

// ---------------------------------------------------------------- synthesis

TEST(Synthesis, ConsolidationPromptMatchesGolden) {
  const std::vector<ReasoningTrace> rplus{
      text_trace("The creatinine is elevated, which points to reduced renal clearance."),
      text_trace("Renal clearance is reduced.\nDose must drop."),
      text_trace("Half-life grows when clearance falls; reduce the dose."),
  };
  const std::string golden = read_file(std::filesystem::path(ROMA_TEST_DATA_DIR) / "golden/consolidation_prompt.txt");
  EXPECT_EQ(build_consolidation_prompt(rplus), golden);
}

TEST(Synthesis, MajorityIsStrict) {
  EXPECT_TRUE(PivotSet::is_majority(3, 5));
  EXPECT_FALSE(PivotSet::is_majority(2, 4));
  EXPECT_TRUE(PivotSet::is_majority(1, 1));
  EXPECT_FALSE(PivotSet::is_majority(0, 1));
}

TEST(Synthesis, MinePivotsCountsOncePerTrace) {
  HashtagExtractor ex;
  const std::vector<ReasoningTrace> rplus{text_trace("#alpha #beta #alpha"), text_trace("#alpha #gamma"),
                                          text_trace("#Beta #delta"), text_trace("#alpha")};
  const auto set = mine_pivots(example("q", "B"), rplus, ex);
  EXPECT_EQ(set.source_size, 4u);
  ASSERT_FALSE(set.pivots.empty());
  EXPECT_EQ(set.pivots[0], (PivotSet::Entry{"alpha", 3}));
  EXPECT_EQ(set.majority_pivots(), (std::vector<std::string>{"alpha"}));
  EXPECT_THROW(mine_pivots(example("q", "B"), std::vector<ReasoningTrace>{}, ex), DataError);
}

TEST(Synthesis, ParseVerifierOutput) {
  const auto a = parse_verifier_output("Shared decision pivots:\n- Renal clearance\n* dose\n\nRefined reasoning:\nClearance falls, so cut the dose.\nAnswer: B");
  EXPECT_EQ(a.pivots, (std::vector<std::string>{"dose", "renal clearance"}));
  EXPECT_EQ(a.reasoning, "Clearance falls, so cut the dose.\nAnswer: B");
  const auto b = parse_verifier_output("1. first\n2) second\nThe refined text.");
  EXPECT_EQ(b.pivots.size(), 2u);
  EXPECT_EQ(b.reasoning, "The refined text.");
  const auto c = parse_verifier_output("Just a paragraph.");
  EXPECT_TRUE(c.pivots.empty());
  EXPECT_EQ(c.reasoning, "Just a paragraph.");
}

TEST(Synthesis, PassingCandidateIsKept) {
  fake::ScriptedBackend reasoner(kAbcd, {"B"});
  FixedVerifier v("- #alpha\n\nShort: #alpha\n=> B");
  HashtagExtractor ex;
  const std::vector<ReasoningTrace> rplus{text_trace("#alpha one\n=> B"), text_trace("#alpha two\n=> B")};
  Rng rng(1);
  for (CheckMode mode : {CheckMode::distribution, CheckMode::single_reprediction}) {
    const auto spr = synthesize_spr(reasoner, v, ex, example("q", "B"), rplus, {mode, 4}, rng);
    EXPECT_TRUE(spr.check_passed);
    EXPECT_FALSE(spr.fallback_used);
    EXPECT_EQ(spr.trace.raw_text, "Short: #alpha\n=> B");
    EXPECT_EQ(spr.trace.provenance, Provenance::synthesized);
    EXPECT_EQ(spr.verifier_pivots, (std::vector<std::string>{"#alpha"}));
    // The thinking channel never leaks into the kept trace.
    EXPECT_EQ(spr.trace.raw_text.find("scratch"), std::string::npos);
  }
  EXPECT_EQ(v.last_prompt, build_consolidation_prompt(rplus));
}

TEST(Synthesis, FailingCandidateFallsBackToBestRPlusTrace) {
  fake::ScriptedBackend reasoner(kAbcd, {"B"});
  FixedVerifier v("Refined: => C");
  HashtagExtractor ex;
  // Trace 0 reads out as D, traces 1 and 2 as B: the fallback takes index 1.
  const std::vector<ReasoningTrace> rplus{text_trace("#a\n=> D"), text_trace("#a\n=> B"), text_trace("#b\n=> B")};
  Rng rng(1);
  const auto spr = synthesize_spr(reasoner, v, ex, example("q", "B"), rplus, {}, rng);
  EXPECT_FALSE(spr.check_passed);
  EXPECT_TRUE(spr.fallback_used);
  EXPECT_EQ(spr.fallback_index, std::optional<std::size_t>(1));
  EXPECT_EQ(spr.trace, rplus[1]);
  EXPECT_EQ(spr.shared_pivots.majority_pivots(), (std::vector<std::string>{"a"}));
  EXPECT_TRUE(spr.failure.has_value());
}

TEST(Synthesis, VerifierOutageFallsBack) {
  fake::ScriptedBackend reasoner(kAbcd, {"B"});
  FixedVerifier v("", true);
  HashtagExtractor ex;
  const std::vector<ReasoningTrace> rplus{text_trace("#a\n=> B")};
  Rng rng(1);
  const auto spr = synthesize_spr(reasoner, v, ex, example("q", "B"), rplus, {}, rng);
  EXPECT_TRUE(spr.fallback_used);
  EXPECT_EQ(spr.fallback_index, std::optional<std::size_t>(0));
  EXPECT_NE(spr.failure->find("verifier"), std::string::npos);
}

TEST(Synthesis, SprJsonRoundTrip) {
  oracle::TempDir dir("spr");
  fake::ScriptedBackend reasoner(kAbcd, {"B"});
  FixedVerifier v("- #a\n\n#a short\n=> B");
  HashtagExtractor ex;
  const std::vector<ReasoningTrace> rplus{text_trace("#a x\n=> B"), text_trace("#a y\n=> B")};
  Rng rng(1);
  std::vector<ShortPath> sprs{synthesize_spr(reasoner, v, ex, example("q", "B"), rplus, {}, rng)};
  FixedVerifier bad("=> A");
  sprs.push_back(synthesize_spr(reasoner, bad, ex, example("r", "B"), rplus, {}, rng));
  save_sprs(sprs, dir / "s.jsonl");
  EXPECT_EQ(load_sprs(dir / "s.jsonl", kAbcd), sprs);
}

// ---------------------------------------------------------------- pairs and DPO

TEST(Pairs, CountExcludesOnlyTheShortPath) {
  const std::vector<ReasoningTrace> rplus{text_trace("r0"), text_trace("r1"), text_trace("r1"), text_trace("r3")};
  ShortPath in_pool;
  in_pool.example_id = "q";
  in_pool.trace = rplus[1];
  // Both copies of r1 equal the short path.
  EXPECT_EQ(build_pairs(in_pool, rplus).size(), 2u);
  ShortPath outside = in_pool;
  outside.trace = text_trace("short");
  const auto pairs = build_pairs(outside, rplus);
  ASSERT_EQ(pairs.size(), 4u);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(pairs[i].chosen, outside.trace);
    EXPECT_EQ(pairs[i].rejected, rplus[i]);
    EXPECT_EQ(pairs[i].rejected_index, i);
  }
}

TEST(Pairs, PoolIndicesAreKept) {
  CandidatePool pool;
  pool.example_id = "q";
  pool.samples = {text_trace("wrong", "A"), text_trace("r1"), text_trace("wrong", "C"), text_trace("r3")};
  pool.zero_shot_count = 4;
  pool.successful = {1, 3};
  ShortPath spr;
  spr.example_id = "q";
  spr.trace = text_trace("short");
  const auto pairs = build_pairs(spr, pool);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].rejected_index, 1u);
  EXPECT_EQ(pairs[1].rejected_index, 3u);
}

TEST(Dpo, KnownValues) {
  EXPECT_NEAR(neg_log_sigmoid(1.0), 0.31326168751822286, 1e-15);
  EXPECT_NEAR(neg_log_sigmoid(0.0), std::log(2.0), 1e-16);
  EXPECT_NEAR(neg_log_sigmoid(-1000.0), 1000.0, 1e-9);
  EXPECT_GE(neg_log_sigmoid(1000.0), 0.0);
  EXPECT_TRUE(std::isfinite(neg_log_sigmoid(-1e308)));
  const std::vector<PairLogProbs> one{{-1.0, -11.0, -2.0, -2.0}};
  EXPECT_NEAR(dpo_margin(one[0], 0.1), 1.0, 1e-15);
  EXPECT_NEAR(dpo_loss(one, 0.1), 0.31326168751822286, 1e-15);
}

TEST(Dpo, ZeroMarginGivesNLn2) {
  std::vector<PairLogProbs> pairs(37, PairLogProbs{-3.0, -5.0, -3.0, -5.0});
  EXPECT_NEAR(dpo_loss(pairs, 0.1), 37 * std::log(2.0), 1e-12);
}

TEST(Dpo, MatchesScalarOracle) {
  Rng rng(17);
  for (int batch = 0; batch < 200; ++batch) {
    const std::size_t n = 1 + uniform_index(rng, 40);
    std::vector<PairLogProbs> pairs;
    std::vector<oracle::Quad> quads;
    for (std::size_t i = 0; i < n; ++i) {
      PairLogProbs p{-30.0 * uniform01(rng), -30.0 * uniform01(rng), -30.0 * uniform01(rng), -30.0 * uniform01(rng)};
      pairs.push_back(p);
      quads.push_back({p.policy_chosen, p.policy_rejected, p.ref_chosen, p.ref_rejected});
    }
    const double beta = 0.01 + uniform01(rng);
    EXPECT_NEAR(dpo_loss(pairs, beta), static_cast<double>(oracle::dpo_loss(quads, beta)), 1e-10);
  }
}

TEST(Dpo, RejectsBadInput) {
  const std::vector<PairLogProbs> nan{{std::nan(""), 0, 0, 0}};
  EXPECT_THROW(dpo_loss(nan, 0.1), DataError);
  const std::vector<PairLogProbs> ok{{0, 0, 0, 0}};
  EXPECT_THROW(dpo_loss(ok, 0.0), DataError);
  DpoConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(DpoConfig{}.lr, 1e-6);
  EXPECT_EQ(DpoConfig{}.epochs, 3u);
}

TEST(Dpo, PairwiseSumIsExactOnIntegers) {
  std::vector<double> v(1000);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  EXPECT_EQ(pairwise_sum(v), 499500.0);
  EXPECT_EQ(pairwise_sum(std::vector<double>{}), 0.0);
}

TEST(Dpo, GradientMatchesFiniteDifferences) {
  const LabelSpace labels = LabelSpace::finite({"a", "b", "c"});
  Rng gen(5);
  for (int t = 0; t < 10; ++t) {
    const auto w = sim::generate_world("w", {}, labels, gen);
    sim::ToyPolicy policy = sim::ToyPolicy::uniform(w, 0.8);
    for (auto& z : policy.edge_logits) z = uniform01(gen) - 0.5;
    sim::ToyPolicy ref = sim::ToyPolicy::uniform(w, 0.8);
    for (auto& z : ref.edge_logits) z = uniform01(gen) - 0.5;
    std::vector<PreferencePair> pairs;
    for (int k = 0; k < 4; ++k) {
      PreferencePair p;
      p.example_id = "w";
      p.chosen = sim::sample_trace(policy, w, gen);
      p.rejected = sim::sample_trace(policy, w, gen);
      pairs.push_back(p);
    }
    const auto g = dpo_grad_toy(policy, ref, w, pairs, 0.5);
    const double h = 1e-6;
    for (std::size_t e = 0; e < policy.edge_logits.size(); ++e) {
      auto plus = policy, minus = policy;
      plus.edge_logits[e] += h;
      minus.edge_logits[e] -= h;
      const double fd = (dpo_loss_toy(plus, ref, w, pairs, 0.5) - dpo_loss_toy(minus, ref, w, pairs, 0.5)) / (2 * h);
      EXPECT_NEAR(g[e], fd, 1e-6 + 1e-5 * std::abs(fd));
    }
  }
}

// ---------------------------------------------------------------- pref/v1

TEST(Pref, ExportValidatesAndKeepsKeyOrder) {
  oracle::TempDir dir("pref");
  Dataset d;
  d.label_space = kAbcd;
  d.examples = {example("q1", "B")};
  ShortPath spr;
  spr.example_id = "q1";
  spr.trace = text_trace("short");
  const auto pairs = build_pairs(spr, std::vector<ReasoningTrace>{text_trace("long one"), text_trace("long two")});
  export_preferences(pairs, d, dir / "pref.jsonl");
  const std::string text = read_file(dir / "pref.jsonl");
  const auto first = Json::parse(text.substr(0, text.find('\n')));
  std::vector<std::string> keys;
  for (const auto& [k, v] : first.items()) keys.push_back(k);
  EXPECT_EQ(keys, (std::vector<std::string>{"id", "prompt", "prompt_with_label", "chosen", "rejected"}));
  EXPECT_EQ(first["id"], "q1:0");
  EXPECT_EQ(first["prompt"], "Question q1");
  EXPECT_EQ(first["chosen"], "short");
  const auto rep = validate_preferences(dir / "pref.jsonl");
  EXPECT_EQ(rep.valid, 2u);
  EXPECT_EQ(rep.invalid, 0u);
}

TEST(Pref, ValidatorFlagsBadLines) {
  oracle::TempDir dir("pref");
  std::ofstream(dir / "p.jsonl")
      << R"({"id":"a:0","prompt":"p","prompt_with_label":"p","chosen":"x","rejected":"y"})" << "\n"
      << R"({"id":"a:1","prompt":"p","prompt_with_label":"p","chosen":"same","rejected":"same"})" << "\n"
      << R"({"id":"a:0","prompt":"p","prompt_with_label":"p","chosen":"x","rejected":"z"})" << "\n"
      << R"({"id":"a:2","prompt":"p","chosen":"x","rejected":"z"})" << "\n"
      << "not json\n"
      << R"({"id":"a:3","prompt":"p","prompt_with_label":"p","chosen":"x","rejected":"w"})" << "\n";
  const auto rep = validate_preferences(dir / "p.jsonl");
  // prompt_with_label is optional.
  EXPECT_EQ(rep.valid, 3u);
  EXPECT_EQ(rep.invalid, 3u);
  std::vector<std::size_t> lines;
  for (const auto& [l, why] : rep.issues) lines.push_back(l);
  EXPECT_EQ(lines, (std::vector<std::size_t>{2, 3, 5}));
}

TEST(Pref, PairsFileRoundTrip) {
  oracle::TempDir dir("pairs");
  ShortPath spr;
  spr.example_id = "q";
  spr.trace = text_trace("s");
  const auto pairs = build_pairs(spr, std::vector<ReasoningTrace>{text_trace("a"), text_trace("b", "C")});
  save_pairs(pairs, dir / "p.jsonl");
  EXPECT_EQ(load_pairs(dir / "p.jsonl", kAbcd), pairs);
}
