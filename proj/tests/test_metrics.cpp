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

#include <cmath>

#include "roma/error.hpp"
#include "roma/metrics.hpp"
#include "roma/simulator.hpp"
#include "support/oracles.hpp"

using namespace roma;

namespace {

const LabelSpace kAbc = LabelSpace::finite({"a", "b", "c"});

std::shared_ptr<const sim::WorldBank> diamonds(std::size_t n) {
  auto bank = std::make_shared<sim::WorldBank>();
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = "w" + std::to_string(100 + i);
    bank->emplace(id, fixture::diamond(id));
  }
  return bank;
}

sim::PolicyBank mass_policies(const sim::WorldBank& worlds, double mass) {
  sim::PolicyBank out;
  for (const auto& [id, w] : worlds) out.emplace(id, fixture::policy_for_mass(mass));
  return out;
}

ReasoningTrace text_trace(const std::string& text) { return *make_trace(text, Label{"a"}, Provenance::zero_shot); }

}  // namespace

TEST(PivotF1, WorkedValues) {
  const auto same = pivot_f1({"a", "b"}, {"b", "a"});
  EXPECT_NEAR(same.value, 1.0, 1e-8);
  EXPECT_LT(same.value, 1.0);
  EXPECT_EQ(pivot_f1({"a"}, {"b"}).value, 0.0);
  const auto partial = pivot_f1({"a", "b", "c"}, {"a", "b"});
  EXPECT_EQ(partial.intersection, 2u);
  EXPECT_DOUBLE_EQ(partial.value, 4.0 / (5.0 + kDefaultPivotEpsilon));
  // Inputs are sets of normalized pivots.
  EXPECT_DOUBLE_EQ(pivot_f1({"Renal  Clearance", "renal clearance"}, {"renal clearance"}).value,
                   2.0 / (2.0 + kDefaultPivotEpsilon));
  EXPECT_EQ(pivot_f1({}, {}).value, 0.0);
}

TEST(PivotF1, SymmetricAndBounded) {
  Rng rng(9);
  const std::vector<std::string> vocab{"p", "q", "r", "s", "t", "u"};
  for (int t = 0; t < 2000; ++t) {
    std::vector<std::string> a, b;
    for (const auto& v : vocab) {
      if (uniform01(rng) < 0.4) a.push_back(v);
      if (uniform01(rng) < 0.4) b.push_back(v);
    }
    const double ab = pivot_f1(a, b).value, ba = pivot_f1(b, a).value;
    EXPECT_EQ(ab, ba);
    EXPECT_GE(ab, 0.0);
    EXPECT_LT(ab, 1.0);
    if (!a.empty()) {
      EXPECT_NEAR(pivot_f1(a, a).value, 1.0, 1e-7);
    }
  }
}

TEST(Retrieval, MatchesBinomialExpectation) {
  const auto worlds = diamonds(50);
  sim::SimulatorBackend b(worlds, mass_policies(*worlds, 0.6), kAbc);
  const Dataset d = sim::make_dataset(*worlds, kAbc);
  const auto rep = pivot_retrieval_rate(b, d, 100, mentions_pivot, {}, 77);
  EXPECT_EQ(rep.Q, 100u);
  EXPECT_EQ(rep.hits.size(), 50u);
  EXPECT_NEAR(rep.rate, 0.6, 0.03);
  EXPECT_GE(rep.any_rate, rep.rate);
  // 1 - 0.4^100 per example.
  EXPECT_EQ(rep.any_rate, 1.0);
}

TEST(Retrieval, IndependentOfWorkers) {
  const auto worlds = diamonds(12);
  sim::SimulatorBackend b(worlds, mass_policies(*worlds, 0.3), kAbc);
  const Dataset d = sim::make_dataset(*worlds, kAbc);
  const auto one = pivot_retrieval_rate(b, d, 5, mentions_pivot, {}, 3, 1);
  const auto many = pivot_retrieval_rate(b, d, 5, mentions_pivot, {}, 3, 4);
  EXPECT_EQ(one.hits, many.hits);
  EXPECT_EQ(one.rate, many.rate);
  EXPECT_GE(one.any_rate, one.rate);
}

TEST(Retrieval, RejectsUnannotatedOrEmpty) {
  const auto worlds = diamonds(2);
  sim::SimulatorBackend b(worlds, mass_policies(*worlds, 0.5), kAbc);
  Dataset d = sim::make_dataset(*worlds, kAbc);
  EXPECT_THROW(pivot_retrieval_rate(b, d, 0, mentions_pivot, {}, 1), ConfigError);
  d.examples[0].pivot_annotations.reset();
  EXPECT_THROW(pivot_retrieval_rate(b, d, 1, mentions_pivot, {}, 1), DataError);
}

TEST(Matcher, NormalizedSubstring) {
  EXPECT_TRUE(mentions_pivot(text_trace("The Renal   clearance drops."), "renal clearance"));
  EXPECT_FALSE(mentions_pivot(text_trace("The renal function drops."), "renal clearance"));
  EXPECT_FALSE(mentions_pivot(text_trace("anything"), "  "));
}

TEST(Length, MeanAndBySource) {
  std::vector<ReasoningTrace> ts{text_trace("a b c"), text_trace("a"),
                                 *make_trace("x y", Label{"a"}, Provenance::guided)};
  const auto rep = mean_output_length(ts);
  EXPECT_DOUBLE_EQ(rep.mean, 2.0);
  EXPECT_EQ(rep.count, 3u);
  EXPECT_DOUBLE_EQ(rep.by_source.at("zero_shot"), 2.0);
  EXPECT_DOUBLE_EQ(rep.by_source.at("guided"), 2.0);
  EXPECT_THROW(mean_output_length(std::vector<ReasoningTrace>{}), DataError);
}

TEST(Evaluate, AccuracyTracksPivotMass) {
  const auto worlds = diamonds(40);
  sim::SimulatorBackend b(worlds, mass_policies(*worlds, 0.6), kAbc);
  const Dataset d = sim::make_dataset(*worlds, kAbc);
  const auto rep = evaluate(b, d, {}, 50, 11);
  EXPECT_EQ(rep.samples, 2000u);
  // sd = sqrt(0.24 / 2000) ~ 0.011
  EXPECT_NEAR(rep.accuracy, 0.6, 0.05);
  // Covering walks have 3 nodes, like the others.
  EXPECT_DOUBLE_EQ(rep.mean_length, 3.0);
  const auto again = evaluate(b, d, {}, 50, 11, 3);
  EXPECT_EQ(again.accuracy, rep.accuracy);
  EXPECT_THROW(accuracy(b, Dataset{kAbc, {}}, {}, 1), DataError);
}

TEST(Ranks, TiesShareAverage) {
  EXPECT_EQ(average_ranks(std::vector<double>{3, 1, 3, 2}), (std::vector<double>{3.5, 1, 3.5, 2}));
  EXPECT_EQ(average_ranks(std::vector<double>{5, 5, 5}), (std::vector<double>{2, 2, 2}));
  EXPECT_TRUE(average_ranks(std::vector<double>{}).empty());
}

TEST(Selection, PivotAndExternalModes) {
  ShortPath spr;
  spr.example_id = "q";
  spr.shared_pivots.source_size = 3;
  spr.shared_pivots.pivots = {{"x", 3}, {"y", 1}};
  const std::vector<ReasoningTrace> rplus{text_trace("t0"), text_trace("t1"), text_trace("t2")};
  const std::vector<std::vector<std::string>> piv{{"x"}, {"y"}, {"x", "y"}};
  const std::vector<double> ext{0.1, 0.9, 0.5};

  auto p = select_pairs_by_score(spr, rplus, piv, {}, SelectionMode::pivot_only);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].chosen, rplus[0]);
  EXPECT_EQ(p[0].rejected, rplus[1]);
  EXPECT_EQ(p[0].rejected_index, 1u);

  p = select_pairs_by_score(spr, rplus, {}, ext, SelectionMode::external_only);
  EXPECT_EQ(p[0].chosen, rplus[1]);
  EXPECT_EQ(p[0].rejected, rplus[0]);

  // Ranks: pivot {3, 1, 2}, external {1, 3, 2}; all average to 2, so index 0 wins and 1 loses.
  p = select_pairs_by_score(spr, rplus, piv, ext, SelectionMode::combined);
  EXPECT_EQ(p[0].chosen, rplus[0]);
  EXPECT_EQ(p[0].rejected_index, 1u);

  EXPECT_TRUE(select_pairs_by_score(spr, std::span(rplus).first(1), piv, ext, SelectionMode::combined).empty());
  EXPECT_THROW(select_pairs_by_score(spr, rplus, {}, ext, SelectionMode::pivot_only), DataError);
}
