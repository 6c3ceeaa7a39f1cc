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

// Desk-scale world where the whole self-training loop, including the DPO update, runs
// natively. A question is a DAG with designated decision pivots; the reasoner is a
// softmax walk policy over edges; an answer is correct iff every pivot was visited.

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "roma/backends.hpp"
#include "roma/corpus.hpp"
#include "roma/rng.hpp"
#include "roma/trace.hpp"

namespace roma::sim {

using Walk = std::vector<std::size_t>;

class PivotWorld {
 public:
  struct Edge {
    std::size_t from;
    std::size_t to;
    friend bool operator==(const Edge&, const Edge&) = default;
  };

  /// Checks the graph: unique node ids, no duplicate edges, acyclic, exactly one
  /// source and one sink, every node on some source->sink path, pivots are interior
  /// nodes. Throws DataError. Pivot count and solvability are checked by validate().
  PivotWorld(std::string id, std::vector<std::string> nodes, std::vector<Edge> edges, std::vector<std::size_t> pivots,
             Label gold_label, std::vector<Label> distractor_labels);

  /// Full invariants: 1 <= |pivots| <= |nodes| - 2, at least one distractor, and some
  /// walk covers every pivot.
  void validate() const;

  const std::string& id() const noexcept { return id_; }
  const std::vector<std::string>& nodes() const noexcept { return nodes_; }
  const std::vector<Edge>& edges() const noexcept { return edges_; }
  const std::vector<std::size_t>& pivots() const noexcept { return pivots_; }
  const Label& gold_label() const noexcept { return gold_; }
  const std::vector<Label>& distractor_labels() const noexcept { return distractors_; }
  std::size_t source() const noexcept { return source_; }
  std::size_t sink() const noexcept { return sink_; }
  /// Edge indices leaving `node`, in edge-list order.
  const std::vector<std::size_t>& out_edges(std::size_t node) const { return out_edges_.at(node); }
  /// Nodes in topological order.
  const std::vector<std::size_t>& topo_order() const noexcept { return topo_; }

  std::size_t node_index(std::string_view node_id) const;  // throws DataError
  std::optional<std::size_t> edge_between(std::size_t from, std::size_t to) const;
  std::vector<std::string> pivot_ids() const;

  friend bool operator==(const PivotWorld& a, const PivotWorld& b) {
    return a.id_ == b.id_ && a.nodes_ == b.nodes_ && a.edges_ == b.edges_ && a.pivots_ == b.pivots_ &&
           a.gold_ == b.gold_ && a.distractors_ == b.distractors_;
  }

 private:
  std::string id_;
  std::vector<std::string> nodes_;
  std::vector<Edge> edges_;
  std::vector<std::size_t> pivots_;
  Label gold_;
  std::vector<Label> distractors_;
  std::size_t source_ = 0;
  std::size_t sink_ = 0;
  std::vector<std::vector<std::size_t>> out_edges_;
  std::vector<std::size_t> topo_;
};

/// Softmax walk policy: at each node, outgoing-edge probabilities are
/// softmax(edge_logits / temperature). Logits may be -inf (probability zero).
struct ToyPolicy {
  std::vector<double> edge_logits;
  double temperature = 1.0;

  static ToyPolicy uniform(const PivotWorld& world, double temperature = 1.0);
  /// Logit `bias` on every edge between consecutive nodes (n_i -> n_i+1), 0 elsewhere.
  /// A positive bias gives a verbose walker that wanders along the spine.
  static ToyPolicy spine_biased(const PivotWorld& world, double bias, double temperature = 1.0);
  friend bool operator==(const ToyPolicy&, const ToyPolicy&) = default;
};

/// Per-edge log-probabilities log pi(edge | edge.from) under `policy`.
std::vector<double> edge_log_probs(const ToyPolicy& policy, const PivotWorld& world);
std::vector<double> edge_probs(const ToyPolicy& policy, const PivotWorld& world);

/// Maps trace steps (node ids) onto a walk; throws DataError when the steps are not a
/// source->sink walk of `world`.
Walk walk_from_trace(const PivotWorld& world, const ReasoningTrace& trace);

/// Builds a trace from a walk, filling predicted_label via decide() and logprob via policy.
ReasoningTrace trace_from_walk(const PivotWorld& world, const Walk& walk, Provenance provenance,
                               const ToyPolicy* policy = nullptr);

/// Samples a source->sink walk edge by edge.
ReasoningTrace sample_trace(const ToyPolicy& policy, const PivotWorld& world, Rng& rng);

/// Samples from the policy conditioned on visiting every pivot. When the policy puts no
/// mass on covering walks, the uniform policy is conditioned instead.
ReasoningTrace sample_covering_trace(const ToyPolicy& policy, const PivotWorld& world, Rng& rng);

bool covers_all_pivots(const PivotWorld& world, const Walk& walk);

/// gold_label iff every pivot is visited; otherwise a distractor chosen by hashing the
/// sorted ids of the missing pivots.
Label decide(const PivotWorld& world, const Walk& walk);
Label decide(const PivotWorld& world, const ReasoningTrace& trace);

double walk_logprob(const ToyPolicy& policy, const PivotWorld& world, const Walk& walk);
double trace_logprob(const ToyPolicy& policy, const PivotWorld& world, const ReasoningTrace& trace);

/// Gradient of log p(walk) with respect to edge_logits, accumulated into `grad` with weight `scale`.
void accumulate_walk_logprob_grad(const ToyPolicy& policy, const PivotWorld& world, const Walk& walk, double scale,
                                  std::span<double> grad);

/// Fewest-node source->sink walk visiting every required node id; ties go to the
/// lexicographically smallest node-id sequence. Provenance is synthesized. Throws
/// DataError when no walk covers the requirement.
ReasoningTrace minimal_pivot_walk(const PivotWorld& world, const std::set<std::string>& required_pivots);

/// edge_logits <- edge_logits - lr * grad. Throws DataError on a size mismatch.
ToyPolicy apply_dpo_update(const ToyPolicy& policy, std::span<const double> grad, double lr);

struct WorldGenConfig {
  std::size_t min_nodes = 6;
  std::size_t max_nodes = 12;
  std::size_t min_pivots = 1;
  std::size_t max_pivots = 3;
  /// Extra forward edges per interior node on top of the i -> i+1 spine (branching 2..3).
  std::size_t min_extra_edges = 1;
  std::size_t max_extra_edges = 2;
  /// Extra edges land within this many positions ahead.
  std::size_t skip_window = 4;
};

/// Nodes "n00".."nNN" in topological order. The spine 0 -> 1 -> ... -> n-1 makes every
/// node reachable and co-reachable and guarantees a walk through all pivots.
PivotWorld generate_world(const std::string& id, const WorldGenConfig& cfg, const LabelSpace& labels, Rng& rng);

using WorldBank = std::map<std::string, PivotWorld, std::less<>>;
using PolicyBank = std::map<std::string, ToyPolicy, std::less<>>;

/// `count` worlds with ids "w0000", "w0001", ...; world i draws from the stream (seed, i).
WorldBank generate_worlds(std::size_t count, const WorldGenConfig& cfg, const LabelSpace& labels, std::uint64_t seed);

inline constexpr std::string_view kWorldSchema = "world/v1";
inline constexpr std::string_view kPolicySchema = "policy/v1";

Json world_to_json(const PivotWorld& world);
PivotWorld world_from_json(const Json& j, std::size_t line = 0);
void save_worlds(const WorldBank& worlds, const std::filesystem::path& path);
WorldBank load_worlds(const std::filesystem::path& path);

std::string serialize_policies(const PolicyBank& policies);
void save_policies(const PolicyBank& policies, const std::filesystem::path& path);
PolicyBank load_policies(const std::filesystem::path& path, const WorldBank& worlds);

/// One Example per world: id = world id, gold label, pivots annotated with the pivot node ids.
Dataset make_dataset(const WorldBank& worlds, const LabelSpace& labels);

/// Policies for every world: taken from `seed_policies` when present, else spine-biased
/// with `spine_bias` (uniform at 0).
PolicyBank complete_policies(const WorldBank& worlds, const PolicyBank& seed_policies = {}, double spine_bias = 0.0);

/// Reasoner backed by the worlds and a bank of per-world policies.
class SimulatorBackend final : public Backend {
 public:
  SimulatorBackend(std::shared_ptr<const WorldBank> worlds, PolicyBank policies, LabelSpace labels);

  std::string id() const override { return "simulator"; }
  BackendCaps caps() const override { return {false, true, true}; }
  const LabelSpace& label_space() const override { return labels_; }

  ReasoningTrace predict_with_reasoning(const Example& x, const DecodeParams& decode, Rng& rng) const override;
  ReasoningTrace justify(const Example& x, const Label& y, const DecodeParams& decode, Rng& rng) const override;
  /// decide() on the trace; a trace that is not a walk of the world is unparseable.
  Prediction predict_given_reasoning(const Example& x, const ReasoningTrace& r, Rng& rng) const override;
  /// Exact: one-hot on the decided label (uniform when the trace is not a walk).
  LabelDistribution label_probability(const Example& x, const ReasoningTrace& r, Rng& rng,
                                      int samples) const override;

  const PivotWorld& world(std::string_view example_id) const;
  const ToyPolicy& policy(std::string_view example_id) const;
  const PolicyBank& policies() const noexcept { return policies_; }
  /// Not thread-safe; call between pipeline stages only.
  void set_policies(PolicyBank policies);
  const std::shared_ptr<const WorldBank>& worlds() const noexcept { return worlds_; }

 private:
  std::shared_ptr<const WorldBank> worlds_;
  PolicyBank policies_;
  LabelSpace labels_;
};

/// Reads visited interior node ids straight off the trace.
class NodeIdExtractor final : public PivotExtractor {
 public:
  explicit NodeIdExtractor(std::shared_ptr<const WorldBank> worlds) : worlds_(std::move(worlds)) {}
  std::vector<std::string> extract(const Example& x, const ReasoningTrace& r) const override;

 private:
  std::shared_ptr<const WorldBank> worlds_;
};

/// Consolidates R+ into the minimal walk over the strict-majority node set. When that
/// set cannot be covered by a single walk it falls back to the nodes every trace shares.
/// Output follows the bulleted-pivots-then-reasoning layout the synthesis parser reads.
class MinimalWalkVerifier final : public Verifier {
 public:
  explicit MinimalWalkVerifier(std::shared_ptr<const WorldBank> worlds) : worlds_(std::move(worlds)) {}
  std::string id() const override { return "simulator-minimal-walk"; }
  ChannelledOutput consolidate(const Example& x, std::span<const ReasoningTrace> successful,
                               const std::string& prompt) const override;

 private:
  std::shared_ptr<const WorldBank> worlds_;
};

}  // namespace roma::sim
