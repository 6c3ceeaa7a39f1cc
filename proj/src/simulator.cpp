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

#include "roma/simulator.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "roma/error.hpp"
#include "roma/jsonl.hpp"

namespace roma::sim {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr std::size_t kMaxRequired = 20;

Json logit_to_json(double v) {
  if (std::isfinite(v)) return v;
  if (v == kNegInf) return "-inf";
  throw DataError("policy logits must be finite or -inf");
}

double logit_from_json(const Json& j, std::size_t line) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string() && j.get<std::string>() == "-inf") return kNegInf;
  throw DataError("policy logit must be a number or \"-inf\"", line);
}

// Bitmask over a set of required node indices; nodes outside the set map to 0.
struct RequiredMask {
  std::vector<std::uint32_t> bit;  // per node
  std::uint32_t full = 0;

  RequiredMask(std::size_t n, const std::vector<std::size_t>& required) : bit(n, 0) {
    if (required.size() > kMaxRequired) throw DataError("too many required pivots for exact search");
    for (std::size_t i = 0; i < required.size(); ++i) {
      bit[required[i]] = 1u << i;
      full |= 1u << i;
    }
  }
};

}  // namespace

PivotWorld::PivotWorld(std::string id, std::vector<std::string> nodes, std::vector<Edge> edges,
                       std::vector<std::size_t> pivots, Label gold_label, std::vector<Label> distractor_labels)
    : id_(std::move(id)),
      nodes_(std::move(nodes)),
      edges_(std::move(edges)),
      pivots_(std::move(pivots)),
      gold_(std::move(gold_label)),
      distractors_(std::move(distractor_labels)) {
  const std::size_t n = nodes_.size();
  if (n < 2) throw DataError("world " + id_ + ": needs at least two nodes");
  {
    std::set<std::string> seen;
    for (const auto& v : nodes_) {
      if (v.empty()) throw DataError("world " + id_ + ": empty node id");
      if (!seen.insert(v).second) throw DataError("world " + id_ + ": duplicate node id " + v);
    }
  }
  out_edges_.assign(n, {});
  std::vector<std::size_t> indeg(n, 0);
  std::set<std::pair<std::size_t, std::size_t>> seen_edges;
  for (std::size_t e = 0; e < edges_.size(); ++e) {
    const auto [from, to] = edges_[e];
    if (from >= n || to >= n) throw DataError("world " + id_ + ": edge endpoint out of range");
    if (from == to) throw DataError("world " + id_ + ": self loop at " + nodes_[from]);
    if (!seen_edges.emplace(from, to).second)
      throw DataError("world " + id_ + ": duplicate edge " + nodes_[from] + "->" + nodes_[to]);
    out_edges_[from].push_back(e);
    ++indeg[to];
  }
  std::vector<std::size_t> sources, sinks;
  for (std::size_t v = 0; v < n; ++v) {
    if (indeg[v] == 0) sources.push_back(v);
    if (out_edges_[v].empty()) sinks.push_back(v);
  }
  if (sources.size() != 1) throw DataError("world " + id_ + ": needs exactly one source");
  if (sinks.size() != 1) throw DataError("world " + id_ + ": needs exactly one sink");
  source_ = sources.front();
  sink_ = sinks.front();

  // Kahn's algorithm, smallest index first for a stable order.
  std::vector<std::size_t> remaining = indeg;
  std::set<std::size_t> ready{source_};
  while (!ready.empty()) {
    const std::size_t v = *ready.begin();
    ready.erase(ready.begin());
    topo_.push_back(v);
    for (std::size_t e : out_edges_[v]) {
      if (--remaining[edges_[e].to] == 0) ready.insert(edges_[e].to);
    }
  }
  if (topo_.size() != n) throw DataError("world " + id_ + ": graph has a cycle");

  // Single source + acyclic => every node is reachable; check co-reachability.
  std::vector<bool> reaches_sink(n, false);
  reaches_sink[sink_] = true;
  for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
    for (std::size_t e : out_edges_[*it]) {
      if (reaches_sink[edges_[e].to]) reaches_sink[*it] = true;
    }
  }
  for (std::size_t v = 0; v < n; ++v) {
    if (!reaches_sink[v]) throw DataError("world " + id_ + ": node " + nodes_[v] + " cannot reach the sink");
  }

  std::sort(pivots_.begin(), pivots_.end());
  if (std::adjacent_find(pivots_.begin(), pivots_.end()) != pivots_.end())
    throw DataError("world " + id_ + ": duplicate pivot");
  for (std::size_t p : pivots_) {
    if (p >= n) throw DataError("world " + id_ + ": pivot out of range");
    if (p == source_ || p == sink_) throw DataError("world " + id_ + ": source and sink cannot be pivots");
  }
  if (std::find(distractors_.begin(), distractors_.end(), gold_) != distractors_.end())
    throw DataError("world " + id_ + ": gold label listed as a distractor");
}

void PivotWorld::validate() const {
  if (pivots_.empty() || pivots_.size() > nodes_.size() - 2)
    throw DataError("world " + id_ + ": pivot count must be in [1, |nodes| - 2]");
  if (distractors_.empty()) throw DataError("world " + id_ + ": needs at least one distractor label");
  std::set<std::string> required;
  for (std::size_t p : pivots_) required.insert(nodes_[p]);
  try {
    minimal_pivot_walk(*this, required);
  } catch (const DataError&) {
    throw DataError("world " + id_ + ": no walk visits every pivot");
  }
}

std::size_t PivotWorld::node_index(std::string_view node_id) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i] == node_id) return i;
  }
  throw DataError("world " + id_ + ": unknown node " + std::string(node_id));
}

std::optional<std::size_t> PivotWorld::edge_between(std::size_t from, std::size_t to) const {
  if (from >= nodes_.size()) return std::nullopt;
  for (std::size_t e : out_edges_[from]) {
    if (edges_[e].to == to) return e;
  }
  return std::nullopt;
}

std::vector<std::string> PivotWorld::pivot_ids() const {
  std::vector<std::string> ids;
  for (std::size_t p : pivots_) ids.push_back(nodes_[p]);
  return ids;
}

ToyPolicy ToyPolicy::uniform(const PivotWorld& world, double temperature) {
  return ToyPolicy{std::vector<double>(world.edges().size(), 0.0), temperature};
}

ToyPolicy ToyPolicy::spine_biased(const PivotWorld& world, double bias, double temperature) {
  ToyPolicy p = uniform(world, temperature);
  for (std::size_t e = 0; e < world.edges().size(); ++e) {
    if (world.edges()[e].to == world.edges()[e].from + 1) p.edge_logits[e] = bias;
  }
  return p;
}

namespace {

void check_policy(const ToyPolicy& policy, const PivotWorld& world) {
  if (policy.edge_logits.size() != world.edges().size())
    throw DataError("policy has " + std::to_string(policy.edge_logits.size()) + " logits but world " + world.id() +
                    " has " + std::to_string(world.edges().size()) + " edges");
  if (!(policy.temperature > 0.0)) throw DataError("policy temperature must be positive");
}

}  // namespace

std::vector<double> edge_log_probs(const ToyPolicy& policy, const PivotWorld& world) {
  check_policy(policy, world);
  std::vector<double> out(world.edges().size(), kNegInf);
  for (std::size_t v = 0; v < world.nodes().size(); ++v) {
    const auto& es = world.out_edges(v);
    if (es.empty()) continue;
    double m = kNegInf;
    for (std::size_t e : es) m = std::max(m, policy.edge_logits[e] / policy.temperature);
    if (m == kNegInf) {
      // All edges masked: treat as uniform so the walk stays well defined.
      for (std::size_t e : es) out[e] = -std::log(static_cast<double>(es.size()));
      continue;
    }
    double sum = 0.0;
    for (std::size_t e : es) sum += std::exp(policy.edge_logits[e] / policy.temperature - m);
    const double lse = m + std::log(sum);
    for (std::size_t e : es) out[e] = policy.edge_logits[e] / policy.temperature - lse;
  }
  return out;
}

std::vector<double> edge_probs(const ToyPolicy& policy, const PivotWorld& world) {
  auto lp = edge_log_probs(policy, world);
  for (double& x : lp) x = std::exp(x);
  return lp;
}

Walk walk_from_trace(const PivotWorld& world, const ReasoningTrace& trace) {
  if (trace.steps.empty()) throw DataError("trace is empty, not a walk of world " + world.id());
  Walk walk;
  walk.reserve(trace.steps.size());
  for (const auto& s : trace.steps) walk.push_back(world.node_index(s));
  if (walk.front() != world.source() || walk.back() != world.sink())
    throw DataError("trace is not a source->sink walk of world " + world.id());
  for (std::size_t i = 0; i + 1 < walk.size(); ++i) {
    if (!world.edge_between(walk[i], walk[i + 1]))
      throw DataError("trace step " + world.nodes()[walk[i]] + "->" + world.nodes()[walk[i + 1]] +
                      " is not an edge of world " + world.id());
  }
  return walk;
}

bool covers_all_pivots(const PivotWorld& world, const Walk& walk) {
  for (std::size_t p : world.pivots()) {
    if (std::find(walk.begin(), walk.end(), p) == walk.end()) return false;
  }
  return true;
}

Label decide(const PivotWorld& world, const Walk& walk) {
  std::vector<std::string> missing;
  for (std::size_t p : world.pivots()) {
    if (std::find(walk.begin(), walk.end(), p) == walk.end()) missing.push_back(world.nodes()[p]);
  }
  if (missing.empty()) return world.gold_label();
  if (world.distractor_labels().empty()) throw DataError("world " + world.id() + " has no distractor labels");
  std::sort(missing.begin(), missing.end());
  std::string key;
  for (const auto& m : missing) key += m + ",";
  return world.distractor_labels()[fnv1a64(key) % world.distractor_labels().size()];
}

Label decide(const PivotWorld& world, const ReasoningTrace& trace) { return decide(world, walk_from_trace(world, trace)); }

double walk_logprob(const ToyPolicy& policy, const PivotWorld& world, const Walk& walk) {
  const auto lp = edge_log_probs(policy, world);
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < walk.size(); ++i) {
    const auto e = world.edge_between(walk[i], walk[i + 1]);
    if (!e) throw DataError("walk uses a missing edge in world " + world.id());
    total += lp[*e];
  }
  return total;
}

double trace_logprob(const ToyPolicy& policy, const PivotWorld& world, const ReasoningTrace& trace) {
  return walk_logprob(policy, world, walk_from_trace(world, trace));
}

void accumulate_walk_logprob_grad(const ToyPolicy& policy, const PivotWorld& world, const Walk& walk, double scale,
                                  std::span<double> grad) {
  check_policy(policy, world);
  if (grad.size() != world.edges().size()) throw DataError("gradient size does not match the edge count");
  const auto p = edge_probs(policy, world);
  for (std::size_t i = 0; i + 1 < walk.size(); ++i) {
    const auto chosen = world.edge_between(walk[i], walk[i + 1]);
    if (!chosen) throw DataError("walk uses a missing edge in world " + world.id());
    for (std::size_t e : world.out_edges(walk[i])) {
      const double indicator = e == *chosen ? 1.0 : 0.0;
      grad[e] += scale * (indicator - p[e]) / policy.temperature;
    }
  }
}

ReasoningTrace trace_from_walk(const PivotWorld& world, const Walk& walk, Provenance provenance,
                               const ToyPolicy* policy) {
  std::vector<std::string> steps;
  steps.reserve(walk.size());
  for (std::size_t v : walk) steps.push_back(world.nodes()[v]);
  std::optional<double> lp;
  if (policy) lp = walk_logprob(*policy, world, walk);
  return make_trace_from_steps(std::move(steps), decide(world, walk), provenance, lp);
}

namespace {

std::size_t pick_edge(const std::vector<std::size_t>& es, const std::vector<double>& weights, double total, Rng& rng) {
  const double r = uniform01(rng) * total;
  double cum = 0.0;
  std::optional<std::size_t> last_positive;
  for (std::size_t i = 0; i < es.size(); ++i) {
    if (!(weights[i] > 0.0)) continue;
    cum += weights[i];
    last_positive = i;
    if (r < cum) return es[i];
  }
  if (!last_positive) throw DataError("no edge with positive probability");
  return es[*last_positive];
}

}  // namespace

ReasoningTrace sample_trace(const ToyPolicy& policy, const PivotWorld& world, Rng& rng) {
  const auto p = edge_probs(policy, world);
  Walk walk{world.source()};
  while (walk.back() != world.sink()) {
    const auto& es = world.out_edges(walk.back());
    std::vector<double> w;
    w.reserve(es.size());
    double total = 0.0;
    for (std::size_t e : es) {
      w.push_back(p[e]);
      total += p[e];
    }
    walk.push_back(world.edges()[pick_edge(es, w, total, rng)].to);
  }
  return trace_from_walk(world, walk, Provenance::zero_shot, &policy);
}

namespace {

// q[v][m]: probability, under edge probabilities p, of finishing a walk from v with
// visited-set m (m already includes v) such that every required node gets visited.
std::vector<std::vector<double>> covering_mass(const PivotWorld& world, const std::vector<double>& p,
                                               const RequiredMask& req) {
  const std::size_t masks = std::size_t{1} << std::popcount(req.full);
  std::vector<std::vector<double>> q(world.nodes().size(), std::vector<double>(masks, 0.0));
  const auto& topo = world.topo_order();
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const std::size_t v = *it;
    for (std::size_t m = 0; m < masks; ++m) {
      if (v == world.sink()) {
        q[v][m] = (m == req.full) ? 1.0 : 0.0;
        continue;
      }
      double acc = 0.0;
      for (std::size_t e : world.out_edges(v)) {
        const std::size_t w = world.edges()[e].to;
        acc += p[e] * q[w][m | req.bit[w]];
      }
      q[v][m] = acc;
    }
  }
  return q;
}

}  // namespace

ReasoningTrace sample_covering_trace(const ToyPolicy& policy, const PivotWorld& world, Rng& rng) {
  const RequiredMask req(world.nodes().size(), world.pivots());
  auto p = edge_probs(policy, world);
  auto q = covering_mass(world, p, req);
  const std::size_t start_mask = req.bit[world.source()];
  if (!(q[world.source()][start_mask] > 0.0)) {
    p = edge_probs(ToyPolicy::uniform(world), world);
    q = covering_mass(world, p, req);
    if (!(q[world.source()][start_mask] > 0.0)) throw DataError("world " + world.id() + " has no covering walk");
  }
  Walk walk{world.source()};
  std::size_t mask = start_mask;
  while (walk.back() != world.sink()) {
    const auto& es = world.out_edges(walk.back());
    std::vector<double> w;
    double total = 0.0;
    for (std::size_t e : es) {
      const std::size_t to = world.edges()[e].to;
      w.push_back(p[e] * q[to][mask | req.bit[to]]);
      total += w.back();
    }
    const std::size_t next = world.edges()[pick_edge(es, w, total, rng)].to;
    mask |= req.bit[next];
    walk.push_back(next);
  }
  return trace_from_walk(world, walk, Provenance::guided, &policy);
}

ReasoningTrace minimal_pivot_walk(const PivotWorld& world, const std::set<std::string>& required_pivots) {
  std::vector<std::size_t> required;
  for (const auto& id : required_pivots) required.push_back(world.node_index(id));
  const RequiredMask req(world.nodes().size(), required);
  const std::size_t masks = std::size_t{1} << std::popcount(req.full);
  constexpr std::size_t kInf = std::numeric_limits<std::size_t>::max();

  // best[v][m]: fewest nodes on a v->sink walk (v included) completing mask m.
  std::vector<std::vector<std::size_t>> best(world.nodes().size(), std::vector<std::size_t>(masks, kInf));
  const auto& topo = world.topo_order();
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    const std::size_t v = *it;
    for (std::size_t m = 0; m < masks; ++m) {
      if (v == world.sink()) {
        best[v][m] = (m == req.full) ? 1 : kInf;
        continue;
      }
      std::size_t b = kInf;
      for (std::size_t e : world.out_edges(v)) {
        const std::size_t w = world.edges()[e].to;
        b = std::min(b, best[w][m | req.bit[w]]);
      }
      best[v][m] = b == kInf ? kInf : b + 1;
    }
  }
  std::size_t mask = req.bit[world.source()];
  if (best[world.source()][mask] == kInf)
    throw DataError("world " + world.id() + ": no walk covers the required pivots");

  // Greedy on the smallest next node id among optimal continuations gives the
  // lexicographically smallest optimal walk (all optimal walks have equal length).
  Walk walk{world.source()};
  while (walk.back() != world.sink()) {
    const std::size_t v = walk.back();
    const std::size_t target = best[v][mask] - 1;
    std::optional<std::size_t> choice;
    for (std::size_t e : world.out_edges(v)) {
      const std::size_t w = world.edges()[e].to;
      if (best[w][mask | req.bit[w]] != target) continue;
      if (!choice || world.nodes()[w] < world.nodes()[*choice]) choice = w;
    }
    mask |= req.bit[*choice];
    walk.push_back(*choice);
  }
  return trace_from_walk(world, walk, Provenance::synthesized);
}

ToyPolicy apply_dpo_update(const ToyPolicy& policy, std::span<const double> grad, double lr) {
  if (grad.size() != policy.edge_logits.size())
    throw DataError("gradient has " + std::to_string(grad.size()) + " components, policy has " +
                    std::to_string(policy.edge_logits.size()));
  ToyPolicy out = policy;
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (lr != 0.0 && grad[i] != 0.0) out.edge_logits[i] -= lr * grad[i];
  }
  return out;
}

PivotWorld generate_world(const std::string& id, const WorldGenConfig& cfg, const LabelSpace& labels, Rng& rng) {
  if (!labels.is_finite() || labels.options().size() < 2)
    throw ConfigError("simulator worlds need a finite label space with at least two labels");
  if (cfg.min_nodes < 3 || cfg.max_nodes < cfg.min_nodes || cfg.max_nodes > 100)
    throw ConfigError("world size range must satisfy 3 <= min <= max <= 100");
  if (cfg.min_pivots < 1 || cfg.max_pivots < cfg.min_pivots) throw ConfigError("bad pivot count range");
  if (cfg.max_extra_edges < cfg.min_extra_edges) throw ConfigError("bad extra edge range");

  const std::size_t n = cfg.min_nodes + uniform_index(rng, cfg.max_nodes - cfg.min_nodes + 1);
  std::vector<std::string> nodes;
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "n%02zu", i);
    nodes.emplace_back(buf);
  }
  std::vector<PivotWorld::Edge> edges;
  for (std::size_t i = 0; i + 1 < n; ++i) {
    std::vector<std::size_t> targets{i + 1};
    std::vector<std::size_t> candidates;
    for (std::size_t j = i + 2; j < n && j <= i + cfg.skip_window; ++j) candidates.push_back(j);
    const std::size_t extra = cfg.min_extra_edges + uniform_index(rng, cfg.max_extra_edges - cfg.min_extra_edges + 1);
    for (std::size_t k = 0; k < extra && !candidates.empty(); ++k) {
      const std::size_t pick = uniform_index(rng, candidates.size());
      targets.push_back(candidates[pick]);
      candidates.erase(candidates.begin() + static_cast<std::ptrdiff_t>(pick));
    }
    std::sort(targets.begin(), targets.end());
    for (std::size_t t : targets) edges.push_back({i, t});
  }
  const std::size_t interior = n - 2;
  const std::size_t max_p = std::min(cfg.max_pivots, interior);
  const std::size_t min_p = std::min(cfg.min_pivots, max_p);
  const std::size_t k = min_p + uniform_index(rng, max_p - min_p + 1);
  std::vector<std::size_t> pool(interior);
  std::iota(pool.begin(), pool.end(), std::size_t{1});
  std::vector<std::size_t> pivots;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t pick = uniform_index(rng, pool.size());
    pivots.push_back(pool[pick]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
  }
  const auto& opts = labels.options();
  const std::size_t gold = uniform_index(rng, opts.size());
  std::vector<Label> distractors;
  for (std::size_t i = 0; i < opts.size(); ++i) {
    if (i != gold) distractors.push_back(Label{opts[i]});
  }
  PivotWorld w(id, std::move(nodes), std::move(edges), std::move(pivots), Label{opts[gold]}, std::move(distractors));
  w.validate();
  return w;
}

WorldBank generate_worlds(std::size_t count, const WorldGenConfig& cfg, const LabelSpace& labels, std::uint64_t seed) {
  WorldBank bank;
  for (std::size_t i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "w%04zu", i);
    Rng rng = make_rng(seed, {i});
    auto w = generate_world(id, cfg, labels, rng);
    bank.emplace(w.id(), std::move(w));
  }
  return bank;
}

Json world_to_json(const PivotWorld& world) {
  Json j;
  j["schema"] = kWorldSchema;
  j["id"] = world.id();
  j["nodes"] = world.nodes();
  Json edges = Json::array();
  for (const auto& e : world.edges()) edges.push_back(Json::array({world.nodes()[e.from], world.nodes()[e.to]}));
  j["edges"] = std::move(edges);
  j["pivots"] = world.pivot_ids();
  j["gold"] = world.gold_label().value;
  Json d = Json::array();
  for (const auto& l : world.distractor_labels()) d.push_back(l.value);
  j["distractors"] = std::move(d);
  return j;
}

PivotWorld world_from_json(const Json& j, std::size_t line) {
  if (j.value("schema", "") != kWorldSchema) throw DataError("record is not world/v1", line);
  try {
    const std::string id = require_string(j, "id", line);
    const auto nodes = require_field(j, "nodes", line).get<std::vector<std::string>>();
    auto index_of = [&](const std::string& v) -> std::size_t {
      auto it = std::find(nodes.begin(), nodes.end(), v);
      if (it == nodes.end()) throw DataError("unknown node " + v, line);
      return static_cast<std::size_t>(it - nodes.begin());
    };
    std::vector<PivotWorld::Edge> edges;
    for (const auto& e : require_field(j, "edges", line)) {
      if (!e.is_array() || e.size() != 2) throw DataError("edge must be a [from, to] pair", line);
      edges.push_back({index_of(e[0].get<std::string>()), index_of(e[1].get<std::string>())});
    }
    std::vector<std::size_t> pivots;
    for (const auto& p : require_field(j, "pivots", line)) pivots.push_back(index_of(p.get<std::string>()));
    std::vector<Label> distractors;
    for (const auto& d : require_field(j, "distractors", line)) distractors.push_back(Label{d.get<std::string>()});
    PivotWorld w(id, nodes, std::move(edges), std::move(pivots), Label{require_string(j, "gold", line)},
                 std::move(distractors));
    w.validate();
    return w;
  } catch (const Json::exception& e) {
    throw DataError(std::string("malformed world: ") + e.what(), line);
  } catch (const DataError& e) {
    if (e.line() != 0) throw;
    throw DataError(e.what(), line);
  }
}

void save_worlds(const WorldBank& worlds, const std::filesystem::path& path) {
  std::vector<Json> recs;
  for (const auto& [id, w] : worlds) recs.push_back(world_to_json(w));
  write_file_atomic(path, to_jsonl(recs));
}

WorldBank load_worlds(const std::filesystem::path& path) {
  WorldBank bank;
  for_each_jsonl(path, [&](const Json& rec, std::size_t line) {
    auto w = world_from_json(rec, line);
    const std::string id = w.id();
    if (!bank.emplace(id, std::move(w)).second) throw DataError("duplicate world id " + id, line);
  });
  return bank;
}

std::string serialize_policies(const PolicyBank& policies) {
  std::vector<Json> recs;
  for (const auto& [id, p] : policies) {
    Json j;
    j["schema"] = kPolicySchema;
    j["id"] = id;
    j["temperature"] = p.temperature;
    Json logits = Json::array();
    for (double v : p.edge_logits) logits.push_back(logit_to_json(v));
    j["logits"] = std::move(logits);
    recs.push_back(std::move(j));
  }
  return to_jsonl(recs);
}

void save_policies(const PolicyBank& policies, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_policies(policies));
}

PolicyBank load_policies(const std::filesystem::path& path, const WorldBank& worlds) {
  PolicyBank bank;
  for_each_jsonl(path, [&](const Json& rec, std::size_t line) {
    if (rec.value("schema", "") != kPolicySchema) throw DataError("record is not policy/v1", line);
    const std::string id = require_string(rec, "id", line);
    auto wit = worlds.find(id);
    if (wit == worlds.end()) throw DataError("policy for unknown world " + id, line);
    ToyPolicy p;
    const Json& t = require_field(rec, "temperature", line);
    if (!t.is_number()) throw DataError("temperature must be a number", line);
    p.temperature = t.get<double>();
    for (const auto& v : require_field(rec, "logits", line)) p.edge_logits.push_back(logit_from_json(v, line));
    try {
      check_policy(p, wit->second);
    } catch (const DataError& e) {
      throw DataError(e.what(), line);
    }
    if (!bank.emplace(id, std::move(p)).second) throw DataError("duplicate policy id " + id, line);
  });
  return bank;
}

Dataset make_dataset(const WorldBank& worlds, const LabelSpace& labels) {
  Dataset d;
  d.label_space = labels;
  for (const auto& [id, w] : worlds) {
    Example ex;
    ex.id = id;
    ex.question = "Find a reasoning path through world " + id + ".";
    ex.gold_label = w.gold_label();
    ex.pivot_annotations = normalize_pivot_set(w.pivot_ids());
    d.examples.push_back(std::move(ex));
  }
  return d;
}

PolicyBank complete_policies(const WorldBank& worlds, const PolicyBank& seed_policies, double spine_bias) {
  PolicyBank out;
  for (const auto& [id, w] : worlds) {
    auto it = seed_policies.find(id);
    if (it != seed_policies.end()) {
      check_policy(it->second, w);
      out.emplace(id, it->second);
    } else {
      out.emplace(id, ToyPolicy::spine_biased(w, spine_bias));
    }
  }
  return out;
}

SimulatorBackend::SimulatorBackend(std::shared_ptr<const WorldBank> worlds, PolicyBank policies, LabelSpace labels)
    : worlds_(std::move(worlds)), labels_(std::move(labels)) {
  if (!worlds_) throw ConfigError("simulator backend needs worlds");
  set_policies(std::move(policies));
}

void SimulatorBackend::set_policies(PolicyBank policies) { policies_ = complete_policies(*worlds_, policies); }

const PivotWorld& SimulatorBackend::world(std::string_view example_id) const {
  auto it = worlds_->find(example_id);
  if (it == worlds_->end()) throw DataError("no simulator world for example " + std::string(example_id));
  return it->second;
}

const ToyPolicy& SimulatorBackend::policy(std::string_view example_id) const {
  auto it = policies_.find(example_id);
  if (it == policies_.end()) throw DataError("no policy for example " + std::string(example_id));
  return it->second;
}

ReasoningTrace SimulatorBackend::predict_with_reasoning(const Example& x, const DecodeParams&, Rng& rng) const {
  return sample_trace(policy(x.id), world(x.id), rng);
}

ReasoningTrace SimulatorBackend::justify(const Example& x, const Label&, const DecodeParams&, Rng& rng) const {
  return sample_covering_trace(policy(x.id), world(x.id), rng);
}

Prediction SimulatorBackend::predict_given_reasoning(const Example& x, const ReasoningTrace& r, Rng&) const {
  try {
    return decide(world(x.id), r);
  } catch (const DataError&) {
    return std::nullopt;
  }
}

LabelDistribution SimulatorBackend::label_probability(const Example& x, const ReasoningTrace& r, Rng& rng,
                                                      int) const {
  if (auto label = predict_given_reasoning(x, r, rng)) return LabelDistribution::one_hot(labels_, *label);
  return LabelDistribution::from_votes(labels_, {});
}

std::vector<std::string> NodeIdExtractor::extract(const Example& x, const ReasoningTrace& r) const {
  auto it = worlds_->find(x.id);
  if (it == worlds_->end()) throw DataError("no simulator world for example " + x.id);
  const PivotWorld& w = it->second;
  std::set<std::string> out;
  for (const auto& s : r.steps) {
    if (std::find(w.nodes().begin(), w.nodes().end(), s) == w.nodes().end()) continue;
    if (s == w.nodes()[w.source()] || s == w.nodes()[w.sink()]) continue;
    out.insert(s);
  }
  return {out.begin(), out.end()};
}

ChannelledOutput MinimalWalkVerifier::consolidate(const Example& x, std::span<const ReasoningTrace> successful,
                                                  const std::string&) const {
  auto it = worlds_->find(x.id);
  if (it == worlds_->end() || successful.empty()) return {std::nullopt, ""};
  const PivotWorld& w = it->second;
  const NodeIdExtractor extractor(worlds_);
  std::map<std::string, std::size_t> support;
  for (const auto& r : successful) {
    for (const auto& v : extractor.extract(x, r)) ++support[v];
  }
  std::set<std::string> majority, unanimous;
  for (const auto& [v, c] : support) {
    if (2 * c > successful.size()) majority.insert(v);
    if (c == successful.size()) unanimous.insert(v);
  }
  std::optional<ReasoningTrace> walk;
  std::set<std::string> used = majority;
  try {
    walk = minimal_pivot_walk(w, majority);
  } catch (const DataError&) {
    try {
      used = unanimous;
      walk = minimal_pivot_walk(w, unanimous);
    } catch (const DataError&) {
      return {std::nullopt, ""};
    }
  }
  std::string out;
  if (!used.empty()) {
    out += "Shared decision pivots:\n";
    for (const auto& v : used) out += "- " + v + "\n";
    out += "\nRefined reasoning:\n";
  }
  out += walk->raw_text;
  return {std::nullopt, out};
}

}  // namespace roma::sim
