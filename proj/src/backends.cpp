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

#include "roma/backends.hpp"

#include <algorithm>
#include <cctype>

#include "roma/error.hpp"

namespace roma {
namespace {

std::string trim_copy(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

std::vector<std::string> lines_of(std::string_view text) {
  std::vector<std::string> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    lines.emplace_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  return lines;
}

bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[i])) != prefix[i]) return false;
  }
  return true;
}

bool is_answer_line(std::string_view line) {
  std::string t = trim_copy(line);
  std::size_t b = 0;
  while (b < t.size() && (t[b] == '*' || t[b] == '#' || t[b] == '_')) ++b;
  std::string_view s(t);
  s.remove_prefix(b);
  return starts_with_ci(s, "answer") || starts_with_ci(s, "final answer") || starts_with_ci(s, "the answer is");
}

ReasoningTrace require_trace(std::string_view text, Prediction predicted, Provenance provenance,
                             const std::string& who) {
  auto t = make_trace(text, std::move(predicted), provenance);
  if (!t) throw BackendError("decode error: " + who + " returned no reasoning", 1, false);
  return *std::move(t);
}

}  // namespace

LabelDistribution::LabelDistribution(std::vector<Label> labels, std::vector<double> probs)
    : labels_(std::move(labels)), probs_(std::move(probs)) {
  if (labels_.size() != probs_.size() || labels_.empty())
    throw Error("label distribution needs one probability per label");
}

LabelDistribution LabelDistribution::from_votes(const LabelSpace& space, std::span<const Prediction> votes) {
  if (!space.is_finite()) throw UnsupportedError("label probabilities need a finite label space");
  std::vector<Label> labels;
  for (const auto& o : space.options()) labels.push_back(Label{o});
  std::vector<double> counts(labels.size(), 0.0);
  std::size_t valid = 0;
  for (const auto& v : votes) {
    if (!v) continue;
    auto it = std::find(labels.begin(), labels.end(), *v);
    if (it == labels.end()) continue;
    counts[static_cast<std::size_t>(it - labels.begin())] += 1.0;
    ++valid;
  }
  if (valid == 0) {
    std::fill(counts.begin(), counts.end(), 1.0 / static_cast<double>(labels.size()));
  } else {
    for (double& c : counts) c /= static_cast<double>(valid);
  }
  return LabelDistribution(std::move(labels), std::move(counts));
}

LabelDistribution LabelDistribution::one_hot(const LabelSpace& space, const Label& label) {
  if (!space.is_finite()) throw UnsupportedError("label probabilities need a finite label space");
  std::vector<Label> labels;
  std::vector<double> probs;
  bool found = false;
  for (const auto& o : space.options()) {
    labels.push_back(Label{o});
    probs.push_back(o == label.value ? 1.0 : 0.0);
    found = found || o == label.value;
  }
  if (!found) throw Error("label \"" + label.value + "\" is not in the label space");
  return LabelDistribution(std::move(labels), std::move(probs));
}

double LabelDistribution::probability(const Label& label) const {
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] == label) return probs_[i];
  }
  return 0.0;
}

std::optional<Label> LabelDistribution::argmax() const {
  const auto best = std::max_element(probs_.begin(), probs_.end());
  if (std::count(probs_.begin(), probs_.end(), *best) != 1) return std::nullopt;
  return labels_[static_cast<std::size_t>(best - probs_.begin())];
}

LabelDistribution Backend::label_probability(const Example& x, const ReasoningTrace& r, Rng& rng,
                                             int samples) const {
  if (!label_space().is_finite())
    throw UnsupportedError("label_probability is undefined for a free-form label space");
  if (samples < 1) throw ConfigError("label_probability needs at least one sample");
  std::vector<Prediction> votes;
  votes.reserve(static_cast<std::size_t>(samples));
  for (int i = 0; i < samples; ++i) votes.push_back(predict_given_reasoning(x, r, rng));
  return LabelDistribution::from_votes(label_space(), votes);
}

ChannelledOutput split_think_tags(std::string_view content) {
  constexpr std::string_view kOpen = "<think>";
  constexpr std::string_view kClose = "</think>";
  const std::size_t close = content.find(kClose);
  if (close == std::string_view::npos) return {std::nullopt, trim_copy(content)};
  const std::size_t open = content.rfind(kOpen, close);
  const std::size_t think_begin = open == std::string_view::npos ? 0 : open + kOpen.size();
  const std::size_t prefix_end = open == std::string_view::npos ? 0 : open;
  ChannelledOutput out;
  out.thinking = trim_copy(content.substr(think_begin, close - think_begin));
  std::string visible(content.substr(0, prefix_end));
  visible += content.substr(close + kClose.size());
  out.output = trim_copy(visible);
  return out;
}

ParsedAnswer parse_answer(std::string_view output) {
  const auto lines = lines_of(output);
  for (std::size_t i = lines.size(); i-- > 0;) {
    if (!is_answer_line(lines[i])) continue;
    std::string reasoning;
    for (std::size_t j = 0; j < i; ++j) {
      if (j) reasoning += '\n';
      reasoning += lines[j];
    }
    return {trim_copy(reasoning), trim_copy(lines[i])};
  }
  for (std::size_t i = lines.size(); i-- > 0;) {
    auto t = trim_copy(lines[i]);
    if (!t.empty()) return {trim_copy(output), t};
  }
  return {"", ""};
}

std::string render_predict_prompt(const Example& x, const LabelSpace& space) {
  std::string p = "Answer the following question. Reason step by step, then give your final answer on the last "
                  "line in the form \"Answer: <answer>\".\n\n";
  if (space.is_finite()) {
    p += "Valid answers: ";
    for (std::size_t i = 0; i < space.options().size(); ++i) {
      if (i) p += ", ";
      p += space.options()[i];
    }
    p += "\n\n";
  }
  p += "Question: " + x.question;
  return p;
}

std::string render_justify_prompt(const Example& x, const Label& y) {
  return "Question: " + x.question + "\n\nThe correct answer is " + y.value +
         ". Explain step by step the reasoning that leads to this answer. Present it as your own derivation "
         "and do not mention that the answer was provided to you. End with a line \"Answer: " +
         y.value + "\".";
}

std::string render_readout_prompt(const Example& x, const ReasoningTrace& r) {
  return "Question: " + x.question + "\n\nReasoning:\n" + r.raw_text +
         "\n\nBased only on the reasoning above, give the final answer on a single line in the form "
         "\"Answer: <answer>\".";
}

std::string render_keyphrase_prompt(const Example& x, const ReasoningTrace& r) {
  return "Question: " + x.question + "\n\nReasoning:\n" + r.raw_text +
         "\n\nList the decision pivots of this reasoning: the key facts, keywords or logical checkpoints it "
         "relies on to reach its answer. Write one short pivot per line as a bulleted list and nothing else.";
}

std::optional<std::string> strip_list_marker(std::string_view line) {
  std::string t = trim_copy(line);
  std::string_view s(t);
  if (s.starts_with("- ") || s.starts_with("* ") || s.starts_with("+ ")) {
    s.remove_prefix(2);
  } else if (s.starts_with("\xe2\x80\xa2")) {
    s.remove_prefix(3);
  } else {
    std::size_t i = 0;
    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
    if (i == 0 || i + 1 > s.size() || (s[i] != '.' && s[i] != ')')) return std::nullopt;
    if (i + 1 < s.size() && !std::isspace(static_cast<unsigned char>(s[i + 1]))) return std::nullopt;
    s.remove_prefix(i + 1);
  }
  auto rest = trim_copy(s);
  if (rest.empty()) return std::nullopt;
  return rest;
}

LlmBackend::LlmBackend(std::shared_ptr<const ChatTransport> transport, LabelSpace space, LlmOptions options)
    : transport_(std::move(transport)), space_(std::move(space)), options_(options) {
  if (!transport_) throw ConfigError("LlmBackend needs a transport");
}

BackendCaps LlmBackend::caps() const {
  BackendCaps c;
  c.supports_thinking = transport_->supports_thinking();
  return c;
}

ReasoningTrace LlmBackend::predict_with_reasoning(const Example& x, const DecodeParams& decode, Rng&) const {
  const ChannelledOutput out = transport_->chat(render_predict_prompt(x, space_), decode);
  const ParsedAnswer parsed = parse_answer(out.output);
  Prediction predicted = normalize_label(parsed.answer_text, space_);
  std::string_view reasoning = parsed.reasoning;
  if (out.thinking && !trim_copy(*out.thinking).empty()) reasoning = *out.thinking;
  if (trim_copy(reasoning).empty()) reasoning = out.output;
  return require_trace(reasoning, std::move(predicted), Provenance::zero_shot, id());
}

ReasoningTrace LlmBackend::justify(const Example& x, const Label& y, const DecodeParams& decode, Rng&) const {
  // The thinking channel saw the hint; only the visible explanation is kept.
  const ChannelledOutput out = transport_->chat(render_justify_prompt(x, y), decode);
  const ParsedAnswer parsed = parse_answer(out.output);
  std::string_view text = parsed.reasoning.empty() ? std::string_view(out.output) : parsed.reasoning;
  return require_trace(text, y, Provenance::guided, id());
}

Prediction LlmBackend::predict_given_reasoning(const Example& x, const ReasoningTrace& r, Rng&) const {
  const ChannelledOutput out = transport_->chat(render_readout_prompt(x, r), options_.readout_decode);
  return normalize_label(parse_answer(out.output).answer_text, space_);
}

LlmVerifier::LlmVerifier(std::shared_ptr<const ChatTransport> transport, DecodeParams decode)
    : transport_(std::move(transport)), decode_(decode) {
  if (!transport_) throw ConfigError("LlmVerifier needs a transport");
}

ChannelledOutput LlmVerifier::consolidate(const Example&, std::span<const ReasoningTrace>,
                                          const std::string& prompt) const {
  return transport_->chat(prompt, decode_);
}

LlmKeyphraseExtractor::LlmKeyphraseExtractor(std::shared_ptr<const ChatTransport> transport, DecodeParams decode)
    : transport_(std::move(transport)), decode_(decode) {
  if (!transport_) throw ConfigError("LlmKeyphraseExtractor needs a transport");
}

std::vector<std::string> LlmKeyphraseExtractor::extract(const Example& x, const ReasoningTrace& r) const {
  const ChannelledOutput out = transport_->chat(render_keyphrase_prompt(x, r), decode_);
  std::vector<std::string> raw;
  for (const auto& line : lines_of(out.output)) {
    if (auto item = strip_list_marker(line)) {
      raw.push_back(*item);
    } else if (auto t = trim_copy(line); !t.empty() && t.back() != ':') {
      raw.push_back(t);
    }
  }
  return normalize_pivot_set(raw);
}

}  // namespace roma
