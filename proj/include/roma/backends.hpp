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

// The reasoner/verifier contract shared by live LLM endpoints and the simulator.

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "roma/corpus.hpp"
#include "roma/rng.hpp"
#include "roma/trace.hpp"

namespace roma {

struct DecodeParams {
  double temperature = 0.7;
  double top_p = 0.95;
  int max_tokens = 2048;
};

struct BackendCaps {
  bool supports_thinking = false;
  bool supports_trace_logprob = false;
  bool supports_conditional_label_prob = false;
};

/// Thinking (intermediate chain-of-thought) and output (externally visible) channels.
struct ChannelledOutput {
  std::optional<std::string> thinking;
  std::string output;
};

/// A distribution over a finite label space, aligned with LabelSpace::options().
class LabelDistribution {
 public:
  LabelDistribution(std::vector<Label> labels, std::vector<double> probs);

  /// Empirical frequencies of parseable votes; all-unparseable votes give the uniform distribution.
  static LabelDistribution from_votes(const LabelSpace& space, std::span<const Prediction> votes);
  static LabelDistribution one_hot(const LabelSpace& space, const Label& label);

  const std::vector<Label>& labels() const noexcept { return labels_; }
  const std::vector<double>& probabilities() const noexcept { return probs_; }
  double probability(const Label& label) const;
  /// The unique most likely label; std::nullopt when the maximum is shared.
  std::optional<Label> argmax() const;

 private:
  std::vector<Label> labels_;
  std::vector<double> probs_;
};

/// Every model in the system is reached through this interface. Implementations must be
/// safe to call concurrently; all mutable state lives in the call's arguments.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::string id() const = 0;
  virtual BackendCaps caps() const = 0;
  virtual const LabelSpace& label_space() const = 0;

  /// Zero-shot sample: a trace with provenance zero_shot whose predicted_label is the
  /// normalized answer (or the unparseable verdict).
  virtual ReasoningTrace predict_with_reasoning(const Example& x, const DecodeParams& decode, Rng& rng) const = 0;

  /// Guided sample rationalizing `y`. The trace comes from the output channel only.
  virtual ReasoningTrace justify(const Example& x, const Label& y, const DecodeParams& decode, Rng& rng) const = 0;

  /// One read-out of the answer implied by `r`.
  virtual Prediction predict_given_reasoning(const Example& x, const ReasoningTrace& r, Rng& rng) const = 0;

  /// p(y | x, r) over the label space. The default re-prompts `samples` times through
  /// predict_given_reasoning and returns empirical frequencies. Throws UnsupportedError
  /// for free-form label spaces.
  virtual LabelDistribution label_probability(const Example& x, const ReasoningTrace& r, Rng& rng,
                                              int samples) const;
};

/// Consolidates R+ into one short-path reasoning given the consolidation prompt.
class Verifier {
 public:
  virtual ~Verifier() = default;
  virtual std::string id() const = 0;
  virtual ChannelledOutput consolidate(const Example& x, std::span<const ReasoningTrace> successful,
                                       const std::string& prompt) const = 0;
};

/// Pulls candidate pivot mentions out of a trace.
class PivotExtractor {
 public:
  virtual ~PivotExtractor() = default;
  virtual std::vector<std::string> extract(const Example& x, const ReasoningTrace& r) const = 0;
};

// ---------------------------------------------------------------------------
// Live LLM backends over a chat transport.

/// One prompt in, both channels out. Implementations throw BackendError.
class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  virtual std::string id() const = 0;
  virtual bool supports_thinking() const { return true; }
  virtual ChannelledOutput chat(const std::string& prompt, const DecodeParams& decode) const = 0;
};

/// Separates a "<think>...</think>" block from the visible text.
ChannelledOutput split_think_tags(std::string_view content);

/// The answer line of a visible output and the reasoning text that precedes it.
struct ParsedAnswer {
  std::string reasoning;
  std::string answer_text;
};
/// The last line starting with "answer" (case-insensitive) is the answer line; without one
/// the last non-empty line is used and the reasoning keeps every line.
ParsedAnswer parse_answer(std::string_view output);

std::string render_predict_prompt(const Example& x, const LabelSpace& space);
std::string render_justify_prompt(const Example& x, const Label& y);
std::string render_readout_prompt(const Example& x, const ReasoningTrace& r);

struct LlmOptions {
  DecodeParams readout_decode{0.7, 0.95, 64};
};

class LlmBackend final : public Backend {
 public:
  LlmBackend(std::shared_ptr<const ChatTransport> transport, LabelSpace space, LlmOptions options = {});

  std::string id() const override { return transport_->id(); }
  BackendCaps caps() const override;
  const LabelSpace& label_space() const override { return space_; }

  ReasoningTrace predict_with_reasoning(const Example& x, const DecodeParams& decode, Rng& rng) const override;
  ReasoningTrace justify(const Example& x, const Label& y, const DecodeParams& decode, Rng& rng) const override;
  Prediction predict_given_reasoning(const Example& x, const ReasoningTrace& r, Rng& rng) const override;

 private:
  std::shared_ptr<const ChatTransport> transport_;
  LabelSpace space_;
  LlmOptions options_;
};

class LlmVerifier final : public Verifier {
 public:
  LlmVerifier(std::shared_ptr<const ChatTransport> transport, DecodeParams decode);
  std::string id() const override { return transport_->id(); }
  ChannelledOutput consolidate(const Example& x, std::span<const ReasoningTrace> successful,
                               const std::string& prompt) const override;

 private:
  std::shared_ptr<const ChatTransport> transport_;
  DecodeParams decode_;
};

/// Asks a model to list the key decision pivots of a trace, one per line.
class LlmKeyphraseExtractor final : public PivotExtractor {
 public:
  LlmKeyphraseExtractor(std::shared_ptr<const ChatTransport> transport, DecodeParams decode);
  std::vector<std::string> extract(const Example& x, const ReasoningTrace& r) const override;

 private:
  std::shared_ptr<const ChatTransport> transport_;
  DecodeParams decode_;
};

std::string render_keyphrase_prompt(const Example& x, const ReasoningTrace& r);

/// Strips list markers ("-", "*", "1.", "2)") from a line; returns std::nullopt for
/// lines that are not list items.
std::optional<std::string> strip_list_marker(std::string_view line);

}  // namespace roma
