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

// OpenAI-compatible chat-completions transport, plus retry and rate-limit decorators.

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <string>

#include "roma/backends.hpp"
#include "roma/jsonl.hpp"

namespace roma {

struct EndpointConfig {
  /// Full URL of the chat-completions route, e.g. "https://api.example.com/v1/chat/completions".
  std::string url;
  std::string model;
  /// Name of the environment variable holding the bearer token; empty means no auth header.
  std::string api_key_env = "OPENAI_API_KEY";
  double timeout_seconds = 120.0;
  bool thinking = true;
};

Json build_chat_request(const std::string& model, const std::string& prompt, const DecodeParams& decode);

/// Reads choices[0].message. The thinking channel comes from "reasoning_content" or
/// "reasoning" when present, otherwise from a <think>...</think> block in "content".
ChannelledOutput parse_chat_response(const Json& response);

/// Single-attempt HTTP(S) transport. Throws BackendError; 429, 5xx and connection
/// failures are marked retryable.
class HttpChatTransport final : public ChatTransport {
 public:
  explicit HttpChatTransport(EndpointConfig config);
  std::string id() const override;
  bool supports_thinking() const override { return config_.thinking; }
  ChannelledOutput chat(const std::string& prompt, const DecodeParams& decode) const override;

 private:
  EndpointConfig config_;
  std::string scheme_host_port_;
  std::string path_;
};

/// Thread-safe token bucket: `rate` tokens per second, bursts up to `capacity`.
class TokenBucket {
 public:
  using Clock = std::chrono::steady_clock;
  TokenBucket(double rate_per_second, double capacity);

  /// Blocks until a token is available.
  void acquire();
  /// Takes a token if one is available now.
  bool try_acquire();

 private:
  void refill(Clock::time_point now);

  std::mutex mu_;
  double rate_;
  double capacity_;
  double tokens_;
  Clock::time_point last_;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  double multiplier = 2.0;
  std::chrono::milliseconds max_backoff{30000};

  /// Delay before attempt `attempt` + 1 (attempt is 1-based).
  std::chrono::milliseconds backoff_after(int attempt) const;
};

/// Wraps a transport with exponential-backoff retries and an optional shared rate limiter.
/// The final BackendError carries the total attempt count.
class ResilientTransport final : public ChatTransport {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  ResilientTransport(std::shared_ptr<const ChatTransport> inner, RetryPolicy policy,
                     std::shared_ptr<TokenBucket> limiter = nullptr, Sleeper sleeper = nullptr);

  std::string id() const override { return inner_->id(); }
  bool supports_thinking() const override { return inner_->supports_thinking(); }
  ChannelledOutput chat(const std::string& prompt, const DecodeParams& decode) const override;

 private:
  std::shared_ptr<const ChatTransport> inner_;
  RetryPolicy policy_;
  std::shared_ptr<TokenBucket> limiter_;
  Sleeper sleeper_;
};

}  // namespace roma
