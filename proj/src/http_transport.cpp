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

#include "roma/http_transport.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "roma/error.hpp"

namespace roma {

Json build_chat_request(const std::string& model, const std::string& prompt, const DecodeParams& decode) {
  Json req;
  req["model"] = model;
  Json msg;
  msg["role"] = "user";
  msg["content"] = prompt;
  req["messages"] = Json::array({msg});
  req["temperature"] = decode.temperature;
  req["top_p"] = decode.top_p;
  req["max_tokens"] = decode.max_tokens;
  return req;
}

ChannelledOutput parse_chat_response(const Json& response) {
  const auto choices = response.find("choices");
  if (choices == response.end() || !choices->is_array() || choices->empty())
    throw BackendError("decode error: response has no choices", 1, false);
  const Json& choice = (*choices)[0];
  const auto message = choice.find("message");
  if (message == choice.end() || !message->is_object())
    throw BackendError("decode error: choice has no message", 1, false);
  std::string content;
  if (auto c = message->find("content"); c != message->end() && c->is_string()) content = c->get<std::string>();

  std::optional<std::string> reasoning;
  for (const char* key : {"reasoning_content", "reasoning"}) {
    if (auto r = message->find(key); r != message->end() && r->is_string() && !r->get<std::string>().empty()) {
      reasoning = r->get<std::string>();
      break;
    }
  }
  if (reasoning) {
    ChannelledOutput out = split_think_tags(content);
    out.thinking = *reasoning;
    return out;
  }
  return split_think_tags(content);
}

HttpChatTransport::HttpChatTransport(EndpointConfig config) : config_(std::move(config)) {
  const auto scheme_end = config_.url.find("://");
  if (scheme_end == std::string::npos) throw ConfigError("endpoint URL needs a scheme: " + config_.url);
  const auto path_begin = config_.url.find('/', scheme_end + 3);
  if (path_begin == std::string::npos) {
    scheme_host_port_ = config_.url;
    path_ = "/v1/chat/completions";
  } else {
    scheme_host_port_ = config_.url.substr(0, path_begin);
    path_ = config_.url.substr(path_begin);
  }
  if (config_.model.empty()) throw ConfigError("endpoint needs a model name");
}

std::string HttpChatTransport::id() const { return config_.model + "@" + scheme_host_port_; }

ChannelledOutput HttpChatTransport::chat(const std::string& prompt, const DecodeParams& decode) const {
  httplib::Client client(scheme_host_port_);
  const auto secs = static_cast<time_t>(config_.timeout_seconds);
  const auto usecs = static_cast<time_t>((config_.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);

  httplib::Headers headers;
  if (!config_.api_key_env.empty()) {
    if (const char* key = std::getenv(config_.api_key_env.c_str()); key && *key)
      headers.emplace("Authorization", std::string("Bearer ") + key);
  }
  const std::string body = build_chat_request(config_.model, prompt, decode).dump();
  auto res = client.Post(path_, headers, body, "application/json");
  if (!res) throw BackendError("transport error: " + httplib::to_string(res.error()), 1, true);
  if (res->status == 429 || res->status >= 500)
    throw BackendError("transport error: HTTP " + std::to_string(res->status), 1, true);
  if (res->status < 200 || res->status >= 300)
    throw BackendError("request rejected: HTTP " + std::to_string(res->status) + ": " + res->body, 1, false);
  Json parsed;
  try {
    parsed = Json::parse(res->body);
  } catch (const Json::parse_error& e) {
    throw BackendError(std::string("decode error: ") + e.what(), 1, false);
  }
  return parse_chat_response(parsed);
}

TokenBucket::TokenBucket(double rate_per_second, double capacity)
    : rate_(rate_per_second), capacity_(capacity), tokens_(capacity), last_(Clock::now()) {
  if (!(rate_ > 0.0) || !(capacity_ >= 1.0)) throw ConfigError("token bucket needs rate > 0 and capacity >= 1");
}

void TokenBucket::refill(Clock::time_point now) {
  const double elapsed = std::chrono::duration<double>(now - last_).count();
  tokens_ = std::min(capacity_, tokens_ + elapsed * rate_);
  last_ = now;
}

bool TokenBucket::try_acquire() {
  std::lock_guard lock(mu_);
  refill(Clock::now());
  if (tokens_ < 1.0) return false;
  tokens_ -= 1.0;
  return true;
}

void TokenBucket::acquire() {
  for (;;) {
    double wait_s;
    {
      std::lock_guard lock(mu_);
      refill(Clock::now());
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      wait_s = (1.0 - tokens_) / rate_;
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
  }
}

std::chrono::milliseconds RetryPolicy::backoff_after(int attempt) const {
  const double ms = static_cast<double>(initial_backoff.count()) * std::pow(multiplier, attempt - 1);
  return std::chrono::milliseconds(static_cast<long long>(std::min(ms, static_cast<double>(max_backoff.count()))));
}

ResilientTransport::ResilientTransport(std::shared_ptr<const ChatTransport> inner, RetryPolicy policy,
                                       std::shared_ptr<TokenBucket> limiter, Sleeper sleeper)
    : inner_(std::move(inner)), policy_(policy), limiter_(std::move(limiter)), sleeper_(std::move(sleeper)) {
  if (!inner_) throw ConfigError("ResilientTransport needs an inner transport");
  if (policy_.max_attempts < 1) throw ConfigError("retry policy needs max_attempts >= 1");
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
}

ChannelledOutput ResilientTransport::chat(const std::string& prompt, const DecodeParams& decode) const {
  for (int attempt = 1;; ++attempt) {
    if (limiter_) limiter_->acquire();
    try {
      return inner_->chat(prompt, decode);
    } catch (const BackendError& e) {
      if (!e.retryable() || attempt >= policy_.max_attempts) {
        std::string msg = e.what();
        // Drop the inner "(after 1 attempt)" suffix; the outer error reports the total.
        if (auto cut = msg.rfind(" (after "); cut != std::string::npos) msg.resize(cut);
        throw BackendError(msg, attempt, e.retryable());
      }
      sleeper_(policy_.backoff_after(attempt));
    }
  }
}

}  // namespace roma
