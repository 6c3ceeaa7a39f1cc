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

#include <atomic>
#include <chrono>
#include <thread>

#include "httplib.h"
#include "roma/backends.hpp"
#include "roma/error.hpp"
#include "roma/http_transport.hpp"
#include "support/fakes.hpp"

using namespace roma;

namespace {

const LabelSpace kAbcd = LabelSpace::finite({"A", "B", "C", "D"});
const Example kX{"q1", "Which dose?", Label{"B"}, std::nullopt, {}};

/// Chat-completions stub on a loopback port. Replies come from `handler`.
class StubServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;
  explicit StubServer(Handler handler) : handler_(std::move(handler)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      ++hits_;
      {
        std::lock_guard lock(mu_);
        last_body_ = req.body;
        last_auth_ = req.get_header_value("Authorization");
      }
      handler_(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions"; }
  int hits() const { return hits_; }
  Json last_body() const {
    std::lock_guard lock(mu_);
    return Json::parse(last_body_);
  }
  std::string last_auth() const {
    std::lock_guard lock(mu_);
    return last_auth_;
  }

 private:
  Handler handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::atomic<int> hits_{0};
  mutable std::mutex mu_;
  std::string last_body_;
  std::string last_auth_;
};

std::string completion(const std::string& content, const std::string& reasoning = "") {
  Json msg;
  msg["role"] = "assistant";
  msg["content"] = content;
  if (!reasoning.empty()) msg["reasoning_content"] = reasoning;
  Json j;
  j["choices"] = Json::array({Json{{"index", 0}, {"message", msg}}});
  return j.dump();
}

EndpointConfig endpoint(const StubServer& s) {
  EndpointConfig c;
  c.url = s.url();
  c.model = "stub-model";
  c.api_key_env = "ROMA_TEST_KEY";
  c.timeout_seconds = 5.0;
  return c;
}

}  // namespace

TEST(Answers, ParseAnswerLine) {
  auto p = parse_answer("Step one.\nStep two.\nAnswer: (B)\n");
  EXPECT_EQ(p.reasoning, "Step one.\nStep two.");
  EXPECT_EQ(p.answer_text, "Answer: (B)");
  p = parse_answer("The answer is C\nbut wait\n**Answer:** D");
  EXPECT_EQ(p.answer_text, "**Answer:** D");
  p = parse_answer("no marker here\nB\n\n");
  EXPECT_EQ(p.answer_text, "B");
  EXPECT_EQ(p.reasoning, "no marker here\nB");
  EXPECT_EQ(parse_answer("").answer_text, "");
}

TEST(Answers, ThinkTags) {
  auto o = split_think_tags("<think>\nprivate\n</think>\nvisible text");
  ASSERT_TRUE(o.thinking);
  EXPECT_EQ(*o.thinking, "private");
  EXPECT_EQ(o.output, "visible text");
  o = split_think_tags("plain");
  EXPECT_FALSE(o.thinking);
  EXPECT_EQ(o.output, "plain");
  o = split_think_tags("orphan</think>after");
  EXPECT_EQ(*o.thinking, "orphan");
  EXPECT_EQ(o.output, "after");
}

TEST(Answers, ListMarkers) {
  EXPECT_EQ(strip_list_marker("- a"), std::optional<std::string>("a"));
  EXPECT_EQ(strip_list_marker(" 12) b "), std::optional<std::string>("b"));
  EXPECT_EQ(strip_list_marker("3. c"), std::optional<std::string>("c"));
  EXPECT_FALSE(strip_list_marker("3.5 is a number"));
  EXPECT_FALSE(strip_list_marker("plain"));
  EXPECT_FALSE(strip_list_marker("- "));
}

TEST(LabelDist, VotesAndArgmax) {
  const std::vector<Prediction> votes{Label{"B"}, Label{"B"}, Label{"A"}, std::nullopt};
  const auto d = LabelDistribution::from_votes(kAbcd, votes);
  EXPECT_DOUBLE_EQ(d.probability(Label{"B"}), 2.0 / 3.0);
  EXPECT_EQ(d.argmax(), std::optional<Label>(Label{"B"}));
  const std::vector<Prediction> tie{Label{"A"}, Label{"B"}};
  EXPECT_FALSE(LabelDistribution::from_votes(kAbcd, tie).argmax());
  const std::vector<Prediction> none{std::nullopt};
  EXPECT_DOUBLE_EQ(LabelDistribution::from_votes(kAbcd, none).probability(Label{"C"}), 0.25);
  EXPECT_THROW(LabelDistribution::from_votes(LabelSpace::free_form(), votes), UnsupportedError);
  EXPECT_DOUBLE_EQ(LabelDistribution::one_hot(kAbcd, Label{"D"}).probability(Label{"D"}), 1.0);
}

TEST(LlmBackend, ZeroShotPrefersThinkingChannel) {
  auto t = std::make_shared<fake::LambdaTransport>([](const std::string&, const DecodeParams&) {
    return ChannelledOutput{std::string("first thought\nsecond thought"), "Short summary.\nAnswer: b"};
  });
  LlmBackend b(t, kAbcd);
  Rng rng(1);
  const auto r = b.predict_with_reasoning(kX, {}, rng);
  EXPECT_EQ(r.raw_text, "first thought\nsecond thought");
  EXPECT_EQ(r.steps.size(), 2u);
  EXPECT_EQ(r.predicted_label, Prediction(Label{"B"}));
  EXPECT_EQ(r.provenance, Provenance::zero_shot);
  EXPECT_NE(t->prompts()[0].find("Valid answers: A, B, C, D"), std::string::npos);
  EXPECT_TRUE(b.caps().supports_thinking);
}

TEST(LlmBackend, GuidedTraceNeverCarriesThinking) {
  auto t = std::make_shared<fake::LambdaTransport>([](const std::string&, const DecodeParams&) {
    return ChannelledOutput{std::string("TAINT the hint says B"), "Clearance falls.\nSo the dose drops.\nAnswer: B"};
  });
  LlmBackend b(t, kAbcd);
  Rng rng(1);
  const auto r = b.justify(kX, Label{"B"}, {}, rng);
  EXPECT_EQ(r.raw_text.find("TAINT"), std::string::npos);
  EXPECT_EQ(r.raw_text, "Clearance falls.\nSo the dose drops.");
  EXPECT_EQ(r.provenance, Provenance::guided);
  EXPECT_NE(t->prompts()[0].find("The correct answer is B"), std::string::npos);
}

TEST(LlmBackend, ReadoutAndEmptyReasoning) {
  auto t = std::make_shared<fake::LambdaTransport>([](const std::string& prompt, const DecodeParams& d) {
    if (prompt.find("Based only on the reasoning above") != std::string::npos) {
      EXPECT_EQ(d.max_tokens, 64);
      return ChannelledOutput{std::nullopt, "Answer: c"};
    }
    return ChannelledOutput{std::nullopt, "   "};
  });
  LlmBackend b(t, kAbcd);
  Rng rng(1);
  const auto trace = *make_trace("some reasoning", std::nullopt, Provenance::zero_shot);
  EXPECT_EQ(b.predict_given_reasoning(kX, trace, rng), Prediction(Label{"C"}));
  const auto dist = b.label_probability(kX, trace, rng, 3);
  EXPECT_DOUBLE_EQ(dist.probability(Label{"C"}), 1.0);
  try {
    b.predict_with_reasoning(kX, {}, rng);
    FAIL() << "expected a decode error";
  } catch (const BackendError& e) {
    EXPECT_FALSE(e.retryable());
  }
}

TEST(LlmExtractor, ReadsBulletLines) {
  auto t = std::make_shared<fake::LambdaTransport>([](const std::string&, const DecodeParams&) {
    return ChannelledOutput{std::nullopt, "Pivots:\n- Renal clearance\n2. Dose\nhalf-life\n- dose"};
  });
  LlmKeyphraseExtractor ex(t, {});
  const auto trace = *make_trace("text", std::nullopt, Provenance::zero_shot);
  EXPECT_EQ(ex.extract(kX, trace), (std::vector<std::string>{"dose", "half-life", "renal clearance"}));
}

TEST(Http, RequestWireFormat) {
  const Json req = build_chat_request("m", "hello", {0.2, 0.9, 100});
  EXPECT_EQ(req.dump(),
            R"({"model":"m","messages":[{"role":"user","content":"hello"}],"temperature":0.2,"top_p":0.9,"max_tokens":100})");
}

TEST(Http, ResponseChannels) {
  auto o = parse_chat_response(Json::parse(completion("<think>hidden</think>Answer: A")));
  EXPECT_EQ(o.thinking, std::optional<std::string>("hidden"));
  EXPECT_EQ(o.output, "Answer: A");
  o = parse_chat_response(Json::parse(completion("Answer: A", "separate field")));
  EXPECT_EQ(o.thinking, std::optional<std::string>("separate field"));
  EXPECT_THROW(parse_chat_response(Json::parse(R"({"choices":[]})")), BackendError);
}

TEST(Http, RoundTripAgainstStub) {
  StubServer s([](const httplib::Request&, httplib::Response& res) {
    res.set_content(completion("<think>a\nb</think>Visible.\nAnswer: D"), "application/json");
  });
  ::setenv("ROMA_TEST_KEY", "sekret", 1);
  HttpChatTransport t(endpoint(s));
  const auto out = t.chat("prompt text", {0.3, 0.8, 77});
  ::unsetenv("ROMA_TEST_KEY");
  EXPECT_EQ(out.thinking, std::optional<std::string>("a\nb"));
  EXPECT_EQ(out.output, "Visible.\nAnswer: D");
  const Json body = s.last_body();
  EXPECT_EQ(body["model"], "stub-model");
  EXPECT_EQ(body["messages"][0]["content"], "prompt text");
  EXPECT_EQ(body["max_tokens"], 77);
  EXPECT_EQ(s.last_auth(), "Bearer sekret");
  EXPECT_EQ(t.id().rfind("stub-model@http://127.0.0.1:", 0), 0u);
}

TEST(Http, RetriesTransientFailures) {
  std::atomic<int> n{0};
  StubServer s([&](const httplib::Request&, httplib::Response& res) {
    const int k = ++n;
    if (k == 1) {
      res.status = 429;
    } else if (k == 2) {
      res.status = 503;
    } else {
      res.set_content(completion("Answer: A"), "application/json");
    }
  });
  std::vector<std::chrono::milliseconds> sleeps;
  ResilientTransport t(std::make_shared<HttpChatTransport>(endpoint(s)), RetryPolicy{},
                       nullptr, [&](std::chrono::milliseconds d) { sleeps.push_back(d); });
  EXPECT_EQ(t.chat("p", {}).output, "Answer: A");
  EXPECT_EQ(s.hits(), 3);
  EXPECT_EQ(sleeps, (std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(500), std::chrono::milliseconds(1000)}));
}

TEST(Http, GivesUpWithAttemptCount) {
  StubServer s([](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  RetryPolicy policy;
  policy.max_attempts = 4;
  ResilientTransport t(std::make_shared<HttpChatTransport>(endpoint(s)), policy, nullptr,
                       [](std::chrono::milliseconds) {});
  try {
    t.chat("p", {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.attempts(), 4);
    EXPECT_NE(std::string(e.what()).find("HTTP 500"), std::string::npos);
  }
  EXPECT_EQ(s.hits(), 4);
}

TEST(Http, ClientErrorsAreNotRetried) {
  StubServer s([](const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("bad request", "text/plain");
  });
  ResilientTransport t(std::make_shared<HttpChatTransport>(endpoint(s)), RetryPolicy{}, nullptr,
                       [](std::chrono::milliseconds) {});
  try {
    t.chat("p", {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_EQ(e.attempts(), 1);
    EXPECT_FALSE(e.retryable());
  }
  EXPECT_EQ(s.hits(), 1);
}

TEST(Http, ConnectionRefusedIsRetryable) {
  EndpointConfig c;
  c.url = "http://127.0.0.1:1/v1/chat/completions";
  c.model = "m";
  c.timeout_seconds = 2.0;
  HttpChatTransport t(c);
  try {
    t.chat("p", {});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_TRUE(e.retryable());
  }
  EXPECT_THROW(HttpChatTransport(EndpointConfig{"no-scheme", "m"}), ConfigError);
}

TEST(RateLimit, TokenBucket) {
  TokenBucket b(20.0, 2.0);
  EXPECT_TRUE(b.try_acquire());
  EXPECT_TRUE(b.try_acquire());
  EXPECT_FALSE(b.try_acquire());
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 4; ++i) b.acquire();
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_GE(elapsed, 0.15);
  EXPECT_THROW(TokenBucket(0.0, 1.0), ConfigError);
  RetryPolicy p;
  EXPECT_EQ(p.backoff_after(1).count(), 500);
  EXPECT_EQ(p.backoff_after(3).count(), 2000);
  p.max_backoff = std::chrono::milliseconds(700);
  EXPECT_EQ(p.backoff_after(3).count(), 700);
}
