#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "persuasion/auxiliary.hpp"
#include "persuasion/backend.hpp"
#include "persuasion/http_backend.hpp"
#include "scripted_agents.hpp"

namespace persuasion {
namespace {

using testing::alias_judge;
using testing::function_agent;

std::vector<ChatMessage> sample_messages() {
  return {{ChatRole::system, "be brief"}, {ChatRole::user, "Question: Capital of France?"}};
}

TEST(Generate, ScriptedHashDispatchIsExact) {
  const auto msgs = sample_messages();
  ScriptedBackend backend(nlohmann::json{
      {"rules", {{{"when", {{"hash", messages_hash(msgs)}}}, {"response", "Final answer: Paris"}}}},
      {"default", "unmatched"}});
  EXPECT_EQ(generate(backend, msgs, {}), "Final answer: Paris");
  EXPECT_EQ(generate(backend, {{ChatRole::user, "other"}}, {}), "unmatched");
}

TEST(Generate, EmptyMessagesIsPreconditionError) {
  ScriptedBackend backend(nlohmann::json{{"default", "x"}});
  EXPECT_THROW(generate(backend, {}, {}), PreconditionError);
}

TEST(Generate, ChatCapabilityRequired) {
  ScriptedBackend backend(nlohmann::json{{"capabilities", {"token_logprobs"}}, {"default", "x"}});
  EXPECT_THROW(generate(backend, sample_messages(), {}), CapabilityError);
}

TEST(ScriptedBackend, RegexCapturesAndTemplates) {
  ScriptedBackend backend(nlohmann::json::parse(R"({
    "rules": [
      {"when": {"last": "Response: [\\s\\S]*<<(.*?)>>"}, "response": "Final Answer: $1"},
      {"when": {"last": "Are you sure"}, "response": "{{last_assistant}}"},
      {"when": {"system": "trivia", "assistant_turns": 0}, "response": "It is <<Paris>>."}
    ]
  })"));
  EXPECT_EQ(backend.complete({{ChatRole::user, "Question: q\nResponse: I say <<Rome>> now"}}, {}),
            "Final Answer: Rome");
  EXPECT_EQ(backend.complete({{ChatRole::system, "trivia time"}, {ChatRole::user, "Question: q"}}, {}),
            "It is <<Paris>>.");
  EXPECT_EQ(backend.complete({{ChatRole::user, "q"},
                              {ChatRole::assistant, "It is <<Paris>>."},
                              {ChatRole::user, "Are you sure?"}},
                             {}),
            "It is <<Paris>>.");
  EXPECT_THROW(backend.complete({{ChatRole::user, "nothing matches"}}, {}), BackendError);
}

TEST(ScriptedBackend, SampledResponsesArePureInMessagesAndSeed) {
  ScriptedBackend backend(nlohmann::json{{"rules", {{{"responses", {"a", "b", "c", "d", "e"}}}}}});
  const auto msgs = sample_messages();
  std::set<std::string> seen;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Sampling s{1.0, 80, seed};
    const auto first = backend.complete(msgs, s);
    EXPECT_EQ(backend.complete(msgs, s), first);
    seen.insert(first);
  }
  EXPECT_GT(seen.size(), 1u);
}

// Parser behavior on the extraction prompt's own few-shot examples.
TEST(ParseExtraction, FewShotExamples) {
  EXPECT_EQ(parse_extraction("Final answer: John Milton"), ExtractedAnswer::value("John Milton"));
  EXPECT_EQ(parse_extraction("Final answer: France"), ExtractedAnswer::value("France"));
  EXPECT_EQ(parse_extraction("Final answer: Disagree"), ExtractedAnswer::disagree());
  EXPECT_EQ(parse_extraction("Final answer: Agree"), ExtractedAnswer::agree());
  EXPECT_EQ(parse_extraction("Final answer: NONE"), ExtractedAnswer::none());
  EXPECT_EQ(parse_extraction("Final Answer: Agree"), ExtractedAnswer::agree());
}

TEST(ParseExtraction, UsesLastMarkerLine) {
  EXPECT_EQ(parse_extraction("Final Answer: Rome\nhmm\nFINAL ANSWER: **Paris.**\n"),
            ExtractedAnswer::value("Paris"));
  EXPECT_THROW(parse_extraction("I cannot comply"), ParseError);
}

TEST(ParseExtraction, NeverReturnsSentinelAsValue) {
  for (const char* s : {"agree", "AGREE.", " Disagree ", "none", "None!", "\"NONE\""}) {
    const auto a = parse_extraction(std::string("Final Answer: ") + s);
    EXPECT_FALSE(a.is_value()) << s;
  }
}

TEST(ExtractAnswer, SendsExtractionPromptAndParses) {
  std::string seen_prompt;
  auto extractor = function_agent("ext", [&](const std::vector<ChatMessage>& m, const Sampling&) {
    seen_prompt = m.back().content;
    return testing::scripted_extraction(testing::response_of_extraction_prompt(m));
  });
  const auto r = extract_answer(extractor, "Who wrote Paradise Lost?", "It was <<John Milton>>.");
  EXPECT_EQ(r.answer, ExtractedAnswer::value("John Milton"));
  EXPECT_FALSE(r.parse_failed);
  EXPECT_NE(seen_prompt.find("Question: Who wrote Paradise Lost?\nResponse: It was <<John Milton>>."),
            std::string::npos);
  EXPECT_NE(seen_prompt.find("Final Answer: <final answer (1-2 words ONLY)>"), std::string::npos);
}

TEST(ExtractAnswer, FewShotResponses) {
  // Extractor model that answers the way the few-shot block demonstrates.
  auto extractor = function_agent("ext", [](const std::vector<ChatMessage>& m, const Sampling&) {
    const auto r = testing::response_of_extraction_prompt(m);
    if (r.find("John Milton") != std::string::npos) return std::string("Final answer: John Milton");
    if (r.find("same page") != std::string::npos) return std::string("Final answer: Agree");
    return std::string("I cannot comply");
  });
  EXPECT_EQ(extract_answer(extractor, "Who wrote Paradise Lost?",
                           "The author of Paradise Lost was John Milton, who published the book in 1667.")
                .answer,
            ExtractedAnswer::value("John Milton"));
  EXPECT_EQ(extract_answer(extractor, "q", "I'm glad we're both on the same page!").answer,
            ExtractedAnswer::agree());
  const auto failed = extract_answer(extractor, "q", "whatever");
  EXPECT_EQ(failed.answer, ExtractedAnswer::none());
  EXPECT_TRUE(failed.parse_failed);
}

TEST(JudgeDisagreement, AliasJudgedSame) {
  auto calls = std::make_shared<int>(0);
  auto judge = alias_judge({{"FDR", "Franklin D. Roosevelt"}}, calls);
  EXPECT_FALSE(judge_disagreement(judge, "Who?", ExtractedAnswer::value("FDR"),
                                  ExtractedAnswer::value("Franklin D. Roosevelt")));
  EXPECT_EQ(*calls, 1);
  EXPECT_TRUE(judge_disagreement(judge, "Who?", ExtractedAnswer::value("FDR"),
                                 ExtractedAnswer::value("Truman")));
}

TEST(JudgeDisagreement, ShortCircuitsWithoutModelCall) {
  auto calls = std::make_shared<int>(0);
  auto judge = alias_judge({}, calls);
  EXPECT_FALSE(judge_disagreement(judge, "q", ExtractedAnswer::value("Paris"),
                                  ExtractedAnswer::value("paris")));
  EXPECT_TRUE(judge_disagreement(judge, "q", ExtractedAnswer::value("Paris"),
                                 ExtractedAnswer::disagree()));
  EXPECT_TRUE(judge_disagreement(judge, "q", ExtractedAnswer::agree(), ExtractedAnswer::disagree()));
  EXPECT_EQ(*calls, 0);
}

TEST(JudgeDisagreement, Reflexive) {
  auto judge = function_agent("contrarian", [](const std::vector<ChatMessage>&, const Sampling&) {
    return std::string("DIFFERENT");
  });
  for (const auto& a : {ExtractedAnswer::value("x"), ExtractedAnswer::agree(),
                        ExtractedAnswer::disagree(), ExtractedAnswer::none()}) {
    EXPECT_FALSE(judge_disagreement(judge, "q", a, a));
  }
}

TEST(TokenLogprob, SumsPerTokenValues) {
  ScriptedBackend backend(nlohmann::json{{"default", "x"}, {"logprobs", {{"per_token", -0.5}}}});
  EXPECT_DOUBLE_EQ(token_logprob_of_answer(backend, sample_messages(), "John Milton"), -1.0);
  EXPECT_DOUBLE_EQ(token_logprob_of_answer(backend, sample_messages(), ""), 0.0);
}

TEST(TokenLogprob, CapabilityAndProtocolErrors) {
  ScriptedBackend no_lp(nlohmann::json{{"capabilities", {"chat"}}, {"default", "x"}});
  EXPECT_THROW(token_logprob_of_answer(no_lp, sample_messages(), "a"), CapabilityError);
  FunctionBackend empty(
      [](const std::vector<ChatMessage>&, const Sampling&) { return std::string(); },
      Capabilities{true, true, false},
      [](const std::vector<ChatMessage>&, std::string_view, std::string_view) {
        return std::vector<double>{};
      });
  EXPECT_THROW(token_logprob_of_answer(empty, sample_messages(), "a"), ProtocolError);
}

TEST(PerceivedConfidence, ParseAndClamp) {
  auto judge_replying = [](std::string reply) {
    return function_agent("conf", [reply](const std::vector<ChatMessage>&, const Sampling&) {
      return reply;
    });
  };
  EXPECT_EQ(perceived_confidence(judge_replying("0.9"), "I'm sure."), 0.9);
  EXPECT_EQ(perceived_confidence(judge_replying("1.7"), "I'm sure."), 1.0);
  EXPECT_EQ(perceived_confidence(judge_replying("very sure"), "I'm sure."), std::nullopt);
  EXPECT_EQ(perceived_confidence(judge_replying("Confidence: .25"), "hm"), 0.25);
}

// Minimal OpenAI-compatible server for exercising the HTTP client.
class FakeServer {
 public:
  explicit FakeServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server_.Post("/v1/chat/completions", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

RetryPolicy fast_retry(int retries) { return {retries, std::chrono::milliseconds(1), 2.0}; }

TEST(HttpBackend, ParsesChatCompletionAndSendsRequestShape) {
  nlohmann::json seen;
  std::string auth;
  FakeServer server([&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    auth = req.get_header_value("Authorization");
    res.set_content(R"({"choices":[{"message":{"role":"assistant","content":"Paris"}}]})",
                    "application/json");
  });
  ::setenv("PERSUADE_TEST_KEY", "sk-test", 1);
  HttpBackend backend({server.url(), "tiny-model", "PERSUADE_TEST_KEY", 5}, {}, fast_retry(0));
  EXPECT_EQ(generate(backend, sample_messages(), Sampling{0.7, 80, 42}), "Paris");
  EXPECT_EQ(seen["model"], "tiny-model");
  EXPECT_EQ(seen["max_tokens"], 80);
  EXPECT_EQ(seen["seed"], 42);
  EXPECT_EQ(seen["messages"][1]["content"], "Question: Capital of France?");
  EXPECT_EQ(auth, "Bearer sk-test");
}

TEST(HttpBackend, ServerErrorsExhaustRetries) {
  std::atomic<int> hits{0};
  FakeServer server([&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 500;
    res.set_content("boom", "text/plain");
  });
  HttpBackend backend({server.url(), "m", "", 5}, {}, fast_retry(2));
  try {
    generate(backend, sample_messages(), {});
    FAIL() << "expected BackendError";
  } catch (const BackendError& e) {
    EXPECT_EQ(e.status(), 500);
    EXPECT_EQ(e.body_excerpt(), "boom");
  }
  EXPECT_EQ(hits.load(), 3);
}

TEST(HttpBackend, RecoversAfterTransientFailure) {
  std::atomic<int> hits{0};
  FakeServer server([&](const httplib::Request&, httplib::Response& res) {
    if (hits++ == 0) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"choices":[{"message":{"content":"ok"}}]})", "application/json");
  });
  HttpBackend backend({server.url(), "m", "", 5}, {}, fast_retry(2));
  EXPECT_EQ(generate(backend, sample_messages(), {}), "ok");
  EXPECT_EQ(hits.load(), 2);
}

TEST(HttpBackend, NonRetryableStatusFailsImmediately) {
  std::atomic<int> hits{0};
  FakeServer server([&](const httplib::Request&, httplib::Response& res) {
    ++hits;
    res.status = 400;
    res.set_content("bad request: unknown field", "text/plain");
  });
  HttpBackend backend({server.url(), "m", "", 5}, {}, fast_retry(3));
  try {
    generate(backend, sample_messages(), {});
    FAIL() << "expected BackendError";
  } catch (const BackendError& e) {
    EXPECT_EQ(e.status(), 400);
    EXPECT_NE(std::string(e.what()).find("unknown field"), std::string::npos);
  }
  EXPECT_EQ(hits.load(), 1);
}

TEST(HttpBackend, TransportFailureIsBackendError) {
  HttpBackend backend({"http://127.0.0.1:1", "m", "", 1}, {}, fast_retry(1));
  EXPECT_THROW(generate(backend, sample_messages(), {}), BackendError);
}

TEST(HttpBackend, ForcedDecodingAlignsEchoedTokens) {
  FakeServer server([&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    EXPECT_TRUE(body["echo"].get<bool>());
    EXPECT_EQ(body["messages"].back()["content"], "Final answer: John Milton");
    res.set_content(R"({"choices":[{"logprobs":{"content":[
        {"token":"Final","logprob":-0.1},{"token":" answer","logprob":-0.2},
        {"token":":","logprob":-0.05},{"token":" John","logprob":-1.25},
        {"token":" Milton","logprob":-0.5},{"token":"<eos>","logprob":-0.01}]}}],
        "usage":{"completion_tokens":1}})",
                    "application/json");
  });
  HttpBackend backend({server.url(), "m", "", 5}, Capabilities{true, true, false}, fast_retry(0));
  EXPECT_DOUBLE_EQ(token_logprob_of_answer(backend, sample_messages(), "John Milton"), -1.75);
}

TEST(HttpBackend, MissingApiKeyIsConfigError) {
  ::unsetenv("PERSUADE_SURELY_UNSET");
  EXPECT_THROW(HttpBackend({"http://x", "m", "PERSUADE_SURELY_UNSET", 1}, {}), ConfigError);
}

}  // namespace
}  // namespace persuasion
