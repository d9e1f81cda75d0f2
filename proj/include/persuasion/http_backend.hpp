#pragma once

#include <chrono>
#include <cstdlib>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "persuasion/backend.hpp"
#include "persuasion/error.hpp"

namespace persuasion {

struct RetryPolicy {
  int retries = 3;
  std::chrono::milliseconds initial_backoff{1000};
  double multiplier = 2.0;

  static bool retryable_status(int status) {
    return status == 408 || status == 429 || status >= 500;
  }
};

struct HttpEndpoint {
  std::string base_url;      // e.g. http://localhost:8000
  std::string model;
  std::string api_key_env;   // empty: no Authorization header
  int timeout_seconds = 120;
};

// OpenAI-compatible chat-completions client:
// POST {base_url}/v1/chat/completions.
class HttpBackend : public Backend {
 public:
  HttpBackend(HttpEndpoint endpoint, Capabilities caps, RetryPolicy retry = {})
      : endpoint_(std::move(endpoint)), caps_(caps), retry_(retry) {
    const auto scheme = endpoint_.base_url.find("://");
    if (scheme == std::string::npos) {
      throw ConfigError("base_url needs a scheme: " + endpoint_.base_url);
    }
    const auto path_start = endpoint_.base_url.find('/', scheme + 3);
    host_ = endpoint_.base_url.substr(0, path_start);
    std::string prefix =
        path_start == std::string::npos ? std::string() : endpoint_.base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    path_ = prefix + "/v1/chat/completions";
    if (!endpoint_.api_key_env.empty()) {
      const char* key = std::getenv(endpoint_.api_key_env.c_str());
      if (key == nullptr) {
        throw ConfigError("environment variable " + endpoint_.api_key_env + " is not set");
      }
      api_key_ = key;
    }
  }

  std::string complete(const std::vector<ChatMessage>& messages,
                       const Sampling& sampling) override {
    nlohmann::json body = {{"model", endpoint_.model},
                           {"messages", messages},
                           {"temperature", sampling.temperature},
                           {"max_tokens", sampling.max_tokens}};
    if (sampling.seed) body["seed"] = *sampling.seed;
    const auto reply = post(body);
    try {
      const auto& content = reply.at("choices").at(0).at("message").at("content");
      return content.is_null() ? std::string() : content.get<std::string>();
    } catch (const nlohmann::json::exception&) {
      throw ProtocolError("chat completion reply has no choices[0].message.content");
    }
  }

  // Sends the context plus an assistant turn "prefill + continuation" with
  // echo and logprobs on, then aligns the trailing echoed tokens with the
  // continuation text.
  std::vector<double> continuation_logprobs(const std::vector<ChatMessage>& context,
                                            std::string_view prefill,
                                            std::string_view continuation) override {
    if (!caps_.token_logprobs) throw CapabilityError("token_logprobs");
    auto messages = context;
    messages.push_back({ChatRole::assistant, std::string(prefill) + std::string(continuation)});
    nlohmann::json body = {{"model", endpoint_.model},
                           {"messages", messages},
                           {"temperature", 0.0},
                           {"max_tokens", 1},
                           {"logprobs", true},
                           {"echo", true},
                           {"add_generation_prompt", false},
                           {"continue_final_message", true}};
    const auto reply = post(body);

    std::vector<std::pair<std::string, double>> tokens;
    try {
      for (const auto& t : reply.at("choices").at(0).at("logprobs").at("content")) {
        tokens.emplace_back(t.at("token").get<std::string>(), t.at("logprob").get<double>());
      }
    } catch (const nlohmann::json::exception&) {
      throw ProtocolError("reply carries no choices[0].logprobs.content");
    }
    std::size_t generated = 1;
    if (reply.contains("usage") && reply["usage"].contains("completion_tokens")) {
      generated = reply["usage"]["completion_tokens"].get<std::size_t>();
    }
    if (tokens.size() < generated) throw ProtocolError("fewer logprob tokens than generated");
    tokens.resize(tokens.size() - generated);

    const std::string target(continuation);
    std::string suffix;
    std::vector<double> out;
    for (auto it = tokens.rbegin(); it != tokens.rend(); ++it) {
      suffix.insert(0, it->first);
      out.insert(out.begin(), it->second);
      if (trim(suffix).size() >= target.size()) break;
    }
    if (std::string(trim(suffix)) != target) {
      throw ProtocolError("cannot align echoed tokens with answer '" + target + "'");
    }
    return out;
  }

  Capabilities capabilities() const override { return caps_; }
  std::string describe() const override {
    return "http:" + endpoint_.base_url + "#" + endpoint_.model;
  }

 private:
  nlohmann::json post(const nlohmann::json& body) {
    httplib::Client client(host_);
    client.set_connection_timeout(endpoint_.timeout_seconds);
    client.set_read_timeout(endpoint_.timeout_seconds);
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    const std::string payload = body.dump();

    auto backoff = retry_.initial_backoff;
    std::string last_error;
    int last_status = 0;
    std::string last_body;
    for (int attempt = 0; attempt <= retry_.retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(backoff);
        backoff = std::chrono::milliseconds(
            static_cast<long long>(static_cast<double>(backoff.count()) * retry_.multiplier));
      }
      auto res = client.Post(path_, headers, payload, "application/json");
      if (!res) {
        last_error = "transport failure: " + httplib::to_string(res.error());
        last_status = 0;
        continue;
      }
      if (res->status >= 200 && res->status < 300) {
        try {
          return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception&) {
          throw ProtocolError("backend reply is not JSON");
        }
      }
      last_status = res->status;
      last_body = res->body.substr(0, 200);
      last_error = "HTTP " + std::to_string(res->status);
      if (!RetryPolicy::retryable_status(res->status)) break;
    }
    throw BackendError(describe() + ": " + last_error +
                           (last_body.empty() ? std::string() : " body: " + last_body),
                       last_status, last_body);
  }

  HttpEndpoint endpoint_;
  Capabilities caps_;
  RetryPolicy retry_;
  std::string host_;
  std::string path_;
  std::string api_key_;
};

}  // namespace persuasion
