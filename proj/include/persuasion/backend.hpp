#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "persuasion/answer.hpp"
#include "persuasion/error.hpp"
#include "persuasion/util.hpp"

namespace persuasion {

enum class ChatRole { system, user, assistant };

NLOHMANN_JSON_SERIALIZE_ENUM(ChatRole, {
                                           {ChatRole::system, "system"},
                                           {ChatRole::user, "user"},
                                           {ChatRole::assistant, "assistant"},
                                       })

struct ChatMessage {
  ChatRole role = ChatRole::user;
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

inline void to_json(nlohmann::json& j, const ChatMessage& m) {
  j = {{"role", m.role}, {"content", m.content}};
}
inline void from_json(const nlohmann::json& j, ChatMessage& m) {
  m.role = j.at("role").get<ChatRole>();
  m.content = j.at("content").get<std::string>();
}

// Stable digest of a message list; scripted backends dispatch on it.
inline std::string messages_hash(const std::vector<ChatMessage>& messages) {
  Fnv1a h;
  for (const auto& m : messages) {
    h.field(nlohmann::json(m.role).get<std::string>());
    h.field(m.content);
  }
  return h.hex();
}

struct Sampling {
  double temperature = 0.0;
  int max_tokens = 80;
  std::optional<std::uint64_t> seed;
};

inline void to_json(nlohmann::json& j, const Sampling& s) {
  j = {{"temperature", s.temperature}, {"max_tokens", s.max_tokens}};
  if (s.seed) j["seed"] = *s.seed;
}

struct Capabilities {
  bool chat = true;
  bool token_logprobs = false;
  bool sampled_generation = false;

  static Capabilities parse(const nlohmann::json& names) {
    Capabilities caps{false, false, false};
    for (const auto& n : names) {
      const auto name = n.get<std::string>();
      if (name == "chat") {
        caps.chat = true;
      } else if (name == "token_logprobs") {
        caps.token_logprobs = true;
      } else if (name == "sampled_generation") {
        caps.sampled_generation = true;
      } else {
        throw ConfigError("unknown capability: " + name);
      }
    }
    return caps;
  }
};

class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::string complete(const std::vector<ChatMessage>& messages,
                               const Sampling& sampling) = 0;

  // Per-token log-probabilities of `continuation` forced after an assistant
  // turn that starts with `prefill`.
  virtual std::vector<double> continuation_logprobs(const std::vector<ChatMessage>& context,
                                                    std::string_view prefill,
                                                    std::string_view continuation) {
    (void)context;
    (void)prefill;
    (void)continuation;
    throw CapabilityError("token_logprobs");
  }

  virtual Capabilities capabilities() const = 0;

  // Identifies the backend and its version in run manifests.
  virtual std::string describe() const = 0;
};

/// Sends `messages` to the backend. Precondition: messages non-empty and the
/// backend supports chat.
inline std::string generate(Backend& backend, const std::vector<ChatMessage>& messages,
                            const Sampling& sampling) {
  if (messages.empty()) throw PreconditionError("generate: empty message list");
  if (sampling.max_tokens <= 0) throw PreconditionError("generate: max_tokens must be > 0");
  if (!backend.capabilities().chat) throw CapabilityError("chat");
  return backend.complete(messages, sampling);
}

// Deterministic backend driven by a JSON rule table. Each rule is tried in
// order; the first whose conditions all hold produces the reply.
//
//   {"capabilities": ["chat", "token_logprobs", "sampled_generation"],
//    "rules": [{"when": {"last": "regex", "system": "regex", "transcript": "regex",
//                        "hash": "<messages_hash>", "assistant_turns": 2},
//               "response": "text with $1 or {{last_assistant}}",
//               "responses": ["sampled", "alternatives"], "pick": "hash" | "seed"}],
//    "default": "fallback reply",
//    "logprobs": {"per_token": -0.5, "answers": {"paris": -0.2}}}
//
// Replies are a pure function of (messages, seed).
class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(const nlohmann::json& script, std::string name = "scripted")
      : name_(std::move(name)), digest_(fnv1a_hex(script.dump())) {
    caps_ = script.contains("capabilities")
                ? Capabilities::parse(script["capabilities"])
                : Capabilities{true, true, true};
    for (const auto& r : script.value("rules", nlohmann::json::array())) {
      rules_.push_back(parse_rule(r));
    }
    if (script.contains("default")) default_ = script["default"].get<std::string>();
    if (script.contains("logprobs")) {
      const auto& lp = script["logprobs"];
      per_token_ = lp.value("per_token", -0.5);
      const auto answers = lp.value("answers", nlohmann::json::object());
      for (const auto& [answer, value] : answers.items()) {
        answer_logprobs_.emplace_back(normalize_answer(answer), value.get<double>());
      }
    }
  }

  static std::shared_ptr<ScriptedBackend> from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read script file " + path);
    nlohmann::json script;
    try {
      in >> script;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed script file " + path + ": " + e.what());
    }
    return std::make_shared<ScriptedBackend>(script, path);
  }

  std::string complete(const std::vector<ChatMessage>& messages,
                       const Sampling& sampling) override {
    for (const auto& rule : rules_) {
      std::smatch captures;
      if (!matches(rule, messages, captures)) continue;
      const std::string* reply = &rule.response;
      if (!rule.responses.empty()) {
        std::uint64_t k = sampling.seed.value_or(0);
        if (!rule.pick_by_seed) {
          Fnv1a h;
          h.field(messages_hash(messages)).field(std::to_string(k));
          k = h.value();
        }
        reply = &rule.responses[k % rule.responses.size()];
      }
      return expand(*reply, captures, messages);
    }
    if (default_) {
      std::smatch none;
      return expand(*default_, none, messages);
    }
    throw BackendError("scripted backend " + name_ + ": no rule matched");
  }

  std::vector<double> continuation_logprobs(const std::vector<ChatMessage>& context,
                                            std::string_view prefill,
                                            std::string_view continuation) override {
    (void)context;
    (void)prefill;
    if (!caps_.token_logprobs) throw CapabilityError("token_logprobs");
    const auto norm = normalize_answer(continuation);
    for (const auto& [answer, value] : answer_logprobs_) {
      if (answer == norm) return {value};
    }
    std::vector<double> out;
    std::istringstream words{std::string(continuation)};
    for (std::string w; words >> w;) out.push_back(per_token_);
    return out;
  }

  Capabilities capabilities() const override { return caps_; }
  std::string describe() const override { return "scripted:" + name_ + "@" + digest_; }

 private:
  struct Rule {
    std::optional<std::regex> last, system, transcript;
    std::optional<std::string> hash;
    std::optional<int> assistant_turns;
    std::string response;
    std::vector<std::string> responses;
    bool pick_by_seed = false;  // responses[seed % n] instead of a hash pick
  };

  static Rule parse_rule(const nlohmann::json& r) {
    Rule rule;
    const auto when = r.value("when", nlohmann::json::object());
    auto compile = [](const nlohmann::json& pattern) {
      try {
        return std::regex(pattern.get<std::string>(), std::regex::ECMAScript);
      } catch (const std::regex_error& e) {
        throw ConfigError("bad regex in script: " + pattern.get<std::string>());
      }
    };
    if (when.contains("last")) rule.last = compile(when["last"]);
    if (when.contains("system")) rule.system = compile(when["system"]);
    if (when.contains("transcript")) rule.transcript = compile(when["transcript"]);
    if (when.contains("hash")) rule.hash = when["hash"].get<std::string>();
    if (when.contains("assistant_turns")) rule.assistant_turns = when["assistant_turns"].get<int>();
    if (r.contains("responses")) {
      rule.responses = r["responses"].get<std::vector<std::string>>();
      if (rule.responses.empty()) throw ConfigError("script rule with empty responses");
      const auto pick = r.value("pick", "hash");
      if (pick != "hash" && pick != "seed") throw ConfigError("script rule pick must be hash or seed");
      rule.pick_by_seed = pick == "seed";
    } else {
      rule.response = r.at("response").get<std::string>();
    }
    return rule;
  }

  static bool matches(const Rule& rule, const std::vector<ChatMessage>& messages,
                      std::smatch& captures) {
    if (rule.hash && *rule.hash != messages_hash(messages)) return false;
    if (rule.assistant_turns) {
      const auto n = std::count_if(messages.begin(), messages.end(), [](const ChatMessage& m) {
        return m.role == ChatRole::assistant;
      });
      if (n != *rule.assistant_turns) return false;
    }
    // Subjects must outlive `captures`, so they live in thread-local storage
    // keyed by condition.
    thread_local std::string system_text, transcript_text, last_text;
    std::smatch scratch;
    if (rule.system) {
      system_text.clear();
      for (const auto& m : messages) {
        if (m.role == ChatRole::system) system_text += m.content;
      }
      if (!std::regex_search(system_text, scratch, *rule.system)) return false;
      captures = scratch;
    }
    if (rule.transcript) {
      transcript_text.clear();
      for (const auto& m : messages) {
        transcript_text += m.content;
        transcript_text += '\n';
      }
      if (!std::regex_search(transcript_text, scratch, *rule.transcript)) return false;
      captures = scratch;
    }
    if (rule.last) {
      last_text = messages.empty() ? std::string() : messages.back().content;
      if (!std::regex_search(last_text, scratch, *rule.last)) return false;
      captures = scratch;
    }
    return true;
  }

  static std::string expand(const std::string& tmpl, const std::smatch& captures,
                            const std::vector<ChatMessage>& messages) {
    auto last_of = [&](ChatRole role) {
      for (auto it = messages.rbegin(); it != messages.rend(); ++it) {
        if (it->role == role) return it->content;
      }
      return std::string();
    };
    std::string out;
    for (std::size_t i = 0; i < tmpl.size(); ++i) {
      if (tmpl[i] == '$' && i + 1 < tmpl.size() && std::isdigit(static_cast<unsigned char>(tmpl[i + 1]))) {
        const auto group = static_cast<std::size_t>(tmpl[i + 1] - '0');
        if (group < captures.size()) out += captures[group].str();
        ++i;
      } else if (tmpl.compare(i, 18, "{{last_assistant}}") == 0) {
        out += last_of(ChatRole::assistant);
        i += 17;
      } else if (tmpl.compare(i, 13, "{{last_user}}") == 0) {
        out += last_of(ChatRole::user);
        i += 12;
      } else {
        out.push_back(tmpl[i]);
      }
    }
    return out;
  }

  std::string name_;
  std::string digest_;
  Capabilities caps_;
  std::vector<Rule> rules_;
  std::optional<std::string> default_;
  double per_token_ = -0.5;
  std::vector<std::pair<std::string, double>> answer_logprobs_;
};

// Backend defined by C++ callables; the in-process flavor of a scripted
// backend used by tests and library callers.
class FunctionBackend : public Backend {
 public:
  using ChatFn = std::function<std::string(const std::vector<ChatMessage>&, const Sampling&)>;
  using LogprobFn = std::function<std::vector<double>(
      const std::vector<ChatMessage>&, std::string_view, std::string_view)>;

  explicit FunctionBackend(ChatFn chat, Capabilities caps = {true, false, true},
                           LogprobFn logprobs = {}, std::string name = "function")
      : chat_(std::move(chat)), logprobs_(std::move(logprobs)), caps_(caps),
        name_(std::move(name)) {}

  std::string complete(const std::vector<ChatMessage>& messages,
                       const Sampling& sampling) override {
    return chat_(messages, sampling);
  }

  std::vector<double> continuation_logprobs(const std::vector<ChatMessage>& context,
                                            std::string_view prefill,
                                            std::string_view continuation) override {
    if (!caps_.token_logprobs || !logprobs_) throw CapabilityError("token_logprobs");
    return logprobs_(context, prefill, continuation);
  }

  Capabilities capabilities() const override { return caps_; }
  std::string describe() const override { return "function:" + name_; }

 private:
  ChatFn chat_;
  LogprobFn logprobs_;
  Capabilities caps_;
  std::string name_;
};

// Routes every call through a shared in-flight limiter.
class ThrottledBackend : public Backend {
 public:
  ThrottledBackend(std::shared_ptr<Backend> inner, std::shared_ptr<InflightLimiter> limiter)
      : inner_(std::move(inner)), limiter_(std::move(limiter)) {}

  std::string complete(const std::vector<ChatMessage>& messages,
                       const Sampling& sampling) override {
    auto permit = limiter_->acquire();
    return inner_->complete(messages, sampling);
  }
  std::vector<double> continuation_logprobs(const std::vector<ChatMessage>& context,
                                            std::string_view prefill,
                                            std::string_view continuation) override {
    auto permit = limiter_->acquire();
    return inner_->continuation_logprobs(context, prefill, continuation);
  }
  Capabilities capabilities() const override { return inner_->capabilities(); }
  std::string describe() const override { return inner_->describe(); }

 private:
  std::shared_ptr<Backend> inner_;
  std::shared_ptr<InflightLimiter> limiter_;
};

/// One debating (or auxiliary) agent: a backend plus how to prompt and
/// sample it. An empty system_prompt means "use the role prompt library".
struct AgentSpec {
  std::string name;
  std::shared_ptr<Backend> backend;
  std::string system_prompt;
  Sampling sampling;

  Backend& get() const {
    if (!backend) throw ConfigError("agent " + name + " has no backend");
    return *backend;
  }

  // Same agent with a different token budget.
  AgentSpec with_max_tokens(int max_tokens) const {
    AgentSpec copy = *this;
    copy.sampling.max_tokens = max_tokens;
    return copy;
  }
};

}  // namespace persuasion
