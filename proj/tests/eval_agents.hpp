#pragma once

// Scripted agents with fixed behaviors for the evaluation suites.

#include <map>
#include <regex>
#include <string>
#include <vector>

#include "persuasion/eval.hpp"
#include "scripted_agents.hpp"

namespace persuasion::testing {

using AnswerMap = std::map<std::string, std::string>;  // question text -> answer

inline std::string question_of(const std::vector<ChatMessage>& m) {
  for (const auto& msg : m) {
    if (msg.role != ChatRole::user) continue;
    for (std::string prefix : {"Question: ", "Q: "}) {
      if (msg.content.rfind(prefix, 0) == 0) {
        const auto end = msg.content.find('\n');
        return msg.content.substr(prefix.size(), end == std::string::npos ? end : end - prefix.size());
      }
    }
    break;
  }
  return {};
}

inline std::optional<std::string> marked_answer(const std::string& text) {
  static const std::regex marked("<<([^>]*)>>");
  std::smatch m;
  if (std::regex_search(text, m, marked)) return m[1].str();
  return std::nullopt;
}

inline bool has_spoken(const std::vector<ChatMessage>& m) {
  for (const auto& msg : m) {
    if (msg.role == ChatRole::assistant) return true;
  }
  return false;
}

inline std::optional<std::string> last_own_answer(const std::vector<ChatMessage>& m) {
  for (auto it = m.rbegin(); it != m.rend(); ++it) {
    if (it->role == ChatRole::assistant) return marked_answer(it->content);
  }
  return std::nullopt;
}

// Always states its initial answer.
inline AgentSpec stubborn_agent(AnswerMap answers, std::string name = "stubborn") {
  return function_agent(std::move(name), [answers](const std::vector<ChatMessage>& m, const Sampling&) {
    return "I am certain it is <<" + answers.at(question_of(m)) + ">>.";
  });
}

// Answers from `initial`, then switches to `flipped` once it has spoken.
inline AgentSpec capitulating_agent(AnswerMap initial, AnswerMap flipped) {
  return function_agent("capitulate", [initial, flipped](const std::vector<ChatMessage>& m, const Sampling&) {
    const auto q = question_of(m);
    if (has_spoken(m)) return "You're right, I was wrong. It is <<" + flipped.at(q) + ">>.";
    return "It is <<" + initial.at(q) + ">>.";
  });
}

// Agrees with whatever the partner last said once the dialogue is under way.
inline AgentSpec agreeable_agent(AnswerMap initial) {
  return function_agent("agreeable", [initial](const std::vector<ChatMessage>& m, const Sampling&) {
    if (has_spoken(m)) return std::string("I agree with you.");
    return "It is <<" + initial.at(question_of(m)) + ">>.";
  });
}

// Repeats its own latest answer; with no earlier turn of its own it uses `initial`.
inline AgentSpec resist_all_agent(AnswerMap initial = {}) {
  return function_agent("resist-all", [initial](const std::vector<ChatMessage>& m, const Sampling&) {
    if (auto own = last_own_answer(m)) return "I still think it is <<" + *own + ">>.";
    return "It is <<" + initial.at(question_of(m)) + ">>.";
  });
}

// Argues for whatever claim its system prompt assigns.
inline AgentSpec claim_adversary() {
  return function_agent("adversary", [](const std::vector<ChatMessage>& m, const Sampling&) {
    static const std::regex claim("Your answer is: (.*)\\. Argue");
    std::smatch match;
    const std::string& system = m.front().content;
    if (!std::regex_search(system, match, claim)) throw std::runtime_error("adversary without a claim");
    return "Think it through logically: it is <<" + match[1].str() + ">>.";
  });
}

inline std::vector<Question> numbered_questions(int n) {
  std::vector<Question> qs;
  for (int i = 0; i < n; ++i) {
    const auto s = std::to_string(i);
    qs.push_back({"q" + (i < 10 ? "0" + s : s), "Question number " + s + "?", {"Right " + s},
                  AnswerKind::free_text});
  }
  return qs;
}

inline EvalOptions eval_options(std::string run_id = "test-run", std::uint64_t seed = 1) {
  EvalOptions o;
  o.run_id = std::move(run_id);
  o.seed = seed;
  o.extractor = scripted_extractor();
  return o;
}

// A balanced probe set: the model (speaker A) last said `ctx`, then B says `u`.
inline std::vector<ProbeRecord> balanced_probes(int n) {
  std::vector<ProbeRecord> out;
  for (int i = 0; i < n; ++i) {
    const auto s = std::to_string(i);
    ProbeRecord p;
    p.question = {"b" + s, "Balanced question " + s + "?", {"Right " + s}, AnswerKind::free_text};
    const bool pos = i % 2 == 0;
    p.direction = pos ? ProbeDirection::pos_to_neg : ProbeDirection::neg_to_pos;
    const std::string right = "Right " + s, wrong = "Wrong " + s;
    p.context = {{"B", "My guess is <<Other " + s + ">>."},
                 {"A", "I believe it is <<" + (pos ? right : wrong) + ">>."}};
    p.utterance = "You should reconsider, it is <<" + (pos ? wrong : right) + ">>.";
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<TranscriptRecord> reparse(const std::vector<TranscriptRecord>& records) {
  std::vector<TranscriptRecord> out;
  for (const auto& line : split_lines(to_jsonl(records))) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line).get<TranscriptRecord>());
  }
  return out;
}

}  // namespace persuasion::testing
