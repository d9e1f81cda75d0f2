#pragma once

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "persuasion/answer.hpp"
#include "persuasion/backend.hpp"
#include "persuasion/error.hpp"
#include "persuasion/prompts.hpp"

// The three auxiliary model calls: answer extraction, disagreement judging,
// and confidence perception, plus forced-decoding of answers.
namespace persuasion {

/// Parses extractor output. Uses the last line containing "Final Answer:"
/// (any case). Sentinels are checked before the text is taken as a value.
/// Throws ParseError when no such line exists.
inline ExtractedAnswer parse_extraction(std::string_view output) {
  static constexpr std::string_view marker = "final answer:";
  const std::string lowered = to_lower_ascii(output);
  const auto pos = lowered.rfind(marker);
  if (pos == std::string::npos) {
    throw ParseError("extractor output has no 'Final Answer:' line");
  }
  const auto start = pos + marker.size();
  auto end = output.find('\n', start);
  if (end == std::string_view::npos) end = output.size();
  std::string_view text = trim(output.substr(start, end - start));

  const std::string norm = normalize_answer(text);
  if (norm == "agree") return ExtractedAnswer::agree();
  if (norm == "disagree") return ExtractedAnswer::disagree();
  if (norm == "none" || norm.empty()) return ExtractedAnswer::none();

  // Strip decoration models like to add around short answers.
  while (!text.empty() && (text.back() == '.' || text.back() == '*' || text.back() == '"')) {
    text.remove_suffix(1);
  }
  while (!text.empty() && (text.front() == '*' || text.front() == '"')) text.remove_prefix(1);
  return ExtractedAnswer::value(std::string(trim(text)));
}

struct Extraction {
  ExtractedAnswer answer;
  bool parse_failed = false;
};

inline Extraction extract_answer(const AgentSpec& extractor, std::string_view question,
                                 std::string_view response) {
  const std::vector<ChatMessage> messages{
      {ChatRole::user, prompts::extraction(question, response)}};
  const std::string output = generate(extractor.get(), messages, extractor.sampling);
  try {
    return {parse_extraction(output), false};
  } catch (const ParseError&) {
    return {ExtractedAnswer::none(), true};
  }
}

namespace detail {

inline std::string describe_for_judge(const ExtractedAnswer& a) {
  switch (a.kind()) {
    case ExtractedAnswer::Kind::value:
      return a.raw();
    case ExtractedAnswer::Kind::agree:
      return "(agrees with the previous answer)";
    case ExtractedAnswer::Kind::disagree:
      return "(disagrees with the previous answer, no new answer)";
    case ExtractedAnswer::Kind::none:
      break;
  }
  return "(no answer)";
}

}  // namespace detail

/// True iff the two answers genuinely differ. Equal normalized values and
/// identical sentinels short-circuit to false; exactly one bare disagree
/// short-circuits to true. Everything else goes to the judge model.
inline bool judge_disagreement(const AgentSpec& judge, std::string_view question,
                               const ExtractedAnswer& a, const ExtractedAnswer& b,
                               AnswerKind kind = AnswerKind::free_text) {
  if (a.is_value() && b.is_value()) {
    if (normalize_answer(a.raw(), kind) == normalize_answer(b.raw(), kind)) return false;
  } else if (a.kind() == b.kind()) {
    return false;
  }
  const bool a_dis = a.kind() == ExtractedAnswer::Kind::disagree;
  const bool b_dis = b.kind() == ExtractedAnswer::Kind::disagree;
  if (a_dis != b_dis) return true;

  const std::vector<ChatMessage> messages{
      {ChatRole::user, prompts::fill(prompts::kDisagreementJudge,
                                     {{"question", question},
                                      {"first", detail::describe_for_judge(a)},
                                      {"second", detail::describe_for_judge(b)}})}};
  const std::string reply = to_lower_ascii(generate(judge.get(), messages, judge.sampling));
  if (reply.find("different") != std::string::npos) return true;
  if (reply.find("same") != std::string::npos) return false;
  warn("disagreement judge reply unparseable, treating as agreement: " + reply.substr(0, 80));
  return false;
}

inline constexpr std::string_view kAnswerPrefill = "Final answer: ";

/// Sum of token log-probabilities of `answer`, forced-decoded after an
/// assistant turn beginning "Final answer: ".
inline double token_logprob_of_answer(Backend& backend, const std::vector<ChatMessage>& context,
                                      std::string_view answer) {
  if (!backend.capabilities().token_logprobs) throw CapabilityError("token_logprobs");
  if (answer.empty()) return 0.0;
  const auto per_token = backend.continuation_logprobs(context, kAnswerPrefill, answer);
  if (per_token.empty()) throw ProtocolError("backend returned no logprobs for answer");
  double total = 0.0;
  for (double lp : per_token) {
    if (!(lp <= 0.0)) throw ProtocolError("backend returned a non-negative-probability logprob");
    total += lp;
  }
  return total;
}

/// First decimal number in `reply`, clamped to [0, 1]; nullopt if none.
inline std::optional<double> parse_confidence(std::string_view reply) {
  static const std::regex number(R"([-+]?(\d+(\.\d*)?|\.\d+))");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(reply.begin(), reply.end(), m, number)) return std::nullopt;
  const double value = std::strtod(m.str().c_str(), nullptr);
  return std::clamp(value, 0.0, 1.0);
}

inline std::optional<double> perceived_confidence(const AgentSpec& judge,
                                                  std::string_view turn_text) {
  const std::vector<ChatMessage> messages{
      {ChatRole::user, prompts::fill(prompts::kConfidence, {{"response", turn_text}})}};
  return parse_confidence(generate(judge.get(), messages, judge.sampling));
}

}  // namespace persuasion
