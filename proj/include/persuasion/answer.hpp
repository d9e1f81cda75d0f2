#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "persuasion/error.hpp"
#include "persuasion/util.hpp"

namespace persuasion {

enum class AnswerKind { free_text, boolean };

NLOHMANN_JSON_SERIALIZE_ENUM(AnswerKind, {
                                             {AnswerKind::free_text, "free_text"},
                                             {AnswerKind::boolean, "boolean"},
                                         })

/// Lowercase, drop ASCII punctuation, collapse whitespace, then strip
/// leading articles ("a", "an", "the") for as long as another word follows.
/// Idempotent; non-ASCII bytes pass through untouched.
inline std::string normalize_answer(std::string_view raw) {
  std::string cleaned;
  cleaned.reserve(raw.size());
  for (unsigned char c : raw) {
    if (c < 0x80 && std::ispunct(c)) continue;
    if (c < 0x80 && std::isspace(c)) {
      cleaned.push_back(' ');
    } else {
      cleaned.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    }
  }

  std::vector<std::string_view> words;
  std::string_view rest = cleaned;
  while (!rest.empty()) {
    const auto start = rest.find_first_not_of(' ');
    if (start == std::string_view::npos) break;
    rest.remove_prefix(start);
    const auto end = rest.find(' ');
    words.push_back(rest.substr(0, end));
    rest.remove_prefix(end == std::string_view::npos ? rest.size() : end);
  }

  static constexpr std::array<std::string_view, 3> articles{"a", "an", "the"};
  std::size_t first = 0;
  while (words.size() - first > 1 &&
         std::find(articles.begin(), articles.end(), words[first]) != articles.end()) {
    ++first;
  }

  std::string out;
  for (std::size_t i = first; i < words.size(); ++i) {
    if (!out.empty()) out.push_back(' ');
    out.append(words[i]);
  }
  return out;
}

/// Boolean questions map any answer whose first normalized word is
/// "yes"/"no" onto that token; free-text answers use plain normalization.
inline std::string normalize_answer(std::string_view raw, AnswerKind kind) {
  std::string norm = normalize_answer(raw);
  if (kind == AnswerKind::boolean) {
    const std::string_view first = std::string_view(norm).substr(0, norm.find(' '));
    if (first == "yes" || first == "no") return std::string(first);
  }
  return norm;
}

/// Exact match after normalization against any alias. Containment does not count.
inline bool answer_matches(std::string_view candidate, const std::vector<std::string>& refs,
                           AnswerKind kind = AnswerKind::free_text) {
  if (refs.empty()) throw ConfigError("answer_matches: empty reference set");
  const std::string cand = normalize_answer(candidate, kind);
  for (const auto& r : refs) {
    if (normalize_answer(r, kind) == cand) return true;
  }
  return false;
}

struct Question {
  std::string id;
  std::string text;
  std::vector<std::string> reference_answers;
  AnswerKind answer_kind = AnswerKind::free_text;

  bool is_correct(std::string_view candidate) const {
    return answer_matches(candidate, reference_answers, answer_kind);
  }

  // Throws ConfigError when the invariants do not hold.
  void validate() const {
    if (id.empty()) throw ConfigError("question without id");
    if (reference_answers.empty()) {
      throw ConfigError("question " + id + ": reference_answers is empty");
    }
    if (answer_kind == AnswerKind::boolean) {
      std::string first;
      for (const auto& r : reference_answers) {
        const auto n = normalize_answer(r, AnswerKind::boolean);
        if (n != "yes" && n != "no") {
          throw ConfigError("question " + id + ": boolean reference must be yes or no");
        }
        if (first.empty()) first = n;
        if (n != first) {
          throw ConfigError("question " + id + ": boolean references disagree");
        }
      }
    }
  }
};

inline void to_json(nlohmann::json& j, const Question& q) {
  j = {{"id", q.id},
       {"question", q.text},
       {"reference_answers", q.reference_answers},
       {"answer_kind", q.answer_kind}};
}

inline void from_json(const nlohmann::json& j, Question& q) {
  q.id = j.at("id").get<std::string>();
  q.text = j.at("question").get<std::string>();
  q.reference_answers = j.at("reference_answers").get<std::vector<std::string>>();
  q.answer_kind = j.value("answer_kind", AnswerKind::free_text);
  if (j.contains("answer_kind") && j["answer_kind"] != "free_text" &&
      j["answer_kind"] != "boolean") {
    throw ConfigError("question " + q.id + ": unknown answer_kind");
  }
}

enum class RoleKind { persuader, persuadee, neutral };
enum class Strategy { logical, emotional, credible, acceptant, resistant, standard };

NLOHMANN_JSON_SERIALIZE_ENUM(RoleKind, {
                                           {RoleKind::persuader, "persuader"},
                                           {RoleKind::persuadee, "persuadee"},
                                           {RoleKind::neutral, "neutral"},
                                       })
NLOHMANN_JSON_SERIALIZE_ENUM(Strategy, {
                                           {Strategy::logical, "logical"},
                                           {Strategy::emotional, "emotional"},
                                           {Strategy::credible, "credible"},
                                           {Strategy::acceptant, "acceptant"},
                                           {Strategy::resistant, "resistant"},
                                           {Strategy::standard, "standard"},
                                       })

inline RoleKind role_kind_of(Strategy s) {
  switch (s) {
    case Strategy::logical:
    case Strategy::emotional:
    case Strategy::credible:
      return RoleKind::persuader;
    case Strategy::acceptant:
    case Strategy::resistant:
      return RoleKind::persuadee;
    case Strategy::standard:
      break;
  }
  return RoleKind::neutral;
}

inline std::string to_string(Strategy s) { return nlohmann::json(s).get<std::string>(); }

inline Strategy parse_strategy(std::string_view name) {
  static constexpr std::array<std::pair<std::string_view, Strategy>, 6> table{{
      {"logical", Strategy::logical},
      {"emotional", Strategy::emotional},
      {"credible", Strategy::credible},
      {"acceptant", Strategy::acceptant},
      {"resistant", Strategy::resistant},
      {"standard", Strategy::standard},
  }};
  const auto lowered = to_lower_ascii(name);
  for (const auto& [key, value] : table) {
    if (key == lowered) return value;
  }
  throw ConfigError("unknown strategy: " + std::string(name));
}

struct Role {
  RoleKind kind = RoleKind::neutral;
  Strategy strategy = Strategy::standard;

  static Role of(Strategy s) { return Role{role_kind_of(s), s}; }

  friend bool operator==(const Role&, const Role&) = default;
};

inline void to_json(nlohmann::json& j, const Role& r) {
  j = {{"kind", r.kind}, {"strategy", r.strategy}};
}
inline void from_json(const nlohmann::json& j, Role& r) {
  r.strategy = parse_strategy(j.at("strategy").get<std::string>());
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "persuader" && kind != "persuadee" && kind != "neutral") {
    throw ConfigError("unknown role kind: " + kind);
  }
  r.kind = j.at("kind").get<RoleKind>();
  if (r.kind != role_kind_of(r.strategy)) {
    throw ConfigError("role kind does not match strategy " + to_string(r.strategy));
  }
}

/// Output of the extraction step: either a concrete answer or one of the
/// three sentinels from the extraction prompt.
class ExtractedAnswer {
 public:
  enum class Kind { value, agree, disagree, none };

  static ExtractedAnswer value(std::string raw) {
    ExtractedAnswer a(Kind::value);
    a.normalized_ = normalize_answer(raw);
    a.raw_ = std::move(raw);
    return a;
  }
  static ExtractedAnswer agree() { return ExtractedAnswer(Kind::agree); }
  static ExtractedAnswer disagree() { return ExtractedAnswer(Kind::disagree); }
  static ExtractedAnswer none() { return ExtractedAnswer(Kind::none); }

  ExtractedAnswer() = default;

  Kind kind() const noexcept { return kind_; }
  bool is_value() const noexcept { return kind_ == Kind::value; }
  const std::string& raw() const noexcept { return raw_; }
  const std::string& normalized() const noexcept { return normalized_; }

  friend bool operator==(const ExtractedAnswer&, const ExtractedAnswer&) = default;

 private:
  explicit ExtractedAnswer(Kind k) : kind_(k) {}

  Kind kind_ = Kind::none;
  std::string raw_;
  std::string normalized_;
};

NLOHMANN_JSON_SERIALIZE_ENUM(ExtractedAnswer::Kind, {
                                                        {ExtractedAnswer::Kind::value, "value"},
                                                        {ExtractedAnswer::Kind::agree, "agree"},
                                                        {ExtractedAnswer::Kind::disagree, "disagree"},
                                                        {ExtractedAnswer::Kind::none, "none"},
                                                    })

inline void to_json(nlohmann::json& j, const ExtractedAnswer& a) {
  j = {{"kind", a.kind()}};
  if (a.is_value()) {
    j["raw"] = a.raw();
    j["normalized"] = a.normalized();
  }
}

inline void from_json(const nlohmann::json& j, ExtractedAnswer& a) {
  const auto kind = j.at("kind").get<std::string>();
  if (kind != "value" && kind != "agree" && kind != "disagree" && kind != "none") {
    throw ConfigError("unknown answer kind: " + kind);
  }
  switch (j.at("kind").get<ExtractedAnswer::Kind>()) {
    case ExtractedAnswer::Kind::value:
      a = ExtractedAnswer::value(j.at("raw").get<std::string>());
      break;
    case ExtractedAnswer::Kind::agree:
      a = ExtractedAnswer::agree();
      break;
    case ExtractedAnswer::Kind::disagree:
      a = ExtractedAnswer::disagree();
      break;
    case ExtractedAnswer::Kind::none:
      a = ExtractedAnswer::none();
      break;
  }
}

}  // namespace persuasion
