#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "persuasion/auxiliary.hpp"
#include "persuasion/dialogue.hpp"
#include "persuasion/error.hpp"
#include "persuasion/util.hpp"

namespace persuasion {

enum class Direction { resist, accept };

NLOHMANN_JSON_SERIALIZE_ENUM(Direction, {
                                            {Direction::resist, "resist"},
                                            {Direction::accept, "accept"},
                                        })

struct ContextTurn {
  std::string speaker;  // "A" or "B"
  std::string text;

  friend bool operator==(const ContextTurn&, const ContextTurn&) = default;
};

inline void to_json(nlohmann::json& j, const ContextTurn& t) {
  j = {{"speaker", t.speaker}, {"text", t.text}};
}
inline void from_json(const nlohmann::json& j, ContextTurn& t) {
  t.speaker = j.at("speaker").get<std::string>();
  t.text = j.at("text").get<std::string>();
}

struct TreeRef {
  std::string file;
  std::string parent_id;
  std::string chosen_id;
  std::string rejected_id;

  friend bool operator==(const TreeRef&, const TreeRef&) = default;
};

struct PreferencePair {
  std::string question_id;
  std::string question;
  std::vector<ContextTurn> context;  // ancestor chain through the shared parent
  std::string winner_text;
  std::string loser_text;
  int winner_score = 0;
  int loser_score = 0;
  // Absent when neither labeling rule applies; such pairs never reach the
  // pairs file.
  std::optional<Direction> direction;
  TreeRef tree_ref;

  friend bool operator==(const PreferencePair&, const PreferencePair&) = default;
};

inline void to_json(nlohmann::json& j, const PreferencePair& p) {
  if (!p.direction) throw PreconditionError("cannot serialize an unlabeled pair");
  j = {{"question_id", p.question_id},
       {"question", p.question},
       {"context", p.context},
       {"chosen", p.winner_text},
       {"rejected", p.loser_text},
       {"direction", *p.direction},
       {"winner_score", p.winner_score},
       {"loser_score", p.loser_score},
       {"tree_ref",
        {{"file", p.tree_ref.file},
         {"parent_id", p.tree_ref.parent_id},
         {"chosen_id", p.tree_ref.chosen_id},
         {"rejected_id", p.tree_ref.rejected_id}}}};
}

inline void from_json(const nlohmann::json& j, PreferencePair& p) {
  p.question_id = j.at("question_id").get<std::string>();
  p.question = j.value("question", "");
  p.context = j.at("context").get<std::vector<ContextTurn>>();
  p.winner_text = j.at("chosen").get<std::string>();
  p.loser_text = j.at("rejected").get<std::string>();
  const auto dir = j.at("direction").get<std::string>();
  if (dir != "resist" && dir != "accept") throw ConfigError("unknown direction " + dir);
  p.direction = j.at("direction").get<Direction>();
  p.winner_score = j.at("winner_score").get<int>();
  p.loser_score = j.at("loser_score").get<int>();
  const auto& r = j.at("tree_ref");
  p.tree_ref = {r.at("file").get<std::string>(), r.at("parent_id").get<std::string>(),
                r.at("chosen_id").get<std::string>(), r.at("rejected_id").get<std::string>()};
}

/// Labels a sibling pair. The context answer is the responding agent's own
/// standing answer (the grandparent turn).
///   resist: context answer correct, loser moves to a different wrong answer.
///   accept: context answer not correct, winner moves to a correct answer.
///   otherwise resist if the winner keeps the context answer, else unlabeled.
inline std::optional<Direction> label_direction(const DialogueTree& tree,
                                                const DialogueNode& winner,
                                                const DialogueNode& loser) {
  const Question& q = tree.question();
  std::optional<std::string> ctx;
  if (winner.parent_id) {
    const auto& parent = tree.at(*winner.parent_id);
    if (parent.parent_id) ctx = tree.at(*parent.parent_id).resolved_answer;
  }
  auto correct = [&](const std::optional<std::string>& a) { return a && q.is_correct(*a); };

  if (correct(ctx) && loser.resolved_answer && *loser.resolved_answer != *ctx &&
      !correct(loser.resolved_answer)) {
    return Direction::resist;
  }
  if (!correct(ctx) && winner.resolved_answer && winner.resolved_answer != ctx &&
      correct(winner.resolved_answer)) {
    return Direction::accept;
  }
  if (ctx && winner.resolved_answer == ctx) return Direction::resist;
  return std::nullopt;
}

// The answer a node expresses for disagreement judging: its resolved text
// when there is one, otherwise the bare sentinel.
inline ExtractedAnswer expressed_answer(const DialogueNode& n) {
  return n.resolved_answer ? ExtractedAnswer::value(*n.resolved_answer) : n.answer;
}

inline std::vector<ContextTurn> context_of(const DialogueTree& tree, const std::string& parent_id) {
  std::vector<ContextTurn> ctx;
  auto push = [&](const DialogueNode& n) {
    ctx.push_back({n.agent_index == 0 ? "A" : "B", n.response_text});
  };
  for (const auto* a : tree.ancestors(parent_id)) push(*a);
  push(tree.at(parent_id));
  return ctx;
}

/// Every ordered sibling pair with a strictly higher winner score whose
/// answers the judge deems genuinely different. Ties yield nothing.
inline std::vector<PreferencePair> extract_pairs(const DialogueTree& tree, const AgentSpec& judge,
                                                 const std::string& tree_file = {}) {
  if (!tree.scored) throw PreconditionError("extract_pairs: tree is not scored");
  const Question& q = tree.question();
  std::vector<PreferencePair> pairs;
  for (const auto& parent : tree.nodes()) {
    const auto& kids = tree.children(parent.node_id);
    if (kids.size() < 2) continue;
    std::optional<std::vector<ContextTurn>> ctx;
    for (std::size_t i = 0; i < kids.size(); ++i) {
      for (std::size_t j = i + 1; j < kids.size(); ++j) {
        const auto* a = &tree.at(kids[i]);
        const auto* b = &tree.at(kids[j]);
        if (a->score == b->score) continue;
        if (a->score < b->score) std::swap(a, b);
        if (!judge_disagreement(judge, q.text, expressed_answer(*a), expressed_answer(*b),
                                q.answer_kind)) {
          continue;
        }
        if (!ctx) ctx = context_of(tree, parent.node_id);
        PreferencePair p;
        p.question_id = q.id;
        p.question = q.text;
        p.context = *ctx;
        p.winner_text = a->response_text;
        p.loser_text = b->response_text;
        p.winner_score = a->score;
        p.loser_score = b->score;
        p.direction = label_direction(tree, *a, *b);
        p.tree_ref = {tree_file, parent.node_id, a->node_id, b->node_id};
        pairs.push_back(std::move(p));
      }
    }
  }
  return pairs;
}

/// Re-checks emitted pairs against their tree: shared parent, strict score
/// order, stored scores and texts, judged disagreement. Returns one message
/// per violation.
inline std::vector<std::string> validate_pairs(const DialogueTree& tree,
                                               const std::vector<PreferencePair>& pairs,
                                               const AgentSpec& judge) {
  std::vector<std::string> violations;
  for (const auto& p : pairs) {
    const auto tag = p.tree_ref.chosen_id + "/" + p.tree_ref.rejected_id + ": ";
    const auto* w = tree.find(p.tree_ref.chosen_id);
    const auto* l = tree.find(p.tree_ref.rejected_id);
    if (w == nullptr || l == nullptr) {
      violations.push_back(tag + "node missing from tree");
      continue;
    }
    if (!w->parent_id || w->parent_id != l->parent_id || *w->parent_id != p.tree_ref.parent_id) {
      violations.push_back(tag + "not siblings under the recorded parent");
    }
    if (!(w->score > l->score) || !(p.winner_score > p.loser_score)) {
      violations.push_back(tag + "score not strictly ordered");
    }
    if (w->score != p.winner_score || l->score != p.loser_score) {
      violations.push_back(tag + "scores differ from tree");
    }
    if (w->response_text != p.winner_text || l->response_text != p.loser_text) {
      violations.push_back(tag + "texts differ from tree");
    }
    if (!judge_disagreement(judge, tree.question().text, expressed_answer(*w),
                            expressed_answer(*l), tree.question().answer_kind)) {
      violations.push_back(tag + "answers do not disagree");
    }
    if (p.question_id != tree.question().id) violations.push_back(tag + "question id mismatch");
  }
  return violations;
}

/// Keeps every pair of the minority direction and a seeded uniform sample
/// of the majority of the same size; unlabeled pairs are dropped. Output is
/// a subsequence of the input. One direction empty -> empty result.
inline std::vector<PreferencePair> balance_pairs(const std::vector<PreferencePair>& pairs,
                                                 std::uint64_t seed) {
  std::vector<std::size_t> resist, accept;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (!pairs[i].direction) continue;
    (*pairs[i].direction == Direction::resist ? resist : accept).push_back(i);
  }
  if (resist.empty() || accept.empty()) {
    if (!pairs.empty()) {
      warn("balance_pairs: one direction has no pairs (resist=" + std::to_string(resist.size()) +
           ", accept=" + std::to_string(accept.size()) + "), returning nothing");
    }
    return {};
  }
  auto& majority = resist.size() >= accept.size() ? resist : accept;
  const auto& minority = resist.size() >= accept.size() ? accept : resist;
  SeededRng rng(seed);
  rng.shuffle(majority);
  majority.resize(minority.size());

  std::vector<std::size_t> keep(minority.begin(), minority.end());
  keep.insert(keep.end(), majority.begin(), majority.end());
  std::sort(keep.begin(), keep.end());
  std::vector<PreferencePair> out;
  out.reserve(keep.size());
  for (auto i : keep) out.push_back(pairs[i]);
  return out;
}

struct SftExample {
  std::vector<ContextTurn> context;
  std::string completion;

  friend bool operator==(const SftExample&, const SftExample&) = default;
};

inline void to_json(nlohmann::json& j, const SftExample& e) {
  j = {{"context", e.context}, {"completion", e.completion}};
}
inline void from_json(const nlohmann::json& j, SftExample& e) {
  e.context = j.at("context").get<std::vector<ContextTurn>>();
  e.completion = j.at("completion").get<std::string>();
}

/// Positive side of each pair, deduplicated on (context, winner text).
inline std::vector<SftExample> sft_examples(const std::vector<PreferencePair>& pairs) {
  std::set<std::pair<std::string, std::string>> seen;
  std::vector<SftExample> out;
  for (const auto& p : pairs) {
    Fnv1a h;
    for (const auto& t : p.context) h.field(t.speaker).field(t.text);
    if (!seen.emplace(h.hex(), p.winner_text).second) continue;
    out.push_back({p.context, p.winner_text});
  }
  return out;
}

struct DpoLossInputs {
  double beta = 0.1;
  double logp_policy_winner = 0.0;
  double logp_policy_loser = 0.0;
  double logp_ref_winner = 0.0;
  double logp_ref_loser = 0.0;

  double margin() const {
    return (logp_policy_winner - logp_ref_winner) - (logp_policy_loser - logp_ref_loser);
  }
};

/// -log sigmoid(beta * margin), computed without overflow.
inline double dpo_loss(const DpoLossInputs& in) {
  if (!(in.beta > 0.0) || !std::isfinite(in.beta)) throw DomainError("dpo_loss: beta must be > 0");
  for (double lp : {in.logp_policy_winner, in.logp_policy_loser, in.logp_ref_winner,
                    in.logp_ref_loser}) {
    if (!std::isfinite(lp)) throw DomainError("dpo_loss: non-finite log-probability");
    if (lp > 0.0) throw DomainError("dpo_loss: log-probability above zero");
  }
  const double z = in.beta * in.margin();
  return z > 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

}  // namespace persuasion
