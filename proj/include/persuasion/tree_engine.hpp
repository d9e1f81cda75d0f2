#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "persuasion/answer.hpp"
#include "persuasion/auxiliary.hpp"
#include "persuasion/backend.hpp"
#include "persuasion/conversation.hpp"
#include "persuasion/dialogue.hpp"
#include "persuasion/error.hpp"
#include "persuasion/prompts.hpp"
#include "persuasion/util.hpp"

namespace persuasion {

struct ExpansionConfig {
  int max_turns = 4;
  std::vector<Strategy> persuader_strategies{Strategy::logical, Strategy::emotional,
                                             Strategy::credible};
  std::vector<Strategy> persuadee_strategies{Strategy::acceptant, Strategy::resistant};
  AgentSpec agent_a;
  AgentSpec agent_b;
  AgentSpec extractor;
  std::uint64_t seed = 0;

  // Also build the tree where B speaks first (a second root).
  bool both_orderings = false;
  // When set, termination asks this judge instead of comparing normalized answers.
  std::optional<AgentSpec> agreement_judge;
  // When set, each branching turn uses a seeded sample of this many strategies.
  std::optional<int> strategies_per_turn;
  // Concurrent sibling generations (backend calls are further bounded by
  // whatever limiter the backends share).
  int parallelism = 1;

  void validate() const {
    if (max_turns < 2) throw ConfigError("max_turns must be >= 2");
    if (persuader_strategies.empty() || persuadee_strategies.empty()) {
      throw ConfigError("strategy lists must be non-empty");
    }
    for (auto s : persuader_strategies) {
      if (role_kind_of(s) != RoleKind::persuader) {
        throw ConfigError(to_string(s) + " is not a persuader strategy");
      }
    }
    for (auto s : persuadee_strategies) {
      if (role_kind_of(s) != RoleKind::persuadee) {
        throw ConfigError(to_string(s) + " is not a persuadee strategy");
      }
    }
    if (strategies_per_turn && *strategies_per_turn < 1) {
      throw ConfigError("strategies_per_turn must be >= 1");
    }
  }
};

/// Turns from index 2 alternate persuader, persuadee, persuader, ...
inline RoleKind role_kind_at_turn(int turn_index) {
  if (turn_index < 2) return RoleKind::neutral;
  return (turn_index - 2) % 2 == 0 ? RoleKind::persuader : RoleKind::persuadee;
}

inline std::string make_node_id(const std::optional<std::string>& parent, int agent_index,
                                int turn_index, Strategy strategy, const std::string& text) {
  Fnv1a h;
  h.field(parent.value_or(""))
      .field(std::to_string(agent_index))
      .field(std::to_string(turn_index))
      .field(to_string(strategy))
      .field(text);
  return h.hex();
}

namespace detail {

struct Generated {
  std::string text;
  ExtractedAnswer answer;
};

inline std::uint64_t call_seed(std::uint64_t run_seed, const AgentSpec& agent,
                               const std::string& parent_id, Strategy strategy) {
  Fnv1a h;
  h.field(std::to_string(run_seed))
      .field(std::to_string(agent.sampling.seed.value_or(0)))
      .field(parent_id)
      .field(to_string(strategy));
  return h.value();
}

inline Generated generate_turn(const Question& q, const AgentSpec& agent, Strategy strategy,
                               const std::vector<Utterance>& history, int self,
                               const ExpansionConfig& cfg, const std::string& parent_id) {
  const std::string system =
      agent.system_prompt.empty() || strategy != Strategy::standard
          ? prompts::role_system_prompt(strategy)
          : agent.system_prompt;
  const auto messages = build_messages(system, prompts::question_line(q.text), history, self);
  Sampling sampling = agent.sampling;
  sampling.seed = call_seed(cfg.seed, agent, parent_id, strategy);
  Generated g;
  g.text = generate(agent.get(), messages, sampling);
  g.answer = extract_answer(cfg.extractor, q.text, g.text).answer;
  return g;
}

inline bool turns_agree(const DialogueTree& tree, const DialogueNode& a, const DialogueNode& b,
                        const ExpansionConfig& cfg) {
  if (cfg.agreement_judge) {
    auto as_answer = [](const DialogueNode& n) {
      return n.resolved_answer ? ExtractedAnswer::value(*n.resolved_answer) : n.answer;
    };
    return !judge_disagreement(*cfg.agreement_judge, tree.question().text, as_answer(a),
                               as_answer(b), tree.question().answer_kind);
  }
  return a.resolved_answer && b.resolved_answer && *a.resolved_answer == *b.resolved_answer;
}

inline std::vector<Strategy> strategies_for(const ExpansionConfig& cfg, RoleKind kind,
                                            const std::string& parent_id) {
  auto pool = kind == RoleKind::persuader ? cfg.persuader_strategies : cfg.persuadee_strategies;
  if (cfg.strategies_per_turn &&
      static_cast<std::size_t>(*cfg.strategies_per_turn) < pool.size()) {
    Fnv1a h;
    h.field(std::to_string(cfg.seed)).field(parent_id).field("strategy-sample");
    SeededRng rng(h.value());
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    idx.resize(static_cast<std::size_t>(*cfg.strategies_per_turn));
    std::sort(idx.begin(), idx.end());
    std::vector<Strategy> picked;
    for (auto i : idx) picked.push_back(pool[i]);
    return picked;
  }
  return pool;
}

inline DialogueNode& attach(DialogueTree& tree, std::optional<std::string> parent, int agent,
                            int turn, Strategy strategy, Generated g) {
  DialogueNode node;
  node.node_id = make_node_id(parent, agent, turn, strategy, g.text);
  node.parent_id = std::move(parent);
  node.agent_index = agent;
  node.turn_index = turn;
  node.role = Role::of(strategy);
  node.response_text = std::move(g.text);
  node.answer = std::move(g.answer);
  auto& added = tree.add(std::move(node));
  added.resolved_answer = resolve_answer(added, tree);
  return added;
}

// Expands every node in `frontier` down to the turn cap, wave by wave.
// Parents whose children could not be generated land in tree.pending.
inline void expand_frontier(DialogueTree& tree, std::vector<std::string> frontier,
                            const ExpansionConfig& cfg) {
  const Question& q = tree.question();
  while (!frontier.empty()) {
    struct Task {
      std::string parent;
      int agent;
      int turn;
      Strategy strategy;
      std::optional<Generated> result;
      std::string error;
    };
    std::vector<Task> tasks;
    for (const auto& pid : frontier) {
      const auto& parent = tree.at(pid);
      const int turn = parent.turn_index + 1;
      const int agent = 1 - parent.agent_index;
      for (auto s : strategies_for(cfg, role_kind_at_turn(turn), pid)) {
        tasks.push_back({pid, agent, turn, s, std::nullopt, {}});
      }
    }
    parallel_for(tasks.size(), cfg.parallelism, [&](std::size_t i) {
      auto& t = tasks[i];
      std::vector<Utterance> history;
      for (const auto* a : tree.ancestors(t.parent)) history.push_back({a->agent_index, a->response_text});
      const auto& parent = tree.at(t.parent);
      history.push_back({parent.agent_index, parent.response_text});
      const AgentSpec& agent = t.agent == 0 ? cfg.agent_a : cfg.agent_b;
      try {
        t.result = generate_turn(q, agent, t.strategy, history, t.agent, cfg, t.parent);
      } catch (const Error& e) {
        t.error = e.what();
      }
    });

    std::vector<std::string> failed;
    for (const auto& t : tasks) {
      if (!t.result && std::find(failed.begin(), failed.end(), t.parent) == failed.end()) {
        failed.push_back(t.parent);
        warn("expansion of node " + t.parent + " failed: " + t.error);
      }
    }
    std::vector<std::string> next;
    for (auto& t : tasks) {
      if (std::find(failed.begin(), failed.end(), t.parent) != failed.end()) continue;
      auto& child = attach(tree, t.parent, t.agent, t.turn, t.strategy, std::move(*t.result));
      const auto& parent = tree.at(t.parent);
      if (turns_agree(tree, child, parent, cfg) || child.turn_index >= tree.max_turns() - 1) {
        child.terminal = true;
      } else {
        next.push_back(child.node_id);
      }
    }
    for (auto& f : failed) {
      tree.pending.push_back(std::move(f));
      tree.complete = false;
    }
    frontier = std::move(next);
  }
}

inline void build_from_roots(DialogueTree& tree, const ExpansionConfig& cfg) {
  const Question& q = tree.question();
  std::optional<Generated> first[2];
  std::string error[2];
  parallel_for(2, cfg.parallelism, [&](std::size_t i) {
    const AgentSpec& agent = i == 0 ? cfg.agent_a : cfg.agent_b;
    try {
      first[i] = generate_turn(q, agent, Strategy::standard, {}, static_cast<int>(i), cfg, "");
    } catch (const Error& e) {
      error[i] = e.what();
    }
  });
  if (!first[0] || !first[1]) {
    warn("independent first turns failed for question " + q.id + ": " + error[0] + error[1]);
    tree.complete = false;
    tree.pending.push_back("");
    return;
  }

  std::vector<std::string> frontier;
  const int orderings = cfg.both_orderings ? 2 : 1;
  for (int lead = 0; lead < orderings; ++lead) {
    const int follow = 1 - lead;
    auto& root = attach(tree, std::nullopt, lead, 0, Strategy::standard, *first[lead]);
    const std::string root_id = root.node_id;
    auto& second = attach(tree, root_id, follow, 1, Strategy::standard, *first[follow]);
    if (turns_agree(tree, second, tree.at(root_id), cfg)) {
      // Agreement on the very first exchange ends the whole dialogue.
      second.terminal = true;
      tree.at(root_id).terminal = true;
    } else if (tree.max_turns() <= 2) {
      second.terminal = true;
    } else {
      frontier.push_back(second.node_id);
    }
  }
  tree.degenerate = !first[0]->answer.is_value() && !first[1]->answer.is_value();
  expand_frontier(tree, std::move(frontier), cfg);
}

}  // namespace detail

/// Builds the dialogue tree for one question. Turns 0 and 1 are generated
/// independently (no context); from turn 2 the responding agent produces one
/// child per strategy, conditioned on the full ancestor chain. A branch stops
/// when its last two turns agree or when it reaches the turn cap.
///
/// Backend failures do not throw: the tree comes back with complete = false
/// and the failed parents in `pending`, ready for resume_tree.
inline DialogueTree expand_tree(const Question& question, const ExpansionConfig& cfg) {
  question.validate();
  cfg.validate();
  DialogueTree tree(question, cfg.max_turns);
  detail::build_from_roots(tree, cfg);
  return tree;
}

/// Continues a partial tree from its pending frontier. Completed nodes are
/// reused verbatim.
inline DialogueTree resume_tree(DialogueTree tree, const ExpansionConfig& cfg) {
  cfg.validate();
  if (tree.complete) return tree;
  auto pending = std::move(tree.pending);
  tree.pending.clear();
  tree.complete = true;
  if (std::find(pending.begin(), pending.end(), "") != pending.end()) {
    return expand_tree(tree.question(), cfg);
  }
  detail::expand_frontier(tree, std::move(pending), cfg);
  return tree;
}

/// Sets is_correct from the resolved answers and score(n) = correct(n) + sum
/// of children's scores, bottom-up. Idempotent. Throws StructuralError on
/// dangling parents or cycles.
inline DialogueTree score_tree(DialogueTree tree) {
  const auto& nodes = tree.nodes();
  for (const auto& n : nodes) {
    if (n.parent_id && tree.find(*n.parent_id) == nullptr) {
      throw StructuralError("node " + n.node_id + " has unknown parent " + *n.parent_id);
    }
  }
  // Post-order from the roots; anything left unvisited sits on a cycle.
  std::vector<std::string> order;
  order.reserve(nodes.size());
  std::vector<std::pair<std::string, bool>> stack;
  for (const auto& r : tree.roots()) stack.emplace_back(r, false);
  std::unordered_map<std::string, bool> seen;
  while (!stack.empty()) {
    auto [id, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      order.push_back(id);
      continue;
    }
    if (seen[id]) throw StructuralError("node " + id + " reached twice");
    seen[id] = true;
    stack.emplace_back(id, true);
    for (const auto& c : tree.children(id)) stack.emplace_back(c, false);
  }
  if (order.size() != nodes.size()) throw StructuralError("cyclic parent links");

  const Question& q = tree.question();
  for (const auto& id : order) {
    auto& n = tree.at(id);
    n.is_correct = n.resolved_answer && q.is_correct(*n.resolved_answer);
    int score = n.is_correct ? 1 : 0;
    for (const auto& c : tree.children(id)) score += tree.at(c).score;
    n.score = score;
  }
  tree.scored = true;
  return tree;
}

}  // namespace persuasion
