#pragma once

#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "persuasion/answer.hpp"
#include "persuasion/error.hpp"

namespace persuasion {

struct DialogueNode {
  std::string node_id;
  std::optional<std::string> parent_id;
  int agent_index = 0;  // 0 = agent A, 1 = agent B
  int turn_index = 0;
  Role role;
  std::string response_text;
  ExtractedAnswer answer;
  std::optional<std::string> resolved_answer;
  bool is_correct = false;
  int score = 0;
  bool terminal = false;

  friend bool operator==(const DialogueNode&, const DialogueNode&) = default;
};

inline void to_json(nlohmann::json& j, const DialogueNode& n) {
  j = {{"node_id", n.node_id},
       {"parent_id", n.parent_id ? nlohmann::json(*n.parent_id) : nlohmann::json(nullptr)},
       {"agent_index", n.agent_index},
       {"turn_index", n.turn_index},
       {"role", n.role},
       {"response_text", n.response_text},
       {"answer", n.answer},
       {"resolved_answer",
        n.resolved_answer ? nlohmann::json(*n.resolved_answer) : nlohmann::json(nullptr)},
       {"is_correct", n.is_correct},
       {"score", n.score},
       {"terminal", n.terminal}};
}

inline void from_json(const nlohmann::json& j, DialogueNode& n) {
  n.node_id = j.at("node_id").get<std::string>();
  const auto& parent = j.at("parent_id");
  n.parent_id = parent.is_null() ? std::nullopt
                                 : std::optional<std::string>(parent.get<std::string>());
  n.agent_index = j.at("agent_index").get<int>();
  n.turn_index = j.at("turn_index").get<int>();
  n.role = j.at("role").get<Role>();
  n.response_text = j.at("response_text").get<std::string>();
  n.answer = j.at("answer").get<ExtractedAnswer>();
  const auto& resolved = j.at("resolved_answer");
  n.resolved_answer = resolved.is_null()
                          ? std::nullopt
                          : std::optional<std::string>(resolved.get<std::string>());
  n.is_correct = j.at("is_correct").get<bool>();
  n.score = j.at("score").get<int>();
  n.terminal = j.at("terminal").get<bool>();
  if (n.agent_index != 0 && n.agent_index != 1) {
    throw ConfigError("node " + n.node_id + ": agent_index must be 0 or 1");
  }
  if (n.turn_index < 0 || n.score < 0) {
    throw ConfigError("node " + n.node_id + ": negative turn_index or score");
  }
}

/// Forest of dialogue turns for one question. Nodes keep insertion order,
/// which is the order they are written to disk.
class DialogueTree {
 public:
  DialogueTree() = default;
  DialogueTree(Question question, int max_turns)
      : question_(std::move(question)), max_turns_(max_turns) {}

  const Question& question() const noexcept { return question_; }
  int max_turns() const noexcept { return max_turns_; }
  const std::vector<DialogueNode>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }

  const DialogueNode* find(const std::string& id) const {
    const auto it = index_.find(id);
    return it == index_.end() ? nullptr : &nodes_[it->second];
  }
  DialogueNode* find(const std::string& id) {
    const auto it = index_.find(id);
    return it == index_.end() ? nullptr : &nodes_[it->second];
  }
  const DialogueNode& at(const std::string& id) const {
    const auto* n = find(id);
    if (n == nullptr) throw StructuralError("unknown node id " + id);
    return *n;
  }
  DialogueNode& at(const std::string& id) {
    auto* n = find(id);
    if (n == nullptr) throw StructuralError("unknown node id " + id);
    return *n;
  }

  // Adds a node; the caller guarantees the id is new. Parent need not exist
  // yet when loading from disk, structure is checked by score_tree.
  DialogueNode& add(DialogueNode node) {
    if (index_.count(node.node_id) != 0) {
      throw StructuralError("duplicate node id " + node.node_id);
    }
    if (node.turn_index >= max_turns_) {
      throw StructuralError("node " + node.node_id + " exceeds max_turns");
    }
    index_.emplace(node.node_id, nodes_.size());
    if (node.parent_id) {
      children_[*node.parent_id].push_back(node.node_id);
    } else {
      roots_.push_back(node.node_id);
    }
    nodes_.push_back(std::move(node));
    return nodes_.back();
  }

  const std::vector<std::string>& children(const std::string& id) const {
    static const std::vector<std::string> empty;
    const auto it = children_.find(id);
    return it == children_.end() ? empty : it->second;
  }
  const std::vector<std::string>& roots() const noexcept { return roots_; }

  // Ancestors of `id`, oldest first, excluding the node itself.
  std::vector<const DialogueNode*> ancestors(const std::string& id) const {
    std::vector<const DialogueNode*> chain;
    const DialogueNode* cur = &at(id);
    while (cur->parent_id) {
      cur = &at(*cur->parent_id);
      chain.push_back(cur);
      if (chain.size() > nodes_.size()) throw StructuralError("cycle in parent links");
    }
    return {chain.rbegin(), chain.rend()};
  }

  // Run bookkeeping persisted in the tree file header.
  bool scored = false;
  bool degenerate = false;
  bool complete = true;
  std::vector<std::string> pending;  // parents whose expansion failed; "" = root stage
  std::string config_hash;

 private:
  Question question_;
  int max_turns_ = 4;
  std::vector<DialogueNode> nodes_;
  std::unordered_map<std::string, std::size_t> index_;
  std::unordered_map<std::string, std::vector<std::string>> children_;
  std::vector<std::string> roots_;
};

using NodeLookup = std::function<const DialogueNode*(const std::string&)>;

/// Resolves sentinels against the ancestor chain: value -> normalized text,
/// agree -> parent's resolved answer, disagree/none -> absent. Turns 0 and 1
/// are produced independently, so an agree there has nothing to inherit.
/// Only ever calls `lookup` on ancestors of `node`.
inline std::optional<std::string> resolve_answer(const DialogueNode& node, AnswerKind kind,
                                                 const NodeLookup& lookup) {
  const DialogueNode* cur = &node;
  for (std::size_t steps = 0;; ++steps) {
    switch (cur->answer.kind()) {
      case ExtractedAnswer::Kind::value:
        return normalize_answer(cur->answer.raw(), kind);
      case ExtractedAnswer::Kind::disagree:
      case ExtractedAnswer::Kind::none:
        return std::nullopt;
      case ExtractedAnswer::Kind::agree:
        break;
    }
    if (cur->turn_index <= 1 || !cur->parent_id) return std::nullopt;
    const DialogueNode* parent = lookup(*cur->parent_id);
    if (parent == nullptr) throw StructuralError("missing parent " + *cur->parent_id);
    cur = parent;
    if (steps > 1'000'000) throw StructuralError("cycle while resolving answer");
  }
}

inline std::optional<std::string> resolve_answer(const DialogueNode& node,
                                                 const DialogueTree& tree) {
  return resolve_answer(node, tree.question().answer_kind,
                        [&tree](const std::string& id) { return tree.find(id); });
}

}  // namespace persuasion
