#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "persuasion/dialogue.hpp"
#include "persuasion/jsonl.hpp"

// Tree files: a header line followed by one DialogueNode object per line.
namespace persuasion {

inline nlohmann::json tree_header(const DialogueTree& tree) {
  return {{"header",
           {{"question", tree.question()},
            {"config_hash", tree.config_hash},
            {"max_turns", tree.max_turns()},
            {"status", tree.complete ? "complete" : "partial"},
            {"scored", tree.scored},
            {"degenerate", tree.degenerate},
            {"pending", tree.pending}}}};
}

inline std::string serialize_tree(const DialogueTree& tree) {
  std::string out = tree_header(tree).dump();
  out += '\n';
  for (const auto& n : tree.nodes()) {
    out += nlohmann::json(n).dump();
    out += '\n';
  }
  return out;
}

inline DialogueTree parse_tree(const std::vector<nlohmann::json>& lines) {
  if (lines.empty() || !lines.front().contains("header")) {
    throw ConfigError("tree file lacks a header line");
  }
  const auto& h = lines.front()["header"];
  auto question = h.at("question").get<Question>();
  question.validate();
  DialogueTree tree(std::move(question), h.at("max_turns").get<int>());
  tree.config_hash = h.value("config_hash", "");
  tree.complete = h.value("status", "complete") == "complete";
  tree.scored = h.value("scored", false);
  tree.degenerate = h.value("degenerate", false);
  tree.pending = h.value("pending", std::vector<std::string>{});
  for (std::size_t i = 1; i < lines.size(); ++i) tree.add(lines[i].get<DialogueNode>());
  return tree;
}

inline void write_tree(const DialogueTree& tree, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_tree(tree));
}

inline DialogueTree read_tree(const std::filesystem::path& path) {
  auto read = read_jsonl(path);
  if (read.malformed != 0) throw ConfigError("malformed line in tree file " + path.string());
  try {
    return parse_tree(read.records);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad tree file " + path.string() + ": " + e.what());
  }
}

}  // namespace persuasion
