#pragma once

#include <string>
#include <vector>

#include "persuasion/backend.hpp"

namespace persuasion {

struct Utterance {
  int speaker = 0;
  std::string text;
};

/// Lays a two-party dialogue out as chat messages from `self`'s point of
/// view: system prompt, the opening user message, then every utterance with
/// self's turns as assistant and the partner's as user. Adjacent messages
/// with the same role are merged, since independent first turns can put two
/// user messages back to back.
inline std::vector<ChatMessage> build_messages(const std::string& system_prompt,
                                               const std::string& opening,
                                               const std::vector<Utterance>& history, int self) {
  std::vector<ChatMessage> out;
  if (!system_prompt.empty()) out.push_back({ChatRole::system, system_prompt});
  out.push_back({ChatRole::user, opening});
  for (const auto& u : history) {
    const ChatRole role = u.speaker == self ? ChatRole::assistant : ChatRole::user;
    if (out.back().role == role) {
      out.back().content += "\n\n";
      out.back().content += u.text;
    } else {
      out.push_back({role, u.text});
    }
  }
  return out;
}

}  // namespace persuasion
