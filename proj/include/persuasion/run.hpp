#pragma once

// Run configuration, output-directory manifest and the pipeline commands
// behind the persuade CLI. Commands return process exit codes:
// 0 success, 1 configuration/input error, 2 partial completion.

#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "persuasion/eval.hpp"
#include "persuasion/flip_analysis.hpp"
#include "persuasion/http_backend.hpp"
#include "persuasion/preference.hpp"
#include "persuasion/tree_engine.hpp"
#include "persuasion/tree_store.hpp"

namespace persuasion {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 1;
inline constexpr int kExitPartial = 2;
inline constexpr double kMalformedLimit = 0.05;

struct RunConfig {
  nlohmann::json doc;   // the config file as parsed
  fs::path base_dir;    // relative paths in the config resolve against this
  std::uint64_t seed = 0;
  int max_inflight = 8;
  RetryPolicy retry;

  const nlohmann::json& section(const std::string& name) const {
    static const nlohmann::json empty = nlohmann::json::object();
    const auto it = doc.find(name);
    return it == doc.end() ? empty : *it;
  }

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }

  bool has_agent(const std::string& role) const { return section("agents").contains(role); }

  int budget(const std::string& name, int fallback) const {
    return section("budgets").value(name, fallback);
  }

  // Everything that influences outputs: the document with the effective seed
  // and the contents of every scripted backend's script. The in-flight bound
  // and output location do not change results and are left out.
  std::string hash() const {
    auto canon = doc;
    canon["seed"] = seed;
    canon.erase("max_inflight");
    if (canon.contains("paths")) canon["paths"].erase("out");
    Fnv1a h;
    h.field(canon.dump());
    for (const auto& [name, b] : section("backends").items()) {
      if (b.value("type", "") == "scripted" && b.contains("script")) {
        h.field(name).field(read_file(resolve(b["script"].get<std::string>())));
      }
    }
    return h.hex();
  }
};

inline void validate_run_config(const RunConfig& cfg) {
  const auto& d = cfg.doc;
  if (!d.is_object()) throw ConfigError("config must be a JSON object");
  if (!d.contains("seed") || !d["seed"].is_number_unsigned()) {
    throw ConfigError("config needs an explicit non-negative integer \"seed\"");
  }
  const auto& backends = cfg.section("backends");
  if (!backends.is_object() || backends.empty()) throw ConfigError("config declares no backends");
  for (const auto& [name, b] : backends.items()) {
    const auto type = b.value("type", "");
    if (type == "scripted") {
      if (!b.contains("script")) throw ConfigError("scripted backend " + name + " needs \"script\"");
    } else if (type == "http") {
      if (!b.contains("base_url") || !b.contains("model")) {
        throw ConfigError("http backend " + name + " needs \"base_url\" and \"model\"");
      }
    } else {
      throw ConfigError("backend " + name + " has unknown type \"" + type + "\"");
    }
  }
  for (const auto& [role, a] : cfg.section("agents").items()) {
    if (!a.contains("backend")) throw ConfigError("agent " + role + " names no backend");
    const auto ref = a["backend"].get<std::string>();
    if (!backends.contains(ref)) {
      throw ConfigError("agent " + role + " references undeclared backend " + ref);
    }
  }
  if (cfg.max_inflight < 1) throw ConfigError("max_inflight must be >= 1");
}

/// Reads a config file; `seed` and `max_inflight` overrides come from flags.
inline RunConfig load_run_config(const fs::path& path, std::optional<std::uint64_t> seed = {},
                                 std::optional<int> max_inflight = {}) {
  RunConfig cfg;
  try {
    cfg.doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  cfg.base_dir = fs::absolute(path).parent_path();
  if (seed) cfg.doc["seed"] = *seed;
  cfg.max_inflight = max_inflight.value_or(cfg.doc.value("max_inflight", 8));
  try {
    validate_run_config(cfg);
    cfg.seed = cfg.doc["seed"].get<std::uint64_t>();
    const auto& r = cfg.section("retry");
    cfg.retry.retries = r.value("retries", 3);
    cfg.retry.initial_backoff = std::chrono::milliseconds(r.value("initial_backoff_ms", 1000));
    cfg.retry.multiplier = r.value("multiplier", 2.0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad config " + path.string() + ": " + e.what());
  }
  return cfg;
}

// Backends are built on first use, so a config may declare HTTP backends
// whose API keys are only needed by other commands.
class Runtime {
 public:
  explicit Runtime(const RunConfig& cfg)
      : cfg_(cfg), limiter_(std::make_shared<InflightLimiter>(cfg.max_inflight)) {}

  std::shared_ptr<Backend> backend(const std::string& name) {
    std::lock_guard lock(mutex_);
    if (auto it = backends_.find(name); it != backends_.end()) return it->second;
    const auto& b = cfg_.section("backends").at(name);
    std::shared_ptr<Backend> inner;
    if (b.at("type") == "scripted") {
      const auto script_path = cfg_.resolve(b.at("script").get<std::string>());
      nlohmann::json script;
      try {
        script = nlohmann::json::parse(read_file(script_path));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("malformed script file " + script_path.string() + ": " + e.what());
      }
      inner = std::make_shared<ScriptedBackend>(script, name);
    } else {
      HttpEndpoint ep;
      ep.base_url = b.at("base_url").get<std::string>();
      ep.model = b.at("model").get<std::string>();
      ep.api_key_env = b.value("api_key_env", "");
      ep.timeout_seconds = b.value("timeout_seconds", 120);
      const auto caps = b.contains("capabilities") ? Capabilities::parse(b["capabilities"])
                                                   : Capabilities{true, false, false};
      inner = std::make_shared<HttpBackend>(ep, caps, cfg_.retry);
    }
    auto throttled = std::make_shared<ThrottledBackend>(inner, limiter_);
    backends_[name] = throttled;
    return throttled;
  }

  AgentSpec agent(const std::string& role) {
    const auto& agents = cfg_.section("agents");
    if (!agents.contains(role)) throw ConfigError("config has no agent for role \"" + role + "\"");
    const auto& a = agents[role];
    AgentSpec spec;
    spec.name = a.value("name", role);
    spec.backend = backend(a.at("backend").get<std::string>());
    spec.system_prompt = a.value("system_prompt", "");
    spec.sampling.temperature = a.value("temperature", 0.0);
    spec.sampling.max_tokens = a.value("max_tokens", cfg_.budget("default", 80));
    if (a.contains("seed")) spec.sampling.seed = a["seed"].get<std::uint64_t>();
    return spec;
  }

  // The first configured role among `roles`.
  AgentSpec agent_any(std::initializer_list<const char*> roles) {
    for (const char* r : roles) {
      if (cfg_.has_agent(r)) return agent(r);
    }
    return agent(*roles.begin());
  }

  nlohmann::json backend_versions() {
    nlohmann::json out = nlohmann::json::object();
    std::lock_guard lock(mutex_);
    for (const auto& [name, b] : backends_) out[name] = b->describe();
    return out;
  }

 private:
  RunConfig cfg_;
  std::shared_ptr<InflightLimiter> limiter_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Backend>> backends_;
};

/// manifest.json at the root of an output directory. It pins the config
/// hash, and every output file gets an entry naming the hash and command
/// that produced it.
class Manifest {
 public:
  Manifest(fs::path dir, const RunConfig& cfg) : dir_(std::move(dir)), hash_(cfg.hash()) {
    const auto path = dir_ / "manifest.json";
    if (fs::exists(path)) {
      try {
        doc_ = nlohmann::json::parse(read_file(path));
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("unreadable manifest " + path.string() + ": " + e.what());
      }
      const auto existing = doc_.value("config_hash", "");
      if (existing != hash_) {
        throw ConfigError("output directory " + dir_.string() + " holds results of config " + existing +
                          ", not " + hash_ + "; refusing to mix configs (use another --out)");
      }
    } else {
      doc_ = {{"config_hash", hash_}, {"files", nlohmann::json::object()}};
    }
    auto canon = cfg.doc;
    canon["seed"] = cfg.seed;
    canon.erase("max_inflight");
    doc_["config"] = canon;
    doc_["seed"] = cfg.seed;
    doc_["retry"] = {{"retries", cfg.retry.retries},
                     {"initial_backoff_ms", cfg.retry.initial_backoff.count()},
                     {"multiplier", cfg.retry.multiplier}};
  }

  const std::string& config_hash() const { return hash_; }
  const fs::path& dir() const { return dir_; }

  std::string file_status(const std::string& rel) const {
    std::lock_guard lock(mutex_);
    const auto& files = doc_["files"];
    return files.contains(rel) ? files[rel].value("status", "") : "";
  }

  nlohmann::json section(const std::string& name) const {
    std::lock_guard lock(mutex_);
    return doc_.value(name, nlohmann::json::object());
  }

  // Writes `contents` to dir/rel atomically and records it.
  void write(const std::string& rel, const std::string& contents, const std::string& command,
             bool complete = true) {
    write_file_atomic(dir_ / rel, contents);
    record(rel, command, complete);
  }

  void record(const std::string& rel, const std::string& command, bool complete = true) {
    std::lock_guard lock(mutex_);
    doc_["files"][rel] = {{"config_hash", hash_}, {"command", command},
                          {"status", complete ? "complete" : "partial"}};
    save_locked();
  }

  void set_section(const std::string& name, nlohmann::json value) {
    std::lock_guard lock(mutex_);
    doc_[name] = std::move(value);
    save_locked();
  }

  void set_backends(const nlohmann::json& versions) {
    std::lock_guard lock(mutex_);
    for (const auto& [k, v] : versions.items()) doc_["backends"][k] = v;
    save_locked();
  }

 private:
  void save_locked() { write_file_atomic(dir_ / "manifest.json", doc_.dump(2) + "\n"); }

  fs::path dir_;
  std::string hash_;
  nlohmann::json doc_;
  mutable std::mutex mutex_;
};

struct CommandOptions {
  fs::path out_dir;
  bool no_balance = false;
  bool swap_orders = false;
};

namespace detail {

// Question ids become file names; anything outside a safe set is replaced
// and a hash suffix keeps distinct ids distinct.
inline std::string file_stem(const std::string& id) {
  std::string out;
  bool changed = id.empty() || id[0] == '.';
  for (char c : id) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.') {
      out.push_back(c);
    } else {
      out.push_back('_');
      changed = true;
    }
  }
  if (changed) out += "-" + fnv1a_hex(id).substr(0, 8);
  return out;
}

inline std::vector<Strategy> strategies_of(const nlohmann::json& names, std::vector<Strategy> fallback) {
  if (names.is_null()) return fallback;
  std::vector<Strategy> out;
  for (const auto& n : names) out.push_back(parse_strategy(n.get<std::string>()));
  return out;
}

template <typename T>
ParsedFile<T> read_inputs(const RunConfig& cfg, const std::string& path_key, const nlohmann::json& paths) {
  if (!paths.contains(path_key)) throw ConfigError("config paths lack \"" + path_key + "\"");
  return read_records<T>(cfg.resolve(paths[path_key].get<std::string>()));
}

inline bool too_malformed(std::size_t malformed, std::size_t total) {
  return total > 0 && static_cast<double>(malformed) > kMalformedLimit * static_cast<double>(total);
}

inline std::string percent_text(double points) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.2f points", points);
  return buf;
}

inline std::vector<std::string> summary_lines(const std::string& suite, const nlohmann::json& m,
                                              const std::string& prefix = "") {
  auto rat = [&](const char* key) {
    const auto& r = m.at(key);
    return Rational(r.at("num").get<std::int64_t>(), r.at("den").get<std::int64_t>());
  };
  auto ratio_line = [&](const std::string& label, const char* key) {
    const auto& r = m.at(key);
    if (r.at("den").get<std::int64_t>() == 0) return prefix + label + ": 0/0 (no valid probes)";
    return prefix + summary_line(label, rat(key));
  };
  std::vector<std::string> out;
  if (suite == "flipflop") {
    out.push_back(ratio_line("accuracy before challenge", "before"));
    out.push_back(ratio_line("accuracy after challenge", "after"));
    out.push_back(prefix + "flipflop diff: " + percent_text(m.at("diff_points").get<double>()));
  } else if (suite == "misinfo") {
    out.push_back(ratio_line("misinformation rate", "misinformation_rate"));
  } else if (suite == "balanced") {
    out.push_back(ratio_line("accuracy +->-", "acc_pos_to_neg"));
    out.push_back(ratio_line("accuracy -->+", "acc_neg_to_pos"));
    out.push_back(ratio_line("balanced accuracy", "overall"));
  } else {
    out.push_back(ratio_line("initial accuracy, first agent", "initial_first"));
    out.push_back(ratio_line("initial accuracy, second agent", "initial_second"));
    out.push_back(ratio_line("final accuracy, first agent", "final_first"));
    out.push_back(ratio_line("final accuracy, second agent", "final_second"));
  }
  if (m.value("invalid", 0) > 0) out.push_back(prefix + "invalid probes: " + std::to_string(m["invalid"].get<int>()));
  return out;
}

// Team reports with both orderings label each block with its agent order.
inline void print_summary(const std::string& suite, const nlohmann::json& report, std::ostream& out) {
  auto order = [](const nlohmann::json& r) {
    return "[" + r.value("first_agent", "") + " then " + r.value("second_agent", "") + "] ";
  };
  const bool swapped = report.contains("swapped");
  for (const auto& l : summary_lines(suite, report["metrics"], swapped ? order(report) : "")) out << l << "\n";
  if (swapped) {
    for (const auto& l : summary_lines(suite, report["swapped"]["metrics"], order(report["swapped"]))) {
      out << l << "\n";
    }
  }
}

}  // namespace detail

inline int cmd_gen(const RunConfig& cfg, const CommandOptions& opt, std::ostream& out) {
  Runtime rt(cfg);
  Manifest manifest(opt.out_dir, cfg);
  const auto& paths = cfg.section("paths");
  auto questions = detail::read_inputs<Question>(cfg, "questions", paths);
  if (questions.items.empty()) {
    warn("no questions to expand");
    out << "gen: 0 questions, nothing to do\n";
    manifest.set_section("gen", {{"completed", nlohmann::json::array()}, {"partial", nlohmann::json::array()}});
    return questions.malformed > 0 ? kExitPartial : kExitOk;
  }

  const auto& g = cfg.section("gen");
  ExpansionConfig ec;
  ec.max_turns = g.value("max_turns", 4);
  ec.persuader_strategies = detail::strategies_of(g.value("persuader_strategies", nlohmann::json()),
                                                  ec.persuader_strategies);
  ec.persuadee_strategies = detail::strategies_of(g.value("persuadee_strategies", nlohmann::json()),
                                                  ec.persuadee_strategies);
  ec.both_orderings = g.value("both_orderings", false);
  if (g.contains("strategies_per_turn")) ec.strategies_per_turn = g["strategies_per_turn"].get<int>();
  ec.agent_a = rt.agent("agent_a");
  ec.agent_b = rt.agent("agent_b");
  ec.extractor = rt.agent("extractor");
  if (g.value("agreement_judge", false)) ec.agreement_judge = rt.agent("judge");
  ec.seed = cfg.seed;
  ec.parallelism = cfg.max_inflight;
  ec.validate();

  const auto prior = manifest.section("gen");
  std::set<std::string> completed;
  for (const auto& id : prior.value("completed", nlohmann::json::array())) completed.insert(id.get<std::string>());
  std::set<std::string> partial;
  std::mutex mutex;
  std::size_t skipped = 0, built = 0;

  auto save_progress = [&] {
    manifest.set_section("gen", {{"completed", completed}, {"partial", partial}});
  };

  parallel_for(questions.items.size(), cfg.max_inflight, [&](std::size_t i) {
    const auto& q = questions.items[i];
    const std::string rel = "trees/" + detail::file_stem(q.id) + ".jsonl";
    const auto path = opt.out_dir / rel;
    {
      std::lock_guard lock(mutex);
      if (completed.count(q.id) && fs::exists(path)) {
        ++skipped;
        return;
      }
    }
    DialogueTree tree;
    if (fs::exists(path)) {
      auto previous = read_tree(path);
      if (previous.config_hash != manifest.config_hash()) {
        throw ConfigError(rel + " was produced by config " + previous.config_hash);
      }
      tree = resume_tree(std::move(previous), ec);
    } else {
      tree = expand_tree(q, ec);
    }
    tree.config_hash = manifest.config_hash();
    if (tree.complete) tree = score_tree(std::move(tree));
    manifest.write(rel, serialize_tree(tree), "gen", tree.complete);
    std::lock_guard lock(mutex);
    ++built;
    if (tree.complete) {
      completed.insert(q.id);
      partial.erase(q.id);
    } else {
      partial.insert(q.id);
    }
    save_progress();
  });
  save_progress();
  manifest.set_backends(rt.backend_versions());

  out << "gen: " << completed.size() << " of " << questions.items.size() << " trees complete (" << built
      << " written, " << skipped << " already complete), " << partial.size() << " partial\n";
  if (questions.malformed > 0) out << "gen: skipped " << questions.malformed << " malformed question lines\n";
  if (!partial.empty()) return kExitPartial;
  if (detail::too_malformed(questions.malformed, questions.total)) return kExitPartial;
  return kExitOk;
}

inline int cmd_pairs(const RunConfig& cfg, const CommandOptions& opt, std::ostream& out) {
  Runtime rt(cfg);
  Manifest manifest(opt.out_dir, cfg);
  const auto tree_dir = opt.out_dir / "trees";
  std::vector<fs::path> files;
  if (fs::is_directory(tree_dir)) {
    for (const auto& e : fs::directory_iterator(tree_dir)) {
      if (e.path().extension() == ".jsonl") files.push_back(e.path());
    }
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("no tree files under " + tree_dir.string() + " (run gen first)");

  const auto judge = rt.agent_any({"judge", "extractor"});
  std::vector<PreferencePair> labeled;
  std::size_t unlabeled = 0, partial = 0, degenerate = 0, violations = 0;
  nlohmann::json per_question = nlohmann::json::object();
  for (const auto& f : files) {
    const std::string rel = "trees/" + f.filename().string();
    auto tree = read_tree(f);
    if (tree.config_hash != manifest.config_hash()) {
      throw ConfigError(rel + " was produced by config " + tree.config_hash + "; refusing to mix configs");
    }
    if (!tree.complete) {
      warn(rel + " is partial, skipping (rerun gen)");
      ++partial;
      continue;
    }
    if (tree.degenerate) {
      ++degenerate;
      continue;
    }
    if (!tree.scored) tree = score_tree(std::move(tree));
    const auto pairs = extract_pairs(tree, judge, rel);
    violations += validate_pairs(tree, pairs, judge).size();
    std::size_t resist = 0, accept = 0;
    for (const auto& p : pairs) {
      if (!p.direction) {
        ++unlabeled;
        continue;
      }
      ++(*p.direction == Direction::resist ? resist : accept);
      labeled.push_back(p);
    }
    per_question[tree.question().id] = {{"resist", resist}, {"accept", accept}};
  }
  if (violations > 0) throw StructuralError("pair validator reported " + std::to_string(violations) + " violations");

  const auto kept = opt.no_balance ? labeled : balance_pairs(labeled, cfg.seed);
  auto count = [](const std::vector<PreferencePair>& ps, Direction d) {
    return std::count_if(ps.begin(), ps.end(), [d](const auto& p) { return p.direction == d; });
  };
  const nlohmann::json stats = {{"balanced", !opt.no_balance},
                                {"resist_before", count(labeled, Direction::resist)},
                                {"accept_before", count(labeled, Direction::accept)},
                                {"resist_after", count(kept, Direction::resist)},
                                {"accept_after", count(kept, Direction::accept)},
                                {"unlabeled", unlabeled},
                                {"trees_used", files.size() - partial - degenerate},
                                {"trees_partial", partial},
                                {"trees_degenerate", degenerate},
                                {"validator_violations", violations},
                                {"per_question", per_question}};
  manifest.write("pairs.jsonl", to_jsonl(kept), "pairs");
  manifest.write("sft.jsonl", to_jsonl(sft_examples(kept)), "pairs");
  manifest.write("pairs_stats.json", stats.dump(2) + "\n", "pairs");
  manifest.set_backends(rt.backend_versions());
  out << "pairs: " << kept.size() << " pairs written (resist " << stats["resist_after"] << ", accept "
      << stats["accept_after"] << "; before balancing resist " << stats["resist_before"] << ", accept "
      << stats["accept_before"] << ")\n";
  return partial > 0 ? kExitPartial : kExitOk;
}

inline const std::vector<std::string>& eval_suites() {
  static const std::vector<std::string> s{"flipflop", "misinfo", "balanced", "team"};
  return s;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& suite, const CommandOptions& opt,
                    std::ostream& out) {
  if (std::find(eval_suites().begin(), eval_suites().end(), suite) == eval_suites().end()) {
    throw ConfigError("unknown eval suite " + suite);
  }
  Runtime rt(cfg);
  Manifest manifest(opt.out_dir, cfg);
  const std::string dir = "eval/" + suite + "/";
  const std::string metrics_rel = dir + "metrics.json";

  if (manifest.file_status(metrics_rel) == "complete" && fs::exists(opt.out_dir / metrics_rel)) {
    const auto stored = nlohmann::json::parse(read_file(opt.out_dir / metrics_rel));
    const bool has_swap = stored.contains("swapped");
    if (has_swap == opt.swap_orders) {
      out << suite << ": already complete in " << (opt.out_dir / dir).string() << "\n";
      detail::print_summary(suite, stored, out);
      return kExitOk;
    }
  }

  const auto& paths = cfg.section("paths").value("probes", nlohmann::json::object());
  const auto& ev = cfg.section("eval");
  EvalOptions eo;
  eo.run_id = suite;
  eo.seed = cfg.seed;
  eo.parallelism = cfg.max_inflight;
  eo.extractor = rt.agent("extractor");

  std::size_t malformed = 0, total = 0;
  nlohmann::json report = {{"suite", suite}};
  std::vector<std::pair<std::string, std::vector<TranscriptRecord>>> transcripts;
  std::size_t invalid = 0;

  auto finish = [&](const std::string& rel, const nlohmann::json& metrics, std::vector<TranscriptRecord> t) {
    invalid += metrics.value("invalid", std::size_t{0});
    transcripts.emplace_back(rel, std::move(t));
    return metrics;
  };

  if (suite == "flipflop") {
    auto in = detail::read_inputs<Question>(cfg, "flipflop", paths);
    malformed = in.malformed, total = in.total;
    auto r = run_flipflop(rt.agent("model"), in.items, eo);
    report["metrics"] = finish(dir + "transcript.jsonl", metrics_json(r.result), std::move(r.transcript));
  } else if (suite == "misinfo") {
    auto in = detail::read_inputs<MisinfoProbe>(cfg, "misinfo", paths);
    malformed = in.malformed, total = in.total;
    MisinfoBudgets budgets;
    budgets.first = cfg.budget("misinfo_first", budgets.first);
    budgets.second = cfg.budget("misinfo_second", budgets.second);
    budgets.other = cfg.budget("misinfo_other", budgets.other);
    auto r = run_misinfo(rt.agent("model"), rt.agent("adversary"), in.items, eo, budgets);
    report["metrics"] = finish(dir + "transcript.jsonl", metrics_json(r.result), std::move(r.transcript));
  } else if (suite == "balanced") {
    auto in = detail::read_inputs<ProbeRecord>(cfg, "balanced", paths);
    malformed = in.malformed, total = in.total;
    auto r = run_balanced(rt.agent("model"), in.items, eo);
    report["metrics"] = finish(dir + "transcript.jsonl", metrics_json(r.result), std::move(r.transcript));
  } else {
    auto in = detail::read_inputs<Question>(cfg, "team", paths);
    malformed = in.malformed, total = in.total;
    TeamConfig tc;
    tc.agent_first = rt.agent_any({"team_first", "agent_a"});
    tc.agent_second = rt.agent_any({"team_second", "agent_b"});
    tc.max_turns = ev.value("team_max_turns", 4);
    tc.extractor = eo.extractor;
    auto r = run_team(tc, in.items, eo);
    report["metrics"] = finish(dir + "transcript.jsonl", metrics_json(r.result), std::move(r.transcript));
    report["first_agent"] = tc.agent_first.name;
    report["second_agent"] = tc.agent_second.name;
    if (opt.swap_orders) {
      std::swap(tc.agent_first, tc.agent_second);
      EvalOptions swapped = eo;
      swapped.run_id = "team-swapped";
      auto s = run_team(tc, in.items, swapped);
      report["swapped"] = {{"first_agent", tc.agent_first.name},
                           {"second_agent", tc.agent_second.name},
                           {"metrics", finish(dir + "transcript_swapped.jsonl", metrics_json(s.result),
                                              std::move(s.transcript))}};
    }
  }
  report["probes_total"] = total;
  report["probes_malformed"] = malformed;

  const bool complete = invalid == 0;
  for (const auto& [rel, t] : transcripts) manifest.write(rel, to_jsonl(t), "eval " + suite, complete);
  manifest.write(metrics_rel, report.dump(2) + "\n", "eval " + suite, complete);
  manifest.set_backends(rt.backend_versions());

  detail::print_summary(suite, report, out);
  if (malformed > 0) out << suite << ": skipped " << malformed << " of " << total << " probe lines as malformed\n";
  if (!complete || detail::too_malformed(malformed, total)) return kExitPartial;
  return kExitOk;
}

inline int cmd_analyze(const RunConfig& cfg, const CommandOptions& opt, std::ostream& out) {
  Runtime rt(cfg);
  Manifest manifest(opt.out_dir, cfg);
  const auto& a = cfg.section("analyze");

  std::vector<fs::path> sources;
  if (a.contains("transcripts")) {
    for (const auto& t : a["transcripts"]) {
      const fs::path p(t.get<std::string>());
      sources.push_back(p.is_absolute() ? p : cfg.resolve(p.string()));
    }
  } else {
    for (const char* rel : {"eval/balanced/transcript.jsonl", "eval/team/transcript.jsonl",
                            "eval/team/transcript_swapped.jsonl"}) {
      if (fs::exists(opt.out_dir / rel)) sources.push_back(opt.out_dir / rel);
    }
  }
  if (sources.empty()) throw ConfigError("no transcripts to analyze (run eval balanced or team first)");

  std::vector<TranscriptRecord> records;
  std::size_t malformed = 0;
  for (const auto& s : sources) {
    auto raw = read_jsonl(s);
    malformed += raw.malformed;
    for (const auto& j : raw.records) {
      try {
        records.push_back(j.get<TranscriptRecord>());
      } catch (const nlohmann::json::exception&) {
        ++malformed;
      }
    }
  }
  if (malformed > 0) warn("analyze: skipped " + std::to_string(malformed) + " malformed transcript lines");

  const auto triples = select_triples(records);
  FeatureOptions fo;
  fo.entropy_samples = a.value("entropy_samples", 20);
  fo.entropy_temperature = a.value("entropy_temperature", 1.0);
  fo.seed = cfg.seed;
  fo.parallelism = cfg.max_inflight;
  if (cfg.has_agent("confidence_judge")) fo.confidence_judge = rt.agent("confidence_judge");
  const auto model = rt.agent_any({"analysis_model", "model"});
  std::vector<FlipFeatures> rows;
  try {
    rows = compute_features(triples, model, rt.agent("extractor"), fo);
  } catch (const CapabilityError& e) {
    throw CapabilityError("analysis model " + model.name + " lacks the " + std::string(e.what()) +
                          " capability");
  }
  manifest.write("analysis/features.csv", features_csv(rows), "analyze");

  FitOptions fit;
  fit.folds = a.value("folds", 10);
  fit.seed = cfg.seed;
  fit.l2 = a.value("l2", 0.0);
  if (a.contains("features")) fit.features = a["features"].get<std::vector<std::string>>();
  for (const auto& f : fit.features) {
    const auto& names = flip_feature_names();
    if (std::find(names.begin(), names.end(), f) == names.end()) throw ConfigError("unknown feature " + f);
  }
  const auto missing = a.value("missing", "drop_row");
  if (missing == "impute_mean") {
    fit.missing = MissingPolicy::impute_mean;
  } else if (missing != "drop_row") {
    throw ConfigError("analyze.missing must be drop_row or impute_mean");
  }
  fit.alpha = a.value("alpha", 0.05);

  out << "analyze: " << triples.size() << " triples from " << sources.size() << " transcript file(s)\n";
  RegressionModel m;
  try {
    m = fit_logreg(rows, fit);
  } catch (const PreconditionError& e) {
    throw PreconditionError(std::string(e.what()) + "; " + std::to_string(triples.size()) +
                            " triples were found, and " + std::to_string(fit.folds) +
                            "-fold cross-validation needs at least one usable row per fold");
  }
  auto report = regression_report(m, fit);
  report["triples"] = triples.size();
  report["flipped"] = std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.label_flipped == 1; });
  manifest.write("analysis/regression.json", report.dump(2) + "\n", "analyze");
  manifest.set_backends(rt.backend_versions());
  out << summary_line("pooled cv accuracy", m.cv_accuracy) << "\n";
  for (std::size_t j = 0; j < m.features.size(); ++j) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-12s weight %+.4f  p %.3g%s", m.features[j].c_str(), m.weights[j],
                  m.p_values[j], m.significant[j] ? "  *" : "");
    out << buf << "\n";
  }
  return kExitOk;
}

/// Runs a command, mapping library errors to exit codes with a message on
/// `err`.
template <typename Fn>
int guarded(Fn&& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const BackendError& e) {
    err << "error: " << e.what() << "\n";
    return kExitPartial;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
}

inline fs::path output_dir(const RunConfig& cfg, const std::optional<std::string>& flag) {
  if (flag) return fs::path(*flag);
  return cfg.resolve(cfg.section("paths").value("out", "runs"));
}

}  // namespace persuasion
