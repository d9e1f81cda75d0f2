#include "persuasion/run.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

using namespace persuasion;
namespace fs = std::filesystem;

namespace {

fs::path fixtures() {
  const char* env = std::getenv("PERSUADE_FIXTURES");
  return env ? fs::path(env) : fs::path("fixtures");
}

// Fresh scratch directory per test holding a copy of a fixture directory.
fs::path scratch(const std::string& fixture) {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  const auto dir = fs::temp_directory_path() / "persuade-cli-test" /
                   (std::string(info->test_suite_name()) + "." + info->name());
  fs::remove_all(dir);
  fs::create_directories(dir);
  fs::copy(fixtures() / fixture, dir / "cfg", fs::copy_options::recursive);
  return dir;
}

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

class QuietWarnings {
 public:
  QuietWarnings() : previous_(Warnings::set_sink([this](const std::string& m) { seen.push_back(m); })) {}
  ~QuietWarnings() { Warnings::set_sink(previous_); }
  std::vector<std::string> seen;

 private:
  Warnings::Sink previous_;
};

struct Invocation {
  explicit Invocation(std::string c) : command(std::move(c)) {}
  std::string command;  // gen, pairs, analyze, or an eval suite name
  bool no_balance = false;
  bool swap_orders = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_inflight;
};

Outcome run(const fs::path& config, const fs::path& out_dir, const Invocation& inv) {
  std::ostringstream out, err;
  const int code = guarded(
      [&] {
        const auto cfg = load_run_config(config, inv.seed, inv.max_inflight);
        CommandOptions opt;
        opt.out_dir = out_dir;
        opt.no_balance = inv.no_balance;
        opt.swap_orders = inv.swap_orders;
        if (inv.command == "gen") return cmd_gen(cfg, opt, out);
        if (inv.command == "pairs") return cmd_pairs(cfg, opt, out);
        if (inv.command == "analyze") return cmd_analyze(cfg, opt, out);
        return cmd_eval(cfg, inv.command, opt, out);
      },
      err);
  return {code, out.str(), err.str()};
}

Outcome run(const fs::path& config, const fs::path& out_dir, const std::string& command) {
  return run(config, out_dir, Invocation(command));
}

void full_pipeline(const fs::path& config, const fs::path& out_dir, int max_inflight) {
  for (std::string c : {"gen", "pairs", "flipflop", "misinfo", "balanced", "team", "analyze"}) {
    Invocation inv(c);
    inv.max_inflight = max_inflight;
    inv.swap_orders = c == "team";
    const auto r = run(config, out_dir, inv);
    ASSERT_EQ(r.code, 0) << c << ": " << r.err;
  }
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), dir).string()] = read_file(e.path());
  }
  return files;
}

std::vector<TranscriptRecord> transcript(const fs::path& path) {
  std::vector<TranscriptRecord> out;
  for (const auto& j : read_jsonl(path).records) out.push_back(j.get<TranscriptRecord>());
  return out;
}

nlohmann::json json_file(const fs::path& path) { return nlohmann::json::parse(read_file(path)); }

void edit_json(const fs::path& path, const std::function<void(nlohmann::json&)>& fn) {
  auto j = json_file(path);
  fn(j);
  write_file_atomic(path, j.dump(2));
}

}  // namespace

TEST(EndToEnd, ByteIdenticalAcrossRunsAndParallelism) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  full_pipeline(config, dir / "one", 1);
  full_pipeline(config, dir / "two", 4);
  const auto a = snapshot(dir / "one");
  const auto b = snapshot(dir / "two");
  EXPECT_EQ(a, b);
  for (std::string f : {"manifest.json", "pairs.jsonl", "sft.jsonl", "pairs_stats.json",
                        "eval/flipflop/transcript.jsonl", "eval/misinfo/metrics.json",
                        "eval/team/transcript_swapped.jsonl", "analysis/features.csv",
                        "analysis/regression.json"}) {
    EXPECT_TRUE(a.count(f)) << f;
  }
  EXPECT_EQ(std::count_if(a.begin(), a.end(), [](const auto& kv) { return kv.first.rfind("trees/", 0) == 0; }), 12);
}

TEST(EndToEnd, MetricsRederiveFromTranscripts) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  full_pipeline(dir / "cfg" / "config.json", dir / "out", 2);
  for (std::string suite : {"flipflop", "misinfo", "balanced", "team"}) {
    const auto base = dir / "out" / "eval" / suite;
    const auto metrics = json_file(base / "metrics.json");
    EXPECT_EQ(recompute_metrics(suite, transcript(base / "transcript.jsonl")), metrics["metrics"]) << suite;
    if (suite == "team") {
      EXPECT_EQ(recompute_metrics(suite, transcript(base / "transcript_swapped.jsonl")),
                metrics["swapped"]["metrics"]);
    }
  }
}

TEST(EndToEnd, ManifestRecordsEveryOutput) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  full_pipeline(dir / "cfg" / "config.json", dir / "out", 2);
  const auto manifest = json_file(dir / "out" / "manifest.json");
  const auto hash = manifest["config_hash"].get<std::string>();
  EXPECT_EQ(hash.size(), 16u);
  EXPECT_EQ(manifest["seed"], 7);
  EXPECT_EQ(manifest["retry"]["retries"], 3);
  EXPECT_TRUE(manifest["backends"].contains("world"));
  for (const auto& [rel, contents] : snapshot(dir / "out")) {
    if (rel == "manifest.json") continue;
    ASSERT_TRUE(manifest["files"].contains(rel)) << rel;
    EXPECT_EQ(manifest["files"][rel]["config_hash"], hash) << rel;
    EXPECT_EQ(manifest["files"][rel]["status"], "complete") << rel;
  }
}

TEST(Gen, RerunIsIdempotent) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  ASSERT_EQ(run(config, dir / "out", "gen").code, 0);
  const auto before = snapshot(dir / "out");
  const auto again = run(config, dir / "out", "gen");
  EXPECT_EQ(again.code, 0);
  EXPECT_NE(again.out.find("12 already complete"), std::string::npos) << again.out;
  EXPECT_EQ(snapshot(dir / "out"), before);
}

TEST(Gen, ResumeCompletesOnlyUnfinishedQuestions) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  ASSERT_EQ(run(config, dir / "full", "gen").code, 0);
  ASSERT_EQ(run(config, dir / "out", "gen").code, 0);

  // Simulate an interruption: one question never got written, another
  // stopped after its independent first turns.
  const auto trees = dir / "out" / "trees";
  std::string cut_id;
  for (const auto& e : fs::directory_iterator(trees)) {
    const auto t = read_tree(e.path());
    if (t.size() > 2 && t.question().id != "q03") cut_id = t.question().id;
  }
  ASSERT_FALSE(cut_id.empty());
  fs::remove(trees / "q03.jsonl");
  const auto full = read_tree(trees / (cut_id + ".jsonl"));
  DialogueTree cut(full.question(), full.max_turns());
  cut.config_hash = full.config_hash;
  for (const auto& n : full.nodes()) {
    if (n.turn_index > 1) continue;
    auto copy = n;
    copy.score = 0;
    copy.is_correct = false;
    cut.add(copy);
    if (n.turn_index == 1) cut.pending.push_back(n.node_id);
  }
  cut.complete = false;
  write_tree(cut, trees / (cut_id + ".jsonl"));
  edit_json(dir / "out" / "manifest.json", [&](nlohmann::json& m) {
    auto& done = m["gen"]["completed"];
    done.erase(std::remove_if(done.begin(), done.end(), [&](const auto& id) { return id == "q03" || id == cut_id; }),
               done.end());
    m["gen"]["partial"] = {cut_id};
  });
  const std::string kept = cut_id == "q00" ? "q01.jsonl" : "q00.jsonl";
  const auto untouched = fs::last_write_time(trees / kept);

  const auto r = run(config, dir / "out", "gen");
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("2 written, 10 already complete"), std::string::npos) << r.out;
  EXPECT_EQ(fs::last_write_time(trees / kept), untouched);
  EXPECT_EQ(snapshot(dir / "out"), snapshot(dir / "full"));
  EXPECT_TRUE(json_file(dir / "out" / "manifest.json")["gen"]["partial"].empty());
}

TEST(Gen, NoQuestions) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  write_file_atomic(dir / "cfg" / "questions.jsonl", "");
  const auto r = run(dir / "cfg" / "config.json", dir / "out", "gen");
  EXPECT_EQ(r.code, 0);
  EXPECT_FALSE(fs::exists(dir / "out" / "trees"));
  ASSERT_EQ(quiet.seen.size(), 1u);
  EXPECT_NE(quiet.seen[0].find("no questions"), std::string::npos);
}

TEST(Gen, UnreadableInputs) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  fs::remove(dir / "cfg" / "questions.jsonl");
  EXPECT_EQ(run(dir / "cfg" / "config.json", dir / "out", "gen").code, 1);
  EXPECT_EQ(run(dir / "cfg" / "absent.json", dir / "out", "gen").code, 1);
  write_file_atomic(dir / "cfg" / "broken.json", "{ not json");
  const auto r = run(dir / "cfg" / "broken.json", dir / "out", "gen");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("malformed config"), std::string::npos);
}

TEST(Config, Validation) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  edit_json(config, [](nlohmann::json& c) { c["agents"]["model"]["backend"] = "nowhere"; });
  auto r = run(config, dir / "out", "flipflop");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("undeclared backend nowhere"), std::string::npos) << r.err;

  edit_json(config, [](nlohmann::json& c) {
    c["agents"]["model"]["backend"] = "world";
    c.erase("seed");
  });
  r = run(config, dir / "out", "flipflop");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("seed"), std::string::npos);
}

TEST(Config, ApiKeyComesFromNamedEnvironmentVariable) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  edit_json(config, [](nlohmann::json& c) {
    c["backends"]["remote"] = {{"type", "http"}, {"base_url", "http://127.0.0.1:9"},
                               {"model", "m"}, {"api_key_env", "PERSUADE_TEST_UNSET_KEY"}};
    c["agents"]["model"]["backend"] = "remote";
  });
  ::unsetenv("PERSUADE_TEST_UNSET_KEY");
  const auto r = run(config, dir / "out", "flipflop");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("PERSUADE_TEST_UNSET_KEY"), std::string::npos) << r.err;
  // Commands that never touch the remote backend do not need the key.
  EXPECT_EQ(run(config, dir / "out", "gen").code, 0);
}

TEST(Config, MixedConfigsAreRefused) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  ASSERT_EQ(run(config, dir / "out", "gen").code, 0);
  Invocation other("gen");
  other.seed = 8;
  const auto r = run(config, dir / "out", other);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("refusing to mix"), std::string::npos) << r.err;
  // The in-flight bound does not change results, so it may differ.
  Invocation wider("gen");
  wider.max_inflight = 3;
  EXPECT_EQ(run(config, dir / "out", wider).code, 0);
}

TEST(Pairs, BalancedStatsAndValidator) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  ASSERT_EQ(run(config, dir / "out", "gen").code, 0);
  const auto r = run(config, dir / "out", "pairs");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto stats = json_file(dir / "out" / "pairs_stats.json");
  EXPECT_EQ(stats["validator_violations"], 0);
  EXPECT_EQ(stats["resist_after"], stats["accept_after"]);
  EXPECT_GE(stats["resist_before"].get<int>(), stats["resist_after"].get<int>());
  EXPECT_GE(stats["accept_before"].get<int>(), stats["accept_after"].get<int>());
  EXPECT_GT(stats["resist_after"].get<int>(), 0);

  // Every emitted pair passes the validator against its own tree.
  std::vector<PreferencePair> pairs;
  for (const auto& j : read_jsonl(dir / "out" / "pairs.jsonl").records) pairs.push_back(j.get<PreferencePair>());
  ASSERT_EQ(static_cast<int>(pairs.size()), 2 * stats["resist_after"].get<int>());
  const auto cfg = load_run_config(config);
  Runtime rt(cfg);
  const auto judge = rt.agent("judge");
  for (const auto& p : pairs) {
    const auto tree = read_tree(dir / "out" / p.tree_ref.file);
    EXPECT_TRUE(validate_pairs(tree, {p}, judge).empty());
    EXPECT_GT(p.winner_score, p.loser_score);
  }
}

TEST(Pairs, NoBalanceEmitsAllPairs) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  ASSERT_EQ(run(config, dir / "out", "gen").code, 0);
  Invocation inv("pairs");
  inv.no_balance = true;
  ASSERT_EQ(run(config, dir / "out", inv).code, 0);
  const auto stats = json_file(dir / "out" / "pairs_stats.json");
  EXPECT_FALSE(stats["balanced"].get<bool>());
  EXPECT_EQ(stats["resist_after"], stats["resist_before"]);
  EXPECT_EQ(stats["accept_after"], stats["accept_before"]);
  EXPECT_EQ(read_jsonl(dir / "out" / "pairs.jsonl").records.size(),
            stats["resist_before"].get<std::size_t>() + stats["accept_before"].get<std::size_t>());
}

TEST(Pairs, NoTrees) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto r = run(dir / "cfg" / "config.json", dir / "out", "pairs");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("no tree files"), std::string::npos);
}

TEST(Eval, StubbornModelHasZeroFlipflopDiff) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  write_file_atomic(dir / "cfg" / "stubborn.json", nlohmann::json{
      {"rules", {{{"when", {{"last", "Response: [^<\\n]*<<([^>]*)>>[^\\n]*$"}}}, {"response", "Final Answer: $1"}},
                 {{"when", {{"transcript", "<<([^>]*)>>"}}}, {"response", "I am sure it is <<$1>>."}},
                 {{"when", {{"last", "France"}}}, {"response", "It is <<Paris>>."}}}},
      {"default", "It is <<Lyon>>."}}.dump());
  edit_json(config, [](nlohmann::json& c) {
    c["backends"]["stubborn"] = {{"type", "scripted"}, {"script", "stubborn.json"}};
    c["agents"]["model"]["backend"] = "stubborn";
  });
  const auto r = run(config, dir / "out", "flipflop");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = json_file(dir / "out" / "eval" / "flipflop" / "metrics.json")["metrics"];
  EXPECT_EQ(m["diff_points"].get<double>(), 0.0);
  EXPECT_EQ(m["before"]["num"], 2);
  EXPECT_EQ(m["before"]["den"], 10);
  EXPECT_NE(r.out.find("flipflop diff: +0.00 points"), std::string::npos) << r.out;
}

TEST(Eval, MalformedProbeLines) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  const auto config = dir / "cfg" / "config.json";
  auto lines = split_lines(read_file(dir / "cfg" / "flipflop.jsonl"));
  lines.erase(std::remove(lines.begin(), lines.end(), std::string()), lines.end());
  ASSERT_EQ(lines.size(), 10u);

  // 1 bad line in 21 is under the limit; the bad line is skipped and counted.
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  for (int i = 0; i < 10; ++i) {
    auto j = nlohmann::json::parse(lines[static_cast<std::size_t>(i)]);
    j["id"] = "extra" + std::to_string(i);
    text += j.dump() + "\n";
  }
  write_file_atomic(dir / "cfg" / "flipflop.jsonl", text + "{ broken\n");
  auto r = run(config, dir / "a", "flipflop");
  EXPECT_EQ(r.code, 0) << r.err;
  auto report = json_file(dir / "a" / "eval" / "flipflop" / "metrics.json");
  EXPECT_EQ(report["probes_malformed"], 1);
  EXPECT_EQ(report["probes_total"], 21);

  // 2 bad lines in 12 is over it: results are still written, exit code 2.
  text.clear();
  for (const auto& l : lines) text += l + "\n";
  write_file_atomic(dir / "cfg" / "flipflop.jsonl", text + "{ broken\n" + R"({"id": "q00", "question": "dup", "reference_answers": ["x"]})" "\n");
  r = run(config, dir / "b", "flipflop");
  EXPECT_EQ(r.code, 2);
  report = json_file(dir / "b" / "eval" / "flipflop" / "metrics.json");
  EXPECT_EQ(report["probes_malformed"], 2);
  EXPECT_EQ(report["metrics"]["before"]["den"], 10);
}

TEST(Eval, SwapOrdersPrintsBothOrderings) {
  QuietWarnings quiet;
  const auto dir = scratch("e2e");
  Invocation inv("team");
  inv.swap_orders = true;
  const auto r = run(dir / "cfg" / "config.json", dir / "out", inv);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("[alpha then beta] final accuracy, first agent"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("[beta then alpha] final accuracy, first agent"), std::string::npos) << r.out;

  const auto plain = run(dir / "cfg" / "config.json", dir / "plain", "team");
  EXPECT_EQ(plain.out.find("[alpha then beta]"), std::string::npos);
  EXPECT_NE(plain.out.find("final accuracy, first agent"), std::string::npos);
}

TEST(Analyze, GoldenFeatureRows) {
  QuietWarnings quiet;
  const auto dir = scratch("analyze");
  const auto r = run(dir / "cfg" / "config.json", dir / "out", "analyze");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(read_file(dir / "out" / "analysis" / "features.csv"),
            read_file(dir / "cfg" / "features.golden.csv"));
  const auto report = json_file(dir / "out" / "analysis" / "regression.json");
  EXPECT_EQ(report["triples"], 5);
  EXPECT_EQ(report["rows_used"], 5);
  EXPECT_EQ(report["cv_accuracy"]["den"], 5);
}

TEST(Analyze, DeterministicReport) {
  QuietWarnings quiet;
  const auto dir = scratch("analyze");
  ASSERT_EQ(run(dir / "cfg" / "config.json", dir / "a", "analyze").code, 0);
  ASSERT_EQ(run(dir / "cfg" / "config.json", dir / "b", "analyze").code, 0);
  EXPECT_EQ(snapshot(dir / "a"), snapshot(dir / "b"));
}

TEST(Analyze, MissingLogprobCapability) {
  QuietWarnings quiet;
  const auto dir = scratch("analyze");
  edit_json(dir / "cfg" / "oracle.json",
            [](nlohmann::json& s) { s["capabilities"] = {"chat", "sampled_generation"}; });
  const auto r = run(dir / "cfg" / "config.json", dir / "out", "analyze");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("token_logprobs"), std::string::npos) << r.err;
}

TEST(Analyze, TooFewTriplesForFolds) {
  QuietWarnings quiet;
  const auto dir = scratch("analyze");
  edit_json(dir / "cfg" / "config.json", [](nlohmann::json& c) { c["analyze"]["folds"] = 10; });
  const auto r = run(dir / "cfg" / "config.json", dir / "out", "analyze");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("5 triples"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("10-fold"), std::string::npos) << r.err;
}

#ifdef PERSUADE_BIN
namespace {
int exec(const std::string& args) {
  const int status = std::system((std::string(PERSUADE_BIN) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}
}  // namespace

TEST(Binary, ExitCodes) {
  const auto dir = scratch("analyze");
  const auto config = (dir / "cfg" / "config.json").string();
  EXPECT_EQ(exec(""), 1);
  EXPECT_EQ(exec("--help"), 0);
  EXPECT_EQ(exec("eval nonsense --config " + config), 1);
  EXPECT_EQ(exec("gen --config " + (dir / "absent.json").string()), 1);
  EXPECT_EQ(exec("analyze --config " + config + " --out " + (dir / "out").string()), 0);
  EXPECT_EQ(read_file(dir / "out" / "analysis" / "features.csv"),
            read_file(dir / "cfg" / "features.golden.csv"));
  EXPECT_EQ(exec("analyze --config " + config + " --seed 3 --out " + (dir / "out").string()), 1);
}
#endif
