// persuade: generate persuasion dialogue trees and preference pairs, run the
// evaluation suites, and analyze answer flips.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "persuasion/run.hpp"

int main(int argc, char** argv) {
  using namespace persuasion;

  CLI::App app{"Persuasion-balanced dialogue data generation and evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_inflight;
  std::optional<std::string> out_dir;
  auto shared = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", seed, "Override the configured seed");
    cmd->add_option("--max-inflight", max_inflight, "Maximum concurrent backend requests")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--out", out_dir, "Output directory (default: paths.out from the config)");
  };

  auto* gen = app.add_subcommand("gen", "Expand and score dialogue trees for every question");
  shared(gen);

  bool no_balance = false;
  auto* pairs = app.add_subcommand("pairs", "Extract preference pairs and SFT examples from trees");
  shared(pairs);
  pairs->add_flag("--no-balance", no_balance, "Emit every labeled pair instead of a balanced sample");

  std::string suite;
  bool swap_orders = false;
  auto* eval = app.add_subcommand("eval", "Run an evaluation suite");
  shared(eval);
  eval->add_option("suite", suite, "flipflop, misinfo, balanced or team")
      ->required()
      ->check(CLI::IsMember(eval_suites()));
  eval->add_flag("--swap-orders", swap_orders, "Team suite: also run with the agent order swapped");

  auto* analyze = app.add_subcommand("analyze", "Compute flip features and fit the regression");
  shared(analyze);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  return guarded(
      [&] {
        const auto cfg = load_run_config(config_path, seed, max_inflight);
        CommandOptions opt;
        opt.out_dir = output_dir(cfg, out_dir);
        opt.no_balance = no_balance;
        opt.swap_orders = swap_orders;
        if (*gen) return cmd_gen(cfg, opt, std::cout);
        if (*pairs) return cmd_pairs(cfg, opt, std::cout);
        if (*eval) return cmd_eval(cfg, suite, opt, std::cout);
        return cmd_analyze(cfg, opt, std::cout);
      },
      std::cerr);
}
