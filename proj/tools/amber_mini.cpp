#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "amber/experiment.hpp"

namespace {

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> objectives;
  std::optional<int> steps;
  std::optional<std::string> out;
  std::string checkpoint;
  std::string task;
  std::optional<std::string> phase2_from;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "experiment config (JSON)")->required();
  cmd->add_option("--seed", o.seed, "override the experiment seed");
  cmd->add_option("--out", o.out, "override the output directory");
}

// For eval, --out names the report directory and leaves the data where the
// config puts it.
amber::ExperimentConfig resolve(const Options& o, bool out_is_output_dir = true) {
  amber::ExperimentConfig config = amber::load_experiment_config(o.config);
  amber::Overrides overrides;
  overrides.seed = o.seed;
  overrides.objectives = o.objectives;
  overrides.steps = o.steps;
  if (o.out && out_is_output_dir) overrides.out = *o.out;
  amber::apply_overrides(config, overrides);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"amber_mini: cross-lingual encoder experiments on synthetic cipher languages"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen", "generate corpora and gold alignments");
  add_common(gen, o);

  auto* train = app.add_subcommand("train", "train one objective set");
  add_common(train, o);
  train->add_option("--objectives", o.objectives, "comma list of mlm,tlm,wa,sa");
  train->add_option("--steps", o.steps, "override the number of training steps");
  train->add_option("--phase2-from", o.phase2_from, "continue from a phase-1 checkpoint with a fresh schedule");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, o);  // --out: report directory (default: next to the checkpoint)
  eval->add_option("--checkpoint", o.checkpoint, "checkpoint to evaluate")->required();
  eval->add_option("--task", o.task, "retrieve, align or transfer")->required();

  auto* ablate = app.add_subcommand("ablate", "run the four-rung objective ladder");
  add_common(ablate, o);
  ablate->add_option("--steps", o.steps, "override the number of training steps per rung");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error[config]: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) {
      amber::cmd_gen(resolve(o), std::cout);
    } else if (train->parsed()) {
      std::optional<std::filesystem::path> phase2;
      if (o.phase2_from) phase2 = *o.phase2_from;
      amber::cmd_train(resolve(o), std::cout, phase2);
    } else if (eval->parsed()) {
      const auto config = resolve(o, false);
      const auto task = amber::parse_task(o.task);
      const std::filesystem::path checkpoint = o.checkpoint;
      const auto report_dir = o.out ? std::filesystem::path(*o.out) : checkpoint.parent_path();
      const auto result = amber::cmd_eval(config, checkpoint, task, report_dir, std::cout);
      std::cout << "report " << result.report.string() << "\n";
    } else if (ablate->parsed()) {
      amber::cmd_ablate(resolve(o), std::cout);
    }
  } catch (const amber::Error& e) {
    std::cout.flush();
    std::cerr << "error[" << amber::to_string(e.kind()) << "]: " << one_line(e.what()) << "\n";
    return amber::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cout.flush();
    std::cerr << "error[internal]: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
