#include <cstdio>
#include <exception>

#include "CLI11.hpp"
#include "json.hpp"
#include "moelab/runner.hpp"

namespace {

void add_common(CLI::App* cmd, moelab::RunSpec& spec) {
  cmd->add_option("--config", spec.config_path, "JSON config file");
  cmd->add_option("--set", spec.overrides,
                  "dotted override key=value (repeatable)");
  cmd->add_option("--out", spec.out_dir, "output directory")->required();
  cmd->add_option("--seed", spec.seed, "run seed")
      ->each([&spec](const std::string&) { spec.has_seed = true; });
}

}  // namespace

int main(int argc, char** argv) {
  moelab::RunSpec spec;
  CLI::App app{"moelab: a desk-scale sparse mixture-of-experts "
               "instruction-tuning laboratory"};
  app.require_subcommand(1);

  CLI::App* gen = app.add_subcommand("gen-tasks",
                                     "generate the synthetic task corpus");
  add_common(gen, spec);

  CLI::App* train =
      app.add_subcommand("train", "train a model on a task mixture");
  add_common(train, spec);
  train->add_option("--tasks", spec.tasks, "mixture manifest (mixture.json)")
      ->required();
  train->add_option("--from", spec.from, "warm-start checkpoint");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, spec);
  eval->add_option("--from", spec.from, "checkpoint to evaluate")->required();
  eval->add_option("--suites", spec.suites, "suites manifest (suites.json)")
      ->required();

  CLI::App* trace =
      app.add_subcommand("route-trace", "dump per-token routing decisions");
  add_common(trace, spec);
  trace->add_option("--fixture", spec.fixture,
                    "JSON file with probs/logits rows");
  trace->add_option("--from", spec.from, "checkpoint to trace");
  trace->add_option("--prompt", spec.prompt,
                    "prompt text to trace through --from");

  CLI::App* ablate =
      app.add_subcommand("ablate", "run the freezing / aux-loss grid");
  add_common(ablate, spec);
  ablate->add_option("--tasks", spec.tasks, "mixture manifest (mixture.json)")
      ->required();

  CLI::App* avg = app.add_subcommand("average-ckpt",
                                     "average checkpoints elementwise");
  add_common(avg, spec);
  avg->add_option("checkpoints", spec.checkpoints, "checkpoint files")
      ->required();

  CLI::App* report = app.add_subcommand(
      "report", "instruction-tuned vs single-task comparison grid");
  add_common(report, spec);
  report->add_option("--tasks", spec.tasks,
                     "task corpus directory (gen-tasks output)")
      ->required();

  CLI11_PARSE(app, argc, argv);
  spec.command = app.get_subcommands().front()->get_name();

  try {
    moelab::run(spec);
  } catch (const std::exception& e) {
    // one machine-parseable line on stderr, nonzero exit
    const nlohmann::json err{{"command", spec.command}, {"error", e.what()}};
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
  }
  return 0;
}
