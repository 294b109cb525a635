#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "moelab/config.hpp"

namespace moelab {

// Parsed command line for one invocation. Path fields are consumed by the
// commands that need them; out_dir is required everywhere. Every command
// writes resolved_config.json (deterministic) and run_info.json (the only
// file carrying wall-clock data) into out_dir.
struct RunSpec {
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;  // dotted key=value
  std::string out_dir;
  bool has_seed = false;
  std::uint64_t seed = 0;
  std::string from;     // checkpoint to evaluate / trace / warm-start from
  std::string tasks;    // mixture manifest (train, ablate) or corpus dir (report)
  std::string suites;   // suites manifest (eval)
  std::string prompt;   // route-trace: text to trace through --from
  std::string fixture;  // route-trace: JSON file with probs/logits rows
  std::vector<std::string> checkpoints;  // average-ckpt inputs
};

// Dispatches to the command and writes its artifacts. Throws on error; the
// CLI entry point converts exceptions into a single-line JSON error record.
void run(const RunSpec& spec);

}  // namespace moelab
