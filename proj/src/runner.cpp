#include "moelab/runner.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "moelab/evalkit.hpp"
#include "moelab/routing.hpp"
#include "moelab/training.hpp"

namespace moelab {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string iso_utc(std::chrono::system_clock::time_point tp) {
  const std::time_t t = std::chrono::system_clock::to_time_t(tp);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// run_info.json is the only artifact carrying wall-clock data; everything
// else must be a pure function of the resolved config and seed.
void write_run_info(const std::string& out_dir,
                    std::chrono::system_clock::time_point started) {
  const auto finished = std::chrono::system_clock::now();
  const json j{
      {"started", iso_utc(started)},
      {"finished", iso_utc(finished)},
      {"duration_seconds",
       std::chrono::duration<double>(finished - started).count()}};
  std::ofstream out(fs::path(out_dir) / "run_info.json", std::ios::binary);
  if (!out) throw IoError("cannot write run_info.json in " + out_dir);
  out << j.dump(2) << "\n";
}

void write_snapshot(const std::string& out_dir, const json& resolved) {
  fs::create_directories(out_dir);
  std::ofstream out(fs::path(out_dir) / "resolved_config.json",
                    std::ios::binary);
  if (!out) throw IoError("cannot write resolved_config.json in " + out_dir);
  out << resolved.dump(2) << "\n";
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

json read_last_metrics(const std::string& metrics_path) {
  std::ifstream in(metrics_path);
  if (!in) throw IoError("cannot open metrics: " + metrics_path);
  std::string line, last;
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  if (last.empty())
    throw ConfigError("no metrics recorded in " + metrics_path +
                      " (steps=0?)");
  return json::parse(last);
}

// ---------------------------------------------------------------------------
// gen-tasks

void cmd_gen_tasks(const RunSpec& spec) {
  const std::uint64_t seed = spec.has_seed ? spec.seed : 0;
  gen_synthetic_tasks(seed, spec.out_dir);
  write_snapshot(spec.out_dir, json{{"command", "gen-tasks"}, {"seed", seed}});
}

// ---------------------------------------------------------------------------
// train

void cmd_train(const RunSpec& spec) {
  if (spec.tasks.empty())
    throw ConfigError("train: --tasks <mixture.json> is required");
  json resolved = resolve_config(spec.config_path, spec.overrides);
  if (spec.has_seed) resolved["train"]["seed"] = spec.seed;
  const RunConfig cfg = resolved.get<RunConfig>();
  cfg.model.validate();
  cfg.train.validate();
  const auto tasks = load_mixture(spec.tasks);
  json snap{{"command", "train"}, {"tasks", spec.tasks}, {"config", resolved}};
  if (!spec.from.empty()) snap["from"] = spec.from;
  write_snapshot(spec.out_dir, snap);
  train<float>(cfg.model, cfg.train, tasks, spec.out_dir, spec.from);
}

// ---------------------------------------------------------------------------
// eval

void write_eval_artifacts(const std::string& out_dir,
                          const std::vector<EvalReport>& reports) {
  json rows = json::array();
  for (const EvalReport& r : reports) rows.push_back(r);
  std::ofstream out(fs::path(out_dir) / "eval.json", std::ios::binary);
  if (!out) throw IoError("cannot write eval.json in " + out_dir);
  out << rows.dump(2) << "\n";
  write_text((fs::path(out_dir) / "eval.txt").string(), report_table(reports));
}

void cmd_eval(const RunSpec& spec) {
  if (spec.from.empty())
    throw ConfigError("eval: --from <checkpoint> is required");
  if (spec.suites.empty())
    throw ConfigError("eval: --suites <suites.json> is required");
  auto [mcfg, params] = read_checkpoint_file<float>(spec.from);
  const auto suites = load_suites(spec.suites);
  const std::uint64_t seed = spec.has_seed ? spec.seed : 0;
  CharTokenizer tok;
  const EvalReport report =
      evaluate(suites, model_generator<float>(params, mcfg, tok),
               fs::path(spec.from).stem().string(), seed);
  write_snapshot(spec.out_dir, json{{"command", "eval"},
                                    {"from", spec.from},
                                    {"suites", spec.suites},
                                    {"seed", seed}});
  write_eval_artifacts(spec.out_dir, {report});
}

// ---------------------------------------------------------------------------
// route-trace

Tensor<double> rows_to_tensor(const json& rows, const std::string& what) {
  if (!rows.is_array() || rows.empty() || !rows.front().is_array())
    throw ConfigError("route-trace: '" + what +
                      "' must be a nonempty array of rows");
  const int t_count = static_cast<int>(rows.size());
  const int e_count = static_cast<int>(rows.front().size());
  if (e_count < 1) throw ConfigError("route-trace: empty rows in '" + what + "'");
  Tensor<double> t = Tensor<double>::zeros({t_count, e_count});
  for (int r = 0; r < t_count; ++r) {
    const json& row = rows[r];
    if (!row.is_array() || static_cast<int>(row.size()) != e_count)
      throw ConfigError("route-trace: ragged rows in '" + what + "'");
    for (int c = 0; c < e_count; ++c)
      t.data()[static_cast<std::size_t>(r) * e_count + c] =
          row[c].get<double>();
  }
  return t;
}

Tensor<double> row_softmax(const Tensor<double>& logits) {
  Tensor<double> p = Tensor<double>::zeros(logits.shape());
  const int rows = logits.dim(0), cols = logits.dim(1);
  for (int r = 0; r < rows; ++r) {
    const double* in = logits.data() + static_cast<std::size_t>(r) * cols;
    double* out = p.data() + static_cast<std::size_t>(r) * cols;
    double m = in[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, in[c]);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) sum += out[c] = std::exp(in[c] - m);
    for (int c = 0; c < cols; ++c) out[c] /= sum;
  }
  return p;
}

void cmd_route_trace(const RunSpec& spec) {
  std::ostringstream trace;
  json snap{{"command", "route-trace"}};
  if (!spec.fixture.empty()) {
    // fixture mode: rows are the router scores; for token-choice strategies
    // they are taken directly as the gate probabilities unless given as
    // "logits", in which case a row softmax produces the probabilities.
    json resolved = resolve_config(spec.config_path, spec.overrides);
    const RunConfig cfg = resolved.get<RunConfig>();
    const RouterConfig& rcfg = cfg.model.router;
    rcfg.validate();
    std::ifstream in(spec.fixture);
    if (!in) throw IoError("cannot open fixture: " + spec.fixture);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError(spec.fixture + ": " + e.what());
    }
    const bool have_logits = j.contains("logits");
    if (!have_logits && !j.contains("probs"))
      throw ConfigError("route-trace: fixture needs a 'probs' or 'logits' key");
    const Tensor<double> scores =
        rows_to_tensor(j.at(have_logits ? "logits" : "probs"),
                       have_logits ? "logits" : "probs");
    if (scores.dim(1) != rcfg.num_experts)
      throw ConfigError("route-trace: fixture rows have " +
                        std::to_string(scores.dim(1)) + " experts, router has " +
                        std::to_string(rcfg.num_experts));
    const Tensor<double> probs = have_logits ? row_softmax(scores) : scores;
    const DispatchPlan plan =
        route(scores, probs, rcfg, capacity(scores.dim(0), rcfg));
    write_route_trace(trace, plan);
    snap["fixture"] = spec.fixture;
    snap["config"] = resolved;
  } else if (!spec.from.empty()) {
    if (spec.prompt.empty())
      throw ConfigError("route-trace: --prompt is required with --from");
    auto [mcfg, params] = read_checkpoint_file<float>(spec.from);
    CharTokenizer tok;
    SequenceBatch b;
    b.batch = 1;
    b.ids.push_back(CharTokenizer::kBos);
    for (int id : tok.encode(spec.prompt)) b.ids.push_back(id);
    b.seq_len = static_cast<int>(b.ids.size());
    b.prefix_lens = {b.seq_len};
    b.valid_lens = {b.seq_len};
    if (b.seq_len > mcfg.max_input_len)
      throw LengthError("route-trace: prompt needs " +
                        std::to_string(b.seq_len) + " tokens, max_input_len is " +
                        std::to_string(mcfg.max_input_len));
    Rng rng(0);
    Tape<float> tape;
    tape.recording = false;
    const StackOut<float> out =
        transformer_stack(tape, b, params, mcfg, false, rng);
    for (std::size_t i = 0; i < out.plans.size(); ++i) {
      trace << "layer=" << out.moe_layers[i] << "\n";
      write_route_trace(trace, out.plans[i]);
    }
    snap["from"] = spec.from;
    snap["prompt"] = spec.prompt;
  } else {
    throw ConfigError("route-trace: provide --fixture or --from with --prompt");
  }
  write_snapshot(spec.out_dir, snap);
  write_text((fs::path(spec.out_dir) / "trace.txt").string(), trace.str());
}

// ---------------------------------------------------------------------------
// average-ckpt

void cmd_average_ckpt(const RunSpec& spec) {
  if (spec.checkpoints.empty())
    throw ConfigError("average-ckpt: give at least one checkpoint path");
  auto [cfg, params] = average_checkpoints<float>(spec.checkpoints);
  write_snapshot(spec.out_dir, json{{"command", "average-ckpt"},
                                    {"checkpoints", spec.checkpoints}});
  write_checkpoint_file((fs::path(spec.out_dir) / "ckpt_avg.bin").string(),
                        cfg, params);
}

// ---------------------------------------------------------------------------
// ablate

std::string format_table(const std::vector<std::string>& headers,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(headers.size());
  for (std::size_t c = 0; c < headers.size(); ++c) {
    width[c] = headers[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) os << "  ";
      if (c == 0)
        os << row[c] << std::string(width[c] - row[c].size(), ' ');
      else
        os << std::string(width[c] - row[c].size(), ' ') << row[c];
    }
    os << "\n";
  };
  emit(headers);
  std::vector<std::string> rule;
  for (std::size_t c = 0; c < headers.size(); ++c)
    rule.push_back(std::string(width[c], '-'));
  emit(rule);
  for (const auto& row : rows) emit(row);
  return os.str();
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

struct AblateRow {
  const char* label;
  const char* slug;
};

constexpr AblateRow kAblateRows[] = {
    {"Baseline", "baseline"},           {"Freeze-Gate", "freeze_gate"},
    {"Freeze-Expert", "freeze_expert"}, {"Freeze-MoE", "freeze_moe"},
    {"Z-loss", "z_loss"},               {"Balance-loss", "balance_loss"},
};

void cmd_ablate(const RunSpec& spec) {
  if (spec.tasks.empty())
    throw ConfigError("ablate: --tasks <mixture.json> is required");
  json resolved = resolve_config(spec.config_path, spec.overrides);
  if (spec.has_seed) resolved["train"]["seed"] = spec.seed;
  const RunConfig base = resolved.get<RunConfig>();
  base.model.validate();
  base.train.validate();
  if (base.train.steps < 1)
    throw ConfigError("ablate: train.steps must be >= 1");
  const auto tasks = load_mixture(spec.tasks);
  write_snapshot(spec.out_dir, json{{"command", "ablate"},
                                    {"tasks", spec.tasks},
                                    {"config", resolved}});

  json rows_json = json::array();
  std::vector<std::vector<std::string>> cells;
  for (const AblateRow& row : kAblateRows) {
    RunConfig cfg = base;
    const std::string slug = row.slug;
    if (slug == "freeze_gate") cfg.train.freeze_mode = FreezeMode::FreezeGate;
    else if (slug == "freeze_expert")
      cfg.train.freeze_mode = FreezeMode::FreezeExpert;
    else if (slug == "freeze_moe")
      cfg.train.freeze_mode = FreezeMode::FreezeMoE;
    else if (slug == "z_loss")
      cfg.model.router.aux_loss = AuxLossKind::ZLoss;
    else if (slug == "balance_loss")
      cfg.model.router.aux_loss = AuxLossKind::Balance;

    const std::string row_dir = (fs::path(spec.out_dir) / slug).string();
    const TrainResult<float> res =
        train<float>(cfg.model, cfg.train, tasks, row_dir);
    const json last = read_last_metrics(res.metrics_path);

    double active = 0.0, entropy = 0.0;
    const json& usage = last.at("per_layer_usage");
    for (const json& u : usage) {
      active += u.at("active_fraction").get<double>();
      entropy += u.at("normalized_entropy").get<double>();
    }
    const bool has_moe = !usage.empty();
    if (has_moe) {
      active /= static_cast<double>(usage.size());
      entropy /= static_cast<double>(usage.size());
    }
    cells.push_back({row.label, fmt4(last.at("loss").get<double>()),
                     fmt4(last.at("lm_loss").get<double>()),
                     fmt4(last.at("aux_loss").get<double>()),
                     fmt4(last.at("dropped_fraction").get<double>()),
                     has_moe ? fmt4(active) : "-",
                     has_moe ? fmt4(entropy) : "-"});
    rows_json.push_back(json{{"row", row.label},
                             {"dir", slug},
                             {"freeze_mode", to_string(cfg.train.freeze_mode)},
                             {"aux_loss", to_string(cfg.model.router.aux_loss)},
                             {"final", last}});
  }
  std::ofstream out(fs::path(spec.out_dir) / "ablate.json", std::ios::binary);
  if (!out) throw IoError("cannot write ablate.json in " + spec.out_dir);
  out << rows_json.dump(2) << "\n";
  write_text((fs::path(spec.out_dir) / "ablate.txt").string(),
             format_table({"Row", "Loss", "LM", "Aux", "Dropped", "Active",
                           "Entropy"},
                          cells));
}

// ---------------------------------------------------------------------------
// report

void cmd_report(const RunSpec& spec) {
  if (spec.tasks.empty())
    throw ConfigError("report: --tasks <corpus dir> is required "
                      "(a gen-tasks output directory)");
  // The comparison needs a budget that reaches signal on every mixture task
  // at desk scale; these protocol values replace the train defaults and stay
  // overridable through --config / --set.
  RunConfig protocol;
  protocol.train.batch_size = 16;
  protocol.train.learning_rate = 1e-3;
  protocol.train.steps = 1200;
  protocol.train.train_max_k = 1;
  json resolved = resolve_config(spec.config_path, spec.overrides, protocol);
  const RunConfig base = resolved.get<RunConfig>();
  base.model.validate();
  base.train.validate();
  const std::uint64_t seed_base = spec.has_seed ? spec.seed : 0;

  const auto mixture =
      load_mixture((fs::path(spec.tasks) / "mixture.json").string());
  // single-task rows finetune on the first mixture entry only
  const std::vector<std::vector<TaskRecord>> single{mixture.front()};
  const auto suites =
      load_suites((fs::path(spec.tasks) / "suites.json").string());
  write_snapshot(spec.out_dir, json{{"command", "report"},
                                    {"tasks", spec.tasks},
                                    {"seed", seed_base},
                                    {"config", resolved}});

  CharTokenizer tok;
  std::vector<EvalReport> reports;
  json rows_json = json::array();
  std::vector<double> it_norms, st_norms;
  auto run_one = [&](bool dense, bool instruction_tuned, std::uint64_t seed) {
    const std::string id = std::string(dense ? "dense" : "moe") +
                           (instruction_tuned ? "-it-s" : "-st-s") +
                           std::to_string(seed);
    RunConfig cfg = base;
    if (dense) cfg.model.moe_pattern = MoePattern::None;
    cfg.train.seed = seed;
    const std::string dir = (fs::path(spec.out_dir) / id).string();
    TrainResult<float> res = train<float>(
        cfg.model, cfg.train, instruction_tuned ? mixture : single, dir);
    EvalReport rep = evaluate(
        suites, model_generator<float>(res.params, cfg.model, tok), id, seed);
    if (!dense)
      (instruction_tuned ? it_norms : st_norms)
          .push_back(rep.normalized_average);
    rows_json.push_back(json{{"model_id", id},
                             {"arch", dense ? "dense" : "moe"},
                             {"regime", instruction_tuned ? "instruction_tuned"
                                                          : "single_task"},
                             {"seed", seed},
                             {"report", rep}});
    reports.push_back(std::move(rep));
  };
  for (std::uint64_t s = 1; s <= 3; ++s) run_one(false, true, seed_base + s);
  for (std::uint64_t s = 1; s <= 3; ++s) run_one(false, false, seed_base + s);
  run_one(true, true, seed_base + 1);
  run_one(true, false, seed_base + 1);

  auto mean = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double it_mean = mean(it_norms), st_mean = mean(st_norms);
  const json summary{{"moe_it_norm_mean", it_mean},
                     {"moe_st_norm_mean", st_mean},
                     {"it_beats_st", it_mean > st_mean}};
  std::ofstream out(fs::path(spec.out_dir) / "report.json", std::ios::binary);
  if (!out) throw IoError("cannot write report.json in " + spec.out_dir);
  out << json{{"rows", rows_json}, {"summary", summary}}.dump(2) << "\n";

  std::ostringstream txt;
  txt << report_table(reports) << "\n"
      << "MoE normalized average over seeds: instruction-tuned "
      << fmt4(it_mean) << " vs single-task " << fmt4(st_mean) << " -> "
      << (it_mean > st_mean ? "instruction tuning wins" : "NO GAIN") << "\n";
  write_text((fs::path(spec.out_dir) / "report.txt").string(), txt.str());
}

}  // namespace

void run(const RunSpec& spec) {
  if (spec.out_dir.empty())
    throw ConfigError(spec.command + ": --out <dir> is required");
  const auto started = std::chrono::system_clock::now();
  if (spec.command == "gen-tasks") cmd_gen_tasks(spec);
  else if (spec.command == "train") cmd_train(spec);
  else if (spec.command == "eval") cmd_eval(spec);
  else if (spec.command == "route-trace") cmd_route_trace(spec);
  else if (spec.command == "average-ckpt") cmd_average_ckpt(spec);
  else if (spec.command == "ablate") cmd_ablate(spec);
  else if (spec.command == "report") cmd_report(spec);
  else throw ConfigError("unknown command '" + spec.command + "'");
  write_run_info(spec.out_dir, started);
}

}  // namespace moelab
