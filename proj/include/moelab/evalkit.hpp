#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moelab/model.hpp"

namespace moelab {

// Fixed 99-token character vocabulary: PAD=0, BOS=1, EOS=2, ids 3..97 map to
// printable ASCII 32..126, id 98 is '\n'.
class CharTokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;

  int vocab_size() const { return 99; }
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;  // skips PAD/BOS/EOS
};

enum class AnswerMode { Direct, CoT };

inline const char* to_string(AnswerMode m) {
  return m == AnswerMode::Direct ? "direct" : "cot";
}

inline AnswerMode answer_mode_from_string(const std::string& s) {
  if (s == "direct") return AnswerMode::Direct;
  if (s == "cot") return AnswerMode::CoT;
  throw ConfigError("unknown answer_mode '" + s + "'");
}

struct TaskRecord {
  std::string task_name;
  std::string instruction;
  std::string input;
  std::string target;  // nonempty
  std::vector<std::pair<std::string, std::string>> exemplars;
  AnswerMode answer_mode = AnswerMode::Direct;
};

void to_json(nlohmann::json& j, const TaskRecord& r);
void from_json(const nlohmann::json& j, TaskRecord& r);

// JSON-lines task files (UTF-8), one TaskRecord per line.
std::vector<TaskRecord> load_task_file(const std::string& path);
void save_task_file(const std::string& path,
                    const std::vector<TaskRecord>& records);

// instruction, k exemplar blocks in stored order, then the query:
//   <instruction>\n{In: <in>\nOut: <out>\n}*k In: <input>\nOut:
std::string assemble_prompt(const TaskRecord& record, int k);

inline const char kCotMarker[] = "The answer is";

std::string trim(const std::string& s);

// Direct: whole generation trimmed. CoT: substring after the last marker
// occurrence, trimmed, one trailing period stripped; no marker -> "".
std::string extract_answer(const std::string& generated, AnswerMode mode);

int exact_match(const std::string& pred, const std::string& target,
                bool case_insensitive = false);

// 100·(raw−baseline)/(100−baseline); negative when below baseline.
double normalized_score(double raw, double baseline);

struct SuiteTask {
  std::string name;
  double baseline = 0.0;  // random-guess accuracy in [0,100)
  std::vector<TaskRecord> records;
};

struct SuiteSpec {
  std::string name;
  int k_shot = 0;
  std::vector<SuiteTask> tasks;
};

struct TaskResult {
  std::string task;
  int total = 0;
  int correct = 0;
  double accuracy = 0.0;    // percent
  double baseline = 0.0;
  double normalized = 0.0;
};

struct SuiteResult {
  std::string suite;
  int k_shot = 0;
  std::vector<TaskResult> tasks;
  double avg_accuracy = 0.0;  // unweighted average across tasks
  double normalized = 0.0;    // unweighted average of task normalized scores
};

struct EvalReport {
  std::string model_id;
  std::uint64_t seed = 0;
  std::vector<SuiteResult> suites;
  double normalized_average = 0.0;  // macro-mean over suites
};

void to_json(nlohmann::json& j, const EvalReport& r);

// Aligned plain-text table: one column per suite plus "Norm. Avg.".
std::string report_table(const std::vector<EvalReport>& rows);

using Generator = std::function<std::string(const std::string& prompt)>;

// Scores generator output by exact match of the extracted answer against the
// extracted gold answer (for Direct records the gold is the trimmed target).
EvalReport evaluate(const std::vector<SuiteSpec>& suites, const Generator& gen,
                    const std::string& model_id, std::uint64_t seed,
                    bool case_insensitive = false);

// Greedy decoder backed by the transformer stack: feeds BOS + prompt, then
// argmax-extends (ties -> lower id) until EOS or max_target_len tokens.
template <class Real>
std::string greedy_decode(ModelParams<Real>& params, const ModelConfig& cfg,
                          const CharTokenizer& tok, const std::string& prompt) {
  std::vector<int> prompt_ids = tok.encode(prompt);
  if (static_cast<int>(prompt_ids.size()) + 1 > cfg.max_input_len)
    throw LengthError("greedy_decode: prompt of " +
                      std::to_string(prompt_ids.size()) +
                      " tokens exceeds max_input_len " +
                      std::to_string(cfg.max_input_len));
  std::vector<int> ids;
  ids.push_back(CharTokenizer::kBos);
  ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());
  const int prefix = static_cast<int>(ids.size());
  std::vector<int> generated;
  Rng rng(0);  // eval forward consumes no randomness
  for (int step = 0; step < cfg.max_target_len; ++step) {
    SequenceBatch b;
    b.batch = 1;
    b.seq_len = static_cast<int>(ids.size());
    b.ids = ids;
    b.prefix_lens = {prefix};
    b.valid_lens = {b.seq_len};
    Tape<Real> tape;
    tape.recording = false;
    StackOut<Real> out = transformer_stack(tape, b, params, cfg, false, rng);
    const Real* last = out.logits.data() +
                       (static_cast<std::size_t>(b.seq_len) - 1) * cfg.vocab;
    int best = 0;
    for (int v = 1; v < cfg.vocab; ++v)
      if (last[v] > last[best]) best = v;
    if (best == CharTokenizer::kEos) break;
    generated.push_back(best);
    ids.push_back(best);
  }
  return tok.decode(generated);
}

template <class Real>
Generator model_generator(ModelParams<Real>& params, const ModelConfig& cfg,
                          const CharTokenizer& tok) {
  return [&params, cfg, tok](const std::string& prompt) {
    return greedy_decode<Real>(params, cfg, tok, prompt);
  };
}

// Deterministic synthetic task corpus: held-in training tasks (instruction
// paraphrase pairs over copy/reverse/kv-lookup/modular-addition, direct and
// CoT) and a four-suite held-out split with unseen instruction wordings.
// Writes JSONL task files plus mixture.json and suites.json manifests under
// out_dir; returns the list of files written (relative paths).
std::vector<std::string> gen_synthetic_tasks(std::uint64_t seed,
                                             const std::string& out_dir);

// suites.json loader: resolves task files relative to the manifest directory.
std::vector<SuiteSpec> load_suites(const std::string& manifest_path);

// mixture.json loader: returns one task list per file in manifest order.
std::vector<std::vector<TaskRecord>> load_mixture(
    const std::string& manifest_path);

}  // namespace moelab
