#include "moelab/evalkit.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace moelab {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> CharTokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) {
    if (c == '\n')
      ids.push_back(98);
    else if (c >= 32 && c <= 126)
      ids.push_back(c - 32 + 3);
    else
      throw IndexError("tokenizer: unencodable byte " + std::to_string(c));
  }
  return ids;
}

std::string CharTokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    if (id == 98)
      out.push_back('\n');
    else if (id >= 3 && id <= 97)
      out.push_back(static_cast<char>(id - 3 + 32));
    else
      throw IndexError("tokenizer: undecodable id " + std::to_string(id));
  }
  return out;
}

namespace {

void check_keys(const json& j, std::initializer_list<const char*> known,
                const std::string& where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || item.key() == k;
    if (!ok)
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

}  // namespace

void to_json(json& j, const TaskRecord& r) {
  json ex = json::array();
  for (const auto& [in, out] : r.exemplars) ex.push_back({in, out});
  j = json{{"task_name", r.task_name},   {"instruction", r.instruction},
           {"input", r.input},           {"target", r.target},
           {"exemplars", ex},            {"answer_mode", to_string(r.answer_mode)}};
}

void from_json(const json& j, TaskRecord& r) {
  check_keys(j, {"task_name", "instruction", "input", "target", "exemplars",
                 "answer_mode"},
             "task record");
  j.at("task_name").get_to(r.task_name);
  j.at("instruction").get_to(r.instruction);
  j.at("input").get_to(r.input);
  j.at("target").get_to(r.target);
  if (r.target.empty()) throw ConfigError("task record: empty target");
  r.exemplars.clear();
  if (j.contains("exemplars"))
    for (const auto& e : j.at("exemplars")) {
      if (!e.is_array() || e.size() != 2)
        throw ConfigError("task record: exemplar must be an [input, target] pair");
      r.exemplars.emplace_back(e[0].get<std::string>(),
                               e[1].get<std::string>());
    }
  r.answer_mode =
      answer_mode_from_string(j.at("answer_mode").get<std::string>());
}

std::vector<TaskRecord> load_task_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open task file: " + path);
  std::vector<TaskRecord> records;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      records.push_back(json::parse(line).get<TaskRecord>());
    } catch (const json::exception& e) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (records.empty()) throw ConfigError("task file has no records: " + path);
  return records;
}

void save_task_file(const std::string& path,
                    const std::vector<TaskRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open task file for writing: " + path);
  for (const TaskRecord& r : records) out << json(r).dump() << "\n";
  if (!out) throw IoError("task file write failed: " + path);
}

std::string assemble_prompt(const TaskRecord& record, int k) {
  if (k < 0) throw ConfigError("assemble_prompt: negative k");
  if (k > static_cast<int>(record.exemplars.size()))
    throw ConfigError("assemble_prompt: " + std::to_string(k) +
                      "-shot requested but record '" + record.task_name +
                      "' has " + std::to_string(record.exemplars.size()) +
                      " exemplars");
  std::string out = record.instruction + "\n";
  for (int i = 0; i < k; ++i)
    out += "In: " + record.exemplars[i].first + "\nOut: " +
           record.exemplars[i].second + "\n";
  out += "In: " + record.input + "\nOut: ";
  return out;
}

std::string trim(const std::string& s) {
  const char* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::string extract_answer(const std::string& generated, AnswerMode mode) {
  if (mode == AnswerMode::Direct) return trim(generated);
  const auto pos = generated.rfind(kCotMarker);
  if (pos == std::string::npos) return "";
  std::string tail = trim(generated.substr(pos + std::strlen(kCotMarker)));
  if (!tail.empty() && tail.back() == '.') tail.pop_back();
  return trim(tail);
}

int exact_match(const std::string& pred, const std::string& target,
                bool case_insensitive) {
  std::string a = trim(pred), b = trim(target);
  if (case_insensitive) {
    auto lower = [](std::string& s) {
      for (char& c : s)
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    };
    lower(a);
    lower(b);
  }
  return a == b ? 1 : 0;
}

double normalized_score(double raw, double baseline) {
  if (baseline >= 100.0)
    throw ConfigError("normalized_score: baseline must be < 100, got " +
                      std::to_string(baseline));
  return 100.0 * (raw - baseline) / (100.0 - baseline);
}

EvalReport evaluate(const std::vector<SuiteSpec>& suites, const Generator& gen,
                    const std::string& model_id, std::uint64_t seed,
                    bool case_insensitive) {
  EvalReport report;
  report.model_id = model_id;
  report.seed = seed;
  double suite_norm_sum = 0.0;
  for (const SuiteSpec& suite : suites) {
    SuiteResult sr;
    sr.suite = suite.name;
    sr.k_shot = suite.k_shot;
    double acc_sum = 0.0, norm_sum = 0.0;
    for (const SuiteTask& task : suite.tasks) {
      if (task.records.empty())
        throw ConfigError("suite '" + suite.name + "' task '" + task.name +
                          "' has no records");
      TaskResult tr;
      tr.task = task.name;
      tr.baseline = task.baseline;
      for (const TaskRecord& rec : task.records) {
        const std::string prompt = assemble_prompt(rec, suite.k_shot);
        const std::string pred = extract_answer(gen(prompt), rec.answer_mode);
        const std::string gold = extract_answer(rec.target, rec.answer_mode);
        tr.correct += exact_match(pred, gold, case_insensitive);
        ++tr.total;
      }
      tr.accuracy = 100.0 * tr.correct / tr.total;
      tr.normalized = normalized_score(tr.accuracy, tr.baseline);
      acc_sum += tr.accuracy;
      norm_sum += tr.normalized;
      sr.tasks.push_back(std::move(tr));
    }
    sr.avg_accuracy = acc_sum / sr.tasks.size();
    sr.normalized = norm_sum / sr.tasks.size();
    suite_norm_sum += sr.normalized;
    report.suites.push_back(std::move(sr));
  }
  report.normalized_average =
      report.suites.empty() ? 0.0 : suite_norm_sum / report.suites.size();
  return report;
}

void to_json(json& j, const EvalReport& r) {
  json suites = json::array();
  for (const SuiteResult& s : r.suites) {
    json tasks = json::array();
    for (const TaskResult& t : s.tasks)
      tasks.push_back(json{{"task", t.task},
                           {"total", t.total},
                           {"correct", t.correct},
                           {"accuracy", t.accuracy},
                           {"baseline", t.baseline},
                           {"normalized", t.normalized}});
    suites.push_back(json{{"suite", s.suite},
                          {"k_shot", s.k_shot},
                          {"avg_accuracy", s.avg_accuracy},
                          {"normalized", s.normalized},
                          {"tasks", tasks}});
  }
  j = json{{"model_id", r.model_id},
           {"seed", r.seed},
           {"suites", suites},
           {"normalized_average", r.normalized_average}};
}

std::string report_table(const std::vector<EvalReport>& rows) {
  if (rows.empty()) return "";
  std::vector<std::string> headers{"Model"};
  for (const SuiteResult& s : rows[0].suites)
    headers.push_back(s.suite + " (k=" + std::to_string(s.k_shot) + ")");
  headers.push_back("Norm. Avg.");

  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", v);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> cells;
  for (const EvalReport& r : rows) {
    if (r.suites.size() != rows[0].suites.size())
      throw ConfigError("report_table: rows have differing suite sets");
    std::vector<std::string> row{r.model_id};
    for (const SuiteResult& s : r.suites) row.push_back(fmt(s.avg_accuracy));
    row.push_back(fmt(r.normalized_average));
    cells.push_back(std::move(row));
  }
  std::vector<std::size_t> width(headers.size());
  for (std::size_t c = 0; c < headers.size(); ++c) {
    width[c] = headers[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream os;
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) os << "  ";
      // left-align the model column, right-align numbers
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
  for (const auto& row : cells) emit(row);
  return os.str();
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

namespace {

std::string rand_word(Rng& rng, int min_len, int max_len) {
  const int len =
      min_len + static_cast<int>(rng.uniform_int(
                    static_cast<std::uint64_t>(max_len - min_len + 1)));
  std::string s;
  for (int i = 0; i < len; ++i)
    s.push_back(static_cast<char>('a' + rng.uniform_int(10)));
  return s;
}

std::pair<std::string, std::string> gen_copy(Rng& rng) {
  // Fixed length keeps the source offset of every output character constant,
  // which a relative-position head can express directly.
  const std::string w = rand_word(rng, 4, 4);
  return {w, w};
}

std::pair<std::string, std::string> gen_reverse(Rng& rng) {
  // Same fixed length as copy: each output slot then reads from one fixed
  // source offset, so the task stays in reach of position-keyed attention.
  const std::string w = rand_word(rng, 4, 4);
  return {w, std::string(w.rbegin(), w.rend())};
}

std::pair<std::string, std::string> gen_kv(Rng& rng) {
  // Keys appear in a fixed schema order; the answer repeats the queried key
  // and then its value, e.g. "a=3 b=7 c=2 | b" -> "b7".
  const char keys[3] = {'a', 'b', 'c'};
  int values[3];
  for (int& v : values) v = static_cast<int>(rng.uniform_int(10));
  const int query = static_cast<int>(rng.uniform_int(3));
  std::string in;
  for (int i = 0; i < 3; ++i) {
    if (i) in.push_back(' ');
    in.push_back(keys[i]);
    in.push_back('=');
    in.push_back(static_cast<char>('0' + values[i]));
  }
  in += " | ";
  in.push_back(keys[query]);
  std::string out;
  out.push_back(keys[query]);
  out.push_back(static_cast<char>('0' + values[query]));
  return {in, out};
}

std::pair<std::string, std::string> gen_modadd(Rng& rng, bool cot) {
  const int a = static_cast<int>(rng.uniform_int(10));
  const int b = static_cast<int>(rng.uniform_int(10));
  const int s = a + b;
  const int m = s % 10;
  const std::string in = std::to_string(a) + " + " + std::to_string(b);
  if (!cot) return {in, std::to_string(m)};
  return {in, std::to_string(s) + ". " + kCotMarker + " " +
                  std::to_string(m) + "."};
}

std::pair<std::string, std::string> gen_example(const std::string& kind,
                                                Rng& rng) {
  if (kind == "copy") return gen_copy(rng);
  if (kind == "reverse") return gen_reverse(rng);
  if (kind == "kv") return gen_kv(rng);
  if (kind == "modadd") return gen_modadd(rng, false);
  if (kind == "modadd_cot") return gen_modadd(rng, true);
  throw ConfigError("unknown task kind '" + kind + "'");
}

struct GenDef {
  const char* file;
  const char* task_name;
  const char* instruction;
  const char* kind;
  AnswerMode mode;
  int count;
};

constexpr int kExemplarsPerRecord = 3;

// Every instruction is exactly 16 characters, and wordings within one task
// family share a trailing signature span at fixed columns (e.g. "the string.",
// "backwards"). Held-out wordings are unseen strings that keep the family
// signature, so they test wording-level generalization without also shifting
// the absolute layout of the prompt.
const GenDef kHeldIn[] = {
    {"held_in/copy_a.jsonl", "copy_a", "Copy the string.", "copy",
     AnswerMode::Direct, 256},
    {"held_in/copy_b.jsonl", "copy_b", "Echo the string.", "copy",
     AnswerMode::Direct, 256},
    {"held_in/reverse_a.jsonl", "reverse_a", "Say it backwards", "reverse",
     AnswerMode::Direct, 256},
    {"held_in/reverse_b.jsonl", "reverse_b", "Put it backwards",
     "reverse", AnswerMode::Direct, 256},
    {"held_in/kv_a.jsonl", "kv_a", "Look up the key.", "kv",
     AnswerMode::Direct, 256},
    {"held_in/kv_b.jsonl", "kv_b", "Give me the key.", "kv",
     AnswerMode::Direct, 256},
    {"held_in/modadd_a.jsonl", "modadd_a", "Add; modulo ten.", "modadd",
     AnswerMode::Direct, 256},
    {"held_in/modadd_cot_a.jsonl", "modadd_cot_a",
     "Add: work it out", "modadd_cot", AnswerMode::CoT, 256},
};

const GenDef kHeldOut[] = {
    {"held_out/copy.jsonl", "copy_held_out", "Emit the string.", "copy",
     AnswerMode::Direct, 16},
    {"held_out/kv_lookup.jsonl", "kv_held_out", "Read me the key.",
     "kv", AnswerMode::Direct, 16},
    {"held_out/modadd_cot.jsonl", "modadd_cot_held_out",
     "Sum: work it out", "modadd_cot", AnswerMode::CoT, 16},
    {"held_out/reverse.jsonl", "reverse_held_out",
     "Now go backwards", "reverse", AnswerMode::Direct, 16},
};

std::vector<TaskRecord> gen_task(const GenDef& def, Rng rng) {
  std::vector<TaskRecord> records;
  for (int i = 0; i < def.count; ++i) {
    TaskRecord r;
    r.task_name = def.task_name;
    r.instruction = def.instruction;
    r.answer_mode = def.mode;
    auto [in, out] = gen_example(def.kind, rng);
    r.input = in;
    r.target = out;
    for (int e = 0; e < kExemplarsPerRecord; ++e)
      r.exemplars.push_back(gen_example(def.kind, rng));
    records.push_back(std::move(r));
  }
  return records;
}

}  // namespace

std::vector<std::string> gen_synthetic_tasks(std::uint64_t seed,
                                             const std::string& out_dir) {
  const Rng root = Rng(seed).derive("gen");
  fs::create_directories(fs::path(out_dir) / "held_in");
  fs::create_directories(fs::path(out_dir) / "held_out");
  std::vector<std::string> written;

  auto emit = [&](const GenDef& def) {
    save_task_file((fs::path(out_dir) / def.file).string(),
                   gen_task(def, root.derive(def.file)));
    written.push_back(def.file);
  };
  for (const GenDef& def : kHeldIn) emit(def);
  for (const GenDef& def : kHeldOut) emit(def);

  json mixture;
  json task_list = json::array();
  for (const GenDef& def : kHeldIn) task_list.push_back(def.file);
  mixture["tasks"] = task_list;
  {
    std::ofstream out(fs::path(out_dir) / "mixture.json", std::ios::binary);
    if (!out) throw IoError("cannot write mixture.json in " + out_dir);
    out << mixture.dump(2) << "\n";
  }
  written.push_back("mixture.json");

  // Held-out suites: four suites with unseen instruction wordings (per-suite
  // k varies, one suite is zero-shot, one is CoT with a nonzero random
  // baseline for its 10-way digit answer).
  json suites = json::array();
  suites.push_back(json{{"name", "copy"},
                        {"k_shot", 1},
                        {"tasks", json::array({json{
                                      {"file", "held_out/copy.jsonl"},
                                      {"baseline", 0.0}}})}});
  suites.push_back(json{{"name", "kv_lookup"},
                        {"k_shot", 1},
                        {"tasks", json::array({json{
                                      {"file", "held_out/kv_lookup.jsonl"},
                                      {"baseline", 0.0}}})}});
  suites.push_back(json{{"name", "modadd_cot"},
                        {"k_shot", 1},
                        {"tasks", json::array({json{
                                      {"file", "held_out/modadd_cot.jsonl"},
                                      {"baseline", 10.0}}})}});
  suites.push_back(json{{"name", "reverse"},
                        {"k_shot", 0},
                        {"tasks", json::array({json{
                                      {"file", "held_out/reverse.jsonl"},
                                      {"baseline", 0.0}}})}});
  {
    std::ofstream out(fs::path(out_dir) / "suites.json", std::ios::binary);
    if (!out) throw IoError("cannot write suites.json in " + out_dir);
    out << json{{"suites", suites}}.dump(2) << "\n";
  }
  written.push_back("suites.json");
  return written;
}

std::vector<SuiteSpec> load_suites(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open suites manifest: " + manifest_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(manifest_path + ": " + e.what());
  }
  check_keys(j, {"suites"}, "suites manifest");
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<SuiteSpec> specs;
  for (const json& js : j.at("suites")) {
    check_keys(js, {"name", "k_shot", "tasks"}, "suite");
    SuiteSpec spec;
    js.at("name").get_to(spec.name);
    js.at("k_shot").get_to(spec.k_shot);
    if (spec.k_shot < 0) throw ConfigError("suite: negative k_shot");
    for (const json& jt : js.at("tasks")) {
      check_keys(jt, {"file", "baseline"}, "suite task");
      SuiteTask task;
      const std::string file = jt.at("file").get<std::string>();
      jt.at("baseline").get_to(task.baseline);
      if (task.baseline < 0 || task.baseline >= 100)
        throw ConfigError("suite task: baseline must be in [0,100)");
      task.records = load_task_file((base / file).string());
      task.name = task.records.front().task_name;
      spec.tasks.push_back(std::move(task));
    }
    specs.push_back(std::move(spec));
  }
  return specs;
}

std::vector<std::vector<TaskRecord>> load_mixture(
    const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open mixture manifest: " + manifest_path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(manifest_path + ": " + e.what());
  }
  check_keys(j, {"tasks"}, "mixture manifest");
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<std::vector<TaskRecord>> tasks;
  for (const json& jf : j.at("tasks"))
    tasks.push_back(load_task_file((base / jf.get<std::string>()).string()));
  if (tasks.empty()) throw ConfigError("mixture manifest lists no tasks");
  return tasks;
}

}  // namespace moelab
