#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "moelab/evalkit.hpp"
#include "moelab/model.hpp"

namespace moelab {

enum class FreezeMode { None, FreezeGate, FreezeExpert, FreezeMoE };

inline const char* to_string(FreezeMode m) {
  switch (m) {
    case FreezeMode::None: return "none";
    case FreezeMode::FreezeGate: return "freeze_gate";
    case FreezeMode::FreezeExpert: return "freeze_expert";
    case FreezeMode::FreezeMoE: return "freeze_moe";
  }
  return "?";
}

inline FreezeMode freeze_mode_from_string(const std::string& s) {
  if (s == "none") return FreezeMode::None;
  if (s == "freeze_gate") return FreezeMode::FreezeGate;
  if (s == "freeze_expert") return FreezeMode::FreezeExpert;
  if (s == "freeze_moe") return FreezeMode::FreezeMoE;
  throw ConfigError("unknown freeze_mode '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 32;
  int steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  FreezeMode freeze_mode = FreezeMode::None;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  int average_last_n = 1;
  int train_max_k = 1;  // exemplar count per training prompt drawn from [0, k]

  void validate() const {
    if (!(learning_rate > 0)) throw ConfigError("train: learning_rate <= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size < 1");
    if (steps < 0) throw ConfigError("train: negative steps");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
      throw ConfigError("train: betas must be in [0,1)");
    if (!(eps > 0)) throw ConfigError("train: eps <= 0");
    if (checkpoint_every < 0) throw ConfigError("train: negative checkpoint_every");
    if (average_last_n < 1) throw ConfigError("train: average_last_n < 1");
    if (train_max_k < 0) throw ConfigError("train: negative train_max_k");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"freeze_mode", to_string(c.freeze_mode)},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"average_last_n", c.average_last_n},
                     {"train_max_k", c.train_max_k}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("batch_size").get_to(c.batch_size);
  j.at("steps").get_to(c.steps);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("eps").get_to(c.eps);
  c.freeze_mode = freeze_mode_from_string(j.at("freeze_mode").get<std::string>());
  j.at("seed").get_to(c.seed);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  j.at("average_last_n").get_to(c.average_last_n);
  j.at("train_max_k").get_to(c.train_max_k);
}

// None -> {}; FreezeGate -> Gate; FreezeExpert -> Expert; FreezeMoE -> both.
template <class Real>
std::set<std::string> freeze_mask(const ModelParams<Real>& params,
                                  FreezeMode mode) {
  std::set<std::string> frozen;
  for (const ParamEntry<Real>& e : params.entries()) {
    const bool gate = e.role == Role::Gate;
    const bool expert = e.role == Role::Expert;
    switch (mode) {
      case FreezeMode::None: break;
      case FreezeMode::FreezeGate:
        if (gate) frozen.insert(e.name);
        break;
      case FreezeMode::FreezeExpert:
        if (expert) frozen.insert(e.name);
        break;
      case FreezeMode::FreezeMoE:
        if (gate || expert) frozen.insert(e.name);
        break;
    }
  }
  return frozen;
}

// Bias-corrected Adam with constant learning rate. Frozen parameters stay
// bit-identical: their grads are discarded and their moments never advance.
template <class Real>
class Adam {
 public:
  explicit Adam(const TrainConfig& cfg) : cfg_(cfg) { cfg.validate(); }

  void step(ModelParams<Real>& params, const std::set<std::string>& frozen) {
    auto& entries = params.entries();
    if (m_.empty()) {
      m_.resize(entries.size());
      v_.resize(entries.size());
      for (std::size_t i = 0; i < entries.size(); ++i) {
        m_[i].assign(entries[i].tensor.numel(), Real(0));
        v_[i].assign(entries[i].tensor.numel(), Real(0));
      }
    }
    ++t_;
    const double c1 = 1.0 / (1.0 - std::pow(cfg_.beta1, t_));
    const double c2 = 1.0 / (1.0 - std::pow(cfg_.beta2, t_));
    const Real b1 = static_cast<Real>(cfg_.beta1);
    const Real b2 = static_cast<Real>(cfg_.beta2);
    const Real lr = static_cast<Real>(cfg_.learning_rate);
    const Real eps = static_cast<Real>(cfg_.eps);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      ParamEntry<Real>& e = entries[i];
      if (frozen.count(e.name)) {
        e.tensor.zero_grad();
        continue;
      }
      Real* p = e.tensor.data();
      Real* g = e.tensor.grad();
      Real* m = m_[i].data();
      Real* v = v_[i].data();
      for (std::size_t c = 0; c < e.tensor.numel(); ++c) {
        if (!std::isfinite(static_cast<double>(g[c])))
          throw TrainError("non-finite gradient in '" + e.name + "' at step " +
                           std::to_string(t_));
        m[c] = b1 * m[c] + (Real(1) - b1) * g[c];
        v[c] = b2 * v[c] + (Real(1) - b2) * g[c] * g[c];
        const Real mh = m[c] * static_cast<Real>(c1);
        const Real vh = v[c] * static_cast<Real>(c2);
        p[c] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  TrainConfig cfg_;
  int t_ = 0;
  std::vector<std::vector<Real>> m_, v_;
};

struct Batch {
  SequenceBatch seq;
  std::vector<int> targets;  // B*S next-token ids, -1 outside the loss mask
  std::vector<int> task_ids;
};

// Task-uniform then example-uniform sampling; per-example exemplar count k is
// drawn uniformly from [0, min(train_max_k, available)].
inline Batch make_batch(const std::vector<std::vector<TaskRecord>>& tasks,
                        int batch_size, int train_max_k,
                        const CharTokenizer& tok, const ModelConfig& cfg,
                        Rng& rng) {
  if (tasks.empty()) throw ConfigError("make_batch: empty task mixture");
  Batch batch;
  batch.seq.batch = batch_size;
  struct Row {
    std::vector<int> ids;
    int prefix, valid, task;
  };
  std::vector<Row> rows;
  int max_len = 0;
  for (int b = 0; b < batch_size; ++b) {
    const int ti = static_cast<int>(rng.uniform_int(tasks.size()));
    const std::vector<TaskRecord>& recs = tasks[ti];
    if (recs.empty()) throw ConfigError("make_batch: task with no records");
    const TaskRecord& rec = recs[rng.uniform_int(recs.size())];
    const int avail = static_cast<int>(rec.exemplars.size());
    const int kmax = std::min(train_max_k, avail);
    const int k = static_cast<int>(rng.uniform_int(
        static_cast<std::uint64_t>(kmax) + 1));
    const std::vector<int> prompt = tok.encode(assemble_prompt(rec, k));
    const std::vector<int> target = tok.encode(rec.target);
    Row row;
    row.ids.push_back(CharTokenizer::kBos);
    row.ids.insert(row.ids.end(), prompt.begin(), prompt.end());
    row.prefix = static_cast<int>(row.ids.size());
    if (row.prefix > cfg.max_input_len)
      throw LengthError("make_batch: prompt for task '" + rec.task_name +
                        "' needs " + std::to_string(row.prefix) +
                        " tokens, max_input_len is " +
                        std::to_string(cfg.max_input_len));
    if (static_cast<int>(target.size()) + 1 > cfg.max_target_len)
      throw LengthError("make_batch: target for task '" + rec.task_name +
                        "' needs " + std::to_string(target.size() + 1) +
                        " tokens, max_target_len is " +
                        std::to_string(cfg.max_target_len));
    row.ids.insert(row.ids.end(), target.begin(), target.end());
    row.ids.push_back(CharTokenizer::kEos);
    row.valid = static_cast<int>(row.ids.size());
    row.task = ti;
    max_len = std::max(max_len, row.valid);
    rows.push_back(std::move(row));
  }
  batch.seq.seq_len = max_len;
  for (Row& row : rows) {
    row.ids.resize(max_len, CharTokenizer::kPad);
    batch.seq.ids.insert(batch.seq.ids.end(), row.ids.begin(), row.ids.end());
    batch.seq.prefix_lens.push_back(row.prefix);
    batch.seq.valid_lens.push_back(row.valid);
    batch.task_ids.push_back(row.task);
  }
  batch.targets.assign(static_cast<std::size_t>(batch_size) * max_len, -1);
  for (int b = 0; b < batch_size; ++b) {
    const Row& row = rows[b];
    for (int p = row.prefix - 1; p <= row.valid - 2; ++p)
      batch.targets[static_cast<std::size_t>(b) * max_len + p] =
          row.ids[p + 1];
  }
  return batch;
}

template <class Real>
struct LossParts {
  Tensor<Real> total;
  double lm = 0.0;
  double aux = 0.0;
};

// cross_entropy over masked positions plus the stack's weighted aux loss.
template <class Real>
LossParts<Real> loss_fn(Tape<Real>& tape, Tensor<Real> logits,
                        const Batch& batch, Tensor<Real> aux) {
  bool any = false;
  for (int t : batch.targets) any = any || t != -1;
  if (!any) throw TrainError("loss_fn: empty loss mask");
  Tensor<Real> flat = reshape(
      tape, logits, {batch.seq.batch * batch.seq.seq_len, logits.shape().back()});
  Tensor<Real> lm = cross_entropy(tape, flat, batch.targets, -1);
  LossParts<Real> parts;
  parts.lm = static_cast<double>(lm.item());
  parts.aux = static_cast<double>(aux.item());
  parts.total = add(tape, lm, aux);
  return parts;
}

template <class Real>
struct TrainResult {
  ModelConfig model_cfg;
  ModelParams<Real> params;  // averaged over the last n checkpoints
  std::vector<std::string> checkpoint_paths;
  std::string metrics_path;
  std::string final_path;  // averaged checkpoint on disk
};

// Elementwise mean in 64-bit accumulation; all checkpoints must share the
// exact canonical config.
template <class Real>
std::pair<ModelConfig, ModelParams<Real>> average_checkpoints(
    const std::vector<std::string>& paths) {
  if (paths.empty())
    throw ConfigError("average_checkpoints: no checkpoints given");
  auto [cfg, params] = read_checkpoint_file<Real>(paths[0]);
  const std::string cfg_json = canonical_config_json(cfg);
  std::vector<std::vector<double>> acc;
  for (const ParamEntry<Real>& e : params.entries())
    acc.emplace_back(e.tensor.data(), e.tensor.data() + e.tensor.numel());
  for (std::size_t i = 1; i < paths.size(); ++i) {
    auto [cfg_i, params_i] = read_checkpoint_file<Real>(paths[i]);
    if (canonical_config_json(cfg_i) != cfg_json)
      throw ConfigError("average_checkpoints: config of " + paths[i] +
                        " differs from " + paths[0]);
    for (std::size_t p = 0; p < acc.size(); ++p) {
      const Tensor<Real>& t = params_i.entries()[p].tensor;
      for (std::size_t c = 0; c < t.numel(); ++c)
        acc[p][c] += static_cast<double>(t.data()[c]);
    }
  }
  for (std::size_t p = 0; p < acc.size(); ++p) {
    Tensor<Real>& t = params.entries()[p].tensor;
    for (std::size_t c = 0; c < t.numel(); ++c)
      t.data()[c] = static_cast<Real>(acc[p][c] / paths.size());
  }
  return {cfg, std::move(params)};
}

// Deterministic run: all randomness derives from tcfg.seed via named
// sub-streams ("init", "data"/step, "dropout"/step). Emits metrics.jsonl (one
// record per step), periodic checkpoints, a final checkpoint, and the average
// of the last average_last_n checkpoints. A nonempty init_from warm-starts
// from that checkpoint (its config must match mcfg) instead of a fresh init.
template <class Real>
TrainResult<Real> train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                        const std::vector<std::vector<TaskRecord>>& tasks,
                        const std::string& out_dir,
                        const std::string& init_from = "") {
  namespace fs = std::filesystem;
  mcfg.validate();
  tcfg.validate();
  if (tasks.empty()) throw ConfigError("train: empty task mixture");
  fs::create_directories(out_dir);

  const Rng root(tcfg.seed);
  CharTokenizer tok;
  if (mcfg.vocab != tok.vocab_size())
    throw ConfigError("train: model vocab " + std::to_string(mcfg.vocab) +
                      " does not match tokenizer vocab " +
                      std::to_string(tok.vocab_size()));
  TrainResult<Real> result;
  result.model_cfg = mcfg;
  if (init_from.empty()) {
    result.params = ModelParams<Real>::init(mcfg, root);
  } else {
    auto [ck_cfg, ck_params] = read_checkpoint_file<Real>(init_from);
    if (canonical_config_json(ck_cfg) != canonical_config_json(mcfg))
      throw ConfigError("train: config of checkpoint " + init_from +
                        " does not match the run config");
    result.params = std::move(ck_params);
  }
  ModelParams<Real>& params = result.params;
  const std::set<std::string> frozen = freeze_mask(params, tcfg.freeze_mode);
  Adam<Real> opt(tcfg);

  result.metrics_path = (fs::path(out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(result.metrics_path, std::ios::binary);
  if (!metrics) throw IoError("cannot write metrics: " + result.metrics_path);

  auto save_ckpt = [&](const std::string& name) {
    const std::string path = (fs::path(out_dir) / name).string();
    write_checkpoint_file(path, mcfg, params);
    result.checkpoint_paths.push_back(path);
  };

  for (int step = 0; step < tcfg.steps; ++step) {
    Rng data_rng = root.derive("data", static_cast<std::uint64_t>(step));
    Rng drop_rng = root.derive("dropout", static_cast<std::uint64_t>(step));
    const Batch batch =
        make_batch(tasks, tcfg.batch_size, tcfg.train_max_k, tok, mcfg, data_rng);

    params.zero_grads();
    Tape<Real> tape;
    StackOut<Real> out =
        transformer_stack(tape, batch.seq, params, mcfg, true, drop_rng);
    LossParts<Real> loss = loss_fn(tape, out.logits, batch, out.aux);
    const double total = static_cast<double>(loss.total.item());
    if (!std::isfinite(total))
      throw TrainError("train: non-finite loss at step " +
                       std::to_string(step));
    tape.backward(loss.total);
    opt.step(params, frozen);

    double dropped = 0.0;
    nlohmann::ordered_json usage = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < out.usage.size(); ++i) {
      const UsageStats& u = out.usage[i];
      dropped += u.dropped_fraction;
      usage.push_back(nlohmann::ordered_json{
          {"layer", out.moe_layers[i]},
          {"active_fraction", u.active_fraction},
          {"normalized_entropy", u.normalized_entropy},
          {"dropped_fraction", u.dropped_fraction}});
    }
    if (!out.usage.empty()) dropped /= static_cast<double>(out.usage.size());
    nlohmann::ordered_json rec{{"step", step},
                               {"loss", total},
                               {"lm_loss", loss.lm},
                               {"aux_loss", loss.aux},
                               {"dropped_fraction", dropped},
                               {"per_layer_usage", usage}};
    metrics << rec.dump() << "\n";

    if (tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt_%06d.bin", step + 1);
      save_ckpt(name);
    }
  }
  metrics.flush();
  if (!metrics) throw IoError("metrics write failed: " + result.metrics_path);

  save_ckpt("ckpt_final.bin");
  const int n = std::min<int>(tcfg.average_last_n,
                              static_cast<int>(result.checkpoint_paths.size()));
  const std::vector<std::string> last(result.checkpoint_paths.end() - n,
                                      result.checkpoint_paths.end());
  auto [avg_cfg, avg_params] = average_checkpoints<Real>(last);
  (void)avg_cfg;
  result.params = std::move(avg_params);
  result.final_path = (fs::path(out_dir) / "ckpt_avg.bin").string();
  write_checkpoint_file(result.final_path, mcfg, result.params);
  return result;
}

}  // namespace moelab
