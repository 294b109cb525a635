#pragma once

#include <array>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "moelab/routing.hpp"

namespace moelab {

enum class MoePattern { EveryOther, All, None };

inline const char* to_string(MoePattern p) {
  switch (p) {
    case MoePattern::EveryOther: return "every_other";
    case MoePattern::All: return "all";
    case MoePattern::None: return "none";
  }
  return "?";
}

inline MoePattern moe_pattern_from_string(const std::string& s) {
  if (s == "every_other") return MoePattern::EveryOther;
  if (s == "all") return MoePattern::All;
  if (s == "none") return MoePattern::None;
  throw ConfigError("unknown moe_pattern '" + s + "'");
}

struct ModelConfig {
  int vocab = 99;
  int d_model = 32;
  int d_ff = 64;
  int num_layers = 2;
  int num_heads = 4;
  RouterConfig router;
  MoePattern moe_pattern = MoePattern::EveryOther;
  double dropout = 0.05;
  double expert_dropout = 0.2;
  int max_input_len = 128;   // prompt budget incl. BOS
  int max_target_len = 32;   // continuation budget incl. EOS; 4:1 input:target
  int rel_pos_buckets = 64;  // exact buckets out to distance 15 either side
  int rel_pos_max_distance = 128;

  void validate() const {
    if (vocab < 2) throw ConfigError("model: vocab must be >= 2");
    if (d_model < 1 || d_ff < 1 || num_layers < 1)
      throw ConfigError("model: dims/layers must be >= 1");
    if (num_heads < 1 || d_model % num_heads != 0)
      throw ConfigError("model: d_model (" + std::to_string(d_model) +
                        ") must divide by num_heads (" +
                        std::to_string(num_heads) + ")");
    if (!(dropout >= 0 && dropout < 1) ||
        !(expert_dropout >= 0 && expert_dropout < 1))
      throw ConfigError("model: dropout rates must be in [0,1)");
    if (max_input_len < 1 || max_target_len < 1)
      throw ConfigError("model: sequence length limits must be >= 1");
    if (rel_pos_buckets < 4 || rel_pos_max_distance < 2)
      throw ConfigError("model: relative-position scheme underspecified");
    router.validate();
  }

  // EveryOther puts MoE on odd-indexed blocks: at least one dense block first.
  bool layer_is_moe(int layer) const {
    switch (moe_pattern) {
      case MoePattern::EveryOther: return layer % 2 == 1;
      case MoePattern::All: return true;
      case MoePattern::None: return false;
    }
    return false;
  }

  int max_seq_len() const { return max_input_len + max_target_len; }
};

inline void to_json(nlohmann::json& j, const RouterConfig& c) {
  j = nlohmann::json{{"strategy", to_string(c.strategy)},
                     {"num_experts", c.num_experts},
                     {"top_k", c.top_k},
                     {"capacity_factor", c.capacity_factor},
                     {"aux_loss", to_string(c.aux_loss)},
                     {"aux_weight_balance", c.aux_weight_balance},
                     {"aux_weight_z", c.aux_weight_z},
                     {"router_noise", c.router_noise}};
}

inline void from_json(const nlohmann::json& j, RouterConfig& c) {
  c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  j.at("num_experts").get_to(c.num_experts);
  j.at("top_k").get_to(c.top_k);
  j.at("capacity_factor").get_to(c.capacity_factor);
  c.aux_loss = aux_loss_from_string(j.at("aux_loss").get<std::string>());
  j.at("aux_weight_balance").get_to(c.aux_weight_balance);
  j.at("aux_weight_z").get_to(c.aux_weight_z);
  j.at("router_noise").get_to(c.router_noise);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab", c.vocab},
                     {"d_model", c.d_model},
                     {"d_ff", c.d_ff},
                     {"num_layers", c.num_layers},
                     {"num_heads", c.num_heads},
                     {"router", c.router},
                     {"moe_pattern", to_string(c.moe_pattern)},
                     {"dropout", c.dropout},
                     {"expert_dropout", c.expert_dropout},
                     {"max_input_len", c.max_input_len},
                     {"max_target_len", c.max_target_len},
                     {"rel_pos_buckets", c.rel_pos_buckets},
                     {"rel_pos_max_distance", c.rel_pos_max_distance}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab").get_to(c.vocab);
  j.at("d_model").get_to(c.d_model);
  j.at("d_ff").get_to(c.d_ff);
  j.at("num_layers").get_to(c.num_layers);
  j.at("num_heads").get_to(c.num_heads);
  j.at("router").get_to(c.router);
  c.moe_pattern = moe_pattern_from_string(j.at("moe_pattern").get<std::string>());
  j.at("dropout").get_to(c.dropout);
  j.at("expert_dropout").get_to(c.expert_dropout);
  j.at("max_input_len").get_to(c.max_input_len);
  j.at("max_target_len").get_to(c.max_target_len);
  j.at("rel_pos_buckets").get_to(c.rel_pos_buckets);
  j.at("rel_pos_max_distance").get_to(c.rel_pos_max_distance);
}

// Sorted-key single-line JSON; the byte-exact form stored in checkpoint
// headers and compared when averaging.
inline std::string canonical_config_json(const ModelConfig& cfg) {
  nlohmann::json j = cfg;
  return j.dump();
}

enum class Role { Dense, Gate, Expert };

inline const char* to_string(Role r) {
  switch (r) {
    case Role::Dense: return "dense";
    case Role::Gate: return "gate";
    case Role::Expert: return "expert";
  }
  return "?";
}

template <class Real>
struct ParamEntry {
  std::string name;
  Role role;
  Tensor<Real> tensor;
};

// All learnable parameters in a fixed construction order, each tagged with the
// role the freezing ablations act on. Initialization derives one rng per
// parameter name, so parameters shared by two configs (same name) get
// identical values for the same seed regardless of what else each model holds.
template <class Real>
class ModelParams {
 public:
  static ModelParams build(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    const int d = cfg.d_model, f = cfg.d_ff, v = cfg.vocab;
    p.add("embed.table", Role::Dense, {v, d});
    p.add("pos.table", Role::Dense, {cfg.max_seq_len(), d});
    p.add("relpos.table", Role::Dense, {cfg.rel_pos_buckets, cfg.num_heads});
    for (int l = 0; l < cfg.num_layers; ++l) {
      const std::string lp = "layer" + std::to_string(l) + ".";
      p.add(lp + "attn.norm.gain", Role::Dense, {d});
      p.add(lp + "attn.norm.bias", Role::Dense, {d});
      p.add(lp + "attn.wq", Role::Dense, {d, d});
      p.add(lp + "attn.wk", Role::Dense, {d, d});
      p.add(lp + "attn.wv", Role::Dense, {d, d});
      p.add(lp + "attn.wo", Role::Dense, {d, d});
      if (cfg.layer_is_moe(l)) {
        p.add(lp + "moe.norm.gain", Role::Dense, {d});
        p.add(lp + "moe.norm.bias", Role::Dense, {d});
        p.add(lp + "moe.router", Role::Gate, {d, cfg.router.num_experts});
        for (int e = 0; e < cfg.router.num_experts; ++e) {
          const std::string ep = lp + "moe.expert" + std::to_string(e) + ".";
          p.add(ep + "w1", Role::Expert, {d, f});
          p.add(ep + "b1", Role::Expert, {f});
          p.add(ep + "w2", Role::Expert, {f, d});
          p.add(ep + "b2", Role::Expert, {d});
        }
      } else {
        p.add(lp + "ffn.norm.gain", Role::Dense, {d});
        p.add(lp + "ffn.norm.bias", Role::Dense, {d});
        p.add(lp + "ffn.w1", Role::Dense, {d, f});
        p.add(lp + "ffn.b1", Role::Dense, {f});
        p.add(lp + "ffn.w2", Role::Dense, {f, d});
        p.add(lp + "ffn.b2", Role::Dense, {d});
      }
    }
    p.add("final.norm.gain", Role::Dense, {d});
    p.add("final.norm.bias", Role::Dense, {d});
    p.add("out.w", Role::Dense, {d, v});
    p.add("out.b", Role::Dense, {v});
    return p;
  }

  static ModelParams init(const ModelConfig& cfg, const Rng& seed_rng) {
    ModelParams p = build(cfg);
    const Rng init_base = seed_rng.derive("init");
    for (ParamEntry<Real>& e : p.entries_) {
      Rng rng = init_base.derive(e.name);
      const double sd = init_stddev(e, cfg);
      if (ends_with(e.name, "norm.gain")) {
        std::fill(e.tensor.values().begin(), e.tensor.values().end(), Real(1));
      } else if (sd == 0.0) {
        // biases and norm offsets start at zero
      } else {
        for (Real& v : e.tensor.values())
          v = static_cast<Real>(rng.normal() * sd);
      }
    }
    return p;
  }

  Tensor<Real>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw ConfigError("no parameter named '" + name + "'");
    return entries_[it->second].tensor;
  }
  const Tensor<Real>& at(const std::string& name) const {
    return const_cast<ModelParams*>(this)->at(name);
  }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<ParamEntry<Real>>& entries() { return entries_; }
  const std::vector<ParamEntry<Real>>& entries() const { return entries_; }

  void zero_grads() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

 private:
  static bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  static double init_stddev(const ParamEntry<Real>& e, const ModelConfig& cfg) {
    const std::string& n = e.name;
    if (ends_with(n, ".gain") || ends_with(n, ".bias") ||
        ends_with(n, ".b1") || ends_with(n, ".b2") || n == "out.b")
      return 0.0;
    if (e.role == Role::Gate) return 0.02;  // near-uniform initial gating
    if (n == "embed.table" || n == "pos.table")
      return 1.0 / std::sqrt(cfg.d_model);
    if (n == "relpos.table") return 0.1;
    // fan-in scaling for all remaining weight matrices
    return 1.0 / std::sqrt(static_cast<double>(e.tensor.dim(0)));
  }

  void add(std::string name, Role role, Shape shape) {
    index_[name] = entries_.size();
    entries_.push_back(
        ParamEntry<Real>{name, role, Tensor<Real>::zeros(std::move(shape), true)});
    if (index_.size() != entries_.size())
      throw ConfigError("duplicate parameter name '" + entries_.back().name +
                        "'");
  }

  std::vector<ParamEntry<Real>> entries_;
  std::map<std::string, std::size_t> index_;
};

template <class Real>
struct FfnView {
  Tensor<Real> w1, b1, w2, b2;
};

template <class Real>
struct MoeLayerView {
  Tensor<Real> norm_gain, norm_bias, router;
  std::vector<FfnView<Real>> experts;
};

// affine(D->F) -> gelu -> dropout(expert_dropout) -> affine(F->D).
template <class Real>
Tensor<Real> expert_ffn(Tape<Real>& tape, Tensor<Real> x,
                        const FfnView<Real>& p, double rate, bool training,
                        Rng& rng) {
  Tensor<Real> h = affine(tape, std::move(x), p.w1, p.b1);
  h = gelu(tape, h);
  h = dropout(tape, h, rate, training, rng);
  return affine(tape, h, p.w2, p.b2);
}

template <class Real>
struct MoeLayerOut {
  Tensor<Real> y;           // x + dropout(combined expert output)
  Tensor<Real> aux;         // weighted aux loss (non-grad zero scalar if none)
  UsageStats usage;
  DispatchPlan plan;
};

// Pre-norm MoE sublayer over flat tokens: gate -> route -> batched experts ->
// weighted combine -> residual. The residual path carries dropped tokens.
template <class Real>
MoeLayerOut<Real> moe_layer(Tape<Real>& tape, Tensor<Real> x,
                            const MoeLayerView<Real>& p,
                            const RouterConfig& rcfg, double dropout_rate,
                            double expert_dropout_rate, bool training,
                            Rng& rng) {
  rcfg.validate();
  if (x.rank() != 2)
    throw ShapeError("moe_layer: tokens must be [T,D], got " +
                     shape_str(x.shape()));
  if (static_cast<int>(p.experts.size()) != rcfg.num_experts)
    throw ConfigError("moe_layer: " + std::to_string(p.experts.size()) +
                      " expert param sets for num_experts=" +
                      std::to_string(rcfg.num_experts));
  const int t_count = x.dim(0);

  Tensor<Real> h = layer_norm(tape, x, p.norm_gain, p.norm_bias,
                              static_cast<Real>(1e-6));
  Tensor<Real> logits = matmul(tape, h, p.router);
  if (training && rcfg.router_noise > 0.0) {
    Tensor<Real> noise =
        Tensor<Real>::randn(logits.shape(), rng, rcfg.router_noise);
    logits = add(tape, logits, noise);
  }
  Tensor<Real> probs = softmax(tape, logits);

  const int cap = capacity(t_count, rcfg);
  DispatchPlan plan = route(logits, probs, rcfg, cap);
  Tensor<Real> w_all = assignment_weights(tape, probs, plan);

  // Kept assignments grouped by expert, slot order within each expert.
  std::vector<std::vector<int>> tok_of(rcfg.num_experts), aidx_of(rcfg.num_experts);
  for (int i = 0; i < static_cast<int>(plan.assignments.size()); ++i) {
    const Assignment& a = plan.assignments[i];
    if (a.slot < 0) continue;
    tok_of[a.expert].push_back(a.token);
    aidx_of[a.expert].push_back(i);
  }
  Tensor<Real> combined;
  bool have = false;
  for (int e = 0; e < rcfg.num_experts; ++e) {
    if (tok_of[e].empty()) continue;
    Tensor<Real> xe = gather_rows(tape, h, tok_of[e]);
    Tensor<Real> oe =
        expert_ffn(tape, xe, p.experts[e], expert_dropout_rate, training, rng);
    Tensor<Real> we = gather_elems(tape, w_all, aidx_of[e]);
    Tensor<Real> ye = combine_rows(tape, oe, tok_of[e], we, t_count);
    combined = have ? add(tape, combined, ye) : ye;
    have = true;
  }
  if (!have) combined = Tensor<Real>::zeros(x.shape());

  MoeLayerOut<Real> out;
  out.plan = std::move(plan);
  out.usage = expert_usage(out.plan, rcfg.num_experts);
  combined = dropout(tape, combined, dropout_rate, training, rng);
  out.y = add(tape, x, combined);

  const bool want_balance = rcfg.aux_loss == AuxLossKind::Balance ||
                            rcfg.aux_loss == AuxLossKind::Both;
  const bool want_z = rcfg.aux_loss == AuxLossKind::ZLoss ||
                      rcfg.aux_loss == AuxLossKind::Both;
  Tensor<Real> aux;
  bool have_aux = false;
  if (want_balance) {
    aux = scale(tape, balance_loss(tape, probs, out.plan),
                static_cast<Real>(rcfg.aux_weight_balance));
    have_aux = true;
  }
  if (want_z) {
    Tensor<Real> z = scale(tape, router_z_loss(tape, logits),
                           static_cast<Real>(rcfg.aux_weight_z));
    aux = have_aux ? add(tape, aux, z) : z;
    have_aux = true;
  }
  out.aux = have_aux ? aux : Tensor<Real>::zeros(Shape{});
  return out;
}

// Token ids plus the segment structure the prefix-LM objective needs.
struct SequenceBatch {
  int batch = 0;
  int seq_len = 0;
  std::vector<int> ids;          // batch*seq_len, row-major
  std::vector<int> prefix_lens;  // bidirectional-attention span per example
  std::vector<int> valid_lens;   // tokens beyond are padding

  void validate(int vocab, int max_seq) const {
    if (batch < 1 || seq_len < 1)
      throw ShapeError("batch: need batch>=1 and seq_len>=1");
    if (seq_len > max_seq)
      throw LengthError("batch: seq_len " + std::to_string(seq_len) +
                        " exceeds model limit " + std::to_string(max_seq));
    if (static_cast<int>(ids.size()) != batch * seq_len ||
        static_cast<int>(prefix_lens.size()) != batch ||
        static_cast<int>(valid_lens.size()) != batch)
      throw ShapeError("batch: field sizes disagree");
    for (int id : ids)
      if (id < 0 || id >= vocab)
        throw IndexError("batch: token id " + std::to_string(id) +
                         " out of range [0," + std::to_string(vocab) + ")");
    for (int b = 0; b < batch; ++b) {
      if (prefix_lens[b] < 1 || prefix_lens[b] > seq_len)
        throw LengthError("batch: prefix_len out of range");
      if (valid_lens[b] < prefix_lens[b] || valid_lens[b] > seq_len)
        throw LengthError("batch: valid_len out of range");
    }
  }
};

// Additive attention mask: query q may attend key k iff k is inside the
// example's prefix or k <= q, and k is not padding.
template <class Real>
Tensor<Real> prefix_lm_mask(const SequenceBatch& b) {
  const int s = b.seq_len;
  Tensor<Real> m = Tensor<Real>::full({b.batch, s, s}, Real(-1e30));
  Real* pm = m.data();
  for (int bi = 0; bi < b.batch; ++bi) {
    const int prefix = b.prefix_lens[bi];
    const int valid = b.valid_lens[bi];
    Real* mb = pm + static_cast<std::size_t>(bi) * s * s;
    for (int q = 0; q < s; ++q)
      for (int k = 0; k < valid; ++k)
        if (k < prefix || k <= q) mb[static_cast<std::size_t>(q) * s + k] = 0;
  }
  return m;
}

template <class Real>
struct StackOut {
  Tensor<Real> logits;               // [B,S,V]
  Tensor<Real> aux;                  // summed weighted aux losses
  std::vector<int> moe_layers;       // block indices that carried MoE
  std::vector<UsageStats> usage;     // aligned with moe_layers
  std::vector<DispatchPlan> plans;   // aligned with moe_layers
};

template <class Real>
MoeLayerView<Real> moe_view(ModelParams<Real>& params, const ModelConfig& cfg,
                            int layer) {
  const std::string lp = "layer" + std::to_string(layer) + ".moe.";
  MoeLayerView<Real> v;
  v.norm_gain = params.at(lp + "norm.gain");
  v.norm_bias = params.at(lp + "norm.bias");
  v.router = params.at(lp + "router");
  for (int e = 0; e < cfg.router.num_experts; ++e) {
    const std::string ep = lp + "expert" + std::to_string(e) + ".";
    v.experts.push_back(FfnView<Real>{params.at(ep + "w1"), params.at(ep + "b1"),
                                      params.at(ep + "w2"),
                                      params.at(ep + "b2")});
  }
  return v;
}

// Embed -> L pre-norm blocks (self-attention with T5-style bucketed relative
// bias; FFN or MoE per moe_pattern) -> final norm -> vocab projection.
template <class Real>
StackOut<Real> transformer_stack(Tape<Real>& tape, const SequenceBatch& batch,
                                 ModelParams<Real>& params,
                                 const ModelConfig& cfg, bool training,
                                 Rng& rng) {
  cfg.validate();
  batch.validate(cfg.vocab, cfg.max_seq_len());
  const int bsz = batch.batch, s = batch.seq_len;
  const int d = cfg.d_model, heads = cfg.num_heads, dh = d / heads;

  Tensor<Real> x = embedding_lookup(tape, params.at("embed.table"), batch.ids);
  x = reshape(tape, x, {bsz, s, d});
  x = add_position_rows(tape, x, params.at("pos.table"));
  const Tensor<Real> mask = prefix_lm_mask<Real>(batch);
  Tensor<Real> rel = relative_bias(tape, params.at("relpos.table"), s,
                                   cfg.rel_pos_max_distance);

  StackOut<Real> out;
  Tensor<Real> aux_total;
  bool have_aux = false;

  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string lp = "layer" + std::to_string(l) + ".";
    // self-attention sublayer
    {
      Tensor<Real> h = layer_norm(tape, x, params.at(lp + "attn.norm.gain"),
                                  params.at(lp + "attn.norm.bias"),
                                  static_cast<Real>(1e-6));
      auto heads_of = [&](const char* w) {
        Tensor<Real> t = matmul(tape, h, params.at(lp + w));
        t = reshape(tape, t, {bsz, s, heads, dh});
        return transpose12(tape, t);  // [B,H,S,Dh]
      };
      Tensor<Real> q = heads_of("attn.wq");
      Tensor<Real> k = heads_of("attn.wk");
      Tensor<Real> v = heads_of("attn.wv");
      Tensor<Real> scores = bmm(tape, q, k, /*trans_b=*/true);
      scores = scale(tape, scores,
                     static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh))));
      scores = add_head_bias(tape, scores, rel);
      scores = add_attention_mask(tape, scores, mask);
      Tensor<Real> attn = softmax(tape, scores);
      Tensor<Real> ctx = bmm(tape, attn, v, /*trans_b=*/false);
      ctx = transpose12(tape, ctx);
      ctx = reshape(tape, ctx, {bsz, s, d});
      Tensor<Real> o = matmul(tape, ctx, params.at(lp + "attn.wo"));
      o = dropout(tape, o, cfg.dropout, training, rng);
      x = add(tape, x, o);
    }
    // feed-forward sublayer: dense or MoE
    if (cfg.layer_is_moe(l)) {
      Tensor<Real> flat = reshape(tape, x, {bsz * s, d});
      MoeLayerOut<Real> mo =
          moe_layer(tape, flat, moe_view(params, cfg, l), cfg.router,
                    cfg.dropout, cfg.expert_dropout, training, rng);
      x = reshape(tape, mo.y, {bsz, s, d});
      out.moe_layers.push_back(l);
      out.usage.push_back(std::move(mo.usage));
      out.plans.push_back(std::move(mo.plan));
      if (mo.aux.requires_grad() || mo.aux.item() != Real(0)) {
        aux_total = have_aux ? add(tape, aux_total, mo.aux) : mo.aux;
        have_aux = true;
      }
    } else {
      Tensor<Real> h = layer_norm(tape, x, params.at(lp + "ffn.norm.gain"),
                                  params.at(lp + "ffn.norm.bias"),
                                  static_cast<Real>(1e-6));
      h = affine(tape, h, params.at(lp + "ffn.w1"), params.at(lp + "ffn.b1"));
      h = gelu(tape, h);
      h = dropout(tape, h, cfg.dropout, training, rng);
      h = affine(tape, h, params.at(lp + "ffn.w2"), params.at(lp + "ffn.b2"));
      h = dropout(tape, h, cfg.dropout, training, rng);
      x = add(tape, x, h);
    }
  }
  x = layer_norm(tape, x, params.at("final.norm.gain"),
                 params.at("final.norm.bias"), static_cast<Real>(1e-6));
  out.logits = affine(tape, x, params.at("out.w"), params.at("out.b"));
  out.aux = have_aux ? aux_total : Tensor<Real>::zeros(Shape{});
  return out;
}

struct ParamCount {
  std::size_t total = 0;
  std::size_t active_per_token = 0;
};

// active_per_token replaces each MoE layer's E experts by its top_k.
template <class Real>
ParamCount count_params(const ModelParams<Real>& params,
                        const ModelConfig& cfg) {
  ParamCount c;
  std::map<std::string, std::map<int, std::size_t>> experts_by_layer;
  for (const ParamEntry<Real>& e : params.entries()) {
    c.total += e.tensor.numel();
    const auto pos = e.name.find(".expert");
    if (e.role == Role::Expert && pos != std::string::npos) {
      const std::string layer = e.name.substr(0, pos);
      const std::size_t id_start = pos + 7;
      const std::size_t dot = e.name.find('.', id_start);
      const int expert_id = std::stoi(e.name.substr(id_start, dot - id_start));
      experts_by_layer[layer][expert_id] += e.tensor.numel();
    }
  }
  std::size_t inactive = 0;
  for (const auto& [layer, experts] : experts_by_layer) {
    const std::size_t per_expert = experts.begin()->second;
    const int e_count = static_cast<int>(experts.size());
    const int k = std::min(cfg.router.top_k, e_count);
    inactive += static_cast<std::size_t>(e_count - k) * per_expert;
  }
  c.active_per_token = c.total - inactive;
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint format:
//   bytes 0..15  magic "MOELAB.CKPT.001\0"
//   u64 + bytes  canonical config JSON
//   u32          parameter count
//   per param:   u64 + bytes name, u32 role (0 dense, 1 gate, 2 expert),
//                tensor dump (numerics format)
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 16> kCkptMagic = {
    'M', 'O', 'E', 'L', 'A', 'B', '.', 'C', 'K', 'P', 'T', '.', '0', '0', '1',
    '\0'};

template <class Real>
void write_checkpoint(std::ostream& out, const ModelConfig& cfg,
                      const ModelParams<Real>& params) {
  out.write(kCkptMagic.data(), kCkptMagic.size());
  const std::string cj = canonical_config_json(cfg);
  detail::write_pod(out, static_cast<std::uint64_t>(cj.size()));
  out.write(cj.data(), static_cast<std::streamsize>(cj.size()));
  detail::write_pod(out, static_cast<std::uint32_t>(params.entries().size()));
  for (const ParamEntry<Real>& e : params.entries()) {
    detail::write_pod(out, static_cast<std::uint64_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    detail::write_pod(out, static_cast<std::uint32_t>(e.role));
    write_tensor(out, e.tensor);
  }
  if (!out) throw IoError("checkpoint write failed");
}

template <class Real>
std::pair<ModelConfig, ModelParams<Real>> read_checkpoint(std::istream& in) {
  std::array<char, 16> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCkptMagic)
    throw IoError("checkpoint read: bad magic header");
  const auto clen = detail::read_pod<std::uint64_t>(in);
  std::string cj(clen, '\0');
  in.read(cj.data(), static_cast<std::streamsize>(clen));
  if (!in) throw IoError("checkpoint read: truncated config");
  ModelConfig cfg = nlohmann::json::parse(cj).get<ModelConfig>();
  ModelParams<Real> params = ModelParams<Real>::build(cfg);
  const auto n = detail::read_pod<std::uint32_t>(in);
  if (n != params.entries().size())
    throw IoError("checkpoint read: " + std::to_string(n) +
                  " params, config implies " +
                  std::to_string(params.entries().size()));
  for (ParamEntry<Real>& e : params.entries()) {
    const auto nlen = detail::read_pod<std::uint64_t>(in);
    std::string name(nlen, '\0');
    in.read(name.data(), static_cast<std::streamsize>(nlen));
    if (!in || name != e.name)
      throw IoError("checkpoint read: expected param '" + e.name + "', got '" +
                    name + "'");
    const auto role = detail::read_pod<std::uint32_t>(in);
    if (role != static_cast<std::uint32_t>(e.role))
      throw IoError("checkpoint read: role mismatch for '" + e.name + "'");
    Tensor<Real> t = read_tensor<Real>(in);
    if (t.shape() != e.tensor.shape())
      throw IoError("checkpoint read: shape mismatch for '" + e.name + "'");
    std::copy(t.data(), t.data() + t.numel(), e.tensor.data());
  }
  return {cfg, std::move(params)};
}

template <class Real>
void write_checkpoint_file(const std::string& path, const ModelConfig& cfg,
                           const ModelParams<Real>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  write_checkpoint(out, cfg, params);
  if (!out) throw IoError("checkpoint write failed: " + path);
}

template <class Real>
std::pair<ModelConfig, ModelParams<Real>> read_checkpoint_file(
    const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  return read_checkpoint<Real>(in);
}

}  // namespace moelab
