#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "moelab/ops.hpp"

namespace moelab {

enum class Strategy { TokenChoiceTop1, TokenChoiceTop2, ExpertChoice };
enum class AuxLossKind { None, Balance, ZLoss, Both };

inline const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::TokenChoiceTop1: return "token_choice_top1";
    case Strategy::TokenChoiceTop2: return "token_choice_top2";
    case Strategy::ExpertChoice: return "expert_choice";
  }
  return "?";
}

inline const char* to_string(AuxLossKind k) {
  switch (k) {
    case AuxLossKind::None: return "none";
    case AuxLossKind::Balance: return "balance";
    case AuxLossKind::ZLoss: return "z";
    case AuxLossKind::Both: return "both";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "token_choice_top1") return Strategy::TokenChoiceTop1;
  if (s == "token_choice_top2") return Strategy::TokenChoiceTop2;
  if (s == "expert_choice") return Strategy::ExpertChoice;
  throw ConfigError("unknown routing strategy '" + s + "'");
}

inline AuxLossKind aux_loss_from_string(const std::string& s) {
  if (s == "none") return AuxLossKind::None;
  if (s == "balance") return AuxLossKind::Balance;
  if (s == "z") return AuxLossKind::ZLoss;
  if (s == "both") return AuxLossKind::Both;
  throw ConfigError("unknown aux loss kind '" + s + "'");
}

struct RouterConfig {
  Strategy strategy = Strategy::TokenChoiceTop1;
  int num_experts = 1;
  int top_k = 1;
  double capacity_factor = 1.0;
  AuxLossKind aux_loss = AuxLossKind::None;
  double aux_weight_balance = 0.01;
  double aux_weight_z = 0.001;
  double router_noise = 0.0;  // stddev of seeded additive logit noise (training only)

  void validate() const {
    if (num_experts < 1) throw ConfigError("router: num_experts must be >= 1");
    if (top_k < 1 || top_k > num_experts)
      throw ConfigError("router: top_k must be in [1, num_experts]");
    if (strategy == Strategy::TokenChoiceTop1 && top_k != 1)
      throw ConfigError("router: token_choice_top1 requires top_k = 1");
    if (strategy == Strategy::TokenChoiceTop2 && top_k != 2)
      throw ConfigError("router: token_choice_top2 requires top_k = 2");
    if (!(capacity_factor > 0))
      throw ConfigError("router: capacity_factor must be > 0");
    if (aux_weight_balance < 0 || aux_weight_z < 0)
      throw ConfigError("router: aux weights must be >= 0");
    if (router_noise < 0) throw ConfigError("router: noise must be >= 0");
  }
};

struct Assignment {
  int token;
  int expert;
  int slot;      // -1 when this choice was dropped at capacity
  double gate;   // combine weight (0 contribution if slot < 0)
};

// Token-choice per-token top-K record; probs are the raw gate probs of the
// chosen pair, kept marks which choices secured a slot.
struct TokenTopK {
  int k = 0;
  std::array<int, 2> expert{-1, -1};
  std::array<double, 2> prob{0.0, 0.0};
  std::array<bool, 2> kept{false, false};
};

struct DispatchPlan {
  Strategy strategy = Strategy::TokenChoiceTop1;
  int num_tokens = 0;
  int num_experts = 0;
  int capacity = 0;
  std::vector<Assignment> assignments;  // kept and dropped choices
  std::vector<int> dropped;             // tokens with zero kept assignments
  std::vector<double> gate_probs;       // T×E snapshot for stats/trace
  std::vector<int> top1;                // per-token argmax of gate_probs
  std::vector<TokenTopK> topk;          // token-choice only
};

// C = ceil(cf·K·T/E), floored at 1.
inline int capacity(int num_tokens, const RouterConfig& cfg) {
  if (num_tokens < 1) throw ConfigError("capacity: need at least one token");
  cfg.validate();
  const double raw = cfg.capacity_factor * cfg.top_k * num_tokens /
                     static_cast<double>(cfg.num_experts);
  return std::max(1, static_cast<int>(std::ceil(raw)));
}

namespace detail {

template <class Real>
void check_probs_shape(const Tensor<Real>& probs, const char* who) {
  if (probs.rank() != 2)
    throw ShapeError(std::string(who) + ": probs must be [T,E], got " +
                     shape_str(probs.shape()));
}

template <class Real>
std::vector<int> argmax_rows(const Tensor<Real>& probs) {
  const int t = probs.dim(0), e = probs.dim(1);
  std::vector<int> out(t);
  for (int i = 0; i < t; ++i) {
    const Real* row = probs.data() + static_cast<std::size_t>(i) * e;
    int best = 0;
    for (int j = 1; j < e; ++j)
      if (row[j] > row[best]) best = j;  // ties keep lower index
    out[i] = best;
  }
  return out;
}

template <class Real>
std::vector<double> snapshot(const Tensor<Real>& t) {
  return std::vector<double>(t.data(), t.data() + t.numel());
}

}  // namespace detail

// Tokens claim slots in ascending token order, each token's choices in rank
// order; a choice whose expert is full keeps its weight but gets slot -1 and
// contributes nothing. K=2 weights are the pair's probs renormalized to sum 1;
// a survivor of a half-dropped pair keeps that same renormalized weight.
template <class Real>
DispatchPlan route_token_choice(const Tensor<Real>& probs, int top_k, int cap) {
  detail::check_probs_shape(probs, "route_token_choice");
  if (cap < 1) throw ConfigError("route_token_choice: capacity < 1");
  if (top_k != 1 && top_k != 2)
    throw ConfigError("route_token_choice: top_k must be 1 or 2");
  const int t_count = probs.dim(0);
  const int e_count = probs.dim(1);
  if (top_k > e_count)
    throw ConfigError("route_token_choice: top_k exceeds expert count");

  DispatchPlan plan;
  plan.strategy =
      top_k == 1 ? Strategy::TokenChoiceTop1 : Strategy::TokenChoiceTop2;
  plan.num_tokens = t_count;
  plan.num_experts = e_count;
  plan.capacity = cap;
  plan.gate_probs = detail::snapshot(probs);
  plan.top1 = detail::argmax_rows(probs);
  plan.topk.resize(t_count);

  std::vector<int> used(e_count, 0);
  for (int t = 0; t < t_count; ++t) {
    const Real* row = probs.data() + static_cast<std::size_t>(t) * e_count;
    int best = 0, second = -1;
    for (int j = 1; j < e_count; ++j) {
      if (row[j] > row[best]) {
        second = best;
        best = j;
      } else if (second < 0 || row[j] > row[second]) {
        second = j;
      }
    }
    TokenTopK& tk = plan.topk[t];
    tk.k = top_k;
    tk.expert[0] = best;
    tk.prob[0] = static_cast<double>(row[best]);
    if (top_k == 2) {
      tk.expert[1] = second;
      tk.prob[1] = static_cast<double>(row[second]);
    }
    bool any_kept = false;
    for (int r = 0; r < top_k; ++r) {
      const int e = tk.expert[r];
      Real gate;
      if (top_k == 1) {
        gate = row[e];
      } else {
        const Real denom = row[tk.expert[0]] + row[tk.expert[1]];
        gate = denom > Real(0) ? row[e] / denom
                               : Real(1) / Real(2);  // degenerate all-zero row
      }
      const bool kept = used[e] < cap;
      const int slot = kept ? used[e]++ : -1;
      tk.kept[r] = kept;
      any_kept = any_kept || kept;
      plan.assignments.push_back(
          Assignment{t, e, slot, static_cast<double>(gate)});
    }
    if (!any_kept) plan.dropped.push_back(t);
  }
  return plan;
}

// Each expert independently takes the top-cap tokens of its score column
// (ties -> lower token index); gate weight is the token's row-softmax prob.
// Pass probs=nullptr to have the softmax computed here from the scores.
template <class Real>
DispatchPlan route_expert_choice(
    const Tensor<Real>& scores,
    const Tensor<std::type_identity_t<Real>>* probs, int cap) {
  detail::check_probs_shape(scores, "route_expert_choice");
  if (cap < 1) throw ConfigError("route_expert_choice: capacity < 1");
  Tensor<Real> local_probs;
  if (probs == nullptr) {
    Tape<Real> scratch;
    scratch.recording = false;
    Tensor<Real> s = scores;
    local_probs = softmax(scratch, s);
    probs = &local_probs;
  } else if (probs->shape() != scores.shape()) {
    throw ShapeError("route_expert_choice: probs shape " +
                     shape_str(probs->shape()) + " vs scores " +
                     shape_str(scores.shape()));
  }
  const int t_count = scores.dim(0);
  const int e_count = scores.dim(1);

  DispatchPlan plan;
  plan.strategy = Strategy::ExpertChoice;
  plan.num_tokens = t_count;
  plan.num_experts = e_count;
  plan.capacity = cap;
  plan.gate_probs = detail::snapshot(*probs);
  plan.top1 = detail::argmax_rows(*probs);

  const int take = std::min(cap, t_count);
  std::vector<int> order(t_count);
  std::vector<bool> picked(t_count);
  for (int e = 0; e < e_count; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const Real sa = scores.data()[static_cast<std::size_t>(a) * e_count + e];
      const Real sb = scores.data()[static_cast<std::size_t>(b) * e_count + e];
      if (sa != sb) return sa > sb;
      return a < b;
    });
    for (int r = 0; r < take; ++r) {
      const int t = order[r];
      const Real gate =
          probs->data()[static_cast<std::size_t>(t) * e_count + e];
      plan.assignments.push_back(
          Assignment{t, e, r, static_cast<double>(gate)});
      picked[t] = true;
    }
  }
  for (int t = 0; t < t_count; ++t)
    if (!picked[t]) plan.dropped.push_back(t);
  return plan;
}

template <class Real>
DispatchPlan route(const Tensor<Real>& logits_or_scores,
                   const Tensor<Real>& probs, const RouterConfig& cfg,
                   int cap) {
  switch (cfg.strategy) {
    case Strategy::TokenChoiceTop1:
      return route_token_choice(probs, 1, cap);
    case Strategy::TokenChoiceTop2:
      return route_token_choice(probs, 2, cap);
    case Strategy::ExpertChoice:
      return route_expert_choice(logits_or_scores, &probs, cap);
  }
  throw ConfigError("route: bad strategy");
}

// softmax(tokens·router_weights): the router's gating distribution.
template <class Real>
Tensor<Real> gate_probs(Tape<Real>& tape, Tensor<Real> router_weights,
                        Tensor<Real> tokens) {
  return softmax(tape, matmul(tape, tokens, router_weights));
}

// Differentiable per-assignment combine weights gathered from the gate-prob
// tensor. Order matches plan.assignments (kept and dropped alike; dropped
// entries are simply not used in the combine). For K=2 the weight is
// p_self/(p_self+p_other) with gradient through both pair probs.
template <class Real>
Tensor<Real> assignment_weights(Tape<Real>& tape, Tensor<Real> probs,
                                const DispatchPlan& plan) {
  detail::check_probs_shape(probs, "assignment_weights");
  if (probs.dim(0) != plan.num_tokens || probs.dim(1) != plan.num_experts)
    throw ShapeError("assignment_weights: probs " + shape_str(probs.shape()) +
                     " vs plan " + std::to_string(plan.num_tokens) + "x" +
                     std::to_string(plan.num_experts));
  const int n = static_cast<int>(plan.assignments.size());
  const int e_count = plan.num_experts;
  const bool pair = plan.strategy == Strategy::TokenChoiceTop2;
  bool g = detail::want_grad(tape, probs.requires_grad());
  Tensor<Real> w = Tensor<Real>::zeros({n}, g);
  const Real* pp = probs.data();
  Real* pw = w.data();
  for (int i = 0; i < n; ++i) {
    const Assignment& a = plan.assignments[i];
    const Real p_self = pp[static_cast<std::size_t>(a.token) * e_count + a.expert];
    if (!pair) {
      pw[i] = p_self;
    } else {
      const TokenTopK& tk = plan.topk[a.token];
      const Real p0 = pp[static_cast<std::size_t>(a.token) * e_count + tk.expert[0]];
      const Real p1 = pp[static_cast<std::size_t>(a.token) * e_count + tk.expert[1]];
      const Real denom = p0 + p1;
      pw[i] = denom > Real(0) ? p_self / denom : Real(1) / Real(2);
    }
  }
  if (g)
    tape.record([probs, w, plan, n, e_count, pair]() mutable {
      const Real* dw = w.grad();
      const Real* pp = probs.data();
      Real* dp = probs.grad();
      for (int i = 0; i < n; ++i) {
        const Assignment& a = plan.assignments[i];
        const std::size_t row = static_cast<std::size_t>(a.token) * e_count;
        if (!pair) {
          dp[row + a.expert] += dw[i];
        } else {
          const TokenTopK& tk = plan.topk[a.token];
          const Real p_self = pp[row + a.expert];
          const int other =
              tk.expert[0] == a.expert ? tk.expert[1] : tk.expert[0];
          const Real p_other = pp[row + other];
          const Real denom = p_self + p_other;
          if (denom > Real(0)) {
            const Real inv2 = Real(1) / (denom * denom);
            dp[row + a.expert] += p_other * inv2 * dw[i];
            dp[row + other] -= p_self * inv2 * dw[i];
          }
        }
      }
    });
  return w;
}

// L = E · Σ_e f_e·P_e with f_e the top-1 census from the plan (constant) and
// P_e the mean gate prob (differentiable). Defined for any plan carrying a
// top-1 census, though its intended use is token-choice.
template <class Real>
Tensor<Real> balance_loss(Tape<Real>& tape, Tensor<Real> probs,
                          const DispatchPlan& plan) {
  detail::check_probs_shape(probs, "balance_loss");
  const int t_count = probs.dim(0);
  const int e_count = probs.dim(1);
  if (t_count != plan.num_tokens || e_count != plan.num_experts ||
      static_cast<int>(plan.top1.size()) != t_count)
    throw ShapeError("balance_loss: plan does not match probs " +
                     shape_str(probs.shape()));
  std::vector<double> f(e_count, 0.0);
  for (int t : plan.top1) f[t] += 1.0 / t_count;

  bool g = detail::want_grad(tape, probs.requires_grad());
  Tensor<Real> loss = Tensor<Real>::zeros(Shape{}, g);
  double acc = 0.0;
  const Real* pp = probs.data();
  for (int e = 0; e < e_count; ++e) {
    if (f[e] == 0.0) continue;
    double mean = 0.0;
    for (int t = 0; t < t_count; ++t)
      mean += static_cast<double>(pp[static_cast<std::size_t>(t) * e_count + e]);
    acc += f[e] * (mean / t_count);
  }
  loss.data()[0] = static_cast<Real>(e_count * acc);
  if (g)
    tape.record([probs, loss, f = std::move(f), t_count, e_count]() mutable {
      const Real dl = loss.grad()[0];
      Real* dp = probs.grad();
      for (int e = 0; e < e_count; ++e) {
        if (f[e] == 0.0) continue;
        const Real coef =
            static_cast<Real>(e_count * f[e] / t_count) * dl;
        for (int t = 0; t < t_count; ++t)
          dp[static_cast<std::size_t>(t) * e_count + e] += coef;
      }
    });
  return loss;
}

// L = (1/T)·Σ_t (logsumexp_e logits[t,e])², max-shifted.
template <class Real>
Tensor<Real> router_z_loss(Tape<Real>& tape, Tensor<Real> logits) {
  detail::check_probs_shape(logits, "router_z_loss");
  const int t_count = logits.dim(0);
  const int e_count = logits.dim(1);
  bool g = detail::want_grad(tape, logits.requires_grad());
  Tensor<Real> loss = Tensor<Real>::zeros(Shape{}, g);
  std::vector<Real> lse(t_count);
  std::vector<Real> probs(logits.numel());
  const Real* pl = logits.data();
  double acc = 0.0;
  for (int t = 0; t < t_count; ++t) {
    const Real* row = pl + static_cast<std::size_t>(t) * e_count;
    Real* pr = probs.data() + static_cast<std::size_t>(t) * e_count;
    Real mx = row[0];
    for (int e = 1; e < e_count; ++e) mx = std::max(mx, row[e]);
    Real denom = 0;
    for (int e = 0; e < e_count; ++e) {
      pr[e] = std::exp(row[e] - mx);
      denom += pr[e];
    }
    for (int e = 0; e < e_count; ++e) pr[e] /= denom;
    lse[t] = mx + std::log(denom);
    acc += static_cast<double>(lse[t]) * static_cast<double>(lse[t]);
  }
  loss.data()[0] = static_cast<Real>(acc / t_count);
  if (g)
    tape.record([logits, loss, lse = std::move(lse), probs = std::move(probs),
                 t_count, e_count]() mutable {
      const Real dl = loss.grad()[0];
      Real* dx = logits.grad();
      for (int t = 0; t < t_count; ++t) {
        const Real coef = Real(2) / static_cast<Real>(t_count) * lse[t] * dl;
        const Real* pr = probs.data() + static_cast<std::size_t>(t) * e_count;
        Real* dr = dx + static_cast<std::size_t>(t) * e_count;
        for (int e = 0; e < e_count; ++e) dr[e] += coef * pr[e];
      }
    });
  return loss;
}

struct UsageStats {
  double active_fraction = 0.0;
  double normalized_entropy = 0.0;
  double dropped_fraction = 0.0;
  std::vector<double> per_expert_load;  // kept-assignment shares, sum 1 (or all 0)
};

// Load distribution over kept assignments. normalized_entropy is H/ln(E),
// defined as 1 for E=1 (trivially uniform).
inline UsageStats expert_usage(const DispatchPlan& plan, int num_experts) {
  if (num_experts != plan.num_experts)
    throw ConfigError("expert_usage: expert count mismatch");
  UsageStats st;
  std::vector<double> counts(num_experts, 0.0);
  double total = 0.0;
  for (const Assignment& a : plan.assignments) {
    if (a.slot < 0) continue;
    counts[a.expert] += 1.0;
    total += 1.0;
  }
  st.per_expert_load.assign(num_experts, 0.0);
  int active = 0;
  double entropy = 0.0;
  if (total > 0.0) {
    for (int e = 0; e < num_experts; ++e) {
      const double p = counts[e] / total;
      st.per_expert_load[e] = p;
      if (p > 0.0) {
        ++active;
        entropy -= p * std::log(p);
      }
    }
  }
  st.active_fraction = static_cast<double>(active) / num_experts;
  st.normalized_entropy =
      num_experts == 1 ? 1.0
                       : (total > 0.0 ? entropy / std::log(num_experts) : 0.0);
  st.dropped_fraction = plan.num_tokens > 0
                            ? static_cast<double>(plan.dropped.size()) /
                                  plan.num_tokens
                            : 0.0;
  return st;
}

// One line per token: choices in rank order for token-choice (slot -1 where
// the choice lost at capacity), selecting experts in ascending order for
// expert-choice. dropped=1 iff the token holds no slot anywhere.
inline void write_route_trace(std::ostream& out, const DispatchPlan& plan) {
  std::vector<std::vector<const Assignment*>> per_token(plan.num_tokens);
  for (const Assignment& a : plan.assignments)
    per_token[a.token].push_back(&a);
  char buf[64];
  for (int t = 0; t < plan.num_tokens; ++t) {
    bool any_kept = false;
    for (const Assignment* a : per_token[t]) any_kept |= a->slot >= 0;
    out << "token=" << t << " experts=";
    for (std::size_t i = 0; i < per_token[t].size(); ++i)
      out << (i ? "," : "") << per_token[t][i]->expert;
    out << " gates=";
    for (std::size_t i = 0; i < per_token[t].size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.6f", per_token[t][i]->gate);
      out << (i ? "," : "") << buf;
    }
    out << " slots=";
    for (std::size_t i = 0; i < per_token[t].size(); ++i)
      out << (i ? "," : "") << per_token[t][i]->slot;
    out << " dropped=" << (any_kept ? 0 : 1) << "\n";
  }
}

}  // namespace moelab
