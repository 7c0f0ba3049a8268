#pragma once

// Target computation and loss assembly.
//
// Model-based loss over an unroll of K steps (k = 0 uses the prior heads, k >= 1 the dynamics
// heads and the transition reward):
//   l_pi  = sum_k CE(pi_k, policy_k)          l_v = sum_k CE(two_hot(v_k), value_k)
//   l_r   = sum_k CE(two_hot(r_k), reward_k)  l_spr = mean_{k=1..K} (1 - cos(x_k, y_k))
//   total = l_pi + l_v + l_r + w_spr * l_spr (+ w_rnd * l_rnd while pretraining)
// The k = 0 reward target is the reward of the transition into the root frame.
// Every per-sample term is multiplied by its mask, so steps past the episode end contribute
// exactly zero gradient. Batch averaging divides by the batch size.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbx/autodiff.hpp"
#include "mbx/exploration.hpp"
#include "mbx/networks.hpp"
#include "mbx/planning.hpp"
#include "mbx/replay.hpp"

namespace mbx {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------------------------
// Scalar targets

// sum_{i<n} g^i r_{t+i} + g^n * bootstrap(t+n); the bootstrap is dropped when t+n reaches the end.
// n = 0 means no bootstrapping: the discounted return of the whole remainder.
template <class Bootstrap>
double nstep_value_target(std::span<const double> rewards, std::size_t episode_end, std::size_t t, std::size_t n,
                          double gamma, Bootstrap&& bootstrap) {
  const std::size_t stop = n == 0 ? episode_end : std::min(t + n, episode_end);
  double g = 0.0, disc = 1.0;
  for (std::size_t i = t; i < stop; ++i) {
    g += disc * rewards[i];
    disc *= gamma;
  }
  if (n > 0 && t + n < episode_end) g += disc * bootstrap(t + n);
  return g;
}

template <class Bootstrap>
double nstep_value_target(const Trajectory& traj, std::size_t t, std::size_t n, double gamma, Bootstrap&& bootstrap) {
  return nstep_value_target(traj.rewards, traj.length(), t, n, gamma, std::forward<Bootstrap>(bootstrap));
}

// Q-learning value target for V(s_t):
//   sum_{i=0}^{n-2} g^i r_{t+i} + g^{n-1} * max_q(t+n-1),  max_q(j) = max_a (r_hat(s_j, a) + g V_xi(s'))
// truncated at the episode end. n = 0 uses the Monte-Carlo convention.
template <class MaxQ>
double qlearning_value_target(std::span<const double> rewards, std::size_t episode_end, std::size_t t,
                              std::size_t n, double gamma, MaxQ&& max_q) {
  if (n == 0) return nstep_value_target(rewards, episode_end, t, 0, gamma, [](std::size_t) { return 0.0; });
  const std::size_t last = t + n - 1;
  const std::size_t stop = std::min(last, episode_end);
  double g = 0.0, disc = 1.0;
  for (std::size_t i = t; i < stop; ++i) {
    g += disc * rewards[i];
    disc *= gamma;
  }
  if (last < episode_end) g += disc * max_q(last);
  return g;
}

template <class MaxQ>
double qlearning_value_target(const Trajectory& traj, std::size_t t, std::size_t n, double gamma, MaxQ&& max_q) {
  return qlearning_value_target(traj.rewards, traj.length(), t, n, gamma, std::forward<MaxQ>(max_q));
}

template <class Eval>
double max_over_actions(const std::vector<Action>& candidates, Eval&& eval) {
  if (candidates.empty()) throw std::invalid_argument("max_over_actions: no candidates");
  double best = -std::numeric_limits<double>::infinity();
  for (const Action& a : candidates) best = std::max(best, eval(a));
  return best;
}

// ---------------------------------------------------------------------------------------------
// Network-backed evaluations (inference only)

inline Tensor stack_rows(const std::vector<std::vector<double>>& rows, std::size_t width) {
  std::vector<double> flat;
  flat.reserve(rows.size() * width);
  for (const auto& r : rows) {
    if (r.size() != width) throw ShapeError("stack_rows: row width " + std::to_string(r.size()) +
                                            " != " + std::to_string(width));
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor(Shape{rows.size(), width}, std::move(flat));
}

// Expected prior value head output on encoded stacks; `prefix` is "" (online) or "target/".
inline std::vector<double> prior_values(const ParameterStore& store, const NetworkConfig& c,
                                        const std::vector<std::vector<double>>& stacks,
                                        const std::string& prefix = "target/") {
  if (stacks.empty()) return {};
  Tape t(false);
  Var s = encode(t, store, c, t.constant(stack_rows(stacks, c.stack_width())), prefix + "encoder");
  Var v = mlp(t, store, prefix + "prior/rv/value", s);
  std::vector<double> out;
  for (std::size_t r = 0; r < stacks.size(); ++r) out.push_back(c.value_support.expected_value(v.value().row(r)));
  return out;
}

// Candidate actions for maximization: every discrete action, or policy draws for continuous boxes.
template <class Rng>
std::vector<Action> candidate_actions(const NetworkConfig& c, const PolicyEval& policy, std::size_t num_samples,
                                      Rng& rng) {
  std::vector<Action> out;
  if (c.action_spec.is_discrete()) {
    for (std::size_t a = 0; a < c.action_spec.size; ++a) out.push_back(Action::discrete(a));
  } else {
    for (std::size_t k = 0; k < num_samples; ++k) out.push_back(sample_gaussian_action(c.action_spec, policy, rng));
  }
  return out;
}

// Q(s, a) = E[r_hat(s, a)] + gamma * E[V(s')] via one mf_step transition, for a latent [1, L].
struct QEvaluation {
  std::vector<Action> actions;
  std::vector<double> q;
  PolicyEval proposal;
};

template <class Rng>
QEvaluation q_values(const ParameterStore& store, const NetworkConfig& c, const Tensor& latent, double gamma,
                     std::size_t num_samples, Rng& rng, const std::string& prefix = "") {
  Tape t(false);
  Var s = t.constant(latent);
  QEvaluation out;
  {
    Var head = mlp(t, store, prefix + "prior/policy", s);
    NetworkModel decoder(store, c);
    out.proposal = decoder.decode_policy(head.value());
  }
  out.actions = candidate_actions(c, out.proposal, num_samples, rng);
  const std::size_t n = out.actions.size();
  std::vector<std::vector<double>> feats;
  for (const Action& a : out.actions) feats.push_back(encode_action(c.action_spec, a).features);
  Var rep = repeat_rows(s, n);
  Var af = t.constant(stack_rows(feats, c.action_spec.encoding_width()));
  DynamicsOutputs step = dynamics_step(t, store, c, rep, af, prefix + "mf_step");
  Var v = mlp(t, store, prefix + "prior/rv/value", step.next_latent);
  for (std::size_t i = 0; i < n; ++i) {
    out.q.push_back(c.reward_support.expected_value(step.reward.value().row(i)) +
                    gamma * c.value_support.expected_value(v.value().row(i)));
  }
  return out;
}

inline Tensor encode_stack(const ParameterStore& store, const NetworkConfig& c, const std::vector<double>& stack,
                           const std::string& prefix = "") {
  Tape t(false);
  return encode(t, store, c, t.constant(Tensor(Shape{1, stack.size()}, stack)), prefix + "encoder").value();
}

// ---------------------------------------------------------------------------------------------
// Per-sample targets

struct TargetConfig {
  AgentKind kind = AgentKind::ModelBased;
  std::size_t unroll = 5;
  std::size_t td_steps = 5;
  double discount = 0.997;
  SearchConfig reanalyse_search;  // noise-free search used to refresh policies
  std::size_t num_action_samples = 20;
};

struct SampleTargets {
  std::vector<double> root_stack;
  std::vector<double> next_stack;               // history stack at j = 1 (RND-from-dynamics variant)
  std::vector<Action> actions;                  // unroll
  std::vector<std::vector<double>> policies;    // unroll + 1; probabilities or sample weights
  std::vector<std::vector<Action>> policy_actions;  // unroll + 1; continuous sampled actions
  std::vector<double> values;                   // unroll + 1
  std::vector<double> rewards;                  // unroll + 1; index 0 is the incoming reward
  std::vector<std::vector<double>> spr_stacks;  // unroll; copies of frame k for k = 1..K
  std::vector<double> policy_mask, value_mask, reward_mask, spr_mask;  // unroll + 1
  RewardMode reward_mode = RewardMode::Extrinsic;
};

namespace detail {

inline SampleTargets common_targets(const SequenceSlice& s, const TargetConfig& cfg) {
  SampleTargets out;
  const std::size_t K = cfg.unroll;
  out.reward_mode = s.reward_mode;
  out.root_stack = s.stack(0);
  out.next_stack = s.stack(1);
  for (std::size_t k = 0; k < K; ++k) out.actions.push_back(s.actions[k]);
  out.rewards.push_back(s.incoming_reward);
  for (std::size_t k = 1; k <= K; ++k) out.rewards.push_back(s.rewards[k - 1]);
  for (std::size_t k = 1; k <= K; ++k) out.spr_stacks.push_back(copies_stack(s.frame(static_cast<std::ptrdiff_t>(k)), s.history_len));
  for (std::size_t k = 0; k <= K; ++k) {
    out.policy_mask.push_back(s.valid_step(k) && !s.search_policies[k].empty() ? 1.0 : 0.0);
    out.value_mask.push_back(s.valid_step(k) ? 1.0 : 0.0);
    out.reward_mask.push_back(k == 0 || k <= s.remaining ? 1.0 : 0.0);
    out.spr_mask.push_back(k >= 1 && k <= s.remaining ? 1.0 : 0.0);
  }
  return out;
}

}  // namespace detail

// Targets from data stored at acting time: search policies, and value bootstraps from the
// acting-time root values.
inline SampleTargets fresh_targets(const SequenceSlice& s, const TargetConfig& cfg) {
  SampleTargets out = detail::common_targets(s, cfg);
  const std::size_t K = cfg.unroll;
  for (std::size_t k = 0; k <= K; ++k) {
    out.policies.push_back(s.search_policies[k]);
    out.policy_actions.push_back(s.search_actions[k]);
    double v = 0.0;
    if (s.valid_step(k)) {
      if (cfg.td_steps == 0) {
        v = s.mc_returns[k];
      } else if (cfg.kind == AgentKind::ModelBased) {
        v = nstep_value_target(s.rewards, s.remaining, k, cfg.td_steps, cfg.discount,
                               [&](std::size_t j) { return s.root_values[j]; });
      } else {
        v = qlearning_value_target(s.rewards, s.remaining, k, cfg.td_steps, cfg.discount,
                                   [&](std::size_t j) { return s.root_values[j]; });
      }
    }
    out.values.push_back(v);
  }
  return out;
}

// Reanalyse: fresh noise-free search with the latest weights for every retained step (model-based),
// and value bootstraps recomputed with the target network. Stored rewards and actions are kept.
template <class Rng>
SampleTargets reanalyse_targets(const SequenceSlice& s, const TargetConfig& cfg, const ParameterStore& online,
                                const ParameterStore& frozen, const NetworkConfig& c, Rng& rng) {
  SampleTargets out = detail::common_targets(s, cfg);
  const std::size_t K = cfg.unroll;
  const std::size_t n = cfg.td_steps;

  if (cfg.kind == AgentKind::ModelBased) {
    NetworkModel model(online, c);
    SearchConfig sc = cfg.reanalyse_search;
    sc.root_noise_fraction = 0.0;
    for (std::size_t k = 0; k <= K; ++k) {
      if (!s.valid_step(k)) {
        out.policies.emplace_back();
        out.policy_actions.emplace_back();
        out.policy_mask[k] = 0.0;
        continue;
      }
      SearchResult r = run_mcts(model, model.encode(s.stack(k)), sc, rng);
      out.policies.push_back(r.visit_distribution);
      out.policy_actions.push_back(c.action_spec.is_discrete() ? std::vector<Action>{} : r.root_actions);
      if (c.action_spec.is_discrete()) out.policy_actions.back() = r.root_actions;
      out.policy_mask[k] = 1.0;
    }
  } else {
    for (std::size_t k = 0; k <= K; ++k) {
      out.policies.push_back(s.search_policies[k]);
      out.policy_actions.push_back(s.search_actions[k]);
    }
  }

  // Bootstrap states needed by the value targets, evaluated in one batch.
  std::vector<std::size_t> wanted;
  for (std::size_t k = 0; k <= K; ++k) {
    if (!s.valid_step(k) || n == 0) continue;
    const std::size_t j = cfg.kind == AgentKind::ModelBased ? k + n : k + n - 1;
    if (j < s.remaining && std::find(wanted.begin(), wanted.end(), j) == wanted.end()) wanted.push_back(j);
  }
  std::vector<double> boot(s.rewards.size() + 1, 0.0);
  if (!wanted.empty()) {
    if (cfg.kind == AgentKind::ModelBased) {
      std::vector<std::vector<double>> stacks;
      for (std::size_t j : wanted) stacks.push_back(s.stack(j));
      std::vector<double> vals = prior_values(frozen, c, stacks, "target/");
      for (std::size_t i = 0; i < wanted.size(); ++i) boot[wanted[i]] = vals[i];
    } else {
      for (std::size_t j : wanted) {
        Tensor latent = encode_stack(frozen, c, s.stack(j), "target/");
        QEvaluation q = q_values(frozen, c, latent, cfg.discount, cfg.num_action_samples, rng, "target/");
        boot[j] = *std::max_element(q.q.begin(), q.q.end());
      }
    }
  }
  for (std::size_t k = 0; k <= K; ++k) {
    double v = 0.0;
    if (s.valid_step(k)) {
      if (n == 0) {
        v = s.mc_returns[k];
      } else if (cfg.kind == AgentKind::ModelBased) {
        v = nstep_value_target(s.rewards, s.remaining, k, n, cfg.discount, [&](std::size_t j) { return boot[j]; });
      } else {
        v = qlearning_value_target(s.rewards, s.remaining, k, n, cfg.discount, [&](std::size_t j) { return boot[j]; });
      }
    }
    out.values.push_back(v);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Batches and losses

struct TrainBatch {
  std::size_t batch_size = 0;
  std::size_t unroll = 0;
  std::size_t policy_samples = 0;  // S, continuous only
  RewardMode reward_mode = RewardMode::Extrinsic;
  Tensor root_stacks;                 // [B, W]
  Tensor next_stacks;                 // [B, W]
  std::vector<Tensor> actions;        // K x [B, A]
  std::vector<Tensor> policy_targets; // K+1 x [B, n] (discrete)
  std::vector<Tensor> policy_pre_squash;  // K+1 x [B*S, d] (continuous)
  std::vector<Tensor> policy_weights;     // K+1 x [B*S] (continuous)
  std::vector<Tensor> value_targets;  // K+1 x [B, bins]
  std::vector<Tensor> reward_targets; // K+1 x [B, bins]
  std::vector<Tensor> spr_stacks;     // K x [B, W]
  std::vector<Tensor> policy_mask, value_mask, reward_mask, spr_mask;  // K+1 x [B]
  std::vector<std::vector<double>> value_scalars, reward_scalars;    // K+1 x B
};

inline TrainBatch make_train_batch(const std::vector<SampleTargets>& samples, const NetworkConfig& c) {
  if (samples.empty()) throw std::invalid_argument("make_train_batch: empty batch");
  TrainBatch b;
  const std::size_t B = samples.size();
  const std::size_t K = samples[0].actions.size();
  const std::size_t W = c.stack_width();
  b.batch_size = B;
  b.unroll = K;
  b.reward_mode = samples[0].reward_mode;
  for (const auto& s : samples) {
    if (s.reward_mode != b.reward_mode) throw ModeError("make_train_batch: mixed reward modes in one batch");
    if (s.actions.size() != K) throw std::invalid_argument("make_train_batch: ragged unroll lengths");
  }
  std::vector<std::vector<double>> roots, nexts;
  for (const auto& s : samples) {
    roots.push_back(s.root_stack);
    nexts.push_back(s.next_stack);
  }
  b.root_stacks = stack_rows(roots, W);
  b.next_stacks = stack_rows(nexts, W);
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<std::vector<double>> a;
    for (const auto& s : samples) a.push_back(encode_action(c.action_spec, s.actions[k]).features);
    b.actions.push_back(stack_rows(a, c.action_spec.encoding_width()));
    std::vector<std::vector<double>> spr;
    for (const auto& s : samples) spr.push_back(s.spr_stacks[k]);
    b.spr_stacks.push_back(stack_rows(spr, W));
  }
  std::size_t S = 0;
  if (!c.action_spec.is_discrete())
    for (const auto& s : samples)
      for (const auto& pa : s.policy_actions) S = std::max(S, pa.size());
  b.policy_samples = std::max<std::size_t>(S, 1);
  for (std::size_t k = 0; k <= K; ++k) {
    Tensor pm(Shape{B}), vm(Shape{B}), rm(Shape{B}), sm(Shape{B});
    Tensor vt(Shape{B, c.value_support.bins}), rt(Shape{B, c.reward_support.bins});
    std::vector<double> vs, rs;
    for (std::size_t i = 0; i < B; ++i) {
      const auto& s = samples[i];
      pm[i] = s.policy_mask[k];
      vm[i] = s.value_mask[k];
      rm[i] = s.reward_mask[k];
      sm[i] = s.spr_mask[k];
      c.value_support.two_hot_into(s.values[k], vt.row(i));
      c.reward_support.two_hot_into(s.rewards[k], rt.row(i));
      vs.push_back(s.values[k]);
      rs.push_back(s.rewards[k]);
    }
    if (c.action_spec.is_discrete()) {
      Tensor pt(Shape{B, c.action_spec.size});
      for (std::size_t i = 0; i < B; ++i) {
        const auto& p = samples[i].policies[k];
        if (p.empty()) {
          pm[i] = 0.0;
          continue;
        }
        if (p.size() != c.action_spec.size) throw ShapeError("make_train_batch: policy target width mismatch");
        for (std::size_t a = 0; a < p.size(); ++a) pt.at(i, a) = p[a];
      }
      b.policy_targets.push_back(std::move(pt));
    } else {
      const std::size_t d = c.action_spec.size;
      const std::size_t Sb = b.policy_samples;
      Tensor u(Shape{B * Sb, d}), w(Shape{B * Sb});
      for (std::size_t i = 0; i < B; ++i) {
        const auto& acts = samples[i].policy_actions[k];
        const auto& p = samples[i].policies[k];
        if (acts.empty()) pm[i] = 0.0;
        for (std::size_t j = 0; j < acts.size(); ++j) {
          for (std::size_t q = 0; q < d; ++q) u.at(i * Sb + j, q) = acts[j].pre_squash.at(q);
          w[i * Sb + j] = p[j];
        }
      }
      b.policy_pre_squash.push_back(std::move(u));
      b.policy_weights.push_back(std::move(w));
    }
    b.policy_mask.push_back(std::move(pm));
    b.value_mask.push_back(std::move(vm));
    b.reward_mask.push_back(std::move(rm));
    b.spr_mask.push_back(std::move(sm));
    b.value_targets.push_back(std::move(vt));
    b.reward_targets.push_back(std::move(rt));
    b.value_scalars.push_back(std::move(vs));
    b.reward_scalars.push_back(std::move(rs));
  }
  return b;
}

struct LossWeights {
  double spr = 1.0;
  double rnd = 1.0;
  bool rnd_from_dynamics = false;
};

struct LossBundle {
  double l_pi = 0.0;
  double l_v = 0.0;
  double l_r = 0.0;
  double l_spr = 0.0;
  double l_rnd = 0.0;
  double w_spr = 1.0;
  double total = 0.0;
  Var objective;  // differentiable total
  Var terms[5];   // differentiable l_pi, l_v, l_r, l_spr, l_rnd (unweighted)
};

namespace detail {

// -sum_j w_j log N(u_j; mean, exp(log_std)) per batch row.
inline Var gaussian_policy_ce(Tape& t, Var policy, const Tensor& pre_squash, const Tensor& weights, std::size_t S,
                              std::size_t dim) {
  GaussianPolicy g = split_gaussian(policy, dim);
  const std::size_t B = policy.value().dim(0);
  Var mean_r = repeat_rows(g.mean, S);
  Var ls_r = repeat_rows(g.log_std, S);
  Var z = mul(sub(t.constant(pre_squash), mean_r), exp(scale(ls_r, -1.0)));
  Var quad = scale(sum_last(mul(z, z)), -0.5);
  Var logp = sub(add_scalar(quad, -0.5 * static_cast<double>(dim) * std::log(2.0 * std::numbers::pi)),
                 sum_last(ls_r));
  Var weighted = mul(logp, t.constant(weights));
  return scale(sum_last(reshape(weighted, Shape{B, S})), -1.0);
}

inline Var masked_mean(Tape& t, Var per_sample, const Tensor& mask) {
  return scale(sum(mul(per_sample, t.constant(mask))), 1.0 / static_cast<double>(mask.size()));
}

inline void check_finite(const LossBundle& l) {
  for (double v : {l.l_pi, l.l_v, l.l_r, l.l_spr, l.l_rnd, l.total}) {
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite loss: l_pi=" << l.l_pi << " l_v=" << l.l_v << " l_r=" << l.l_r << " l_spr=" << l.l_spr
         << " l_rnd=" << l.l_rnd << " total=" << l.total;
      throw NumericError(os.str());
    }
  }
}

inline Var policy_term(Tape& t, const TrainBatch& b, const NetworkConfig& c, Var policy, std::size_t k) {
  if (c.action_spec.is_discrete()) return mul(cross_entropy(b.policy_targets[k], policy), t.constant(b.policy_mask[k]));
  Tensor w = b.policy_weights[k];
  for (std::size_t i = 0; i < b.batch_size; ++i)
    for (std::size_t j = 0; j < b.policy_samples; ++j) w[i * b.policy_samples + j] *= b.policy_mask[k][i];
  return gaussian_policy_ce(t, policy, b.policy_pre_squash[k], w, b.policy_samples, c.action_spec.size);
}

inline Var zero_scalar(Tape& t) { return t.constant(Tensor::scalar(0.0)); }

inline Var rnd_term(Tape& t, const TrainBatch& b, ParameterStore& online, const ParameterStore& frozen,
                    const NetworkConfig& c, Var root_latent, Var first_step_latent, const LossWeights& w) {
  if (b.reward_mode != RewardMode::Intrinsic) return zero_scalar(t);
  if (w.rnd_from_dynamics) return mean(rnd_error(t, online, frozen, c, first_step_latent, t.constant(b.next_stacks)));
  return mean(rnd_error(t, online, frozen, c, root_latent, t.constant(b.root_stacks)));
}

inline LossBundle finish(Var lp, Var lv, Var lr, Var ls, Var lrnd, const LossWeights& w) {
  LossBundle out;
  out.l_pi = lp.value().item();
  out.l_v = lv.value().item();
  out.l_r = lr.value().item();
  out.l_spr = ls.value().item();
  out.l_rnd = lrnd.value().item();
  out.w_spr = w.spr;
  out.terms[0] = lp;
  out.terms[1] = lv;
  out.terms[2] = lr;
  out.terms[3] = ls;
  out.terms[4] = lrnd;
  out.objective = add(add(add(lp, lv), add(lr, scale(ls, w.spr))), scale(lrnd, w.rnd));
  out.total = out.objective.value().item();
  check_finite(out);
  return out;
}

}  // namespace detail

inline LossBundle muzero_loss(Tape& t, const TrainBatch& b, ParameterStore& online, const ParameterStore& frozen,
                              const NetworkConfig& c, const LossWeights& w = {}) {
  const std::size_t K = b.unroll;
  Var s = encode(t, online, c, t.constant(b.root_stacks));
  const Var root = s;
  PriorOutputs prior = prior_heads(t, online, s);
  Var lp = detail::masked_mean(t, detail::policy_term(t, b, c, prior.policy, 0), Tensor(Shape{b.batch_size}, 1.0));
  Var lv = detail::masked_mean(t, cross_entropy(b.value_targets[0], prior.value), b.value_mask[0]);
  Var lr = detail::masked_mean(t, cross_entropy(b.reward_targets[0], prior.reward), b.reward_mask[0]);
  Var ls = detail::zero_scalar(t);
  Var first = s;
  for (std::size_t k = 1; k <= K; ++k) {
    DynamicsOutputs dyn = dynamics_step(t, online, c, s, t.constant(b.actions[k - 1]));
    s = dyn.next_latent;
    if (k == 1) first = s;
    DynHeadOutputs heads = dynamics_heads(t, online, s);
    lp = add(lp, detail::masked_mean(t, detail::policy_term(t, b, c, heads.policy, k), Tensor(Shape{b.batch_size}, 1.0)));
    lv = add(lv, detail::masked_mean(t, cross_entropy(b.value_targets[k], heads.value), b.value_mask[k]));
    lr = add(lr, detail::masked_mean(t, cross_entropy(b.reward_targets[k], dyn.reward), b.reward_mask[k]));
    Var x = spr_project_predict(t, online, s);
    Var y = spr_target(t, frozen, c, t.constant(b.spr_stacks[k - 1]));
    Var one_minus_cos = add_scalar(scale(cosine_similarity(x, y), -1.0), 1.0);
    ls = add(ls, detail::masked_mean(t, one_minus_cos, b.spr_mask[k]));
  }
  if (K > 0) ls = scale(ls, 1.0 / static_cast<double>(K));
  Var lrnd = detail::rnd_term(t, b, online, frozen, c, root, first, w);
  return detail::finish(lp, lv, lr, ls, lrnd, w);
}

// Q-learning loss with a single-step unroll: reward CE at k = 0 (prior reward head) and k = 1
// (mf_step reward), value CE of V_target at k = 0 (encoder latent) and k = 1 (stepped latent), and
// the SPR auxiliary at k = 1. There is no policy term.
inline LossBundle qlearning_loss(Tape& t, const TrainBatch& b, ParameterStore& online, const ParameterStore& frozen,
                                 const NetworkConfig& c, const LossWeights& w = {}) {
  if (b.unroll != 1) throw std::invalid_argument("qlearning_loss: model-free unroll length must be 1");
  Var s0 = encode(t, online, c, t.constant(b.root_stacks));
  PriorOutputs prior = prior_heads(t, online, s0);
  DynamicsOutputs step = dynamics_step(t, online, c, s0, t.constant(b.actions[0]), "mf_step");
  Var v1 = mlp(t, online, "prior/rv/value", step.next_latent);
  Var lp = detail::zero_scalar(t);
  Var lv = add(detail::masked_mean(t, cross_entropy(b.value_targets[0], prior.value), b.value_mask[0]),
               detail::masked_mean(t, cross_entropy(b.value_targets[1], v1), b.value_mask[1]));
  Var lr = add(detail::masked_mean(t, cross_entropy(b.reward_targets[0], prior.reward), b.reward_mask[0]),
               detail::masked_mean(t, cross_entropy(b.reward_targets[1], step.reward), b.reward_mask[1]));
  Var x = spr_project_predict(t, online, step.next_latent);
  Var y = spr_target(t, frozen, c, t.constant(b.spr_stacks[0]));
  Var ls = detail::masked_mean(t, add_scalar(scale(cosine_similarity(x, y), -1.0), 1.0), b.spr_mask[1]);
  Var lrnd = detail::rnd_term(t, b, online, frozen, c, s0, step.next_latent, w);
  return detail::finish(lp, lv, lr, ls, lrnd, w);
}

// Hard copy of the synced online components into the target network every `interval` steps.
// Returns true when a copy happened. RND targets are never touched.
inline bool target_network_sync(const ParameterStore& online, ParameterStore& frozen, std::int64_t step,
                                std::int64_t interval = 100) {
  if (interval <= 0 || step <= 0 || step % interval != 0) return false;
  for (const auto& [name, p] : online) {
    if (!is_target_synced(component_of(name))) continue;
    frozen.at("target/" + name).value = p.value;
  }
  return true;
}

inline void copy_online_to_target(const ParameterStore& online, ParameterStore& frozen) {
  target_network_sync(online, frozen, 1, 1);
}

}  // namespace mbx
