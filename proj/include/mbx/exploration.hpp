#pragma once

// Random Network Distillation. The target z is a fixed random encoder + projector applied to the
// observation stack; the prediction z_hat is the trainable projector applied to the agent's own
// encoder output. The squared error is normalized by bias-corrected EMA statistics.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mbx/networks.hpp"
#include "mbx/replay.hpp"

namespace mbx {

// Bias-corrected EMA statistics, kept in their corrected form: with w_k = (1 - d) / (1 - d^k),
// m_k = m_{k-1} + w_k (e - m_{k-1}), which equals the raw EMA divided by (1 - d^k). The incremental
// form makes a constant stream give exactly zero deviation.
struct RndState {
  double ema_mean = 0.0;  // corrected mean
  double ema_var = 0.0;   // corrected variance
  double decay = 0.99;
  std::int64_t steps_seen = 0;
  double epsilon = 1e-8;

  double corrected_mean() const { return ema_mean; }
  double corrected_std() const { return std::sqrt(std::max(ema_var, 0.0)); }
};

struct NormalizedReward {
  RndState state;
  double reward = 0.0;
};

// Updates the statistics with e, then emits (e - mean_hat) / max(std_hat, epsilon). No clipping.
inline NormalizedReward update_and_normalize(RndState state, double e) {
  state.steps_seen += 1;
  const double w = (1.0 - state.decay) / (1.0 - std::pow(state.decay, static_cast<double>(state.steps_seen)));
  state.ema_mean += w * (e - state.ema_mean);
  const double dev = e - state.ema_mean;
  state.ema_var += w * (dev * dev - state.ema_var);
  return {state, dev / std::max(state.corrected_std(), state.epsilon)};
}

// RND target projection z for a batch of observation stacks (no gradient).
inline Var rnd_target(Tape& t, const ParameterStore& frozen, const NetworkConfig& c, Var stacks) {
  return detach(mlp(t, frozen, "rnd/target/projector", encode(t, frozen, c, stacks, "rnd/target/encoder")));
}

// Per-row RND error e = |z - z_hat|^2 with z_hat = predictor(latent).
inline Var rnd_error(Tape& t, ParameterStore& online, const ParameterStore& frozen, const NetworkConfig& c,
                     Var latent, Var stacks) {
  Var z_hat = mlp(t, online, "rnd/predictor", latent);
  return l2sq_distance(z_hat, rnd_target(t, frozen, c, stacks));
}

// Inference-only errors for a set of stacks. With `from_dynamics`, predictions come from the
// dynamics model's output for (previous stack, previous action) when one exists.
inline std::vector<double> rnd_errors(const ParameterStore& online, const ParameterStore& frozen,
                                      const NetworkConfig& c, const std::vector<std::vector<double>>& stacks) {
  if (stacks.empty()) return {};
  Tape t(false);
  std::vector<double> flat;
  for (const auto& s : stacks) flat.insert(flat.end(), s.begin(), s.end());
  Var x = t.constant(Tensor(Shape{stacks.size(), c.stack_width()}, std::move(flat)));
  Var latent = encode(t, online, c, x);
  Var z_hat = mlp(t, online, "rnd/predictor", latent);
  Var e = l2sq_distance(z_hat, rnd_target(t, frozen, c, x));
  return std::vector<double>(e.value().data().begin(), e.value().data().end());
}

inline std::vector<double> rnd_errors_from_dynamics(const ParameterStore& online, const ParameterStore& frozen,
                                                    const NetworkConfig& c, const Trajectory& traj) {
  const std::size_t T = traj.length();
  Tape t(false);
  std::vector<double> prev, next, acts;
  for (std::size_t i = 0; i < T; ++i) {
    auto p = history_stack(traj.observations, i, c.history_len);
    auto n = history_stack(traj.observations, i + 1, c.history_len);
    prev.insert(prev.end(), p.begin(), p.end());
    next.insert(next.end(), n.begin(), n.end());
    auto a = encode_action(c.action_spec, traj.actions[i]).features;
    acts.insert(acts.end(), a.begin(), a.end());
  }
  const std::string dyn = online.contains("dynamics/in/w") ? "dynamics" : "mf_step";
  Var s = encode(t, online, c, t.constant(Tensor(Shape{T, c.stack_width()}, std::move(prev))));
  Var af = t.constant(Tensor(Shape{T, c.action_spec.encoding_width()}, std::move(acts)));
  Var s1 = dynamics_step(t, online, c, s, af, dyn).next_latent;
  Var z_hat = mlp(t, online, "rnd/predictor", s1);
  Var x1 = t.constant(Tensor(Shape{T, c.stack_width()}, std::move(next)));
  Var e = l2sq_distance(z_hat, rnd_target(t, frozen, c, x1));
  return std::vector<double>(e.value().data().begin(), e.value().data().end());
}

class ModeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Pretraining only: replaces the reward channel with normalized RND rewards of the observation
// reached by each transition. Extrinsic rewards stay in env_rewards and never reach the loss.
inline void annotate_pretraining_reward(Trajectory& traj, RndState& rnd, const ParameterStore& online,
                                        const ParameterStore& frozen, const NetworkConfig& c, RewardMode mode,
                                        bool from_dynamics = false) {
  if (mode != RewardMode::Intrinsic) throw ModeError("annotate_pretraining_reward called outside pretraining");
  const std::size_t T = traj.length();
  std::vector<double> errors;
  if (from_dynamics) {
    errors = rnd_errors_from_dynamics(online, frozen, c, traj);
  } else {
    std::vector<std::vector<double>> stacks;
    stacks.reserve(T);
    for (std::size_t i = 0; i < T; ++i) stacks.push_back(history_stack(traj.observations, i + 1, c.history_len));
    errors = rnd_errors(online, frozen, c, stacks);
  }
  traj.rewards.resize(T);
  for (std::size_t i = 0; i < T; ++i) {
    NormalizedReward nr = update_and_normalize(rnd, errors[i]);
    rnd = nr.state;
    traj.rewards[i] = nr.reward;
  }
  traj.reward_mode = RewardMode::Intrinsic;
}

}  // namespace mbx
