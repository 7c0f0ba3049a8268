#pragma once

// Shared fixtures for the unit tests: tiny network configs, randomized parameters, synthetic
// trajectories and batches, and a central finite-difference checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mbx/agent.hpp"
#include "mbx/learning.hpp"
#include "mbx/networks.hpp"
#include "mbx/replay.hpp"

namespace mbx::test {

inline NetworkConfig tiny_config(bool continuous = false) {
  NetworkConfig c;
  c.obs_dim = 5;
  c.latent_dim = 8;
  c.encoder_blocks = 1;
  c.dynamics_blocks = 1;
  c.history_len = 2;
  c.head_hidden = 8;
  c.value_support = {-3.0, 3.0, 7};
  c.reward_support = {-2.0, 2.0, 5};
  c.action_spec = continuous ? ActionSpec::box(2, -1.0, 1.0) : ActionSpec::discrete(3);
  c.spr_proj_dim = 6;
  c.rnd_proj_dim = 6;
  return c;
}

// Overwrites every value with N(0, scale) draws so no head sits at its zero initialization.
inline void randomize(ParameterStore& store, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& [_, p] : store)
    for (double& v : p.value.data()) v = n(rng);
}

inline Agent random_agent(AgentKind kind, const NetworkConfig& c, std::uint64_t seed) {
  Agent a = make_agent(kind, c, seed);
  randomize(a.online, seed * 7 + 1);
  randomize(a.frozen, seed * 7 + 2);
  return a;
}

inline std::vector<double> random_frame(std::size_t dim, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> f(dim);
  for (double& v : f) v = u(rng);
  return f;
}

inline Action random_action(const ActionSpec& spec, std::mt19937_64& rng) { return uniform_action(spec, rng); }

// Episode of length T with random frames, rewards in [-1, 1] and random search records.
inline Trajectory random_trajectory(const NetworkConfig& c, std::size_t T, std::mt19937_64& rng,
                                    RewardMode mode = RewardMode::Extrinsic, std::size_t samples = 3) {
  Trajectory t;
  t.reward_mode = mode;
  std::uniform_real_distribution<double> u(-1.0, 1.0), p(0.05, 1.0);
  for (std::size_t i = 0; i <= T; ++i) t.observations.push_back(random_frame(c.obs_dim, rng));
  for (std::size_t i = 0; i < T; ++i) {
    t.actions.push_back(random_action(c.action_spec, rng));
    t.rewards.push_back(u(rng));
    t.env_rewards.push_back(mode == RewardMode::Extrinsic ? t.rewards.back() : 0.0);
    std::vector<Action> acts;
    const std::size_t n = c.action_spec.is_discrete() ? c.action_spec.size : samples;
    for (std::size_t k = 0; k < n; ++k)
      acts.push_back(c.action_spec.is_discrete() ? Action::discrete(k) : random_action(c.action_spec, rng));
    std::vector<double> pol(n);
    double z = 0.0;
    for (double& x : pol) z += (x = p(rng));
    for (double& x : pol) x /= z;
    t.search_actions.push_back(std::move(acts));
    t.search_policies.push_back(std::move(pol));
    t.root_values.push_back(u(rng));
  }
  return t;
}

// Batch drawn from slices of random episodes, with fresh targets. Short episodes make sure some
// samples run past the episode end so masks are exercised.
inline TrainBatch random_batch(const NetworkConfig& c, std::size_t B, std::size_t K, std::uint64_t seed,
                               RewardMode mode = RewardMode::Extrinsic, AgentKind kind = AgentKind::ModelBased) {
  std::mt19937_64 rng(seed);
  SequenceLayout layout{K, 2, c.history_len, 0.9};
  TargetConfig tc;
  tc.kind = kind;
  tc.unroll = K;
  tc.td_steps = 2;
  tc.discount = 0.9;
  std::vector<SampleTargets> samples;
  std::uniform_int_distribution<std::size_t> len(2, 8);
  for (std::size_t i = 0; i < B; ++i) {
    Trajectory t = random_trajectory(c, len(rng), rng, mode);
    std::uniform_int_distribution<std::size_t> start(0, t.length() - 1);
    samples.push_back(fresh_targets(make_slice(t, start(rng), layout), tc));
  }
  return make_train_batch(samples, c);
}

struct FdReport {
  std::size_t checked = 0;
  std::size_t failed = 0;
  std::size_t kinks = 0;  // [x-h, x+h] straddles a non-differentiable point
  double worst = 0.0;
  std::string worst_name;
};

// Central differences with step h on a sample of coordinates of every parameter whose name starts
// with one of `prefixes`. `loss` evaluates the scalar on a non-recording tape; `analytic` fills the
// store's gradient slots. Relative error |a - n| / max(|a|, |n|), with the round-off of the
// difference quotient itself (100 eps |L| / h) allowed on top, so near-zero gradients are not
// judged on cancellation noise. A coordinate that fails while its
// one-sided slopes disagree, and the analytic value agrees with one of them, sits on a ReLU kink;
// it is counted under `kinks` rather than `failed`.
inline FdReport finite_difference_check(ParameterStore& store, const std::vector<std::string>& prefixes,
                                        const std::function<double()>& loss, const std::function<void()>& analytic,
                                        std::size_t coords_per_param, std::uint64_t seed, double h = 1e-5,
                                        double tol = 1e-4) {
  store.zero_grad();
  analytic();
  FdReport rep;
  const double base = loss();
  std::mt19937_64 rng(seed);
  for (auto& [name, p] : store) {
    bool wanted = false;
    for (const auto& pre : prefixes) wanted = wanted || name.rfind(pre, 0) == 0;
    if (!wanted) continue;
    const std::size_t n = p.value.size();
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(n, coords_per_param));
    for (std::size_t i : idx) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = loss();
      p.value[i] = orig - h;
      const double down = loss();
      p.value[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = p.grad[i];
      const double mag = std::max(std::abs(a), std::abs(numeric));
      const double roundoff = 100.0 * std::numeric_limits<double>::epsilon() * std::max({std::abs(base), std::abs(up), 1.0}) / h;
      const double gap = std::abs(a - numeric);
      const double err = mag > 0.0 ? gap / mag : 0.0;
      bool ok = gap <= tol * mag + roundoff;
      ++rep.checked;
      if (!ok) {
        const double right = (up - base) / h, left = (base - down) / h;
        auto close = [](double x, double y) { return std::abs(x - y) <= 1e-3 * std::max({std::abs(x), std::abs(y), 1e-6}); };
        if (!close(left, right) && (close(a, left) || close(a, right))) {
          ++rep.kinks;
          continue;
        }
        ++rep.failed;
      }
      if ((!ok || tol * mag > roundoff) && err > rep.worst) {
        rep.worst = err;
        rep.worst_name = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  store.zero_grad();
  return rep;
}

}  // namespace mbx::test
