#pragma once

// PointDesk: a point agent pushing blocks on a unit desk.
//
// Observation (12, all in [0,1]): agent xy, three block xy, two zone xy.
// Dynamics, dt = 0.1:
//   p' = clamp(p + dt * a, 0, 1)
//   for each block b with |p' - b| < contact_radius: b' = clamp(b + (p' - p) / mass, 0, 1)
// Tasks 0-2: reach block i, success when |agent - block_i| < 0.1 (strict).
// Tasks 3-5: push block (t - 3) into zone (t - 3) % 2, success when |block - zone| < 0.1.
// Reward is 1 on the first success of an episode and 0 otherwise; pretraining is always 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mbx/envs/common.hpp"

namespace mbx {

struct Vec2 {
  double x = 0.0, y = 0.0;
};

inline double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct PointDeskConfig {
  std::uint64_t seed = 0;
  std::size_t episode_limit = 200;
  double dt = 0.1;
  double contact_radius = 0.08;
  double success_radius = 0.1;
  double block_mass = 1.0;
  bool heavy_blocks = false;  // held-out variant: every block has mass 2
};

struct PointDeskState {
  Vec2 agent;
  std::array<Vec2, 3> blocks;
  std::array<Vec2, 2> zones;
  bool task_granted = false;
  std::uint32_t flags = 0;  // tasks whose predicate held after some step this episode
  std::size_t steps = 0;
  bool done = false;
};

class PointDesk {
 public:
  static constexpr int kNumTasks = 6;

  explicit PointDesk(PointDeskConfig cfg = {}, EnvMode mode = EnvMode::pretrain()) : cfg_(cfg) { set_mode(mode); }

  void set_mode(EnvMode mode) {
    if (!mode.pretraining) check_task(mode.task);
    mode_ = mode;
  }
  const EnvMode& mode() const { return mode_; }
  const PointDeskConfig& config() const { return cfg_; }

  std::size_t obs_dim() const { return 12; }
  ActionSpec action_spec() const { return ActionSpec::box(2, -1.0, 1.0); }
  std::size_t num_achievements() const { return kNumTasks; }

  double mass() const { return cfg_.heavy_blocks ? 2.0 : cfg_.block_mass; }

  std::vector<double> reset(std::uint64_t episode_seed) {
    std::mt19937_64 rng(splitmix64(splitmix64(cfg_.seed ^ 0x5044u) ^ (episode_seed * 0xd1b54a32d192ed03ULL)));
    std::uniform_real_distribution<double> u(0.1, 0.9);
    s_ = PointDeskState{};
    s_.agent = {u(rng), u(rng)};
    for (auto& b : s_.blocks) b = {u(rng), u(rng)};
    for (auto& z : s_.zones) z = {u(rng), u(rng)};
    return observe();
  }

  StepResult step(const Action& a) {
    if (s_.done) throw EpisodeOver("PointDesk: step called on a finished episode");
    if (a.values.size() != 2) throw std::invalid_argument("PointDesk: action must have 2 components");
    integrate(s_, std::clamp(a.values[0], -1.0, 1.0), std::clamp(a.values[1], -1.0, 1.0));
    s_.steps += 1;
    if (s_.steps >= cfg_.episode_limit) s_.done = true;
    s_.flags |= successes(s_);
    StepResult r;
    r.reward = task_reward(s_, mode_);
    r.observation = observe();
    r.done = s_.done;
    r.achievements = s_.flags;
    r.state_hash = state_hash();
    return r;
  }

  static void check_task(int task) {
    if (task < 0 || task >= kNumTasks) throw UnknownTask("PointDesk: unknown task id " + std::to_string(task));
  }

  bool task_success(const PointDeskState& s, int task) const {
    check_task(task);
    if (task < 3) return distance(s.agent, s.blocks[static_cast<std::size_t>(task)]) < cfg_.success_radius;
    const std::size_t b = static_cast<std::size_t>(task - 3);
    return distance(s.blocks[b], s.zones[b % 2]) < cfg_.success_radius;
  }

  // Bit i set when task i's predicate holds in s.
  std::uint32_t successes(const PointDeskState& s) const {
    std::uint32_t f = 0;
    for (int t = 0; t < kNumTasks; ++t)
      if (task_success(s, t)) f |= 1u << t;
    return f;
  }

  // Sparse first-success reward; marks the episode as granted. Pretraining always yields 0.
  double task_reward(PointDeskState& s, const EnvMode& mode) const {
    if (mode.pretraining) return 0.0;
    if (s.task_granted || !task_success(s, mode.task)) return 0.0;
    s.task_granted = true;
    return 1.0;
  }

  void integrate(PointDeskState& s, double ax, double ay) const {
    const Vec2 prev = s.agent;
    s.agent.x = std::clamp(prev.x + cfg_.dt * ax, 0.0, 1.0);
    s.agent.y = std::clamp(prev.y + cfg_.dt * ay, 0.0, 1.0);
    const double mx = (s.agent.x - prev.x) / mass(), my = (s.agent.y - prev.y) / mass();
    for (auto& b : s.blocks) {
      if (distance(s.agent, b) < cfg_.contact_radius) {
        b.x = std::clamp(b.x + mx, 0.0, 1.0);
        b.y = std::clamp(b.y + my, 0.0, 1.0);
      }
    }
  }

  std::vector<double> observe() const {
    std::vector<double> o{s_.agent.x, s_.agent.y};
    for (const auto& b : s_.blocks) o.insert(o.end(), {b.x, b.y});
    for (const auto& z : s_.zones) o.insert(o.end(), {z.x, z.y});
    return o;
  }

  // Coverage identity on a 0.05 lattice of agent and block positions.
  std::uint64_t state_hash() const {
    StateHasher h;
    auto q = [](double v) { return static_cast<std::uint64_t>(std::floor(v * 20.0)); };
    h.add(q(s_.agent.x) | q(s_.agent.y) << 8);
    for (const auto& b : s_.blocks) h.add(q(b.x) | q(b.y) << 8);
    for (const auto& z : s_.zones) h.add(q(z.x) | q(z.y) << 8);
    return h.value();
  }

  const PointDeskState& state() const { return s_; }
  PointDeskState& mutable_state() { return s_; }

 private:
  PointDeskConfig cfg_;
  EnvMode mode_;
  PointDeskState s_;
};

}  // namespace mbx
