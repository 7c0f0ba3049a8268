#pragma once

#include <concepts>
#include <cstring>
#include <cstdint>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbx/networks.hpp"

namespace mbx {

// Reward channel an environment emits. Pretraining is reward-free; fine-tuning selects a task.
struct EnvMode {
  bool pretraining = true;
  int task = 0;

  static EnvMode pretrain() { return {true, 0}; }
  static EnvMode finetune(int task) { return {false, task}; }
};

struct StepResult {
  std::vector<double> observation;
  double reward = 0.0;
  bool done = false;
  std::uint32_t achievements = 0;  // per-episode flags so far
  std::uint64_t state_hash = 0;
};

class EpisodeOver : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class UnknownTask : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <class E>
concept Environment = requires(E e, const E ce, std::uint64_t seed, const Action& a) {
  { ce.obs_dim() } -> std::convertible_to<std::size_t>;
  { ce.action_spec() } -> std::convertible_to<ActionSpec>;
  { ce.num_achievements() } -> std::convertible_to<std::size_t>;
  { e.reset(seed) } -> std::convertible_to<std::vector<double>>;
  { e.step(a) } -> std::convertible_to<StepResult>;
  { ce.state_hash() } -> std::convertible_to<std::uint64_t>;
};

// 64-bit hash builder for state identity (coverage metric).
class StateHasher {
 public:
  void add(std::uint64_t v) { h_ = splitmix64(h_ ^ (v + 0x9e3779b97f4a7c15ULL + (h_ << 6) + (h_ >> 2))); }
  void add_double(double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof bits);
    add(bits);
  }
  std::uint64_t value() const { return h_; }

 private:
  std::uint64_t h_ = 0x84222325cbf29ce4ULL;
};

// One line-delimited JSON record per transition, for debugging.
inline void write_trace_record(std::ostream& os, std::size_t t, const Action& a, const StepResult& r) {
  nlohmann::json j;
  j["t"] = t;
  if (a.is_continuous()) j["action"] = a.values;
  else j["action"] = a.index;
  j["reward"] = r.reward;
  j["done"] = r.done;
  j["achievements"] = r.achievements;
  j["hash"] = r.state_hash;
  os << j.dump() << '\n';
}

}  // namespace mbx
