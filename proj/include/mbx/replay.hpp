#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <random>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbx/networks.hpp"

namespace mbx {

enum class RewardMode { Extrinsic, Intrinsic };

// One episode. Index t refers to the transition (observation t, action t) -> observation t+1.
struct Trajectory {
  std::vector<std::vector<double>> observations;   // T + 1 frames
  std::vector<Action> actions;                     // T
  std::vector<double> rewards;                     // T, training reward channel
  std::vector<double> env_rewards;                 // T, extrinsic side channel (diagnostics)
  std::vector<std::vector<Action>> search_actions; // T, root action sets
  std::vector<std::vector<double>> search_policies;// T, visit distributions aligned with search_actions
  std::vector<double> root_values;                 // T, acting-time value estimates
  RewardMode reward_mode = RewardMode::Extrinsic;
  std::uint32_t achievements = 0;                  // episode achievement bit-set

  std::size_t length() const { return actions.size(); }

  void validate() const {
    const std::size_t T = actions.size();
    auto bad = [](const std::string& what) { throw std::invalid_argument("malformed trajectory: " + what); };
    if (T == 0) bad("no transitions");
    if (observations.size() != T + 1) bad("expected " + std::to_string(T + 1) + " observations");
    if (rewards.size() != T || env_rewards.size() != T) bad("reward arrays do not match action count");
    if (search_actions.size() != T || search_policies.size() != T || root_values.size() != T)
      bad("search records do not match action count");
    for (std::size_t t = 0; t < T; ++t) {
      if (search_actions[t].size() != search_policies[t].size()) bad("search policy/action size mismatch");
      if (observations[t].size() != observations[0].size()) bad("ragged observations");
    }
  }
};

struct SequenceLayout {
  std::size_t unroll = 5;
  std::size_t td_steps = 5;
  std::size_t history_len = 4;
  double discount = 0.997;

  // Frames held by one slice: history before the start, then unroll + td_steps after it.
  std::size_t length() const { return unroll + td_steps + history_len; }
};

// Self-contained copy of the data a training sample needs. Relative index j = 0 is the start.
struct SequenceSlice {
  std::size_t start = 0;          // absolute index in the episode
  std::size_t remaining = 0;      // transitions from start to episode end (T - start)
  std::size_t history_len = 1;
  RewardMode reward_mode = RewardMode::Extrinsic;
  std::vector<std::vector<double>> frames;  // j in [-(H-1), unroll + td_steps], clamped into the episode
  std::vector<Action> actions;              // j in [0, unroll + td_steps]; padded with the last action
  std::vector<double> rewards;              // j in [0, unroll + td_steps]; 0 past the end
  std::vector<double> env_rewards;
  std::vector<std::vector<Action>> search_actions;
  std::vector<std::vector<double>> search_policies;
  std::vector<double> root_values;
  std::vector<double> mc_returns;           // j in [0, unroll]; discounted return to the episode end
  double incoming_reward = 0.0;             // reward of the transition into the start frame

  std::size_t offset() const { return history_len - 1; }
  const std::vector<double>& frame(std::ptrdiff_t j) const {
    return frames.at(static_cast<std::size_t>(j + static_cast<std::ptrdiff_t>(offset())));
  }
  bool valid_step(std::size_t j) const { return j < remaining; }

  std::vector<double> stack(std::size_t j) const {
    std::vector<double> out;
    for (std::size_t i = 0; i < history_len; ++i) {
      const auto& f = frame(static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(history_len - 1 - i));
      out.insert(out.end(), f.begin(), f.end());
    }
    return out;
  }
};

inline SequenceSlice make_slice(const Trajectory& traj, std::size_t start, const SequenceLayout& layout) {
  const std::size_t T = traj.length();
  if (start >= T) throw std::out_of_range("make_slice: start beyond episode");
  const std::size_t span = layout.unroll + layout.td_steps;
  SequenceSlice s;
  s.start = start;
  s.remaining = T - start;
  s.history_len = layout.history_len;
  s.reward_mode = traj.reward_mode;
  for (std::ptrdiff_t j = -static_cast<std::ptrdiff_t>(layout.history_len - 1); j <= static_cast<std::ptrdiff_t>(span);
       ++j) {
    const std::ptrdiff_t abs = static_cast<std::ptrdiff_t>(start) + j;
    const std::size_t idx = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(abs, 0, static_cast<std::ptrdiff_t>(T)));
    s.frames.push_back(traj.observations[idx]);
  }
  for (std::size_t j = 0; j <= span; ++j) {
    const std::size_t abs = start + j;
    if (abs < T) {
      s.actions.push_back(traj.actions[abs]);
      s.rewards.push_back(traj.rewards[abs]);
      s.env_rewards.push_back(traj.env_rewards[abs]);
      s.search_actions.push_back(traj.search_actions[abs]);
      s.search_policies.push_back(traj.search_policies[abs]);
      s.root_values.push_back(traj.root_values[abs]);
    } else {
      s.actions.push_back(traj.actions[T - 1]);
      s.rewards.push_back(0.0);
      s.env_rewards.push_back(0.0);
      s.search_actions.emplace_back();
      s.search_policies.emplace_back();
      s.root_values.push_back(0.0);
    }
  }
  // Discounted returns from start + j to the end, for the Monte-Carlo (td_steps = 0) value target.
  std::vector<double> tail(T + 1, 0.0);
  for (std::size_t i = T; i-- > 0;) tail[i] = traj.rewards[i] + layout.discount * tail[i + 1];
  for (std::size_t j = 0; j <= layout.unroll; ++j) s.mc_returns.push_back(start + j < T ? tail[start + j] : 0.0);
  s.incoming_reward = start > 0 ? traj.rewards[start - 1] : 0.0;
  return s;
}

struct SequenceRef {
  std::shared_ptr<const Trajectory> episode;
  std::size_t start = 0;
};

struct SampledSequence {
  SequenceSlice slice;
  bool reanalyse = false;
  std::size_t buffer_index = 0;
};

// FIFO ring of fixed-length sequences. Every start index of an appended episode becomes one
// sequence; sequences reference the shared immutable episode and are copied out on sampling.
class SequenceBuffer {
 public:
  SequenceBuffer(std::size_t capacity_sequences, SequenceLayout layout)
      : capacity_(capacity_sequences), layout_(layout) {
    if (capacity_ == 0) throw std::invalid_argument("SequenceBuffer: capacity must be > 0");
  }

  std::size_t append(std::shared_ptr<const Trajectory> traj) {
    traj->validate();
    std::unique_lock lock(mutex_);
    const std::size_t T = traj->length();
    for (std::size_t t = 0; t < T; ++t) {
      if (refs_.size() == capacity_) refs_.pop_front();
      refs_.push_back(SequenceRef{traj, t});
    }
    total_appended_ += T;
    return T;
  }

  std::size_t append(Trajectory traj) { return append(std::make_shared<const Trajectory>(std::move(traj))); }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return refs_.size();
  }
  std::size_t capacity() const { return capacity_; }
  std::size_t total_appended() const { return total_appended_; }
  const SequenceLayout& layout() const { return layout_; }

  SequenceSlice slice(std::size_t i) const {
    std::shared_lock lock(mutex_);
    const SequenceRef& r = refs_.at(i);
    return make_slice(*r.episode, r.start, layout_);
  }

  SequenceRef ref(std::size_t i) const {
    std::shared_lock lock(mutex_);
    return refs_.at(i);
  }

  // Uniform draws with replacement; each draw is independently flagged for Reanalyse.
  template <class Rng>
  std::vector<SampledSequence> sample(std::size_t batch_size, double reanalyse_fraction, Rng& rng) const {
    std::shared_lock lock(mutex_);
    if (refs_.empty()) throw std::logic_error("SequenceBuffer::sample: buffer is empty");
    std::uniform_int_distribution<std::size_t> pick(0, refs_.size() - 1);
    std::bernoulli_distribution flag(std::clamp(reanalyse_fraction, 0.0, 1.0));
    std::vector<SampledSequence> out;
    out.reserve(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      const std::size_t i = pick(rng);
      const bool re = flag(rng);
      out.push_back(SampledSequence{make_slice(*refs_[i].episode, refs_[i].start, layout_), re, i});
    }
    return out;
  }

  // Distinct episodes currently referenced, oldest first (used for spilling to disk).
  std::vector<std::shared_ptr<const Trajectory>> episodes() const {
    std::shared_lock lock(mutex_);
    std::vector<std::shared_ptr<const Trajectory>> out;
    for (const auto& r : refs_)
      if (out.empty() || out.back() != r.episode) out.push_back(r.episode);
    return out;
  }

  // Index of the oldest retained start within the oldest episode.
  std::size_t first_start() const {
    std::shared_lock lock(mutex_);
    return refs_.empty() ? 0 : refs_.front().start;
  }

  // Rebuilds the ring from spilled episodes; the first episode is retained from `first_start`.
  void restore(const std::vector<std::shared_ptr<const Trajectory>>& eps, std::size_t first_start,
               std::size_t total_appended) {
    std::unique_lock lock(mutex_);
    refs_.clear();
    for (std::size_t e = 0; e < eps.size(); ++e) {
      for (std::size_t t = (e == 0 ? first_start : 0); t < eps[e]->length(); ++t) {
        if (refs_.size() == capacity_) refs_.pop_front();
        refs_.push_back(SequenceRef{eps[e], t});
      }
    }
    total_appended_ = total_appended;
  }

 private:
  std::size_t capacity_;
  SequenceLayout layout_;
  std::deque<SequenceRef> refs_;
  std::size_t total_appended_ = 0;
  mutable std::shared_mutex mutex_;
};

}  // namespace mbx
