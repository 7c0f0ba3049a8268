#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include "mbx/tensor.hpp"

namespace mbx {

// Bitwise equality; distinguishes -0.0 from 0.0 and treats identical NaN payloads as equal.
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

struct Parameter {
  Tensor value;
  Tensor grad;
  Tensor adam_m;
  Tensor adam_v;

  explicit Parameter(Tensor v)
      : value(std::move(v)), grad(value.shape()), adam_m(value.shape()), adam_v(value.shape()) {}
};

// Named trainable tensors with gradient and Adam moment slots. Iteration is lexicographic by name.
class ParameterStore {
 public:
  using Map = std::map<std::string, Parameter, std::less<>>;

  Parameter& add(const std::string& name, Tensor value) {
    auto [it, inserted] = entries_.try_emplace(name, std::move(value));
    if (!inserted) throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
    return it->second;
  }

  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }

  Parameter& at(std::string_view name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("ParameterStore: no parameter '" + std::string(name) + "'");
    return it->second;
  }
  const Parameter& at(std::string_view name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("ParameterStore: no parameter '" + std::string(name) + "'");
    return it->second;
  }

  const Tensor& value(std::string_view name) const { return at(name).value; }

  void erase(std::string_view name) {
    auto it = entries_.find(name);
    if (it != entries_.end()) entries_.erase(it);
  }

  void zero_grad() {
    for (auto& [_, p] : entries_) p.grad.fill(0.0);
  }

  void reset_moments() {
    for (auto& [_, p] : entries_) {
      p.adam_m.fill(0.0);
      p.adam_v.fill(0.0);
    }
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& [_, p] : entries_) n += p.value.size();
    return n;
  }

  Map::iterator begin() { return entries_.begin(); }
  Map::iterator end() { return entries_.end(); }
  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

 private:
  Map entries_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// One bias-corrected Adam update over every entry; gradients are zeroed afterwards.
inline void adam_step(ParameterStore& store, double lr, const AdamConfig& cfg, std::int64_t step) {
  if (step < 1) throw std::invalid_argument("adam_step: step must be >= 1, got " + std::to_string(step));
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (auto& [_, p] : store) {
    auto w = p.value.data();
    auto g = p.grad.data();
    auto m = p.adam_m.data();
    auto v = p.adam_v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
      g[i] = 0.0;
    }
  }
}

inline void adam_step(ParameterStore& store, double lr, double beta1, double beta2, double epsilon,
                      std::int64_t step) {
  adam_step(store, lr, AdamConfig{beta1, beta2, epsilon}, step);
}

enum class LrSchedule { Constant, Cosine };

inline double lr_at_step(LrSchedule schedule, double lr0, std::int64_t step, std::int64_t total_steps) {
  if (schedule == LrSchedule::Constant) return lr0;
  if (total_steps <= 0) throw std::invalid_argument("lr_at_step: cosine schedule needs total_steps > 0");
  if (step < 0 || step > total_steps) {
    throw std::invalid_argument("lr_at_step: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(total_steps) + "]");
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

// Stable 64-bit mixing used to derive per-name seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t seed_for(std::uint64_t seed, std::string_view tag) {
  return splitmix64(seed ^ fnv1a64(tag));
}

// Glorot-uniform weights, seeded by (seed, name) so init is independent of creation order.
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::uint64_t seed, std::string_view name) {
  std::mt19937_64 rng(seed_for(seed, name));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor w(Shape{fan_in, fan_out});
  for (auto& x : w.data()) x = dist(rng);
  return w;
}

}  // namespace mbx
