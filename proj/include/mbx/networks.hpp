#pragma once

// Agent function approximators, grouped by transferable component:
//   OE         encoder/...                 observation encoder
//   PP         prior/policy/...            prior policy head
//   PRV        prior/rv/...                prior reward and value heads
//   M          dynamics/...                latent transition + transition reward (model-based agent)
//   MF_STEP    mf_step/...                 one-step transition used by the Q-learning agent's Q(s,a)
//   DH         dyn_heads/...               policy and value heads applied to unrolled latents
//   SPR_ONLINE spr/online/...              SPR projector and predictor
//   RND_PRED   rnd/predictor/...           RND projector on top of the encoder
//   SPR_TARGET target/...                  target-network copy (TD bootstraps and SPR targets)
//   RND_TARGET rnd/target/...              fixed random encoder + projector
// All blocks are dense: inputs are feature vectors rather than pixels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <type_traits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mbx/autodiff.hpp"
#include "mbx/parameters.hpp"
#include "mbx/tensor.hpp"

namespace mbx {

enum class AgentKind { ModelBased, ModelFree };

inline std::string_view agent_kind_name(AgentKind k) { return k == AgentKind::ModelBased ? "MB" : "MF"; }

inline AgentKind parse_agent_kind(std::string_view s) {
  if (s == "MB") return AgentKind::ModelBased;
  if (s == "MF") return AgentKind::ModelFree;
  throw std::invalid_argument("unknown agent kind '" + std::string(s) + "' (expected MB or MF)");
}

struct ActionSpec {
  enum class Kind { Discrete, ContinuousBox };
  Kind kind = Kind::Discrete;
  std::size_t size = 1;  // number of discrete actions, or box dimension
  double low = -1.0;
  double high = 1.0;

  static ActionSpec discrete(std::size_t n) { return {Kind::Discrete, n, 0.0, 0.0}; }
  static ActionSpec box(std::size_t dim, double low, double high) { return {Kind::ContinuousBox, dim, low, high}; }

  bool is_discrete() const { return kind == Kind::Discrete; }
  std::size_t encoding_width() const { return size; }
  std::size_t policy_width() const { return is_discrete() ? size : 2 * size; }
};

// A concrete action. Continuous actions keep the Gaussian sample drawn before tanh squashing so the
// policy loss can score it.
struct Action {
  std::size_t index = 0;
  std::vector<double> values;
  std::vector<double> pre_squash;

  static Action discrete(std::size_t i) { return Action{i, {}, {}}; }
  bool is_continuous() const { return !values.empty(); }
  friend bool operator==(const Action&, const Action&) = default;
};

struct EncodedAction {
  std::vector<double> features;
  bool clamped = false;
};

// Discrete: one-hot. Continuous: affine map of the box onto [-1, 1], clamping out-of-range values.
inline EncodedAction encode_action(const ActionSpec& spec, const Action& a) {
  EncodedAction out;
  out.features.assign(spec.encoding_width(), 0.0);
  if (spec.is_discrete()) {
    if (a.index >= spec.size) {
      throw std::out_of_range("encode_action: index " + std::to_string(a.index) + " >= " + std::to_string(spec.size));
    }
    out.features[a.index] = 1.0;
    return out;
  }
  if (a.values.size() != spec.size) {
    throw ShapeError("encode_action: expected " + std::to_string(spec.size) + " values, got " +
                     std::to_string(a.values.size()));
  }
  for (std::size_t i = 0; i < spec.size; ++i) {
    double v = a.values[i];
    if (v < spec.low || v > spec.high || !std::isfinite(v)) {
      out.clamped = true;
      v = std::isfinite(v) ? std::clamp(v, spec.low, spec.high) : 0.5 * (spec.low + spec.high);
    }
    out.features[i] = 2.0 * (v - spec.low) / (spec.high - spec.low) - 1.0;
  }
  return out;
}

// Uniformly spaced categorical support for distributional scalars.
struct Support {
  double v_min = -10.0;
  double v_max = 10.0;
  std::size_t bins = 21;

  double spacing() const { return (v_max - v_min) / static_cast<double>(bins - 1); }
  double atom(std::size_t i) const {
    return i + 1 == bins ? v_max : v_min + spacing() * static_cast<double>(i);
  }

  void validate() const {
    if (bins < 2) throw std::invalid_argument("Support: bins must be >= 2");
    if (!(v_max > v_min)) throw std::invalid_argument("Support: v_max must exceed v_min");
    if (v_min == -v_max && bins % 2 == 0) throw std::invalid_argument("Support: symmetric support needs odd bins");
  }

  // Mass split between the two atoms bracketing x (after clamping into the support).
  void two_hot_into(double x, std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    x = std::clamp(x, v_min, v_max);
    const double pos = (x - v_min) / spacing();
    std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    if (lo >= bins - 1) {
      out[bins - 1] = 1.0;
      return;
    }
    const double frac = (x - atom(lo)) / spacing();
    out[lo] = 1.0 - frac;
    out[lo + 1] += frac;
  }

  std::vector<double> two_hot(double x) const {
    std::vector<double> out(bins);
    two_hot_into(x, out);
    return out;
  }

  double expectation(std::span<const double> probs) const {
    double s = 0.0;
    for (std::size_t i = 0; i < bins; ++i) s += probs[i] * atom(i);
    return s;
  }

  // Expected value of softmax(logits).
  double expected_value(std::span<const double> logits) const {
    if (logits.size() != bins) throw ShapeError("expected_value: logits width does not match support bins");
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0, s = 0.0;
    for (std::size_t i = 0; i < bins; ++i) {
      const double e = std::exp(logits[i] - mx);
      z += e;
      s += e * atom(i);
    }
    return s / z;
  }
};

inline std::vector<double> two_hot_encode(double x, const Support& support) { return support.two_hot(x); }
inline double expected_value(std::span<const double> logits, const Support& support) {
  return support.expected_value(logits);
}

struct NetworkConfig {
  std::size_t obs_dim = 0;
  std::size_t latent_dim = 64;
  std::size_t encoder_blocks = 2;
  std::size_t dynamics_blocks = 2;
  std::size_t history_len = 4;
  std::size_t head_hidden = 32;
  Support value_support{-10.0, 10.0, 21};
  Support reward_support{-5.0, 5.0, 21};
  ActionSpec action_spec = ActionSpec::discrete(1);
  std::size_t spr_proj_dim = 32;
  std::size_t rnd_proj_dim = 32;

  std::size_t stack_width() const { return history_len * obs_dim; }

  void validate() const {
    if (obs_dim == 0) throw std::invalid_argument("NetworkConfig: obs_dim must be > 0");
    if (latent_dim == 0) throw std::invalid_argument("NetworkConfig: latent_dim must be > 0");
    if (history_len == 0) throw std::invalid_argument("NetworkConfig: history_len must be >= 1");
    if (action_spec.size == 0) throw std::invalid_argument("NetworkConfig: empty action spec");
    value_support.validate();
    reward_support.validate();
  }

  // Canonical text used for checkpoint digests.
  std::string canonical() const {
    std::string s;
    auto add = [&s](std::string_view k, auto v) {
      s += k;
      s += '=';
      if constexpr (std::is_floating_point_v<decltype(v)>) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        s += buf;
      } else {
        s += std::to_string(v);
      }
      s += ';';
    };
    add("obs_dim", obs_dim);
    add("latent_dim", latent_dim);
    add("encoder_blocks", encoder_blocks);
    add("dynamics_blocks", dynamics_blocks);
    add("history_len", history_len);
    add("head_hidden", head_hidden);
    add("value_min", value_support.v_min);
    add("value_max", value_support.v_max);
    add("value_bins", value_support.bins);
    add("reward_min", reward_support.v_min);
    add("reward_max", reward_support.v_max);
    add("reward_bins", reward_support.bins);
    add("action_kind", static_cast<int>(action_spec.kind));
    add("action_size", action_spec.size);
    add("action_low", action_spec.low);
    add("action_high", action_spec.high);
    add("spr_proj_dim", spr_proj_dim);
    add("rnd_proj_dim", rnd_proj_dim);
    return s;
  }

  std::uint64_t digest() const { return fnv1a64(canonical()); }
};

enum class Component { OE, PP, PRV, M, DH, SPR_ONLINE, SPR_TARGET, RND_PRED, RND_TARGET, MF_STEP };

inline constexpr Component kAllComponents[] = {Component::OE,         Component::PP,         Component::PRV,
                                               Component::M,          Component::DH,         Component::SPR_ONLINE,
                                               Component::SPR_TARGET, Component::RND_PRED,   Component::RND_TARGET,
                                               Component::MF_STEP};

inline std::string_view component_name(Component c) {
  switch (c) {
    case Component::OE: return "OE";
    case Component::PP: return "PP";
    case Component::PRV: return "PRV";
    case Component::M: return "M";
    case Component::DH: return "DH";
    case Component::SPR_ONLINE: return "SPR_ONLINE";
    case Component::SPR_TARGET: return "SPR_TARGET";
    case Component::RND_PRED: return "RND_PRED";
    case Component::RND_TARGET: return "RND_TARGET";
    case Component::MF_STEP: return "MF_STEP";
  }
  return "?";
}

inline std::optional<Component> parse_component(std::string_view s) {
  for (Component c : kAllComponents)
    if (component_name(c) == s) return c;
  return std::nullopt;
}

inline bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

inline Component component_of(std::string_view name) {
  if (starts_with(name, "encoder/")) return Component::OE;
  if (starts_with(name, "prior/policy/")) return Component::PP;
  if (starts_with(name, "prior/rv/")) return Component::PRV;
  if (starts_with(name, "dynamics/")) return Component::M;
  if (starts_with(name, "dyn_heads/")) return Component::DH;
  if (starts_with(name, "mf_step/")) return Component::MF_STEP;
  if (starts_with(name, "spr/online/")) return Component::SPR_ONLINE;
  if (starts_with(name, "target/")) return Component::SPR_TARGET;
  if (starts_with(name, "rnd/predictor/")) return Component::RND_PRED;
  if (starts_with(name, "rnd/target/")) return Component::RND_TARGET;
  throw std::invalid_argument("component_of: parameter '" + std::string(name) + "' belongs to no component");
}

// ---------------------------------------------------------------------------------------------
// Parameter construction

namespace detail {

inline void add_dense(ParameterStore& s, const std::string& prefix, std::size_t in, std::size_t out,
                      std::uint64_t seed) {
  s.add(prefix + "/w", glorot_uniform(in, out, seed, prefix + "/w"));
  s.add(prefix + "/b", Tensor(Shape{out}));
}

inline void add_tower(ParameterStore& s, const std::string& prefix, std::size_t in, std::size_t width,
                      std::size_t blocks, std::uint64_t seed) {
  add_dense(s, prefix + "/in", in, width, seed);
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string blk = prefix + "/block" + std::to_string(b);
    add_dense(s, blk + "/fc1", width, width, seed);
    add_dense(s, blk + "/fc2", width, width, seed);
  }
}

inline void add_mlp(ParameterStore& s, const std::string& prefix, std::size_t in, std::size_t hidden,
                    std::size_t out, std::uint64_t seed) {
  add_dense(s, prefix + "/fc1", in, hidden, seed);
  add_dense(s, prefix + "/fc2", hidden, out, seed);
}

// Prediction heads start with a zero output layer: uniform policy, flat value and reward
// distributions, so an untrained search spreads its visits instead of locking onto noise.
inline void add_head(ParameterStore& s, const std::string& prefix, std::size_t in, std::size_t hidden,
                     std::size_t out, std::uint64_t seed) {
  add_dense(s, prefix + "/fc1", in, hidden, seed);
  s.add(prefix + "/fc2/w", Tensor(Shape{hidden, out}));
  s.add(prefix + "/fc2/b", Tensor(Shape{out}));
}

}  // namespace detail

inline void add_encoder_params(ParameterStore& s, const NetworkConfig& c, std::uint64_t seed,
                               const std::string& prefix = "encoder") {
  detail::add_tower(s, prefix, c.stack_width(), c.latent_dim, c.encoder_blocks, seed);
}

inline void add_dynamics_params(ParameterStore& s, const NetworkConfig& c, std::uint64_t seed,
                                const std::string& prefix = "dynamics") {
  detail::add_tower(s, prefix, c.latent_dim + c.action_spec.encoding_width(), c.latent_dim, c.dynamics_blocks, seed);
  detail::add_head(s, prefix + "/reward", c.latent_dim, c.head_hidden, c.reward_support.bins, seed);
}

inline void add_prior_params(ParameterStore& s, const NetworkConfig& c, std::uint64_t seed,
                             const std::string& prefix = "prior") {
  detail::add_head(s, prefix + "/policy", c.latent_dim, c.head_hidden, c.action_spec.policy_width(), seed);
  detail::add_head(s, prefix + "/rv/value", c.latent_dim, c.head_hidden, c.value_support.bins, seed);
  detail::add_head(s, prefix + "/rv/reward", c.latent_dim, c.head_hidden, c.reward_support.bins, seed);
}

inline void add_dyn_head_params(ParameterStore& s, const NetworkConfig& c, std::uint64_t seed,
                                const std::string& prefix = "dyn_heads") {
  detail::add_head(s, prefix + "/policy", c.latent_dim, c.head_hidden, c.action_spec.policy_width(), seed);
  detail::add_head(s, prefix + "/value", c.latent_dim, c.head_hidden, c.value_support.bins, seed);
}

inline void add_spr_params(ParameterStore& s, const NetworkConfig& c, std::uint64_t seed,
                           const std::string& prefix = "spr/online") {
  detail::add_mlp(s, prefix + "/projector", c.latent_dim, c.spr_proj_dim, c.spr_proj_dim, seed);
  detail::add_mlp(s, prefix + "/predictor", c.spr_proj_dim, c.spr_proj_dim, c.spr_proj_dim, seed);
}

inline void add_rnd_predictor_params(ParameterStore& s, const NetworkConfig& c, std::uint64_t seed) {
  detail::add_mlp(s, "rnd/predictor", c.latent_dim, c.rnd_proj_dim, c.rnd_proj_dim, seed);
}

inline void add_rnd_target_params(ParameterStore& s, const NetworkConfig& c, std::uint64_t seed) {
  add_encoder_params(s, c, seed, "rnd/target/encoder");
  detail::add_mlp(s, "rnd/target/projector", c.latent_dim, c.rnd_proj_dim, c.rnd_proj_dim, seed);
}

// Trainable parameters (theta) of an agent.
inline ParameterStore make_online_params(const NetworkConfig& c, AgentKind kind, std::uint64_t seed) {
  c.validate();
  ParameterStore s;
  add_encoder_params(s, c, seed);
  add_prior_params(s, c, seed);
  if (kind == AgentKind::ModelBased) {
    add_dynamics_params(s, c, seed);
    add_dyn_head_params(s, c, seed);
  } else {
    add_dynamics_params(s, c, seed, "mf_step");
  }
  add_spr_params(s, c, seed);
  add_rnd_predictor_params(s, c, seed);
  return s;
}

// Components mirrored into the target network.
inline bool is_target_synced(Component c) {
  return c == Component::OE || c == Component::PP || c == Component::PRV || c == Component::M ||
         c == Component::DH || c == Component::MF_STEP || c == Component::SPR_ONLINE;
}

// Frozen parameters: target-network copies of the online weights plus the random RND target.
inline ParameterStore make_frozen_params(const ParameterStore& online, const NetworkConfig& c, std::uint64_t seed) {
  ParameterStore s;
  for (const auto& [name, p] : online)
    if (is_target_synced(component_of(name))) s.add("target/" + name, p.value);
  add_rnd_target_params(s, c, seed_for(seed, "rnd_target"));
  return s;
}

// ---------------------------------------------------------------------------------------------
// Forward passes. `Store` is ParameterStore (trainable) or const ParameterStore (frozen).

template <class Store>
Var dense(Tape& t, Store& s, const std::string& prefix, Var x) {
  return add_bias(matmul(x, t.param(s, prefix + "/w")), t.param(s, prefix + "/b"));
}

template <class Store>
Var mlp(Tape& t, Store& s, const std::string& prefix, Var x) {
  return dense(t, s, prefix + "/fc2", relu(dense(t, s, prefix + "/fc1", x)));
}

// relu(in) followed by residual blocks h <- relu(h + fc2(relu(fc1(h)))), then layer norm.
template <class Store>
Var residual_tower(Tape& t, Store& s, const std::string& prefix, std::size_t blocks, Var x) {
  Var h = relu(dense(t, s, prefix + "/in", x));
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::string blk = prefix + "/block" + std::to_string(b);
    Var inner = dense(t, s, blk + "/fc2", relu(dense(t, s, blk + "/fc1", h)));
    h = relu(add(h, inner));
  }
  return layer_norm(h);
}

template <class Store>
Var encode(Tape& t, Store& s, const NetworkConfig& c, Var obs_stack, const std::string& prefix = "encoder") {
  const Tensor& x = obs_stack.value();
  if (x.rank() != 2 || x.dim(1) != c.stack_width()) {
    throw ShapeError("encode: expected [batch, " + std::to_string(c.stack_width()) + "], got " +
                     shape_string(x.shape()));
  }
  return residual_tower(t, s, prefix, c.encoder_blocks, obs_stack);
}

struct PriorOutputs {
  Var policy;  // logits, or [mean | raw log_std] for continuous actions
  Var value;
  Var reward;
};

template <class Store>
PriorOutputs prior_heads(Tape& t, Store& s, Var latent, const std::string& prefix = "prior") {
  return {mlp(t, s, prefix + "/policy", latent), mlp(t, s, prefix + "/rv/value", latent),
          mlp(t, s, prefix + "/rv/reward", latent)};
}

struct DynamicsOutputs {
  Var next_latent;
  Var reward;
};

template <class Store>
DynamicsOutputs dynamics_step(Tape& t, Store& s, const NetworkConfig& c, Var latent, Var action_features,
                              const std::string& prefix = "dynamics") {
  if (action_features.value().rank() != 2 || action_features.value().dim(1) != c.action_spec.encoding_width() ||
      action_features.value().dim(0) != latent.value().dim(0)) {
    throw shape_error("dynamics_step", latent.shape(), action_features.shape());
  }
  Var next = residual_tower(t, s, prefix, c.dynamics_blocks, concat({latent, action_features}));
  return {next, mlp(t, s, prefix + "/reward", next)};
}

struct DynHeadOutputs {
  Var policy;
  Var value;
};

template <class Store>
DynHeadOutputs dynamics_heads(Tape& t, Store& s, Var latent, const std::string& prefix = "dyn_heads") {
  return {mlp(t, s, prefix + "/policy", latent), mlp(t, s, prefix + "/value", latent)};
}

template <class Store>
Var spr_project(Tape& t, Store& s, Var latent, const std::string& prefix = "spr/online") {
  return mlp(t, s, prefix + "/projector", latent);
}

template <class Store>
Var spr_predict(Tape& t, Store& s, Var projection, const std::string& prefix = "spr/online") {
  return mlp(t, s, prefix + "/predictor", projection);
}

// Online SPR prediction x_k from an unrolled latent.
inline Var spr_project_predict(Tape& t, ParameterStore& online, Var latent) {
  return spr_predict(t, online, spr_project(t, online, latent));
}

// SPR target y_k: target encoder + target projector on a stack of copies of obs_k. Never differentiated.
inline Var spr_target(Tape& t, const ParameterStore& frozen, const NetworkConfig& c, Var copies_stack) {
  Var y = spr_project(t, frozen, encode(t, frozen, c, copies_stack, "target/encoder"), "target/spr/online");
  return detach(y);
}

// Diagonal Gaussian parameters from a continuous policy head.
struct GaussianPolicy {
  Var mean;
  Var log_std;
};

constexpr double kLogStdMin = -5.0;
constexpr double kLogStdMax = 2.0;

inline GaussianPolicy split_gaussian(Var policy, std::size_t dim) {
  return {slice(policy, 0, dim), clamp(slice(policy, dim, 2 * dim), kLogStdMin, kLogStdMax)};
}

// ---------------------------------------------------------------------------------------------
// History stacks

// Frames t-H+1 .. t, repeating frame 0 before the episode start.
inline std::vector<double> history_stack(std::span<const std::vector<double>> frames, std::size_t t,
                                         std::size_t history_len) {
  std::vector<double> out;
  out.reserve(history_len * (frames.empty() ? 0 : frames[0].size()));
  for (std::size_t i = 0; i < history_len; ++i) {
    const std::ptrdiff_t idx = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(history_len - 1 - i);
    const auto& f = frames[static_cast<std::size_t>(std::max<std::ptrdiff_t>(idx, 0))];
    out.insert(out.end(), f.begin(), f.end());
  }
  return out;
}

inline std::vector<double> copies_stack(std::span<const double> frame, std::size_t history_len) {
  std::vector<double> out;
  out.reserve(history_len * frame.size());
  for (std::size_t i = 0; i < history_len; ++i) out.insert(out.end(), frame.begin(), frame.end());
  return out;
}

}  // namespace mbx
