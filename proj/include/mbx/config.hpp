#pragma once

// Experiment configuration. Text format: flat `key = value` lines, `#` comments, and sections
// [common], [pretrain], [finetune]. Phase keys placed in [common] apply to both phases. An optional
// `preset = desk|full` line in [common] selects the defaults the remaining keys override.
// Unknown keys are rejected.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbx/envs/microcraft.hpp"
#include "mbx/envs/pointdesk.hpp"
#include "mbx/networks.hpp"
#include "mbx/parameters.hpp"

namespace mbx {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class EnvKind { MicroCraft, PointDesk };

inline std::string env_kind_name(EnvKind e) { return e == EnvKind::MicroCraft ? "microcraft" : "pointdesk"; }

struct PhaseConfig {
  std::int64_t budget = 50000;  // environment steps
  double lr = 1e-3;
  LrSchedule schedule = LrSchedule::Cosine;
  std::size_t replay_size = 50000;  // sequences
  double reanalyse_fraction = 0.8;
  double mf_reanalyse_fraction = 0.75;
  std::size_t td_steps = 5;
  std::size_t mf_td_steps = 5;
  std::size_t unroll = 5;
  std::size_t mf_unroll = 1;
  std::size_t num_simulations = 50;
  std::size_t reanalyse_simulations = 50;
  double c_puct = 1.25;
  std::size_t num_action_samples = 20;
  double dirichlet_alpha = 0.3;
  double noise_fraction = 0.25;
  double temperature_start = 1.0;
  double temperature_end = 1.0;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_decay_fraction = 0.2;
  double spr_weight = 1.0;
  double rnd_weight = 1.0;
  std::size_t batch_size = 32;
  std::size_t train_every = 4;  // env steps per training step
  std::size_t warmup_sequences = 200;
  std::int64_t target_sync_interval = 100;
  std::int64_t log_interval = 1000;

  void validate(const std::string& where) const {
    auto bad = [&](const std::string& m) { throw ConfigError(where + ": " + m); };
    if (budget < 0) bad("budget must be >= 0");
    if (!(lr > 0)) bad("lr must be > 0");
    if (replay_size == 0) bad("replay_size must be > 0");
    for (double f : {reanalyse_fraction, mf_reanalyse_fraction, noise_fraction})
      if (f < 0 || f > 1) bad("fractions must lie in [0,1]");
    if (mf_unroll != 1) bad("mf_unroll must be 1");
    if (unroll == 0) bad("unroll must be >= 1");
    if (num_simulations == 0 || reanalyse_simulations == 0) bad("simulation counts must be >= 1");
    if (batch_size == 0 || train_every == 0) bad("batch_size and train_every must be >= 1");
    if (log_interval <= 0) bad("log_interval must be > 0");
    if (target_sync_interval <= 0) bad("target_sync_interval must be > 0");
    if (temperature_start < 0 || temperature_end < 0) bad("temperatures must be >= 0");
  }
};

struct ExperimentConfig {
  EnvKind env = EnvKind::MicroCraft;
  std::string preset = "desk";
  MicroCraftConfig craft;
  PointDeskConfig desk;
  int task = 0;

  std::size_t latent_dim = 64;
  std::size_t encoder_blocks = 2;
  std::size_t dynamics_blocks = 2;
  std::size_t history_len = 4;
  std::size_t head_hidden = 32;
  double value_min = -10.0, value_max = 10.0;
  std::size_t value_bins = 21;
  double reward_min = -5.0, reward_max = 5.0;
  std::size_t reward_bins = 21;
  std::size_t spr_proj_dim = 32;
  std::size_t rnd_proj_dim = 32;

  double discount = 0.997;
  double rnd_decay = 0.99;
  bool rnd_from_dynamics = false;
  AdamConfig adam;

  double scratch_lr = 1e-3;
  LrSchedule scratch_schedule = LrSchedule::Cosine;
  bool spr_travels_with_oe = true;
  bool carry_optimizer_state = false;

  PhaseConfig pretrain, finetune;

  std::size_t obs_dim() const {
    return env == EnvKind::MicroCraft ? MicroCraft(craft).obs_dim() : PointDesk(desk).obs_dim();
  }
  ActionSpec action_spec() const {
    return env == EnvKind::MicroCraft ? MicroCraft(craft).action_spec() : PointDesk(desk).action_spec();
  }

  NetworkConfig network() const {
    NetworkConfig n;
    n.obs_dim = obs_dim();
    n.latent_dim = latent_dim;
    n.encoder_blocks = encoder_blocks;
    n.dynamics_blocks = dynamics_blocks;
    n.history_len = history_len;
    n.head_hidden = head_hidden;
    n.value_support = {value_min, value_max, value_bins};
    n.reward_support = {reward_min, reward_max, reward_bins};
    n.action_spec = action_spec();
    n.spr_proj_dim = spr_proj_dim;
    n.rnd_proj_dim = rnd_proj_dim;
    n.validate();
    return n;
  }

  void validate() const {
    try {
      network();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!(discount >= 0 && discount <= 1)) throw ConfigError("discount must lie in [0,1]");
    if (!(rnd_decay > 0 && rnd_decay < 1)) throw ConfigError("rnd_decay must lie in (0,1)");
    pretrain.validate("[pretrain]");
    finetune.validate("[finetune]");
    if (env == EnvKind::PointDesk) PointDesk::check_task(task);
    else if (task != 0) throw ConfigError("microcraft has a single task (0)");
  }

  // Full-scale values shrunk to a single-core desk budget. Learning rates are 10x the full preset's because the
  // runs are ~3000x shorter; their ratios are kept.
  static ExperimentConfig desk_preset(EnvKind env) {
    ExperimentConfig c;
    c.env = env;
    c.preset = "desk";
    c.pretrain.lr = 1e-3;
    c.pretrain.schedule = LrSchedule::Cosine;
    c.finetune.lr = 1e-4;
    c.finetune.schedule = LrSchedule::Constant;
    c.scratch_lr = 1e-3;
    c.pretrain.budget = 50000;
    c.finetune.budget = 30000;
    c.pretrain.reanalyse_fraction = 0.8;
    c.finetune.reanalyse_fraction = 0.99;
    c.pretrain.mf_reanalyse_fraction = 0.75;
    c.finetune.mf_reanalyse_fraction = 0.99;
    for (PhaseConfig* p : {&c.pretrain, &c.finetune}) {
      p->num_simulations = 16;
      p->reanalyse_simulations = 8;
      p->batch_size = 32;
      p->train_every = 8;
    }
    c.finetune.temperature_start = 1.0;
    c.finetune.temperature_end = 0.25;
    if (env == EnvKind::PointDesk) {
      c.discount = 0.99;
      c.value_min = -2.0, c.value_max = 2.0;
      c.reward_min = -2.0, c.reward_max = 2.0;
      c.pretrain.lr = 1e-3;
      c.pretrain.schedule = LrSchedule::Constant;
      c.finetune.lr = 1e-3;
      c.finetune.schedule = LrSchedule::Cosine;
      c.scratch_lr = 1e-3;
      for (PhaseConfig* p : {&c.pretrain, &c.finetune}) {
        p->td_steps = 0;
        p->mf_td_steps = 1;
        p->replay_size = 2000;
        p->reanalyse_fraction = 0.925;
        p->num_action_samples = 8;
      }
      c.pretrain.mf_reanalyse_fraction = 0.945;
      c.finetune.mf_reanalyse_fraction = 0.945;
    }
    return c;
  }

  // Full-scale hyperparameters (full simulation counts and learning rates).
  static ExperimentConfig full_preset(EnvKind env) {
    ExperimentConfig c = desk_preset(env);
    c.preset = "full";
    for (PhaseConfig* p : {&c.pretrain, &c.finetune}) {
      p->num_simulations = 50;
      p->reanalyse_simulations = 50;
      p->num_action_samples = 20;
    }
    if (env == EnvKind::MicroCraft) {
      c.pretrain.lr = 1e-4;
      c.finetune.lr = 1e-5;
      c.scratch_lr = 1e-4;
    } else {
      c.pretrain.lr = 1e-4;
      c.finetune.lr = 1e-4;
      c.scratch_lr = 1e-4;
    }
    return c;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (!is || !is.eof()) {
    // allow trailing whitespace only
    std::string rest;
    if (!is.eof()) is >> rest;
    if (!is || !rest.empty()) throw ConfigError("bad value for " + key + ": '" + v + "'");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

inline LrSchedule parse_schedule(const std::string& key, const std::string& v) {
  if (v == "cosine") return LrSchedule::Cosine;
  if (v == "constant") return LrSchedule::Constant;
  throw ConfigError("bad schedule for " + key + ": '" + v + "' (cosine|constant)");
}

using Setter = std::function<void(const std::string& key, const std::string& value)>;

template <class T>
Setter num(T& field) {
  return [&field](const std::string& k, const std::string& v) { field = parse_number<T>(k, v); };
}
inline Setter flag(bool& field) {
  return [&field](const std::string& k, const std::string& v) { field = parse_bool(k, v); };
}
inline Setter sched(LrSchedule& field) {
  return [&field](const std::string& k, const std::string& v) { field = parse_schedule(k, v); };
}

inline std::map<std::string, Setter> phase_setters(PhaseConfig& p) {
  return {{"budget", num(p.budget)},
          {"lr", num(p.lr)},
          {"lr_schedule", sched(p.schedule)},
          {"replay_size", num(p.replay_size)},
          {"reanalyse_fraction", num(p.reanalyse_fraction)},
          {"mf_reanalyse_fraction", num(p.mf_reanalyse_fraction)},
          {"td_steps", num(p.td_steps)},
          {"mf_td_steps", num(p.mf_td_steps)},
          {"unroll", num(p.unroll)},
          {"mf_unroll", num(p.mf_unroll)},
          {"num_simulations", num(p.num_simulations)},
          {"reanalyse_simulations", num(p.reanalyse_simulations)},
          {"c_puct", num(p.c_puct)},
          {"num_action_samples", num(p.num_action_samples)},
          {"dirichlet_alpha", num(p.dirichlet_alpha)},
          {"noise_fraction", num(p.noise_fraction)},
          {"temperature_start", num(p.temperature_start)},
          {"temperature_end", num(p.temperature_end)},
          {"epsilon_start", num(p.epsilon_start)},
          {"epsilon_end", num(p.epsilon_end)},
          {"epsilon_decay_fraction", num(p.epsilon_decay_fraction)},
          {"spr_weight", num(p.spr_weight)},
          {"rnd_weight", num(p.rnd_weight)},
          {"batch_size", num(p.batch_size)},
          {"train_every", num(p.train_every)},
          {"warmup_sequences", num(p.warmup_sequences)},
          {"target_sync_interval", num(p.target_sync_interval)},
          {"log_interval", num(p.log_interval)}};
}

inline std::map<std::string, Setter> common_setters(ExperimentConfig& c) {
  return {{"task", num(c.task)},
          {"env_seed", [&c](const std::string& k, const std::string& v) {
             c.craft.seed = c.desk.seed = parse_number<std::uint64_t>(k, v);
           }},
          {"grid_size", num(c.craft.grid_size)},
          {"episode_limit", [&c](const std::string& k, const std::string& v) {
             c.craft.episode_limit = c.desk.episode_limit = parse_number<std::size_t>(k, v);
           }},
          {"heavy_blocks", flag(c.desk.heavy_blocks)},
          {"latent_dim", num(c.latent_dim)},
          {"encoder_blocks", num(c.encoder_blocks)},
          {"dynamics_blocks", num(c.dynamics_blocks)},
          {"history_len", num(c.history_len)},
          {"head_hidden", num(c.head_hidden)},
          {"value_min", num(c.value_min)},
          {"value_max", num(c.value_max)},
          {"value_bins", num(c.value_bins)},
          {"reward_min", num(c.reward_min)},
          {"reward_max", num(c.reward_max)},
          {"reward_bins", num(c.reward_bins)},
          {"spr_proj_dim", num(c.spr_proj_dim)},
          {"rnd_proj_dim", num(c.rnd_proj_dim)},
          {"discount", num(c.discount)},
          {"rnd_decay", num(c.rnd_decay)},
          {"rnd_from_dynamics", flag(c.rnd_from_dynamics)},
          {"adam_beta1", num(c.adam.beta1)},
          {"adam_beta2", num(c.adam.beta2)},
          {"adam_epsilon", num(c.adam.epsilon)},
          {"scratch_lr", num(c.scratch_lr)},
          {"scratch_lr_schedule", sched(c.scratch_schedule)},
          {"spr_travels_with_oe", flag(c.spr_travels_with_oe)},
          {"carry_optimizer_state", flag(c.carry_optimizer_state)}};
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
  struct Entry {
    std::string section, key, value;
    int line;
  };
  std::vector<Entry> entries;
  std::string section = "common";
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  std::string env = "microcraft", preset = "desk";
  while (std::getline(in, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      if (section != "common" && section != "pretrain" && section != "finetune")
        throw ConfigError(where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    Entry e{section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)), lineno};
    if (e.section == "common" && e.key == "env") {
      env = e.value;
      continue;
    }
    if (e.section == "common" && e.key == "preset") {
      preset = e.value;
      continue;
    }
    entries.push_back(e);
  }
  EnvKind kind;
  if (env == "microcraft") kind = EnvKind::MicroCraft;
  else if (env == "pointdesk") kind = EnvKind::PointDesk;
  else throw ConfigError(origin + ": unknown env '" + env + "' (microcraft|pointdesk)");
  ExperimentConfig c;
  if (preset == "desk") c = ExperimentConfig::desk_preset(kind);
  else if (preset == "full") c = ExperimentConfig::full_preset(kind);
  else throw ConfigError(origin + ": unknown preset '" + preset + "' (desk|full)");

  auto common = detail::common_setters(c);
  auto pre = detail::phase_setters(c.pretrain);
  auto fine = detail::phase_setters(c.finetune);
  // Phase keys in [common] first, so section-specific values win regardless of file order.
  for (int pass = 0; pass < 2; ++pass) {
    for (const auto& e : entries) {
      const std::string where = origin + ":" + std::to_string(e.line);
      const bool in_common = e.section == "common";
      if ((pass == 0) != in_common) continue;
      try {
        if (in_common) {
          if (auto it = common.find(e.key); it != common.end()) {
            it->second(e.key, e.value);
          } else if (pre.count(e.key)) {
            pre[e.key](e.key, e.value);
            fine[e.key](e.key, e.value);
          } else {
            throw ConfigError("unknown key '" + e.key + "'");
          }
        } else {
          auto& set = e.section == "pretrain" ? pre : fine;
          auto it = set.find(e.key);
          if (it == set.end()) throw ConfigError("unknown key '" + e.key + "' in [" + e.section + "]");
          it->second(e.key, e.value);
        }
      } catch (const ConfigError& err) {
        throw ConfigError(where + ": " + err.what());
      }
    }
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

}  // namespace mbx
