#pragma once

// Interleaved act/learn loop for one phase, the uniform-random baseline, resumable run state, and
// the transfer experiment grid.
//
// A run can be stopped at any episode boundary and resumed: the run-state directory holds the agent
// checkpoint, an append-only spill of every finished episode, and a JSON file with the loop
// counters, rng state and metric accumulators. Resuming rebuilds the replay by re-appending the
// spilled episodes, truncates the CSV to the rows written before the save, and continues.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mbx/agent.hpp"
#include "mbx/config.hpp"
#include "mbx/envs/common.hpp"
#include "mbx/envs/microcraft.hpp"
#include "mbx/envs/pointdesk.hpp"
#include "mbx/metrics.hpp"
#include "mbx/transfer.hpp"

namespace mbx {

enum class Phase { Pretrain, Finetune };

inline std::string phase_name(Phase p) { return p == Phase::Pretrain ? "pretrain" : "finetune"; }

struct RunOptions {
  std::string arm = "run";
  std::uint64_t seed = 0;
  std::string csv_path;           // empty: no CSV
  std::string state_dir;          // empty: not resumable
  std::int64_t save_every_episodes = 10;
  std::int64_t stop_after = -1;   // stop at the first episode boundary at or after this env step
  bool record_wall_time = false;
  bool scratch = false;           // Scratch baseline: pretrain-style optimization from scratch_lr
  std::int64_t budget_override = -1;
  std::function<void(const MetricRow&)> on_row;
};

struct PhaseSummary {
  std::int64_t env_steps = 0;
  std::int64_t episodes = 0;
  std::int64_t train_steps = 0;
  std::int64_t unique_states = 0;
  std::int64_t achievement_unlocks = 0;
  std::vector<double> success_rates;
  double score = 0.0;
  double mean_return = 0.0;
  std::int64_t reanalysed_samples = 0;
  std::int64_t sampled = 0;
  bool completed = false;
  MetricRow last_row;

  nlohmann::json to_json() const {
    return {{"env_steps", env_steps},       {"episodes", episodes},
            {"train_steps", train_steps},   {"unique_states", unique_states},
            {"achievement_unlocks", achievement_unlocks},
            {"success_rates", success_rates}, {"score", score},
            {"mean_return", mean_return},   {"reanalysed_samples", reanalysed_samples},
            {"sampled", sampled},           {"completed", completed}};
  }
};

inline std::vector<std::string> achievement_names(EnvKind env) {
  if (env == EnvKind::MicroCraft) return {kAchievementNames.begin(), kAchievementNames.end()};
  return {"reach_block_0", "reach_block_1", "reach_block_2", "push_block_0", "push_block_1", "push_block_2"};
}

// ---------------------------------------------------------------------------------------------
// Episode spill (append-only binary file of finished trajectories)

inline void encode_trajectory(ByteWriter& w, const Trajectory& t) {
  w.u64(t.length());
  w.u64(t.observations.empty() ? 0 : t.observations[0].size());
  w.u8(t.reward_mode == RewardMode::Intrinsic ? 1 : 0);
  w.u32(t.achievements);
  for (const auto& o : t.observations)
    for (double v : o) w.f64(v);
  auto action = [&w](const Action& a) {
    if (a.pre_squash.size() != a.values.size()) throw std::logic_error("encode_trajectory: pre_squash size mismatch");
    w.u64(a.index);
    w.u32(static_cast<std::uint32_t>(a.values.size()));
    for (double v : a.values) w.f64(v);
    for (double v : a.pre_squash) w.f64(v);
  };
  for (std::size_t i = 0; i < t.length(); ++i) {
    action(t.actions[i]);
    w.f64(t.rewards[i]);
    w.f64(t.env_rewards[i]);
    w.f64(t.root_values[i]);
    w.u32(static_cast<std::uint32_t>(t.search_actions[i].size()));
    for (const auto& a : t.search_actions[i]) action(a);
    for (double p : t.search_policies[i]) w.f64(p);
  }
}

inline Trajectory decode_trajectory(ByteReader& r) {
  Trajectory t;
  const std::uint64_t T = r.u64(), dim = r.u64();
  t.reward_mode = r.u8() ? RewardMode::Intrinsic : RewardMode::Extrinsic;
  t.achievements = r.u32();
  t.observations.assign(T + 1, std::vector<double>(dim));
  for (auto& o : t.observations)
    for (double& v : o) v = r.f64();
  auto action = [&r]() {
    Action a;
    a.index = r.u64();
    const std::uint32_t n = r.u32();
    a.values.resize(n);
    a.pre_squash.resize(n);
    for (double& v : a.values) v = r.f64();
    for (double& v : a.pre_squash) v = r.f64();
    return a;
  };
  for (std::uint64_t i = 0; i < T; ++i) {
    t.actions.push_back(action());
    t.rewards.push_back(r.f64());
    t.env_rewards.push_back(r.f64());
    t.root_values.push_back(r.f64());
    const std::uint32_t n = r.u32();
    std::vector<Action> acts;
    for (std::uint32_t k = 0; k < n; ++k) acts.push_back(action());
    std::vector<double> pol(n);
    for (double& p : pol) p = r.f64();
    t.search_actions.push_back(std::move(acts));
    t.search_policies.push_back(std::move(pol));
  }
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------------------------
// Phase loop

namespace detail {

struct LoopState {
  std::int64_t env_step = 0;
  std::int64_t episode_index = 0;
  std::mt19937_64 rng;
  std::unordered_set<std::uint64_t> unique;
  AchievementTally tally;
  double window_return_sum = 0.0;
  std::int64_t window_episodes = 0;
  double last_return = 0.0;
  double return_sum = 0.0;
  double loss_sum[4] = {0, 0, 0, 0};
  std::int64_t window_train_steps = 0;
  std::int64_t last_logged = 0;
  std::int64_t reanalysed = 0, sampled = 0;
  double lr = 0.0;
  std::uint64_t spill_bytes = 0;
  std::int64_t spilled_episodes = 0;
  std::uint64_t csv_bytes = 0;
  double wall_offset = 0.0;
};

inline std::uint64_t episode_seed(std::uint64_t seed, Phase phase, std::int64_t index) {
  return splitmix64(seed_for(seed, "episodes/" + phase_name(phase)) ^ static_cast<std::uint64_t>(index));
}

inline std::string rng_to_string(const std::mt19937_64& r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

inline void rng_from_string(std::mt19937_64& r, const std::string& s) {
  std::istringstream is(s);
  is >> r;
  if (!is) throw CheckpointError("corrupt rng state in run state");
}

inline void save_loop_state(const std::string& dir, const LoopState& L, const Agent* agent) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  if (agent) save_checkpoint(*agent, (fs::path(dir) / "agent.ckpt").string());
  nlohmann::json j;
  j["env_step"] = L.env_step;
  j["episode_index"] = L.episode_index;
  j["rng"] = rng_to_string(L.rng);
  std::vector<std::uint64_t> uniq(L.unique.begin(), L.unique.end());
  std::sort(uniq.begin(), uniq.end());
  j["unique"] = uniq;
  j["tally_counts"] = L.tally.counts;
  j["tally_episodes"] = L.tally.episodes;
  j["tally_unlocks"] = L.tally.unlocks;
  auto bits = [](double d) { return std::bit_cast<std::uint64_t>(d); };
  j["window_return_sum"] = bits(L.window_return_sum);
  j["window_episodes"] = L.window_episodes;
  j["last_return"] = bits(L.last_return);
  j["return_sum"] = bits(L.return_sum);
  j["loss_sum"] = {bits(L.loss_sum[0]), bits(L.loss_sum[1]), bits(L.loss_sum[2]), bits(L.loss_sum[3])};
  j["window_train_steps"] = L.window_train_steps;
  j["last_logged"] = L.last_logged;
  j["reanalysed"] = L.reanalysed;
  j["sampled"] = L.sampled;
  j["lr"] = bits(L.lr);
  j["spill_bytes"] = L.spill_bytes;
  j["spilled_episodes"] = L.spilled_episodes;
  j["csv_bytes"] = L.csv_bytes;
  const std::string path = (fs::path(dir) / "loop.json").string();
  {
    std::ofstream out(path + ".tmp");
    out << j.dump();
    if (!out) throw CheckpointError("cannot write " + path);
  }
  fs::rename(path + ".tmp", path);
}

inline bool load_loop_state(const std::string& dir, LoopState& L) {
  namespace fs = std::filesystem;
  const fs::path path = fs::path(dir) / "loop.json";
  if (!fs::exists(path)) return false;
  std::ifstream in(path);
  nlohmann::json j = nlohmann::json::parse(in);
  auto dbl = [](const nlohmann::json& v) { return std::bit_cast<double>(v.get<std::uint64_t>()); };
  L.env_step = j["env_step"];
  L.episode_index = j["episode_index"];
  rng_from_string(L.rng, j["rng"].get<std::string>());
  L.unique.clear();
  for (auto& v : j["unique"]) L.unique.insert(v.get<std::uint64_t>());
  L.tally.counts = j["tally_counts"].get<std::vector<std::int64_t>>();
  L.tally.episodes = j["tally_episodes"];
  L.tally.unlocks = j["tally_unlocks"];
  L.window_return_sum = dbl(j["window_return_sum"]);
  L.window_episodes = j["window_episodes"];
  L.last_return = dbl(j["last_return"]);
  L.return_sum = dbl(j["return_sum"]);
  for (int i = 0; i < 4; ++i) L.loss_sum[i] = dbl(j["loss_sum"][i]);
  L.window_train_steps = j["window_train_steps"];
  L.last_logged = j["last_logged"];
  L.reanalysed = j["reanalysed"];
  L.sampled = j["sampled"];
  L.lr = dbl(j["lr"]);
  L.spill_bytes = j["spill_bytes"];
  L.spilled_episodes = j["spilled_episodes"];
  L.csv_bytes = j["csv_bytes"];
  return true;
}

}  // namespace detail

inline SearchConfig acting_search(const PhaseConfig& p, double discount, double temperature) {
  SearchConfig sc;
  sc.num_simulations = p.num_simulations;
  sc.c_puct = p.c_puct;
  sc.discount = discount;
  sc.root_dirichlet_alpha = p.dirichlet_alpha;
  sc.root_noise_fraction = p.noise_fraction;
  sc.num_action_samples = p.num_action_samples;
  sc.temperature = temperature;
  return sc;
}

inline TrainSettings train_settings(const ExperimentConfig& cfg, const PhaseConfig& p, AgentKind kind, Phase phase) {
  TrainSettings s;
  s.batch_size = p.batch_size;
  const bool mb = kind == AgentKind::ModelBased;
  s.reanalyse_fraction = mb ? p.reanalyse_fraction : p.mf_reanalyse_fraction;
  s.targets.kind = kind;
  s.targets.unroll = mb ? p.unroll : p.mf_unroll;
  s.targets.td_steps = mb ? p.td_steps : p.mf_td_steps;
  s.targets.discount = cfg.discount;
  s.targets.reanalyse_search = acting_search(p, cfg.discount, 0.0);
  s.targets.reanalyse_search.num_simulations = p.reanalyse_simulations;
  s.targets.reanalyse_search.root_noise_fraction = 0.0;
  s.targets.num_action_samples = p.num_action_samples;
  s.weights.spr = p.spr_weight;
  s.weights.rnd = phase == Phase::Pretrain ? p.rnd_weight : 0.0;
  s.weights.rnd_from_dynamics = cfg.rnd_from_dynamics;
  s.adam = cfg.adam;
  s.target_sync_interval = p.target_sync_interval;
  return s;
}

// Runs one phase. `agent` may be null, in which case actions are uniformly random and nothing is
// trained (the exploration baseline).
template <Environment Env>
PhaseSummary run_phase(Phase phase, Agent* agent, Env& env, const ExperimentConfig& cfg, const RunOptions& opt) {
  namespace fs = std::filesystem;
  const PhaseConfig& p = phase == Phase::Pretrain ? cfg.pretrain : cfg.finetune;
  const std::int64_t budget = opt.budget_override >= 0 ? opt.budget_override : p.budget;
  const EnvMode mode = phase == Phase::Pretrain ? EnvMode::pretrain() : EnvMode::finetune(cfg.task);
  env.set_mode(mode);
  const RewardMode reward_mode = phase == Phase::Pretrain ? RewardMode::Intrinsic : RewardMode::Extrinsic;
  const NetworkConfig net = cfg.network();
  const std::size_t H = net.history_len;
  const auto names = achievement_names(cfg.env);
  const AgentKind kind = agent ? agent->kind : AgentKind::ModelBased;
  if (agent && agent->net.digest() != net.digest()) throw std::invalid_argument("run_phase: agent network differs from config");

  const TrainSettings ts = train_settings(cfg, p, kind, phase);
  const double lr0 = opt.scratch ? cfg.scratch_lr : p.lr;
  const LrSchedule schedule = opt.scratch ? cfg.scratch_schedule : p.schedule;
  const std::int64_t total_train = std::max<std::int64_t>(1, budget / static_cast<std::int64_t>(p.train_every));
  SequenceLayout layout{ts.targets.unroll, ts.targets.td_steps, H, cfg.discount};
  SequenceBuffer replay(p.replay_size, layout);

  detail::LoopState L;
  L.rng.seed(seed_for(opt.seed, "loop/" + phase_name(phase) + "/" + opt.arm));
  L.tally = AchievementTally(names.size());
  L.lr = lr_at_step(schedule, lr0, 0, total_train);

  const std::string spill_path = opt.state_dir.empty() ? "" : (fs::path(opt.state_dir) / "episodes.bin").string();
  bool resumed = false;
  if (!opt.state_dir.empty() && detail::load_loop_state(opt.state_dir, L)) {
    resumed = true;
    if (agent) {
      Agent restored = load_checkpoint((fs::path(opt.state_dir) / "agent.ckpt").string(), net);
      restored.rnd.decay = agent->rnd.decay;
      *agent = std::move(restored);
    }
    auto bytes = read_file_bytes(spill_path);
    if (bytes.size() < L.spill_bytes) throw CheckpointError("episode spill shorter than recorded");
    fs::resize_file(spill_path, L.spill_bytes);
    ByteReader r(bytes.data(), L.spill_bytes);
    for (std::int64_t e = 0; e < L.spilled_episodes; ++e) replay.append(decode_trajectory(r));
  } else if (!opt.state_dir.empty()) {
    fs::create_directories(opt.state_dir);
    std::ofstream(spill_path, std::ios::binary | std::ios::trunc);
  }

  CsvWriter csv;
  if (!opt.csv_path.empty()) {
    if (resumed && fs::exists(opt.csv_path)) fs::resize_file(opt.csv_path, L.csv_bytes);
    csv.open(opt.csv_path, resumed);
  }
  const auto t_start = std::chrono::steady_clock::now();
  auto wall = [&]() {
    if (!opt.record_wall_time) return 0.0;
    return L.wall_offset + std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  PhaseSummary sum;
  auto emit = [&]() {
    MetricRow row;
    row.env_step = L.env_step;
    row.arm = opt.arm;
    row.seed = opt.seed;
    if (L.window_episodes > 0) L.last_return = L.window_return_sum / static_cast<double>(L.window_episodes);
    row.episode_return = L.last_return;
    const auto rates = L.tally.rates();
    row.score = L.tally.episodes ? crafter_score(rates) : 0.0;
    row.achievements_json = achievements_json(names, rates);
    row.unique_states = static_cast<std::int64_t>(L.unique.size());
    if (L.window_train_steps > 0) {
      const double n = static_cast<double>(L.window_train_steps);
      row.l_pi = L.loss_sum[0] / n;
      row.l_v = L.loss_sum[1] / n;
      row.l_r = L.loss_sum[2] / n;
      row.l_spr = L.loss_sum[3] / n;
    }
    row.lr = L.lr;
    row.wall_time = wall();
    if (csv.is_open()) csv.write(row);
    if (opt.on_row) opt.on_row(row);
    sum.last_row = row;
    L.window_return_sum = 0.0;
    L.window_episodes = 0;
    for (double& x : L.loss_sum) x = 0.0;
    L.window_train_steps = 0;
    L.last_logged = L.env_step;
  };

  std::vector<std::vector<double>> frames;
  Trajectory traj;
  auto start_episode = [&]() {
    frames.assign(1, env.reset(detail::episode_seed(opt.seed, phase, L.episode_index)));
    traj = Trajectory{};
    traj.reward_mode = reward_mode;
  };
  start_episode();

  bool stopped = false;
  while (L.env_step < budget) {
    const std::vector<double> stack = history_stack(frames, frames.size() - 1, H);
    Decision d;
    if (!agent) {
      d.action = uniform_action(net.action_spec, L.rng);
    } else if (kind == AgentKind::ModelBased) {
      const double temp = temperature_at(p.temperature_start, p.temperature_end, L.env_step, budget);
      d = act_model_based(*agent, stack, acting_search(p, cfg.discount, temp), L.rng);
    } else {
      const double eps = epsilon_at(p.epsilon_start, p.epsilon_end, p.epsilon_decay_fraction, L.env_step, budget);
      d = act_model_free(*agent, stack, eps, cfg.discount, p.num_action_samples, L.rng);
    }
    StepResult res = env.step(d.action);
    traj.actions.push_back(d.action);
    traj.env_rewards.push_back(res.reward);
    traj.search_actions.push_back(std::move(d.search_actions));
    traj.search_policies.push_back(std::move(d.search_policy));
    traj.root_values.push_back(d.root_value);
    if (traj.observations.empty()) traj.observations.push_back(frames.front());
    traj.observations.push_back(res.observation);
    frames.push_back(std::move(res.observation));
    L.unique.insert(res.state_hash);
    L.env_step += 1;

    if (res.done) {
      traj.achievements = res.achievements;
      double ret = 0.0;
      for (double r : traj.env_rewards) ret += r;
      if (phase == Phase::Pretrain) {
        if (ret != 0.0) throw ModeError("extrinsic reward observed during pretraining");
        if (agent)
          annotate_pretraining_reward(traj, agent->rnd, agent->online, agent->frozen, net, RewardMode::Intrinsic,
                                      cfg.rnd_from_dynamics);
        else
          traj.rewards.assign(traj.length(), 0.0), traj.reward_mode = RewardMode::Intrinsic;
      } else {
        traj.rewards = traj.env_rewards;
        traj.reward_mode = RewardMode::Extrinsic;
      }
      L.tally.add(res.achievements);
      L.window_return_sum += ret;
      L.window_episodes += 1;
      L.return_sum += ret;
      L.episode_index += 1;
      if (agent) {
        auto shared = std::make_shared<const Trajectory>(std::move(traj));
        replay.append(shared);
        if (!spill_path.empty()) {
          ByteWriter w;
          encode_trajectory(w, *shared);
          std::ofstream out(spill_path, std::ios::binary | std::ios::app);
          out.write(reinterpret_cast<const char*>(w.buffer().data()), static_cast<std::streamsize>(w.buffer().size()));
          L.spill_bytes += w.buffer().size();
          L.spilled_episodes += 1;
        }
      }
    }

    if (agent && replay.size() >= p.warmup_sequences && L.env_step % static_cast<std::int64_t>(p.train_every) == 0) {
      L.lr = lr_at_step(schedule, lr0, std::min(agent->train_step, total_train), total_train);
      TrainStepReport rep = train_step(*agent, replay, ts, L.lr, L.rng);
      L.loss_sum[0] += rep.loss.l_pi;
      L.loss_sum[1] += rep.loss.l_v;
      L.loss_sum[2] += rep.loss.l_r;
      L.loss_sum[3] += rep.loss.l_spr;
      L.window_train_steps += 1;
      L.reanalysed += static_cast<std::int64_t>(rep.reanalysed);
      L.sampled += static_cast<std::int64_t>(p.batch_size);
    }
    if (L.env_step % p.log_interval == 0 || L.env_step == budget) emit();

    if (res.done) {
      start_episode();
      const bool stop_now = opt.stop_after >= 0 && L.env_step >= opt.stop_after && L.env_step < budget;
      if (!opt.state_dir.empty() &&
          (stop_now || (opt.save_every_episodes > 0 && L.episode_index % opt.save_every_episodes == 0))) {
        L.csv_bytes = opt.csv_path.empty() ? 0 : static_cast<std::uint64_t>(fs::file_size(opt.csv_path));
        detail::save_loop_state(opt.state_dir, L, agent);
      }
      if (stop_now) {
        stopped = true;
        break;
      }
    }
  }

  sum.env_steps = L.env_step;
  sum.episodes = L.tally.episodes;
  sum.train_steps = agent ? agent->train_step : 0;
  sum.unique_states = static_cast<std::int64_t>(L.unique.size());
  sum.achievement_unlocks = L.tally.unlocks;
  sum.success_rates = L.tally.rates();
  sum.score = L.tally.episodes ? crafter_score(sum.success_rates) : 0.0;
  sum.mean_return = L.tally.episodes ? L.return_sum / static_cast<double>(L.tally.episodes) : 0.0;
  sum.reanalysed_samples = L.reanalysed;
  sum.sampled = L.sampled;
  sum.completed = !stopped;
  if (!stopped && !opt.state_dir.empty()) {
    L.csv_bytes = opt.csv_path.empty() ? 0 : static_cast<std::uint64_t>(fs::file_size(opt.csv_path));
    detail::save_loop_state(opt.state_dir, L, agent);
  }
  return sum;
}

// Dispatches on the configured environment.
inline PhaseSummary run_phase(Phase phase, Agent* agent, const ExperimentConfig& cfg, const RunOptions& opt) {
  if (cfg.env == EnvKind::MicroCraft) {
    MicroCraft env(cfg.craft);
    return run_phase(phase, agent, env, cfg, opt);
  }
  PointDesk env(cfg.desk);
  return run_phase(phase, agent, env, cfg, opt);
}

// Greedy rollouts of a fixed agent: MCTS at temperature 0 without root noise, or epsilon = 0.
// Episode seeds come from `seed` only, so repeated calls give identical results.
struct EvalReport {
  std::int64_t episodes = 0;
  double mean_return = 0.0;
  std::vector<double> success_rates;
  double score = 0.0;
  std::int64_t unique_states = 0;

  nlohmann::json to_json() const {
    return {{"episodes", episodes}, {"mean_return", mean_return}, {"success_rates", success_rates},
            {"score", score},       {"unique_states", unique_states}};
  }
};

template <Environment Env>
EvalReport evaluate_agent(const Agent& agent, Env& env, const ExperimentConfig& cfg, EnvMode mode,
                          std::int64_t episodes, std::uint64_t seed) {
  if (episodes <= 0) throw std::invalid_argument("evaluate_agent: episodes must be > 0");
  env.set_mode(mode);
  const PhaseConfig& p = mode.pretraining ? cfg.pretrain : cfg.finetune;
  SearchConfig sc = acting_search(p, cfg.discount, 0.0);
  sc.root_noise_fraction = 0.0;
  std::mt19937_64 rng(seed_for(seed, "eval"));
  AchievementTally tally(achievement_names(cfg.env).size());
  std::unordered_set<std::uint64_t> unique;
  double total = 0.0;
  for (std::int64_t e = 0; e < episodes; ++e) {
    std::vector<std::vector<double>> frames{env.reset(splitmix64(seed_for(seed, "eval/episodes") ^ static_cast<std::uint64_t>(e)))};
    for (;;) {
      const auto stack = history_stack(frames, frames.size() - 1, agent.net.history_len);
      const Action a = agent.kind == AgentKind::ModelBased
                           ? act_model_based(agent, stack, sc, rng).action
                           : act_model_free(agent, stack, 0.0, cfg.discount, p.num_action_samples, rng).action;
      StepResult r = env.step(a);
      total += r.reward;
      unique.insert(r.state_hash);
      frames.push_back(std::move(r.observation));
      if (r.done) {
        tally.add(r.achievements);
        break;
      }
    }
  }
  EvalReport rep;
  rep.episodes = episodes;
  rep.mean_return = total / static_cast<double>(episodes);
  rep.success_rates = tally.rates();
  rep.score = crafter_score(rep.success_rates);
  rep.unique_states = static_cast<std::int64_t>(unique.size());
  return rep;
}

inline EvalReport evaluate_agent(const Agent& agent, const ExperimentConfig& cfg, EnvMode mode, std::int64_t episodes,
                                 std::uint64_t seed) {
  if (cfg.env == EnvKind::MicroCraft) {
    MicroCraft env(cfg.craft);
    return evaluate_agent(agent, env, cfg, mode, episodes, seed);
  }
  PointDesk env(cfg.desk);
  return evaluate_agent(agent, env, cfg, mode, episodes, seed);
}

// ---------------------------------------------------------------------------------------------
// Phase runners with on-disk outputs

namespace detail {

inline bool summary_completed(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) return false;
  std::ifstream in(path);
  try {
    return nlohmann::json::parse(in).value("completed", false);
  } catch (const nlohmann::json::exception&) {
    return false;
  }
}

inline void write_summary(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path.string() + ".tmp");
  out << j.dump(2) << '\n';
  out.close();
  std::filesystem::rename(path.string() + ".tmp", path);
}

}  // namespace detail

struct RunRequest {
  std::uint64_t seed = 0;
  std::string out_dir;
  std::int64_t budget = -1;  // -1: phase budget from the config
  bool record_wall_time = false;
  std::int64_t stop_after = -1;
};

// Reward-free pretraining of one agent kind (or the random baseline when `kind` is empty).
// Writes metrics.csv, checkpoint.bin (agents only) and summary.json to out_dir. An interrupted run
// in the same directory is resumed; a completed one is started over.
inline PhaseSummary run_pretraining(const ExperimentConfig& cfg, std::optional<AgentKind> kind, const RunRequest& req) {
  namespace fs = std::filesystem;
  const fs::path dir(req.out_dir);
  fs::create_directories(dir);
  const fs::path state = dir / "state";
  if (detail::summary_completed(dir / "summary.json")) {
    fs::remove_all(state);
    fs::remove(dir / "summary.json");
  }
  RunOptions opt;
  opt.arm = kind ? std::string(agent_kind_name(*kind)) : "random";
  opt.seed = req.seed;
  opt.csv_path = (dir / "metrics.csv").string();
  opt.state_dir = state.string();
  opt.stop_after = req.stop_after;
  opt.record_wall_time = req.record_wall_time;
  opt.budget_override = req.budget;
  PhaseSummary s;
  if (kind) {
    Agent agent = make_agent(*kind, cfg.network(), seed_for(req.seed, "init/" + opt.arm), cfg.rnd_decay);
    s = run_phase(Phase::Pretrain, &agent, cfg, opt);
    if (s.completed) save_checkpoint(agent, (dir / "checkpoint.bin").string());
  } else {
    s = run_phase(Phase::Pretrain, nullptr, cfg, opt);
  }
  nlohmann::json j = s.to_json();
  j["arm"] = opt.arm;
  j["seed"] = req.seed;
  if (s.completed) detail::write_summary(dir / "summary.json", j);
  return s;
}

class GridError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArmResult {
  std::string arm;
  std::uint64_t seed = 0;
  PhaseSummary summary;
  std::string csv_path;
};

// Fine-tunes one arm. `source` is the pretraining checkpoint (ignored for Scratch).
inline ArmResult run_finetuning(const ExperimentConfig& cfg, const ArmSpec& arm, const std::string& source,
                                const RunRequest& req) {
  namespace fs = std::filesystem;
  const fs::path dir(req.out_dir);
  TransferSpec spec;
  spec.fresh_init_seed = arm_seed(req.seed, arm.name);
  spec.carry_optimizer_state = cfg.carry_optimizer_state;
  spec.spr_travels_with_oe = cfg.spr_travels_with_oe;
  if (!arm.scratch) {
    if (source.empty() || !fs::exists(source))
      throw GridError("arm " + arm.name + ": missing source checkpoint '" + source + "'");
    spec.source = source;
    spec.components = arm.components;
  }
  Agent agent = build_finetune_agent(spec, arm.target_kind, cfg.network(), cfg.rnd_decay);
  fs::create_directories(dir);
  if (detail::summary_completed(dir / "summary.json")) {
    fs::remove_all(dir / "state");
    fs::remove(dir / "summary.json");
  }
  RunOptions opt;
  opt.arm = arm.name;
  opt.seed = req.seed;
  opt.csv_path = (dir / "metrics.csv").string();
  opt.state_dir = (dir / "state").string();
  opt.scratch = arm.scratch;
  opt.budget_override = req.budget;
  opt.record_wall_time = req.record_wall_time;
  opt.stop_after = req.stop_after;
  ArmResult res{arm.name, req.seed, run_phase(Phase::Finetune, &agent, cfg, opt), opt.csv_path};
  if (res.summary.completed) {
    save_checkpoint(agent, (dir / "checkpoint.bin").string());
    nlohmann::json j = res.summary.to_json();
    j["arm"] = arm.name;
    j["seed"] = req.seed;
    j["source"] = spec.source;
    detail::write_summary(dir / "summary.json", j);
  }
  return res;
}

// ---------------------------------------------------------------------------------------------
// Experiment grid. Layout under a root directory:
//   <root>/pretrain/<MB|MF>/seed<N>/checkpoint.bin
//   <root>/finetune/<arm>/seed<N>/metrics.csv

inline std::string arm_dir_name(const std::string& arm) {
  std::string s;
  for (char c : arm) s += (c == '>' ? '_' : c);
  return s;
}

inline std::filesystem::path pretrain_dir(const std::string& root, AgentKind kind, std::uint64_t seed) {
  return std::filesystem::path(root) / "pretrain" / std::string(agent_kind_name(kind)) / ("seed" + std::to_string(seed));
}

inline std::string source_checkpoint_path(const std::string& root, AgentKind kind, std::uint64_t seed) {
  return (pretrain_dir(root, kind, seed) / "checkpoint.bin").string();
}

inline std::filesystem::path finetune_dir(const std::string& root, const std::string& arm, std::uint64_t seed) {
  return std::filesystem::path(root) / "finetune" / arm_dir_name(arm) / ("seed" + std::to_string(seed));
}

struct GridRow {
  std::string arm;
  std::uint64_t seed = 0;
  double final_score = 0.0;
  double final_return = 0.0;
  std::string csv_path;
};

// Every (arm, seed) cell, each in its own directory with no shared state. Completed cells are not
// rerun. All sources are checked before any training starts.
inline std::vector<GridRow> run_experiment_grid(const ExperimentConfig& cfg, const std::vector<std::string>& arms,
                                                const std::vector<std::uint64_t>& seeds, const std::string& root,
                                                std::int64_t budget = -1, bool record_wall_time = false) {
  for (const auto& name : arms) {
    const ArmSpec& a = find_arm(name);
    if (a.scratch) continue;
    for (std::uint64_t s : seeds) {
      const std::string src = source_checkpoint_path(root, a.source_kind, s);
      if (!std::filesystem::exists(src))
        throw GridError("arm " + a.name + " (seed " + std::to_string(s) + "): missing source checkpoint '" + src + "'");
    }
  }
  std::vector<GridRow> rows;
  for (const auto& name : arms) {
    const ArmSpec& a = find_arm(name);
    for (std::uint64_t s : seeds) {
      const auto dir = finetune_dir(root, a.name, s);
      GridRow row{a.name, s, 0.0, 0.0, (dir / "metrics.csv").string()};
      if (!detail::summary_completed(dir / "summary.json")) {
        RunRequest req{s, dir.string(), budget, record_wall_time, -1};
        run_finetuning(cfg, a, a.scratch ? "" : source_checkpoint_path(root, a.source_kind, s), req);
      }
      const auto metrics = read_metrics_csv(row.csv_path);
      if (!metrics.empty()) {
        row.final_score = metrics.back().score;
        row.final_return = metrics.back().episode_return;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace mbx
