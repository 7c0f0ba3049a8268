#pragma once

// Agent state (online weights, target weights, RND statistics, counters), acting rules and the
// single training step shared by both agent kinds.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

#include "mbx/exploration.hpp"
#include "mbx/learning.hpp"
#include "mbx/networks.hpp"
#include "mbx/parameters.hpp"
#include "mbx/planning.hpp"
#include "mbx/replay.hpp"

namespace mbx {

struct Agent {
  AgentKind kind = AgentKind::ModelBased;
  NetworkConfig net;
  std::uint64_t init_seed = 0;
  ParameterStore online;  // trained weights (theta)
  ParameterStore frozen;  // target copies (xi) and the RND target; never touched by Adam
  RndState rnd;
  std::int64_t train_step = 0;
  std::int64_t adam_step = 0;
};

inline Agent make_agent(AgentKind kind, const NetworkConfig& net, std::uint64_t seed, double rnd_decay = 0.99) {
  net.validate();
  Agent a;
  a.kind = kind;
  a.net = net;
  a.init_seed = seed;
  a.online = make_online_params(net, kind, seed);
  a.frozen = make_frozen_params(a.online, net, seed);
  a.rnd.decay = rnd_decay;
  return a;
}

// ---------------------------------------------------------------------------------------------
// Acting

struct Decision {
  Action action;
  std::vector<Action> search_actions;
  std::vector<double> search_policy;
  double root_value = 0.0;
};

template <class Rng>
Decision act_model_based(const Agent& agent, const std::vector<double>& stack, const SearchConfig& sc, Rng& rng) {
  NetworkModel model(agent.online, agent.net);
  SearchResult r = run_mcts(model, model.encode(stack), sc, rng);
  return {r.chosen_action, std::move(r.root_actions), std::move(r.visit_distribution), r.root_value};
}

template <class Rng>
Action uniform_action(const ActionSpec& spec, Rng& rng) {
  if (spec.is_discrete()) {
    std::uniform_int_distribution<std::size_t> pick(0, spec.size - 1);
    return Action::discrete(pick(rng));
  }
  std::uniform_real_distribution<double> u(spec.low, spec.high);
  Action a;
  for (std::size_t d = 0; d < spec.size; ++d) {
    const double v = u(rng);
    const double unit = std::clamp(2.0 * (v - spec.low) / (spec.high - spec.low) - 1.0, -1.0 + 1e-9, 1.0 - 1e-9);
    a.values.push_back(v);
    a.pre_squash.push_back(std::atanh(unit));
  }
  return a;
}

// Epsilon-greedy over Q(s, a) = r_hat + gamma V(s'): exhaustive for discrete actions, over policy
// draws for continuous ones. The stored root value is max_a Q at acting time.
template <class Rng>
Decision act_model_free(const Agent& agent, const std::vector<double>& stack, double epsilon, double discount,
                        std::size_t num_samples, Rng& rng) {
  Tensor latent = encode_stack(agent.online, agent.net, stack);
  QEvaluation q = q_values(agent.online, agent.net, latent, discount, num_samples, rng);
  const std::size_t best = static_cast<std::size_t>(std::max_element(q.q.begin(), q.q.end()) - q.q.begin());
  Decision d;
  d.root_value = q.q[best];
  std::bernoulli_distribution explore(std::clamp(epsilon, 0.0, 1.0));
  d.action = explore(rng) ? uniform_action(agent.net.action_spec, rng) : q.actions[best];
  return d;
}

// Linear epsilon decay over the first `fraction` of the phase.
inline double epsilon_at(double start, double end, double fraction, std::int64_t step, std::int64_t total) {
  if (total <= 0 || fraction <= 0.0) return end;
  const double progress = static_cast<double>(step) / (fraction * static_cast<double>(total));
  return progress >= 1.0 ? end : start + (end - start) * progress;
}

inline double temperature_at(double start, double end, std::int64_t step, std::int64_t total) {
  if (total <= 0) return end;
  const double f = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return start + (end - start) * f;
}

// ---------------------------------------------------------------------------------------------
// Training

struct TrainSettings {
  std::size_t batch_size = 32;
  double reanalyse_fraction = 0.8;
  TargetConfig targets;
  LossWeights weights;
  AdamConfig adam;
  std::int64_t target_sync_interval = 100;
};

struct TrainStepReport {
  LossBundle loss;
  std::size_t reanalysed = 0;
  bool synced = false;
};

template <class Rng>
TrainStepReport train_step(Agent& agent, const SequenceBuffer& replay, const TrainSettings& s, double lr, Rng& rng) {
  std::vector<SampledSequence> draws = replay.sample(s.batch_size, s.reanalyse_fraction, rng);
  TrainStepReport rep;
  TargetConfig targets = s.targets;
  targets.kind = agent.kind;  // target construction always follows the agent
  std::vector<SampleTargets> samples;
  samples.reserve(draws.size());
  for (const auto& d : draws) {
    if (d.reanalyse) {
      samples.push_back(reanalyse_targets(d.slice, targets, agent.online, agent.frozen, agent.net, rng));
      ++rep.reanalysed;
    } else {
      samples.push_back(fresh_targets(d.slice, targets));
    }
  }
  TrainBatch batch = make_train_batch(samples, agent.net);
  Tape tape;
  rep.loss = agent.kind == AgentKind::ModelBased
                 ? muzero_loss(tape, batch, agent.online, agent.frozen, agent.net, s.weights)
                 : qlearning_loss(tape, batch, agent.online, agent.frozen, agent.net, s.weights);
  tape.backward(rep.loss.objective);
  agent.adam_step += 1;
  adam_step(agent.online, lr, s.adam, agent.adam_step);
  agent.train_step += 1;
  rep.synced = target_network_sync(agent.online, agent.frozen, agent.train_step, s.target_sync_interval);
  return rep;
}

}  // namespace mbx
