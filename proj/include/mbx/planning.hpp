#pragma once

// pUCT Monte-Carlo tree search over a learned (or synthetic) model.
//
// A model exposes:
//   using State = ...;
//   const ActionSpec& action_spec() const;
//   Evaluation<State> initial_inference(const State& root);            // prior policy + value
//   Evaluation<State> recurrent_inference(const State& s, const Action&); // next state, reward, policy, value
// Discrete nodes expand every action with softmax priors. Continuous nodes expand
// `num_action_samples` draws from the node's Gaussian policy with uniform priors.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "mbx/networks.hpp"

namespace mbx {

struct PolicyEval {
  std::vector<double> logits;   // discrete
  std::vector<double> mean;     // continuous
  std::vector<double> log_std;  // continuous, already clamped
};

template <class State>
struct Evaluation {
  State state{};
  PolicyEval policy;
  double value = 0.0;
  double reward = 0.0;
};

template <class M>
concept SearchModel = requires(M m, const typename M::State& s, const Action& a) {
  { m.action_spec() } -> std::convertible_to<const ActionSpec&>;
  { m.initial_inference(s) } -> std::same_as<Evaluation<typename M::State>>;
  { m.recurrent_inference(s, a) } -> std::same_as<Evaluation<typename M::State>>;
};

struct SearchConfig {
  std::size_t num_simulations = 50;
  double c_puct = 1.25;
  double discount = 0.997;
  double root_dirichlet_alpha = 0.3;
  double root_noise_fraction = 0.25;
  std::size_t num_action_samples = 20;
  double temperature = 1.0;

  void validate() const {
    if (num_simulations < 1) throw std::invalid_argument("SearchConfig: num_simulations must be >= 1");
    if (root_noise_fraction < 0.0 || root_noise_fraction > 1.0)
      throw std::invalid_argument("SearchConfig: root_noise_fraction must lie in [0, 1]");
    if (num_action_samples < 1) throw std::invalid_argument("SearchConfig: num_action_samples must be >= 1");
  }
};

template <class State>
struct SearchNode {
  double prior = 0.0;
  int visit_count = 0;
  double value_sum = 0.0;
  double reward = 0.0;
  std::optional<State> latent;
  std::vector<std::size_t> children;  // arena indices, aligned with action_set
  std::vector<Action> action_set;

  bool expanded() const { return !children.empty(); }
  double value() const { return value_sum / std::max(visit_count, 1); }
};

struct SearchResult {
  std::vector<Action> root_actions;
  std::vector<int> visit_counts;
  std::vector<double> visit_distribution;
  std::vector<double> q_values;  // reward + discount * value for visited children, 0 otherwise
  std::vector<double> priors;    // root priors after noise
  double root_value = 0.0;
  Action chosen_action;
};

// Tracks the range of backed-up values for Q normalization.
class MinMaxStats {
 public:
  void update(double v) {
    min_ = std::min(min_, v);
    max_ = std::max(max_, v);
  }
  bool has_range() const { return max_ > min_; }
  double normalize(double v) const {
    if (!has_range()) return v;
    return std::clamp((v - min_) / (max_ - min_), 0.0, 1.0);
  }

 private:
  double min_ = std::numeric_limits<double>::infinity();
  double max_ = -std::numeric_limits<double>::infinity();
};

inline std::vector<double> softmax_vector(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double s = 0.0;
  for (auto& x : p) {
    x = std::exp(x - mx);
    s += x;
  }
  for (auto& x : p) x /= s;
  return p;
}

// Draws one squashed action from a diagonal Gaussian policy.
template <class Rng>
Action sample_gaussian_action(const ActionSpec& spec, const PolicyEval& policy, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Action a;
  a.values.resize(spec.size);
  a.pre_squash.resize(spec.size);
  for (std::size_t d = 0; d < spec.size; ++d) {
    const double u = policy.mean[d] + std::exp(policy.log_std[d]) * normal(rng);
    a.pre_squash[d] = u;
    a.values[d] = spec.low + 0.5 * (std::tanh(u) + 1.0) * (spec.high - spec.low);
  }
  return a;
}

// p' = (1 - fraction) p + fraction * Dirichlet(alpha).
template <class Rng>
std::vector<double> add_root_noise(std::span<const double> priors, double alpha, double fraction, Rng& rng) {
  std::vector<double> out(priors.begin(), priors.end());
  if (fraction <= 0.0 || out.empty()) return out;
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> noise(out.size());
  double total = 0.0;
  for (auto& n : noise) {
    n = gamma(rng);
    total += n;
  }
  if (!(total > 0.0)) {
    std::fill(noise.begin(), noise.end(), 1.0);
    total = static_cast<double>(noise.size());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (1.0 - fraction) * out[i] + fraction * noise[i] / total;
    s += out[i];
  }
  for (auto& p : out) p /= s;
  return out;
}

// Temperature 0 picks the most visited action (lowest index on ties); otherwise samples
// proportionally to visits^(1/temperature).
template <class Rng>
std::size_t select_action_index(std::span<const int> visits, double temperature, Rng& rng) {
  if (visits.empty()) throw std::invalid_argument("select_action: no root actions");
  if (temperature < 0.0) throw std::invalid_argument("select_action: temperature must be >= 0");
  if (temperature == 0.0) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < visits.size(); ++i)
      if (visits[i] > visits[best]) best = i;
    return best;
  }
  const int vmax = *std::max_element(visits.begin(), visits.end());
  std::vector<double> w(visits.size());
  for (std::size_t i = 0; i < visits.size(); ++i)
    w[i] = vmax > 0 ? std::pow(static_cast<double>(visits[i]) / vmax, 1.0 / temperature) : 1.0;
  std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
  return dist(rng);
}

template <class Rng>
Action select_action(const SearchResult& result, double temperature, Rng& rng) {
  return result.root_actions.at(select_action_index(result.visit_counts, temperature, rng));
}

template <SearchModel Model, class Rng>
class Mcts {
 public:
  using State = typename Model::State;
  using Node = SearchNode<State>;

  Mcts(Model& model, const SearchConfig& cfg, Rng& rng) : model_(model), cfg_(cfg), rng_(rng) { cfg_.validate(); }

  SearchResult run(const State& root_state) {
    nodes_.clear();
    stats_ = MinMaxStats{};
    nodes_.push_back(Node{});
    Evaluation<State> root_eval = model_.initial_inference(root_state);
    root_eval.state = root_state;
    expand(0, root_eval);
    if (cfg_.root_noise_fraction > 0.0) {
      std::vector<double> priors;
      for (std::size_t c : nodes_[0].children) priors.push_back(nodes_[c].prior);
      priors = add_root_noise(priors, cfg_.root_dirichlet_alpha, cfg_.root_noise_fraction, rng_);
      for (std::size_t i = 0; i < priors.size(); ++i) nodes_[nodes_[0].children[i]].prior = priors[i];
    }

    std::vector<std::size_t> path;
    for (std::size_t sim = 0; sim < cfg_.num_simulations; ++sim) {
      path.assign(1, 0);
      std::size_t node = 0;
      std::size_t slot = 0;
      while (nodes_[node].expanded()) {
        slot = select_child(node);
        node = nodes_[node].children[slot];
        path.push_back(node);
      }
      const std::size_t parent = path[path.size() - 2];
      const Action& action = nodes_[parent].action_set[slot];
      Evaluation<State> eval = model_.recurrent_inference(*nodes_[parent].latent, action);
      nodes_[node].reward = eval.reward;
      expand(node, eval);
      backup(path, eval.value);
    }
    return collect();
  }

  // Read access for tests.
  const std::vector<Node>& nodes() const { return nodes_; }

 private:
  void expand(std::size_t idx, Evaluation<State>& eval) {
    const ActionSpec& spec = model_.action_spec();
    std::vector<Action> actions;
    std::vector<double> priors;
    if (spec.is_discrete()) {
      if (eval.policy.logits.size() != spec.size) throw ShapeError("mcts: policy logits do not match action count");
      priors = softmax_vector(eval.policy.logits);
      for (std::size_t a = 0; a < spec.size; ++a) actions.push_back(Action::discrete(a));
    } else {
      for (std::size_t k = 0; k < cfg_.num_action_samples; ++k)
        actions.push_back(sample_gaussian_action(spec, eval.policy, rng_));
      priors.assign(actions.size(), 1.0 / static_cast<double>(actions.size()));
    }
    nodes_[idx].latent = std::move(eval.state);
    nodes_[idx].action_set = std::move(actions);
    for (double p : priors) {
      Node child;
      child.prior = p;
      nodes_.push_back(std::move(child));
      nodes_[idx].children.push_back(nodes_.size() - 1);
    }
  }

  double child_q(const Node& child) const {
    if (child.visit_count == 0) return 0.0;
    return stats_.normalize(child.reward + cfg_.discount * child.value());
  }

  std::size_t select_child(std::size_t idx) const {
    const Node& parent = nodes_[idx];
    const double sqrt_n = std::sqrt(static_cast<double>(parent.visit_count));
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < parent.children.size(); ++i) {
      const Node& c = nodes_[parent.children[i]];
      const double score = child_q(c) + cfg_.c_puct * c.prior * sqrt_n / (1.0 + c.visit_count);
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    return best;
  }

  void backup(const std::vector<std::size_t>& path, double value) {
    double g = value;
    for (std::size_t i = path.size(); i-- > 0;) {
      Node& n = nodes_[path[i]];
      n.value_sum += g;
      n.visit_count += 1;
      stats_.update(n.reward + cfg_.discount * n.value());
      g = n.reward + cfg_.discount * g;
    }
  }

  SearchResult collect() {
    const Node& root = nodes_[0];
    SearchResult r;
    r.root_actions = root.action_set;
    int total = 0;
    for (std::size_t c : root.children) {
      const Node& ch = nodes_[c];
      r.visit_counts.push_back(ch.visit_count);
      r.priors.push_back(ch.prior);
      r.q_values.push_back(ch.visit_count ? ch.reward + cfg_.discount * ch.value() : 0.0);
      total += ch.visit_count;
    }
    for (int v : r.visit_counts) r.visit_distribution.push_back(static_cast<double>(v) / total);
    r.root_value = root.value();
    r.chosen_action = select_action(r, cfg_.temperature, rng_);
    return r;
  }

  Model& model_;
  SearchConfig cfg_;
  Rng& rng_;
  std::vector<Node> nodes_;
  MinMaxStats stats_;
};

template <SearchModel Model, class Rng>
SearchResult run_mcts(Model& model, const typename Model::State& root, const SearchConfig& cfg, Rng& rng) {
  Mcts<Model, Rng> search(model, cfg, rng);
  return search.run(root);
}

// Adapter exposing an agent's networks as a search model. Root evaluation uses the prior heads;
// unrolled nodes use the dynamics model and dynamics heads.
class NetworkModel {
 public:
  using State = Tensor;  // latent [1, latent_dim]

  NetworkModel(const ParameterStore& online, const NetworkConfig& cfg) : params_(online), cfg_(cfg) {}

  const ActionSpec& action_spec() const { return cfg_.action_spec; }

  Tensor encode(std::span<const double> stack) const {
    Tape t(false);
    Var x = t.constant(Tensor(Shape{1, stack.size()}, std::vector<double>(stack.begin(), stack.end())));
    return mbx::encode(t, params_, cfg_, x).value();
  }

  Evaluation<State> initial_inference(const State& latent) const {
    Tape t(false);
    Var s = t.constant(latent);
    PriorOutputs out = prior_heads(t, params_, s);
    Evaluation<State> e;
    e.policy = decode_policy(out.policy.value());
    e.value = cfg_.value_support.expected_value(out.value.value().data());
    return e;
  }

  Evaluation<State> recurrent_inference(const State& latent, const Action& a) const {
    Tape t(false);
    Var s = t.constant(latent);
    EncodedAction enc = encode_action(cfg_.action_spec, a);
    const std::size_t width = enc.features.size();
    Var af = t.constant(Tensor(Shape{1, width}, std::move(enc.features)));
    DynamicsOutputs dyn = dynamics_step(t, params_, cfg_, s, af);
    DynHeadOutputs heads = dynamics_heads(t, params_, dyn.next_latent);
    Evaluation<State> e;
    e.state = dyn.next_latent.value();
    e.reward = cfg_.reward_support.expected_value(dyn.reward.value().data());
    e.policy = decode_policy(heads.policy.value());
    e.value = cfg_.value_support.expected_value(heads.value.value().data());
    return e;
  }

  PolicyEval decode_policy(const Tensor& head) const {
    PolicyEval p;
    auto v = head.data();
    if (cfg_.action_spec.is_discrete()) {
      p.logits.assign(v.begin(), v.end());
    } else {
      const std::size_t d = cfg_.action_spec.size;
      p.mean.assign(v.begin(), v.begin() + d);
      for (std::size_t i = 0; i < d; ++i) p.log_std.push_back(std::clamp(v[d + i], kLogStdMin, kLogStdMax));
    }
    return p;
  }

 private:
  const ParameterStore& params_;
  const NetworkConfig& cfg_;
};

}  // namespace mbx
