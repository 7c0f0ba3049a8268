#include <gtest/gtest.h>

#include <random>
#include <set>

#include "mbx/agent.hpp"
#include "mbx/learning.hpp"
#include "mbx/networks.hpp"
#include "support.hpp"

namespace {

using namespace mbx;
using mbx::test::tiny_config;

Var stack_input(Tape& t, const NetworkConfig& c, std::size_t rows, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::vector<double>> r;
  for (std::size_t i = 0; i < rows; ++i) r.push_back(test::random_frame(c.stack_width(), rng));
  return t.constant(stack_rows(r, c.stack_width()));
}

TEST(Networks, ComponentsPartitionTheNameSpace) {
  for (AgentKind kind : {AgentKind::ModelBased, AgentKind::ModelFree}) {
    const Agent a = make_agent(kind, tiny_config(), 3);
    std::set<Component> seen;
    for (const auto* store : {&a.online, &a.frozen})
      for (const auto& [name, _] : *store) EXPECT_NO_THROW(seen.insert(component_of(name))) << name;
    std::set<Component> expected = {Component::OE,       Component::PP,         Component::PRV,
                                    Component::SPR_ONLINE, Component::SPR_TARGET, Component::RND_PRED,
                                    Component::RND_TARGET};
    if (kind == AgentKind::ModelBased) {
      expected.insert(Component::M);
      expected.insert(Component::DH);
    } else {
      expected.insert(Component::MF_STEP);
    }
    EXPECT_EQ(seen, expected);
  }
  EXPECT_THROW(component_of("mystery/w"), std::invalid_argument);
}

TEST(Networks, HeadGroupsAreDisjoint) {
  const Agent a = make_agent(AgentKind::ModelBased, tiny_config(), 1);
  for (const auto& [name, _] : a.online) {
    const bool pp = starts_with(name, "prior/policy/"), prv = starts_with(name, "prior/rv/");
    const bool dh = starts_with(name, "dyn_heads/");
    EXPECT_LE(int(pp) + int(prv) + int(dh), 1) << name;
    if (pp) EXPECT_EQ(component_of(name), Component::PP);
    if (prv) EXPECT_EQ(component_of(name), Component::PRV);
    if (dh) EXPECT_EQ(component_of(name), Component::DH);
  }
}

TEST(Networks, EncoderIsDeterministicAndNonDegenerate) {
  const NetworkConfig c = tiny_config();
  const Agent a = make_agent(AgentKind::ModelBased, c, 4);
  Tape t(false);
  Var x = stack_input(t, c, 2, 8);
  const Tensor e1 = encode(t, a.online, c, x).value();
  const Tensor e2 = encode(t, a.online, c, x).value();
  EXPECT_TRUE(bit_equal(e1, e2));
  double diff = 0.0;
  for (std::size_t j = 0; j < c.latent_dim; ++j) diff += std::abs(e1.at(0, j) - e1.at(1, j));
  EXPECT_GT(diff, 1e-6);
}

TEST(Networks, HistoryStackPadsWithFirstFrame) {
  std::vector<std::vector<double>> frames = {{1.0, 2.0}, {3.0, 4.0}};
  EXPECT_EQ(history_stack(frames, 0, 3), (std::vector<double>{1, 2, 1, 2, 1, 2}));
  EXPECT_EQ(history_stack(frames, 1, 3), (std::vector<double>{1, 2, 1, 2, 3, 4}));
  EXPECT_EQ(copies_stack(frames[1], 2), (std::vector<double>{3, 4, 3, 4}));
}

TEST(Networks, FreshHeadsAreUniform) {
  const NetworkConfig c = tiny_config();
  const Agent a = make_agent(AgentKind::ModelBased, c, 2);
  Tape t(false);
  Var s = encode(t, a.online, c, stack_input(t, c, 1, 3));
  PriorOutputs p = prior_heads(t, a.online, s);
  DynHeadOutputs d = dynamics_heads(t, a.online, s);
  for (const Var* v : {&p.policy, &p.value, &p.reward, &d.policy, &d.value}) {
    auto row = v->value().data();
    for (double x : row) EXPECT_EQ(x, row[0]);
  }
}

TEST(Networks, ResettingPolicyHeadLeavesValueHeadOutputs) {
  const NetworkConfig c = tiny_config();
  Agent a = test::random_agent(AgentKind::ModelBased, c, 6);
  Tape t(false);
  Var s = t.constant(encode(t, a.online, c, stack_input(t, c, 2, 1)).value());
  const Tensor v_before = prior_heads(t, a.online, s).value.value();
  const Tensor p_before = prior_heads(t, a.online, s).policy.value();
  for (auto& [name, p] : a.online)
    if (component_of(name) == Component::PP) p.value.fill(0.0);
  EXPECT_TRUE(bit_equal(prior_heads(t, a.online, s).value.value(), v_before));
  EXPECT_FALSE(bit_equal(prior_heads(t, a.online, s).policy.value(), p_before));
}

TEST(Networks, DynamicsIsDeterministicAndActionSensitive) {
  const NetworkConfig c = tiny_config();
  const Agent a = test::random_agent(AgentKind::ModelBased, c, 9);
  Tape t(false);
  Var s = encode(t, a.online, c, stack_input(t, c, 1, 2));
  auto step = [&](std::size_t act) {
    auto f = encode_action(c.action_spec, Action::discrete(act)).features;
    return dynamics_step(t, a.online, c, s, t.constant(Tensor(Shape{1, f.size()}, f)));
  };
  EXPECT_TRUE(bit_equal(step(1).next_latent.value(), step(1).next_latent.value()));
  EXPECT_TRUE(bit_equal(step(1).reward.value(), step(1).reward.value()));
  EXPECT_FALSE(bit_equal(step(0).next_latent.value(), step(2).next_latent.value()));
}

TEST(Networks, SprTargetCarriesNoGradient) {
  const NetworkConfig c = tiny_config();
  Agent a = test::random_agent(AgentKind::ModelBased, c, 2);
  TrainBatch b = test::random_batch(c, 6, 3, 5);
  Tape t;
  LossBundle l = muzero_loss(t, b, a.online, a.frozen, c);
  t.backward(l.terms[3]);
  for (const auto& [name, p] : a.frozen)
    for (double g : p.grad.data()) ASSERT_EQ(g, 0.0) << name;
  double enc = 0.0, dyn = 0.0;
  for (const auto& [name, p] : a.online) {
    for (double g : p.grad.data()) {
      if (component_of(name) == Component::OE) enc += std::abs(g);
      if (component_of(name) == Component::M) dyn += std::abs(g);
    }
  }
  EXPECT_GT(enc, 0.0);
  EXPECT_GT(dyn, 0.0);
}

// ---------------------------------------------------------------------------------------------
// Two-hot

TEST(TwoHot, AtomsMidpointsAndInterpolation) {
  const Support s{-1.0, 1.0, 3};
  EXPECT_EQ(s.two_hot(0.0), (std::vector<double>{0.0, 1.0, 0.0}));
  EXPECT_EQ(s.two_hot(1.0), (std::vector<double>{0.0, 0.0, 1.0}));
  const auto mid = s.two_hot(-0.5);
  EXPECT_DOUBLE_EQ(mid[0], 0.5);
  EXPECT_DOUBLE_EQ(mid[1], 0.5);
  const auto q = s.two_hot(0.25);
  EXPECT_DOUBLE_EQ(q[1], 0.75);
  EXPECT_DOUBLE_EQ(q[2], 0.25);
  EXPECT_DOUBLE_EQ(s.expectation(q), 0.25);
  // Probabilities as logits: log of the two-hot mass, zero-mass atoms pushed far down.
  std::vector<double> logits = {-1e9, std::log(0.75), std::log(0.25)};
  EXPECT_NEAR(s.expected_value(logits), 0.25, 1e-15);
}

TEST(TwoHot, ClampsOutsideTheSupport) {
  const Support s{-2.0, 2.0, 5};
  EXPECT_EQ(s.two_hot(7.0), (std::vector<double>{0, 0, 0, 0, 1}));
  EXPECT_EQ(s.two_hot(-7.0), (std::vector<double>{1, 0, 0, 0, 0}));
}

TEST(TwoHot, RoundTripOverRandomScalars) {
  std::mt19937_64 rng(1);
  for (const Support s : {Support{-10.0, 10.0, 21}, Support{-3.0, 3.0, 7}, Support{-2.0, 5.0, 30}}) {
    std::uniform_real_distribution<double> u(s.v_min, s.v_max);
    for (int i = 0; i < 1000; ++i) {
      const double x = u(rng);
      const auto p = s.two_hot(x);
      double total = 0.0;
      for (double v : p) total += v;
      EXPECT_NEAR(total, 1.0, 1e-12);
      ASSERT_LT(std::abs(s.expectation(p) - x), 1e-9);
    }
  }
}

TEST(TwoHot, SupportValidation) {
  EXPECT_THROW((Support{1.0, 1.0, 5}.validate()), std::invalid_argument);
  EXPECT_THROW((Support{-1.0, 1.0, 1}.validate()), std::invalid_argument);
  EXPECT_THROW((Support{-1.0, 1.0, 4}.validate()), std::invalid_argument);
}

// ---------------------------------------------------------------------------------------------
// Gradient checks: every loss term against every online parameter, both agent kinds and both action
// spaces, five minibatches each.

struct GradCase {
  AgentKind kind;
  bool continuous;
};

class LossGradients : public ::testing::TestWithParam<GradCase> {};

TEST_P(LossGradients, EveryTermMatchesFiniteDifferences) {
  const auto [kind, continuous] = GetParam();
  const NetworkConfig c = tiny_config(continuous);
  const std::size_t K = kind == AgentKind::ModelBased ? 3 : 1;
  for (std::uint64_t mb = 1; mb <= 5; ++mb) {
    Agent a = test::random_agent(kind, c, 40 + mb);
    for (int term = 0; term < 5; ++term) {
      const RewardMode mode = term == 4 ? RewardMode::Intrinsic : RewardMode::Extrinsic;
      const TrainBatch b = test::random_batch(c, 4, K, 100 * mb + term, mode, kind);
      auto eval = [&](Tape& t) {
        return kind == AgentKind::ModelBased ? muzero_loss(t, b, a.online, a.frozen, c)
                                             : qlearning_loss(t, b, a.online, a.frozen, c);
      };
      auto rep = test::finite_difference_check(
          a.online, {""},
          [&] {
            Tape t(false);
            return eval(t).terms[term].value().item();
          },
          [&] {
            Tape t;
            t.backward(eval(t).terms[term]);
          },
          3, mb * 31 + term);
      EXPECT_EQ(rep.failed, 0u) << "minibatch " << mb << " term " << term << " worst " << rep.worst_name << " rel "
                                << rep.worst;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllAgents, LossGradients,
                         ::testing::Values(GradCase{AgentKind::ModelBased, false}, GradCase{AgentKind::ModelBased, true},
                                           GradCase{AgentKind::ModelFree, false}, GradCase{AgentKind::ModelFree, true}),
                         [](const auto& info) {
                           return std::string(agent_kind_name(info.param.kind)) +
                                  (info.param.continuous ? "Continuous" : "Discrete");
                         });

}  // namespace
