#include <gtest/gtest.h>

#include <array>
#include <bit>
#include <random>
#include <sstream>
#include <unordered_map>

#include "mbx/agent.hpp"
#include "mbx/envs/microcraft.hpp"
#include "mbx/envs/pointdesk.hpp"

namespace {

using namespace mbx;

template <class Env>
std::vector<StepResult> rollout(Env& env, std::uint64_t episode_seed, std::uint64_t action_seed, std::size_t n) {
  std::mt19937_64 rng(action_seed);
  env.reset(episode_seed);
  std::vector<StepResult> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(env.step(uniform_action(env.action_spec(), rng)));
    if (out.back().done) break;
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// MicroCraft

TEST(MicroCraft, SameSeedsGiveIdenticalTrajectories) {
  MicroCraftConfig cfg;
  cfg.seed = 11;
  MicroCraft a(cfg), b(cfg);
  EXPECT_EQ(a.reset(4), b.reset(4));
  const auto ra = rollout(a, 4, 9, 200), rb = rollout(b, 4, 9, 200);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].observation, rb[i].observation);
    EXPECT_EQ(ra[i].state_hash, rb[i].state_hash);
  }
  EXPECT_NE(a.reset(4), a.reset(5));
}

TEST(MicroCraft, EveryMapHoldsEveryResource) {
  MicroCraftConfig cfg;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const MicroCraftState s = MicroCraft::generate(cfg, seed);
    std::array<int, kNumTiles> count{};
    for (Tile t : s.grid) count[static_cast<std::size_t>(t)] += 1;
    for (Tile t : {Tile::Tree, Tile::Stone, Tile::Water, Tile::Plant, Tile::Gem})
      ASSERT_GE(count[static_cast<std::size_t>(t)], 1) << "seed " << seed;
    ASSERT_EQ(s.grid[static_cast<std::size_t>(s.y) * cfg.grid_size + static_cast<std::size_t>(s.x)], Tile::Grass);
  }
}

TEST(MicroCraft, PrerequisitesFormADag) {
  for (std::size_t a = 0; a < kNumAchievements; ++a) {
    int cur = static_cast<int>(a);
    for (std::size_t hops = 0; cur != -1; ++hops) {
      ASSERT_LE(hops, kNumAchievements);
      cur = kAchievementPrereq[static_cast<std::size_t>(cur)];
    }
  }
}

TEST(MicroCraft, ObservationsAreOneHotAndBounded) {
  MicroCraft env;
  for (const auto& r : rollout(env, 3, 3, 200))
    for (double v : r.observation) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  EXPECT_EQ(env.obs_dim(), 183u);
}

MicroCraft open_field(EnvMode mode) {
  MicroCraft env(MicroCraftConfig{}, mode);
  env.reset(0);
  MicroCraftState& s = env.mutable_state();
  s.grid.assign(64, Tile::Grass);
  s.x = 3;
  s.y = 3;
  s.facing = 1;
  s.wood = s.stone = 0;
  s.wood_tool = s.stone_tool = false;
  s.achievements = 0;
  return env;
}

TEST(MicroCraft, InteractingWithATreeCollectsWood) {
  MicroCraft env = open_field(EnvMode::finetune(0));
  env.mutable_state().grid[4 * 8 + 3] = Tile::Tree;  // directly below
  const StepResult r1 = env.step(Action::discrete(MicroCraft::Interact));
  EXPECT_EQ(env.state().wood, 1);
  EXPECT_EQ(r1.reward, 1.0);
  EXPECT_EQ(r1.achievements, 1u << CollectWood);
  const StepResult r2 = env.step(Action::discrete(MicroCraft::Interact));
  EXPECT_EQ(env.state().wood, 2);
  EXPECT_EQ(r2.reward, 0.0);
  EXPECT_EQ(env.tile(3, 4), Tile::Tree);
}

TEST(MicroCraft, CraftWithoutPrerequisitesIsANoOp) {
  MicroCraft env = open_field(EnvMode::finetune(0));
  const std::uint64_t before = env.state_hash();
  const StepResult r = env.step(Action::discrete(MicroCraft::Craft));
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_EQ(r.achievements, 0u);
  EXPECT_EQ(env.state_hash(), before);
}

TEST(MicroCraft, CraftingChainUnlocksInOrder) {
  MicroCraft env = open_field(EnvMode::finetune(0));
  env.mutable_state().grid[4 * 8 + 3] = Tile::Tree;
  env.step(Action::discrete(MicroCraft::Interact));
  env.step(Action::discrete(MicroCraft::Interact));
  env.step(Action::discrete(MicroCraft::Interact));
  env.step(Action::discrete(MicroCraft::Up));  // face up, blocked by nothing: moves to (3, 2)
  env.step(Action::discrete(MicroCraft::Down));
  // back at (3, 3) facing down onto the tree; face right and place a table there
  env.step(Action::discrete(MicroCraft::Right));
  env.mutable_state().x = 3;
  EXPECT_EQ(env.step(Action::discrete(MicroCraft::Craft)).reward, 1.0);
  EXPECT_EQ(env.tile(4, 3), Tile::Table);
  EXPECT_EQ(env.step(Action::discrete(MicroCraft::Craft)).reward, 1.0);
  EXPECT_TRUE(env.state().wood_tool);
  env.mutable_state().grid[2 * 8 + 3] = Tile::Stone;
  env.step(Action::discrete(MicroCraft::Up));
  EXPECT_EQ(env.step(Action::discrete(MicroCraft::Interact)).reward, 1.0);
  EXPECT_EQ(env.state().stone, 1);
  EXPECT_EQ(env.step(Action::discrete(MicroCraft::Craft)).reward, 1.0);
  EXPECT_TRUE(env.state().stone_tool);
  EXPECT_EQ(env.state().achievements, (1u << CollectWood) | (1u << MakeTable) | (1u << MakeWoodTool) |
                                          (1u << CollectStone) | (1u << MakeStoneTool));
}

TEST(MicroCraft, ErrorsAndModes) {
  MicroCraft env;
  rollout(env, 1, 1, 1000);
  EXPECT_THROW(env.step(Action::discrete(0)), EpisodeOver);
  env.reset(2);
  EXPECT_THROW(env.step(Action::discrete(6)), std::invalid_argument);
  EXPECT_THROW(MicroCraft(MicroCraftConfig{}, EnvMode::finetune(1)), UnknownTask);
}

TEST(MicroCraft, PretrainingRewardIsAlwaysZero) {
  MicroCraft env;
  std::uint32_t any = 0;
  for (std::uint64_t ep = 0; ep < 30; ++ep)
    for (const auto& r : rollout(env, ep, ep, 200)) {
      ASSERT_EQ(r.reward, 0.0);
      any |= r.achievements;
    }
  EXPECT_NE(any, 0u);
}

TEST(MicroCraft, FlagsOnlyGrowAndRewardsCountNewFlags) {
  MicroCraft env(MicroCraftConfig{}, EnvMode::finetune(0));
  for (std::uint64_t ep = 0; ep < 30; ++ep) {
    std::uint32_t prev = 0;
    double total = 0.0;
    for (const auto& r : rollout(env, ep, 100 + ep, 200)) {
      ASSERT_EQ(r.achievements & prev, prev);
      total += r.reward;
      prev = r.achievements;
    }
    EXPECT_EQ(total, static_cast<double>(std::popcount(prev)));
  }
}

TEST(MicroCraft, StateHashCollisionsAreRare) {
  std::mt19937_64 rng(42);
  std::uniform_int_distribution<int> tile(0, kNumTiles - 1), pos(0, 7), face(0, 3), inv(0, 5), flag(0, 1);
  using Key = std::array<std::uint64_t, 4>;
  std::unordered_map<std::uint64_t, Key> seen;
  seen.reserve(1 << 21);
  std::size_t collisions = 0;
  const std::size_t N = 1000000;
  for (std::size_t i = 0; i < N; ++i) {
    MicroCraftState s;
    s.grid.resize(64);
    Key k{};
    for (std::size_t c = 0; c < 64; ++c) {
      const int t = tile(rng);
      s.grid[c] = static_cast<Tile>(t);
      k[c / 21] |= static_cast<std::uint64_t>(t) << (3 * (c % 21));
    }
    s.x = pos(rng), s.y = pos(rng), s.facing = face(rng), s.wood = inv(rng), s.stone = inv(rng);
    s.wood_tool = flag(rng), s.stone_tool = flag(rng);
    k[3] |= static_cast<std::uint64_t>(s.x) | static_cast<std::uint64_t>(s.y) << 4 |
            static_cast<std::uint64_t>(s.facing) << 8 | static_cast<std::uint64_t>(s.wood) << 12 |
            static_cast<std::uint64_t>(s.stone) << 16 | static_cast<std::uint64_t>(s.wood_tool) << 20 |
            static_cast<std::uint64_t>(s.stone_tool) << 21;
    auto [it, fresh] = seen.emplace(MicroCraft::hash_state(s), k);
    if (!fresh && it->second != k) ++collisions;
  }
  EXPECT_LT(static_cast<double>(collisions) / N, 1e-6);
}

TEST(MicroCraft, TraceRecordsAreJsonLines) {
  MicroCraft env;
  env.reset(0);
  std::ostringstream os;
  const StepResult r = env.step(Action::discrete(2));
  write_trace_record(os, 0, Action::discrete(2), r);
  const auto j = nlohmann::json::parse(os.str());
  EXPECT_EQ(j["action"], 2);
  EXPECT_EQ(j["hash"].get<std::uint64_t>(), r.state_hash);
  EXPECT_EQ(os.str().back(), '\n');
}

// ---------------------------------------------------------------------------------------------
// PointDesk

Action velocity(double x, double y) { return Action{0, {x, y}, {0.0, 0.0}}; }

TEST(PointDesk, SameSeedsGiveIdenticalTrajectories) {
  PointDesk a, b;
  const auto ra = rollout(a, 7, 1, 200), rb = rollout(b, 7, 1, 200);
  ASSERT_EQ(ra.size(), 200u);
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(ra[i].observation, rb[i].observation);
  EXPECT_NE(a.reset(1), a.reset(2));
}

TEST(PointDesk, TwoStepKinematicsMatchHandIntegration) {
  PointDesk env;
  env.reset(0);
  PointDeskState& s = env.mutable_state();
  s.agent = {0.5, 0.5};
  s.blocks = {Vec2{0.55, 0.5}, Vec2{0.2, 0.2}, Vec2{0.9, 0.9}};
  // step 1: agent -> (0.6, 0.5); block 0 is 0.05 away after the move, pushed by (0.1, 0)
  env.step(velocity(1.0, 0.0));
  EXPECT_NEAR(env.state().agent.x, 0.6, 1e-12);
  EXPECT_NEAR(env.state().agent.y, 0.5, 1e-12);
  EXPECT_NEAR(env.state().blocks[0].x, 0.65, 1e-12);
  EXPECT_NEAR(env.state().blocks[0].y, 0.5, 1e-12);
  // step 2: agent -> (0.7, 0.55); block 0 at distance sqrt(0.05^2 + 0.05^2) < 0.08, pushed by (0.1, 0.05)
  env.step(velocity(1.0, 0.5));
  EXPECT_NEAR(env.state().agent.x, 0.7, 1e-12);
  EXPECT_NEAR(env.state().agent.y, 0.55, 1e-12);
  EXPECT_NEAR(env.state().blocks[0].x, 0.75, 1e-12);
  EXPECT_NEAR(env.state().blocks[0].y, 0.55, 1e-12);
  // untouched blocks stay put
  EXPECT_EQ(env.state().blocks[1].x, 0.2);
  EXPECT_EQ(env.state().blocks[2].y, 0.9);
}

TEST(PointDesk, ArenaClampsAndActionsSaturate) {
  PointDesk env;
  env.reset(0);
  env.mutable_state().agent = {0.95, 0.02};
  env.step(velocity(5.0, -1.0));  // saturates to (1, -1)
  EXPECT_EQ(env.state().agent.x, 1.0);
  EXPECT_EQ(env.state().agent.y, 0.0);
  EXPECT_THROW(env.step(Action::discrete(0)), std::invalid_argument);
}

TEST(PointDesk, HeavyBlocksMoveHalfAsFar) {
  PointDeskConfig cfg;
  cfg.heavy_blocks = true;
  PointDesk env(cfg);
  env.reset(0);
  env.mutable_state().agent = {0.5, 0.5};
  env.mutable_state().blocks = {Vec2{0.55, 0.5}, Vec2{0.1, 0.1}, Vec2{0.1, 0.9}};
  env.step(velocity(1.0, 0.0));
  EXPECT_NEAR(env.state().blocks[0].x, 0.6, 1e-12);
}

TEST(PointDesk, SuccessRadiusIsStrict) {
  PointDesk env;
  env.reset(0);
  PointDeskState s = env.state();
  s.agent = {0.0, 0.0};
  s.blocks[0] = {0.1, 0.0};
  EXPECT_FALSE(env.task_success(s, 0));
  s.blocks[0] = {0.0999, 0.0};
  EXPECT_TRUE(env.task_success(s, 0));
  s.blocks[1] = {0.3, 0.3};
  s.zones[1] = {0.3, 0.35};
  EXPECT_TRUE(env.task_success(s, 4));
  EXPECT_THROW(env.task_success(s, 6), UnknownTask);
  EXPECT_THROW(PointDesk(PointDeskConfig{}, EnvMode::finetune(-1)), UnknownTask);
}

TEST(PointDesk, RewardIsGrantedOncePerEpisode) {
  PointDesk env(PointDeskConfig{}, EnvMode::finetune(0));
  env.reset(3);
  env.mutable_state().agent = {0.5, 0.5};
  env.mutable_state().blocks = {Vec2{0.5, 0.64}, Vec2{0.1, 0.1}, Vec2{0.9, 0.1}};
  // Step to within 0.09 of block 0: outside contact, inside success. Only the first success pays.
  EXPECT_EQ(env.step(velocity(0.0, 0.5)).reward, 1.0);
  EXPECT_EQ(env.step(velocity(0.0, 0.0)).reward, 0.0);
  EXPECT_EQ(env.step(velocity(0.0, 0.0)).reward, 0.0);
  env.reset(3);
  EXPECT_FALSE(env.state().task_granted);
}

TEST(PointDesk, PretrainingRewardIsZeroAndFlagsGrow) {
  PointDesk env;
  for (std::uint64_t ep = 0; ep < 20; ++ep) {
    std::uint32_t prev = 0;
    for (const auto& r : rollout(env, ep, ep + 50, 200)) {
      ASSERT_EQ(r.reward, 0.0);
      ASSERT_EQ(r.achievements & prev, prev);
      prev = r.achievements;
      for (double v : r.observation) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
}

TEST(PointDesk, DynamicsDoNotDependOnTheTask) {
  std::vector<std::vector<double>> ref;
  for (int task = -1; task < PointDesk::kNumTasks; ++task) {
    PointDesk env(PointDeskConfig{}, task < 0 ? EnvMode::pretrain() : EnvMode::finetune(task));
    std::vector<std::vector<double>> obs;
    for (const auto& r : rollout(env, 5, 5, 200)) obs.push_back(r.observation);
    if (ref.empty()) ref = obs;
    EXPECT_EQ(obs, ref) << task;
  }
}

}  // namespace
