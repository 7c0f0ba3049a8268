#pragma once

// MicroCraft: a small procedurally generated achievement gridworld.
//
// Tiles: grass (walkable), tree, stone, water, plant, gem, table. The agent sees a 5x5 egocentric
// one-hot crop (out-of-bounds cells are all-zero), its facing direction and inventory.
// Mechanics:
//   move          turn to the direction; step forward if the target cell is grass
//   interact      tree -> wood (tree stays); stone -> stone, needs wood tool (cell becomes grass);
//                 gem -> needs stone tool (cell becomes grass); plant -> eaten (cell becomes grass);
//                 water -> drink
//   craft         near a table (8-neighbourhood): wood tool for 1 wood, else stone tool for 1 wood
//                 and 1 stone (needs the wood tool). Otherwise places a table on the faced grass
//                 cell for 1 wood.
// Each achievement pays +1 the first time it happens in an episode (task mode only).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "mbx/envs/common.hpp"

namespace mbx {

enum class Tile : std::uint8_t { Grass, Tree, Stone, Water, Plant, Gem, Table };
inline constexpr std::size_t kNumTiles = 7;

enum Achievement : std::uint32_t {
  CollectWood = 0,
  MakeTable,
  MakeWoodTool,
  CollectStone,
  MakeStoneTool,
  CollectGem,
  EatPlant,
  DrinkWater,
};
inline constexpr std::size_t kNumAchievements = 8;
inline constexpr std::array<std::string_view, kNumAchievements> kAchievementNames = {
    "collect_wood", "make_table", "make_wood_tool", "collect_stone",
    "make_stone_tool", "collect_gem", "eat_plant", "drink_water"};

// Prerequisite of each achievement (-1 for none). Forms a DAG.
inline constexpr std::array<int, kNumAchievements> kAchievementPrereq = {-1, CollectWood, MakeTable, MakeWoodTool,
                                                                         CollectStone, MakeStoneTool, -1, -1};

struct MicroCraftConfig {
  std::size_t grid_size = 8;
  std::uint64_t seed = 0;
  std::size_t episode_limit = 200;
  std::size_t trees = 6;
  std::size_t stones = 5;
  std::size_t waters = 3;
  std::size_t plants = 3;
  std::size_t gems = 1;
  int max_inventory = 5;
};

struct MicroCraftState {
  std::vector<Tile> grid;
  int x = 0, y = 0;
  int facing = 1;  // 0 up, 1 down, 2 left, 3 right
  int wood = 0, stone = 0;
  bool wood_tool = false, stone_tool = false;
  std::uint32_t achievements = 0;
  std::size_t steps = 0;
  bool done = false;
};

class MicroCraft {
 public:
  static constexpr std::size_t kView = 5;
  static constexpr std::size_t kNumActions = 6;
  enum Act : std::size_t { Up = 0, Down, Left, Right, Interact, Craft };

  explicit MicroCraft(MicroCraftConfig cfg = {}, EnvMode mode = EnvMode::pretrain()) : cfg_(cfg) { set_mode(mode); }

  void set_mode(EnvMode mode) {
    if (!mode.pretraining && mode.task != 0)
      throw UnknownTask("MicroCraft: unknown task id " + std::to_string(mode.task) + " (only task 0 exists)");
    mode_ = mode;
  }
  const EnvMode& mode() const { return mode_; }
  const MicroCraftConfig& config() const { return cfg_; }

  std::size_t obs_dim() const { return kView * kView * kNumTiles + 4 + 4; }
  ActionSpec action_spec() const { return ActionSpec::discrete(kNumActions); }
  std::size_t num_achievements() const { return kNumAchievements; }

  std::vector<double> reset(std::uint64_t episode_seed) {
    s_ = generate(cfg_, episode_seed);
    return observe();
  }

  StepResult step(const Action& a) {
    if (s_.done) throw EpisodeOver("MicroCraft: step called on a finished episode");
    if (a.index >= kNumActions) throw std::invalid_argument("MicroCraft: invalid action " + std::to_string(a.index));
    const std::uint32_t before = s_.achievements;
    apply(a.index);
    s_.steps += 1;
    if (s_.steps >= cfg_.episode_limit) s_.done = true;
    StepResult r;
    r.observation = observe();
    r.reward = task_reward(before, s_.achievements, mode_);
    r.done = s_.done;
    r.achievements = s_.achievements;
    r.state_hash = state_hash();
    return r;
  }

  // +1 per newly unlocked achievement; always 0 while pretraining.
  static double task_reward(std::uint32_t before, std::uint32_t after, const EnvMode& mode) {
    if (mode.pretraining) return 0.0;
    if (mode.task != 0) throw UnknownTask("MicroCraft: unknown task id " + std::to_string(mode.task));
    return static_cast<double>(std::popcount(after & ~before));
  }

  std::uint64_t state_hash() const { return hash_state(s_); }

  static std::uint64_t hash_state(const MicroCraftState& s) {
    StateHasher h;
    h.add(static_cast<std::uint64_t>(s.x) | static_cast<std::uint64_t>(s.y) << 8 |
          static_cast<std::uint64_t>(s.facing) << 16 | static_cast<std::uint64_t>(s.wood) << 24 |
          static_cast<std::uint64_t>(s.stone) << 32 | static_cast<std::uint64_t>(s.wood_tool) << 40 |
          static_cast<std::uint64_t>(s.stone_tool) << 41);
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < s.grid.size(); ++i) {
      word = word << 3 | static_cast<std::uint64_t>(s.grid[i]);
      if (i % 21 == 20) {
        h.add(word);
        word = 0;
      }
    }
    h.add(word);
    return h.value();
  }

  const MicroCraftState& state() const { return s_; }
  MicroCraftState& mutable_state() { return s_; }

  Tile tile(int x, int y) const { return s_.grid[static_cast<std::size_t>(y) * cfg_.grid_size + static_cast<std::size_t>(x)]; }

  std::vector<double> observe() const {
    std::vector<double> o(obs_dim(), 0.0);
    const int half = static_cast<int>(kView / 2);
    std::size_t cell = 0;
    for (int dy = -half; dy <= half; ++dy) {
      for (int dx = -half; dx <= half; ++dx, ++cell) {
        const int x = s_.x + dx, y = s_.y + dy;
        if (!inside(x, y)) continue;
        o[cell * kNumTiles + static_cast<std::size_t>(tile(x, y))] = 1.0;
      }
    }
    std::size_t base = kView * kView * kNumTiles;
    o[base + static_cast<std::size_t>(s_.facing)] = 1.0;
    base += 4;
    o[base + 0] = static_cast<double>(s_.wood) / cfg_.max_inventory;
    o[base + 1] = static_cast<double>(s_.stone) / cfg_.max_inventory;
    o[base + 2] = s_.wood_tool ? 1.0 : 0.0;
    o[base + 3] = s_.stone_tool ? 1.0 : 0.0;
    return o;
  }

  static MicroCraftState generate(const MicroCraftConfig& cfg, std::uint64_t episode_seed) {
    const std::size_t n = cfg.grid_size;
    if (n < 4) throw std::invalid_argument("MicroCraft: grid_size must be >= 4");
    const std::size_t need = cfg.trees + cfg.stones + cfg.waters + cfg.plants + cfg.gems + 1;
    if (need > n * n) throw std::invalid_argument("MicroCraft: too many resources for the grid");
    if (!cfg.trees || !cfg.stones || !cfg.waters || !cfg.plants || !cfg.gems)
      throw std::invalid_argument("MicroCraft: every resource needs at least one instance");
    std::mt19937_64 rng(splitmix64(splitmix64(cfg.seed) ^ (episode_seed * 0xd1b54a32d192ed03ULL)));
    for (int attempt = 0;; ++attempt) {
      MicroCraftState s;
      s.grid.assign(n * n, Tile::Grass);
      std::vector<std::size_t> cells(n * n);
      for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = i;
      std::shuffle(cells.begin(), cells.end(), rng);
      std::size_t next = 0;
      auto place = [&](Tile t, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) s.grid[cells[next++]] = t;
      };
      place(Tile::Tree, cfg.trees);
      place(Tile::Stone, cfg.stones);
      place(Tile::Water, cfg.waters);
      place(Tile::Plant, cfg.plants);
      place(Tile::Gem, cfg.gems);
      const std::size_t start = cells[next];
      s.x = static_cast<int>(start % n);
      s.y = static_cast<int>(start / n);
      s.facing = static_cast<int>(rng() % 4);
      // Every resource must touch a grass cell reachable from the start, otherwise redraw. After many
      // failures the map is accepted as is (it still holds every resource).
      if (attempt >= 64 || all_reachable(s, n)) return s;
    }
  }

 private:
  static bool all_reachable(const MicroCraftState& s, std::size_t n) {
    std::vector<char> seen(n * n, 0);
    std::deque<std::size_t> q{static_cast<std::size_t>(s.y) * n + static_cast<std::size_t>(s.x)};
    seen[q.front()] = 1;
    std::array<bool, kNumTiles> touched{};
    const int dx[4] = {0, 0, -1, 1}, dy[4] = {-1, 1, 0, 0};
    while (!q.empty()) {
      const std::size_t c = q.front();
      q.pop_front();
      const int x = static_cast<int>(c % n), y = static_cast<int>(c / n);
      for (int d = 0; d < 4; ++d) {
        const int nx = x + dx[d], ny = y + dy[d];
        if (nx < 0 || ny < 0 || nx >= static_cast<int>(n) || ny >= static_cast<int>(n)) continue;
        const std::size_t nc = static_cast<std::size_t>(ny) * n + static_cast<std::size_t>(nx);
        const Tile t = s.grid[nc];
        if (t != Tile::Grass) {
          touched[static_cast<std::size_t>(t)] = true;
          continue;
        }
        if (!seen[nc]) {
          seen[nc] = 1;
          q.push_back(nc);
        }
      }
    }
    for (Tile t : {Tile::Tree, Tile::Stone, Tile::Water, Tile::Plant, Tile::Gem})
      if (!touched[static_cast<std::size_t>(t)]) return false;
    return true;
  }

  bool inside(int x, int y) const {
    return x >= 0 && y >= 0 && x < static_cast<int>(cfg_.grid_size) && y < static_cast<int>(cfg_.grid_size);
  }
  Tile& at(int x, int y) {
    return s_.grid[static_cast<std::size_t>(y) * cfg_.grid_size + static_cast<std::size_t>(x)];
  }
  void unlock(Achievement a) { s_.achievements |= 1u << a; }

  bool near_table() const {
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx)
        if (inside(s_.x + dx, s_.y + dy) && tile(s_.x + dx, s_.y + dy) == Tile::Table) return true;
    return false;
  }

  void apply(std::size_t action) {
    static constexpr int dx[4] = {0, 0, -1, 1}, dy[4] = {-1, 1, 0, 0};
    if (action < 4) {
      s_.facing = static_cast<int>(action);
      const int nx = s_.x + dx[action], ny = s_.y + dy[action];
      if (inside(nx, ny) && tile(nx, ny) == Tile::Grass) {
        s_.x = nx;
        s_.y = ny;
      }
      return;
    }
    const int fx = s_.x + dx[s_.facing], fy = s_.y + dy[s_.facing];
    const bool facing_inside = inside(fx, fy);
    if (action == Interact) {
      if (!facing_inside) return;
      switch (tile(fx, fy)) {
        case Tile::Tree:
          s_.wood = std::min(s_.wood + 1, cfg_.max_inventory);
          unlock(CollectWood);
          break;
        case Tile::Stone:
          if (!s_.wood_tool) break;
          s_.stone = std::min(s_.stone + 1, cfg_.max_inventory);
          at(fx, fy) = Tile::Grass;
          unlock(CollectStone);
          break;
        case Tile::Gem:
          if (!s_.stone_tool) break;
          at(fx, fy) = Tile::Grass;
          unlock(CollectGem);
          break;
        case Tile::Plant:
          at(fx, fy) = Tile::Grass;
          unlock(EatPlant);
          break;
        case Tile::Water:
          unlock(DrinkWater);
          break;
        default:
          break;
      }
      return;
    }
    // craft
    if (near_table()) {
      if (!s_.wood_tool && s_.wood >= 1) {
        s_.wood -= 1;
        s_.wood_tool = true;
        unlock(MakeWoodTool);
      } else if (s_.wood_tool && !s_.stone_tool && s_.wood >= 1 && s_.stone >= 1) {
        s_.wood -= 1;
        s_.stone -= 1;
        s_.stone_tool = true;
        unlock(MakeStoneTool);
      }
      return;
    }
    if (s_.wood >= 1 && facing_inside && tile(fx, fy) == Tile::Grass) {
      s_.wood -= 1;
      at(fx, fy) = Tile::Table;
      unlock(MakeTable);
    }
  }

  MicroCraftConfig cfg_;
  EnvMode mode_;
  MicroCraftState s_;
};

}  // namespace mbx
