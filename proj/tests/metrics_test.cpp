#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "mbx/config.hpp"
#include "mbx/metrics.hpp"

namespace {

using namespace mbx;

TEST(CrafterScore, Examples) {
  EXPECT_EQ(crafter_score({0.0, 0.0, 0.0}), 0.0);
  EXPECT_NEAR(crafter_score({1.0, 1.0}), 1.0, 1e-15);
  // exp(0.5 ln 1.5) - 1, evaluated directly in long double
  const long double oracle = std::sqrt(1.5L) - 1.0L;
  EXPECT_NEAR(crafter_score({0.5, 0.0}), static_cast<double>(oracle), 1e-15);
  EXPECT_NEAR(crafter_score({0.5, 0.0}), 0.224745, 1e-6);
  EXPECT_THROW(crafter_score({}), std::invalid_argument);
  EXPECT_THROW(crafter_score({1.2}), std::invalid_argument);
  EXPECT_THROW(crafter_score({-0.1}), std::invalid_argument);
  EXPECT_THROW(crafter_score({std::nan("")}), std::invalid_argument);
}

TEST(CrafterScore, RaisingAnyRateRaisesTheScore) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> r(8);
    for (double& x : r) x = 0.9 * u(rng);
    const std::size_t k = rng() % 8;
    std::vector<double> up = r;
    up[k] += 0.001 + 0.09 * u(rng);
    ASSERT_GT(crafter_score(up), crafter_score(r));
  }
}

TEST(SuccessRate, CountsEpisodesNotEvents) {
  std::vector<std::uint32_t> eps(10, 0u);
  eps[1] = eps[4] = eps[7] = 0b1;
  EXPECT_DOUBLE_EQ(success_rate(eps, 1)[0], 0.3);
  // A flag set twice within an episode is one bit in that episode's flag set.
  std::uint32_t ep = 0;
  ep |= 1u << 2;
  ep |= 1u << 2;
  EXPECT_DOUBLE_EQ(success_rate({ep}, 3)[2], 1.0);
  EXPECT_THROW(success_rate({}, 3), std::invalid_argument);
}

TEST(SuccessRate, MatchesBruteForceRecountAndTally) {
  std::mt19937_64 rng(2);
  std::vector<std::uint32_t> eps;
  std::vector<std::vector<int>> events;  // achievement ids hit per episode, with repeats
  for (int e = 0; e < 500; ++e) {
    std::vector<int> ev;
    std::uint32_t f = 0;
    for (int i = 0; i < static_cast<int>(rng() % 6); ++i) {
      const int a = static_cast<int>(rng() % 8);
      ev.push_back(a);
      f |= 1u << a;
    }
    events.push_back(ev);
    eps.push_back(f);
  }
  AchievementTally tally(8);
  for (auto f : eps) tally.add(f);
  const auto rates = success_rate(eps, 8);
  for (int a = 0; a < 8; ++a) {
    int n = 0;
    for (const auto& ev : events) n += std::find(ev.begin(), ev.end(), a) != ev.end();
    EXPECT_DOUBLE_EQ(rates[static_cast<std::size_t>(a)], n / 500.0);
    EXPECT_DOUBLE_EQ(tally.rates()[static_cast<std::size_t>(a)], n / 500.0);
  }
}

TEST(Csv, RowsRoundTripThroughAFile) {
  const auto path = std::filesystem::temp_directory_path() / "mbx_metrics_roundtrip.csv";
  std::vector<MetricRow> rows;
  for (int i = 0; i < 3; ++i) {
    MetricRow r;
    r.env_step = 1000 * (i + 1);
    r.arm = i == 1 ? "odd,\"name\"" : "PP+PRV";
    r.seed = 7;
    r.episode_return = 0.1 * i + 1.0 / 3.0;
    r.score = std::sqrt(1.5) - 1.0;
    r.achievements_json = achievements_json({"a", "b"}, {0.25, 1.0});
    r.unique_states = 123 + i;
    r.l_pi = 1e-300;
    r.l_v = -2.5;
    r.lr = 1e-4;
    r.wall_time = 12.75;
    rows.push_back(r);
  }
  {
    CsvWriter w(path.string());
    for (const auto& r : rows) w.write(r);
  }
  const auto back = read_metrics_csv(path.string());
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(csv_line(back[i]), csv_line(rows[i]));
  EXPECT_EQ(parse_achievements_json(back[0].achievements_json), (std::vector<double>{0.25, 1.0}));
  EXPECT_EQ(csv_header(),
            "env_step,arm,seed,return,score,achievements_json,unique_states,l_pi,l_v,l_r,l_spr,lr,wall_time");
  // Appending keeps a single header.
  {
    CsvWriter w(path.string(), true);
    w.write(rows[0]);
  }
  EXPECT_EQ(read_metrics_csv(path.string()).size(), 4u);
  std::filesystem::remove(path);
}

TEST(Aggregation, MedianStdAndFinalScores) {
  EXPECT_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_NEAR(stddev({1.0, 2.0, 3.0}), 1.0, 1e-15);
  std::vector<MetricRow> rows(4);
  rows[0] = {100, "a", 1, 0, 0.1};
  rows[1] = {200, "a", 1, 0, 0.4};
  rows[2] = {100, "a", 2, 0, 0.3};
  rows[3] = {100, "b", 1, 0, 0.9};
  const auto fs = final_scores(rows);
  EXPECT_EQ(fs.at("a"), (std::vector<double>{0.4, 0.3}));
  EXPECT_EQ(fs.at("b"), (std::vector<double>{0.9}));
  const Curves c = aggregate_curves(rows, [](const MetricRow& r) { return r.score; });
  ASSERT_EQ(c.at("a").size(), 2u);
  EXPECT_DOUBLE_EQ(c.at("a")[0].median, 0.2);
  const std::string svg = render_svg(c, "score", "S");
  EXPECT_NE(svg.find("<svg"), std::string::npos);
}

// ---------------------------------------------------------------------------------------------
// Config

TEST(Config, FullPresetMatchesTheHyperparameterTables) {
  const auto craft = ExperimentConfig::full_preset(EnvKind::MicroCraft);
  EXPECT_EQ(craft.pretrain.unroll, 5u);
  EXPECT_EQ(craft.pretrain.td_steps, 5u);
  EXPECT_EQ(craft.pretrain.reanalyse_fraction, 0.8);
  EXPECT_EQ(craft.finetune.reanalyse_fraction, 0.99);
  EXPECT_EQ(craft.pretrain.mf_reanalyse_fraction, 0.75);
  EXPECT_EQ(craft.finetune.mf_reanalyse_fraction, 0.99);
  EXPECT_EQ(craft.pretrain.replay_size, 50000u);
  EXPECT_EQ(craft.pretrain.num_simulations, 50u);
  EXPECT_EQ(craft.pretrain.c_puct, 1.25);
  EXPECT_EQ(craft.pretrain.spr_weight, 1.0);
  EXPECT_EQ(craft.pretrain.lr, 1e-4);
  EXPECT_EQ(craft.finetune.lr, 1e-5);
  EXPECT_EQ(craft.pretrain.schedule, LrSchedule::Cosine);
  EXPECT_EQ(craft.finetune.schedule, LrSchedule::Constant);
  EXPECT_EQ(craft.pretrain.mf_unroll, 1u);
  EXPECT_EQ(craft.pretrain.mf_td_steps, 5u);

  const auto desk = ExperimentConfig::full_preset(EnvKind::PointDesk);
  EXPECT_EQ(desk.pretrain.td_steps, 0u);
  EXPECT_EQ(desk.pretrain.mf_td_steps, 1u);
  EXPECT_EQ(desk.pretrain.reanalyse_fraction, 0.925);
  EXPECT_EQ(desk.pretrain.mf_reanalyse_fraction, 0.945);
  EXPECT_EQ(desk.pretrain.replay_size, 2000u);
  EXPECT_EQ(desk.pretrain.num_action_samples, 20u);
  EXPECT_EQ(desk.pretrain.lr, 1e-4);
  EXPECT_EQ(desk.finetune.lr, 1e-4);
  EXPECT_EQ(desk.pretrain.schedule, LrSchedule::Constant);
  EXPECT_EQ(desk.finetune.schedule, LrSchedule::Cosine);
}

TEST(Config, SectionsOverrideCommonValues) {
  const auto c = parse_config(
      "env = pointdesk\n"
      "[finetune]\n"
      "lr = 0.5   # comment\n"
      "[common]\n"
      "lr = 0.25\n"
      "task = 3\n"
      "heavy_blocks = true\n");
  EXPECT_EQ(c.env, EnvKind::PointDesk);
  EXPECT_EQ(c.pretrain.lr, 0.25);
  EXPECT_EQ(c.finetune.lr, 0.5);
  EXPECT_EQ(c.task, 3);
  EXPECT_TRUE(c.desk.heavy_blocks);
  EXPECT_EQ(c.network().obs_dim, 12u);
}

TEST(Config, BadInputIsRejectedWithALocation) {
  auto fails = [](const std::string& text, const std::string& needle) {
    try {
      parse_config(text, "t.cfg");
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
      return;
    }
    ADD_FAILURE() << "accepted: " << text;
  };
  fails("bogus = 1\n", "t.cfg:1: unknown key 'bogus'");
  fails("[pretrain]\ndiscount = 0.9\n", "t.cfg:2");
  fails("[weird]\n", "unknown section");
  fails("lr = fast\n", "bad value for lr");
  fails("lr_schedule = linear\n", "bad schedule");
  fails("just text\n", "expected key = value");
  fails("env = atari\n", "unknown env");
  fails("value_bins = 4\nvalue_min = -1\nvalue_max = 1\n", "");
  fails("task = 2\n", "single task");
  fails("[finetune]\nmf_unroll = 3\n", "mf_unroll");
  EXPECT_THROW(load_config("/nonexistent/path.cfg"), ConfigError);
}

}  // namespace
