#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "mbx/training.hpp"

namespace fs = std::filesystem;

namespace {

using namespace mbx;

ExperimentConfig small_config(EnvKind env = EnvKind::MicroCraft) {
  ExperimentConfig c = ExperimentConfig::desk_preset(env);
  c.latent_dim = 12;
  c.encoder_blocks = 1;
  c.dynamics_blocks = 1;
  c.history_len = 2;
  c.head_hidden = 12;
  c.value_bins = 11;
  c.reward_bins = 11;
  c.spr_proj_dim = 8;
  c.rnd_proj_dim = 8;
  c.craft.episode_limit = 60;
  c.desk.episode_limit = 40;
  for (PhaseConfig* p : {&c.pretrain, &c.finetune}) {
    p->budget = 360;
    p->num_simulations = 3;
    p->reanalyse_simulations = 2;
    p->num_action_samples = 3;
    p->batch_size = 4;
    p->train_every = 8;
    p->warmup_sequences = 8;
    p->log_interval = 60;
    p->target_sync_interval = 5;
    p->td_steps = std::min<std::size_t>(p->td_steps, 3);
    p->unroll = 3;
  }
  c.validate();
  return c;
}

fs::path scratch_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("mbx_training_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(MBX_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST(Pretraining, ResumedRunMatchesUninterrupted) {
  const ExperimentConfig cfg = small_config();
  const auto whole = scratch_dir("whole");
  const auto parts = scratch_dir("parts");
  const PhaseSummary a = run_pretraining(cfg, AgentKind::ModelBased, {3, whole.string()});
  ASSERT_TRUE(a.completed);

  RunRequest first{3, parts.string()};
  first.stop_after = 130;
  const PhaseSummary cut = run_pretraining(cfg, AgentKind::ModelBased, first);
  EXPECT_FALSE(cut.completed);
  EXPECT_FALSE(fs::exists(parts / "checkpoint.bin"));
  const PhaseSummary b = run_pretraining(cfg, AgentKind::ModelBased, {3, parts.string()});
  ASSERT_TRUE(b.completed);

  EXPECT_EQ(slurp(whole / "metrics.csv"), slurp(parts / "metrics.csv"));
  EXPECT_EQ(slurp(whole / "checkpoint.bin"), slurp(parts / "checkpoint.bin"));
  EXPECT_EQ(a.env_steps, b.env_steps);
  EXPECT_EQ(a.train_steps, b.train_steps);
}

TEST(Pretraining, SameSeedSameBytesOtherSeedDiffers) {
  const ExperimentConfig cfg = small_config();
  const auto d1 = scratch_dir("det1"), d2 = scratch_dir("det2"), d3 = scratch_dir("det3");
  run_pretraining(cfg, AgentKind::ModelFree, {5, d1.string()});
  run_pretraining(cfg, AgentKind::ModelFree, {5, d2.string()});
  run_pretraining(cfg, AgentKind::ModelFree, {6, d3.string()});
  EXPECT_EQ(slurp(d1 / "metrics.csv"), slurp(d2 / "metrics.csv"));
  EXPECT_EQ(slurp(d1 / "checkpoint.bin"), slurp(d2 / "checkpoint.bin"));
  EXPECT_NE(slurp(d1 / "metrics.csv"), slurp(d3 / "metrics.csv"));
}

TEST(Pretraining, CsvRowsFollowLogInterval) {
  const ExperimentConfig cfg = small_config();
  const auto d = scratch_dir("rows");
  run_pretraining(cfg, std::nullopt, {1, d.string()});
  const auto rows = read_metrics_csv((d / "metrics.csv").string());
  ASSERT_EQ(rows.size(), 6u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].env_step, static_cast<std::int64_t>(60 * (i + 1)));
    EXPECT_EQ(rows[i].arm, "random");
    EXPECT_EQ(rows[i].wall_time, 0.0);
    EXPECT_EQ(rows[i].episode_return, 0.0);  // reward-free
  }
  EXPECT_FALSE(fs::exists(d / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(d / "summary.json"));
}

TEST(Pretraining, CompletedRunIsRestartedNotExtended) {
  const ExperimentConfig cfg = small_config();
  const auto d = scratch_dir("restart");
  run_pretraining(cfg, std::nullopt, {2, d.string()});
  const std::string once = slurp(d / "metrics.csv");
  run_pretraining(cfg, std::nullopt, {2, d.string()});
  EXPECT_EQ(once, slurp(d / "metrics.csv"));
}

TEST(Finetuning, ResumedArmMatchesUninterrupted) {
  const ExperimentConfig cfg = small_config();
  const auto src = scratch_dir("ft_src");
  run_pretraining(cfg, AgentKind::ModelBased, {4, src.string()});
  const std::string ckpt = (src / "checkpoint.bin").string();
  const ArmSpec& arm = find_arm("MB->MF");
  const auto whole = scratch_dir("ft_whole"), parts = scratch_dir("ft_parts");
  run_finetuning(cfg, arm, ckpt, {4, whole.string()});
  RunRequest cut{4, parts.string()};
  cut.stop_after = 200;
  EXPECT_FALSE(run_finetuning(cfg, arm, ckpt, cut).summary.completed);
  EXPECT_TRUE(run_finetuning(cfg, arm, ckpt, {4, parts.string()}).summary.completed);
  EXPECT_EQ(slurp(whole / "metrics.csv"), slurp(parts / "metrics.csv"));
  EXPECT_EQ(slurp(whole / "checkpoint.bin"), slurp(parts / "checkpoint.bin"));
}

TEST(Finetuning, LearningRateFollowsPhaseSchedule) {
  const ExperimentConfig cfg = small_config();
  const auto src = scratch_dir("lr_src");
  run_pretraining(cfg, AgentKind::ModelBased, {1, src.string()});
  const auto t = scratch_dir("lr_transfer"), s = scratch_dir("lr_scratch");
  run_finetuning(cfg, find_arm("MB->MB"), (src / "checkpoint.bin").string(), {1, t.string()});
  run_finetuning(cfg, find_arm("Scratch"), "", {1, s.string()});
  const auto tr = read_metrics_csv((t / "metrics.csv").string());
  const auto sr = read_metrics_csv((s / "metrics.csv").string());
  ASSERT_FALSE(tr.empty());
  ASSERT_FALSE(sr.empty());
  for (const auto& r : tr) EXPECT_DOUBLE_EQ(r.lr, cfg.finetune.lr);
  EXPECT_LE(sr.back().lr, sr.front().lr);
  EXPECT_LE(sr.front().lr, cfg.scratch_lr);
}

TEST(Finetuning, MissingSourceIsRejected) {
  const ExperimentConfig cfg = small_config();
  const auto d = scratch_dir("missing");
  EXPECT_THROW(run_finetuning(cfg, find_arm("MF->MB"), (d / "nope.bin").string(), {1, (d / "o").string()}),
               GridError);
  EXPECT_FALSE(fs::exists(d / "o" / "metrics.csv"));
}

TEST(Grid, FiveArmsThreeSeedsGiveFifteenRows) {
  ExperimentConfig cfg = small_config();
  const auto root = scratch_dir("grid");
  const std::vector<std::uint64_t> seeds = {1, 2, 3};
  for (std::uint64_t s : seeds)
    for (AgentKind k : {AgentKind::ModelBased, AgentKind::ModelFree})
      run_pretraining(cfg, k, {s, pretrain_dir(root.string(), k, s).string(), 120});
  const std::vector<std::string> arms = {"MB->MB", "MB->MF", "MF->MB", "MF->MF", "Scratch"};
  const auto rows = run_experiment_grid(cfg, arms, seeds, root.string(), 120);
  ASSERT_EQ(rows.size(), 15u);
  std::set<std::string> dirs;
  for (const auto& r : rows) {
    EXPECT_TRUE(fs::exists(r.csv_path)) << r.csv_path;
    EXPECT_EQ(read_metrics_csv(r.csv_path).size(), 2u);
    dirs.insert(r.csv_path);
  }
  EXPECT_EQ(dirs.size(), 15u);
  EXPECT_TRUE(fs::exists(finetune_dir(root.string(), "MB->MF", 2) / "checkpoint.bin"));
}

TEST(Grid, MissingSourceFailsBeforeAnyTraining) {
  const ExperimentConfig cfg = small_config();
  const auto root = scratch_dir("grid_missing");
  run_pretraining(cfg, AgentKind::ModelBased, {1, pretrain_dir(root.string(), AgentKind::ModelBased, 1).string(), 60});
  try {
    run_experiment_grid(cfg, {"Scratch", "MB->MF", "MF->MB"}, {1}, root.string(), 60);
    FAIL() << "expected GridError";
  } catch (const GridError& e) {
    EXPECT_NE(std::string(e.what()).find("MF->MB"), std::string::npos) << e.what();
  }
  EXPECT_FALSE(fs::exists(root / "finetune"));
}

TEST(Evaluation, DeterministicAndBounded) {
  const ExperimentConfig cfg = small_config(EnvKind::PointDesk);
  Agent a = make_agent(AgentKind::ModelBased, cfg.network(), 9, cfg.rnd_decay);
  const EvalReport r1 = evaluate_agent(a, cfg, EnvMode::finetune(0), 3, 11);
  const EvalReport r2 = evaluate_agent(a, cfg, EnvMode::finetune(0), 3, 11);
  EXPECT_EQ(r1.to_json().dump(), r2.to_json().dump());
  EXPECT_GE(r1.score, 0.0);
  EXPECT_LE(r1.score, 100.0);
}

TEST(Cli, PretrainWithZeroBudgetWritesCheckpoint) {
  const auto d = scratch_dir("cli_pretrain");
  EXPECT_EQ(run_cli("pretrain --kind MB --budget 0 --seed 1 --out " + (d / "run").string(), d / "log"), 0)
      << slurp(d / "log");
  EXPECT_TRUE(fs::exists(d / "run" / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(d / "run" / "metrics.csv"));
}

TEST(Cli, UsageErrorsExitTwo) {
  const auto d = scratch_dir("cli_usage");
  EXPECT_EQ(run_cli("pretrain --bogus", d / "log"), 2);
  EXPECT_EQ(run_cli("frobnicate", d / "log"), 2);
  EXPECT_EQ(run_cli("pretrain --kind XX --budget 0 --out " + d.string(), d / "log"), 2);
  EXPECT_EQ(run_cli("pretrain --env moon --budget 0 --out " + d.string(), d / "log"), 2);
  EXPECT_EQ(run_cli("finetune --arm nope --budget 0 --out " + d.string(), d / "log"), 2);
}

TEST(Cli, MissingGridSourceExitsOneAndNamesArm) {
  const auto d = scratch_dir("cli_grid");
  EXPECT_EQ(run_cli("grid --arms 'MB->MF' --seeds 1 --budget 0 --out " + (d / "g").string(), d / "log"), 1);
  EXPECT_NE(slurp(d / "log").find("MB->MF"), std::string::npos) << slurp(d / "log");
}

TEST(Cli, MbxSeedOverridesFlag) {
  const auto d = scratch_dir("cli_seed");
  ::setenv("MBX_SEED", "42", 1);
  const int rc = run_cli("pretrain --kind random --budget 120 --seed 1 --out " + (d / "a").string(), d / "log");
  ::unsetenv("MBX_SEED");
  ASSERT_EQ(rc, 0) << slurp(d / "log");
  const auto rows = read_metrics_csv((d / "a" / "metrics.csv").string());
  ASSERT_FALSE(rows.empty());
  EXPECT_EQ(rows.front().seed, 42u);
}

TEST(Cli, ScoreReportsCrafterScore) {
  const auto d = scratch_dir("cli_score");
  MetricRow r;
  r.env_step = 100;
  r.arm = "MB->MF";
  r.seed = 0;
  const std::vector<double> rates = {0.5, 0.0};
  r.achievements_json = achievements_json({"a", "b"}, rates);
  r.score = crafter_score(rates);
  {
    std::ofstream out(d / "m.csv");
    out << csv_header() << '\n' << csv_line(r) << '\n';
  }
  ASSERT_EQ(run_cli("score --in " + (d / "m.csv").string(), d / "log"), 0) << slurp(d / "log");
  const long double oracle = std::sqrt(1.5L) - 1.0L;  // exp(mean(ln(1 + 100 p))) - 1 over {50%, 0%}
  const std::string text = slurp(d / "log");
  const auto line = text.find("MB->MF,1,");
  ASSERT_NE(line, std::string::npos) << text;
  const double printed = std::stod(text.substr(line + 9));
  EXPECT_NEAR(printed, static_cast<double>(oracle), 1e-9);
}
