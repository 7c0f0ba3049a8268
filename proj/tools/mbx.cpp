// mbx: command-line front end for pretraining, fine-tuning, the transfer grid, evaluation and
// result aggregation. Exit status: 0 ok, 1 runtime failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mbx/training.hpp"

namespace {

using namespace mbx;

struct Common {
  std::string config;
  std::string env = "microcraft";
  std::uint64_t seed = 0;
  std::string out = "runs";
  std::int64_t budget = -1;
  int task = -1;
  bool wall_time = false;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

ExperimentConfig resolve_config(const Common& c) {
  ExperimentConfig cfg;
  if (!c.config.empty()) {
    cfg = load_config(c.config);
  } else if (c.env == "microcraft") {
    cfg = ExperimentConfig::desk_preset(EnvKind::MicroCraft);
  } else if (c.env == "pointdesk") {
    cfg = ExperimentConfig::desk_preset(EnvKind::PointDesk);
  } else {
    throw UsageError("unknown --env '" + c.env + "' (microcraft|pointdesk)");
  }
  if (c.task >= 0) cfg.task = c.task;
  cfg.validate();
  return cfg;
}

std::uint64_t resolve_seed(const Common& c) {
  if (const char* s = std::getenv("MBX_SEED"); s && *s) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(s, &used);
      if (used != std::string(s).size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw UsageError(std::string("MBX_SEED is not an unsigned integer: '") + s + "'");
    }
  }
  return c.seed;
}

void add_common(CLI::App* app, Common& c, bool with_task) {
  app->add_option("--config", c.config, "experiment config file")->check(CLI::ExistingFile);
  app->add_option("--env", c.env, "environment when no config is given (microcraft|pointdesk)");
  app->add_option("--seed", c.seed, "run seed (MBX_SEED overrides)");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--budget", c.budget, "environment steps (default: from config)")->check(CLI::NonNegativeNumber);
  app->add_flag("--wall-time", c.wall_time, "record wall-clock seconds in the CSV (otherwise 0)");
  if (with_task) app->add_option("--task", c.task, "task id for fine-tuning")->check(CLI::NonNegativeNumber);
}

void print_summary(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

std::vector<MetricRow> read_all(const std::vector<std::string>& files) {
  std::vector<MetricRow> rows;
  for (const auto& f : files) {
    auto r = read_metrics_csv(f);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (rows.empty()) throw std::runtime_error("no metric rows in the given files");
  return rows;
}

std::vector<std::string> expand_inputs(const std::vector<std::string>& in) {
  std::vector<std::string> files;
  for (const auto& p : in) {
    if (std::filesystem::is_directory(p)) {
      for (const auto& e : std::filesystem::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().filename() == "metrics.csv") files.push_back(e.path().string());
    } else {
      files.push_back(p);
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mbx: model-based transfer experiments on toy environments"};
  app.require_subcommand(1);

  Common pre, fine, abl, grd, ev;
  std::string pre_kind = "MB";
  std::int64_t stop_after = -1;
  auto* c_pre = app.add_subcommand("pretrain", "reward-free RND pretraining");
  add_common(c_pre, pre, false);
  c_pre->add_option("--kind", pre_kind, "MB, MF or random");
  c_pre->add_option("--stop-after", stop_after, "stop at the first episode boundary past this step (resumable)");

  std::string fine_arm, fine_source;
  auto* c_fine = app.add_subcommand("finetune", "fine-tune one transfer arm on task reward");
  add_common(c_fine, fine, true);
  c_fine->add_option("--arm", fine_arm, "arm name, e.g. MB->MB, Scratch, OE+PH")->required();
  c_fine->add_option("--source", fine_source, "pretraining checkpoint");
  c_fine->add_option("--stop-after", stop_after, "stop at the first episode boundary past this step (resumable)");

  std::string abl_source;
  auto* c_abl = app.add_subcommand("ablate", "fine-tune every component-ablation arm from one MB checkpoint");
  add_common(c_abl, abl, true);
  c_abl->add_option("--source", abl_source, "MB pretraining checkpoint")->required();

  std::vector<std::string> grid_arms;
  std::vector<std::uint64_t> grid_seeds;
  bool grid_pretrain = false;
  auto* c_grid = app.add_subcommand("grid", "run the transfer grid under --out");
  add_common(c_grid, grd, true);
  c_grid->add_option("--arms", grid_arms, "arms (default: MB->MB MB->MF MF->MB MF->MF Scratch)");
  c_grid->add_option("--seeds", grid_seeds, "seeds (default: --seed)");
  c_grid->add_flag("--pretrain", grid_pretrain, "run missing pretraining sources first");
  std::int64_t grid_pretrain_budget = -1;
  c_grid->add_option("--pretrain-budget", grid_pretrain_budget, "pretraining steps when --pretrain is set");

  std::string ev_ckpt, ev_mode = "task";
  std::int64_t ev_episodes = 10;
  auto* c_eval = app.add_subcommand("eval", "greedy rollouts of a checkpoint");
  add_common(c_eval, ev, true);
  c_eval->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  c_eval->add_option("--episodes", ev_episodes, "episodes")->check(CLI::PositiveNumber);
  c_eval->add_option("--mode", ev_mode, "task or pretrain");

  std::vector<std::string> score_in;
  auto* c_score = app.add_subcommand("score", "final Crafter-style score per arm from metric CSVs");
  c_score->add_option("--in,inputs", score_in, "CSV files or directories")->required();

  std::vector<std::string> plot_in;
  std::string plot_out = "plots";
  auto* c_plot = app.add_subcommand("plot", "SVG learning curves (median over seeds with a std band)");
  c_plot->add_option("--in,inputs", plot_in, "CSV files or directories")->required();
  c_plot->add_option("--out", plot_out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (c_pre->parsed()) {
      const ExperimentConfig cfg = resolve_config(pre);
      std::optional<AgentKind> kind;
      if (pre_kind != "random") {
        try {
          kind = parse_agent_kind(pre_kind);
        } catch (const std::exception&) {
          throw UsageError("unknown --kind '" + pre_kind + "' (MB|MF|random)");
        }
      }
      RunRequest req{resolve_seed(pre), pre.out, pre.budget, pre.wall_time, stop_after};
      const PhaseSummary s = run_pretraining(cfg, kind, req);
      print_summary(s.to_json());
    } else if (c_fine->parsed()) {
      const ExperimentConfig cfg = resolve_config(fine);
      const ArmSpec* arm = nullptr;
      try {
        arm = &find_arm(fine_arm);
      } catch (const std::exception& e) {
        throw UsageError(e.what());
      }
      RunRequest req{resolve_seed(fine), fine.out, fine.budget, fine.wall_time, stop_after};
      const ArmResult r = run_finetuning(cfg, *arm, fine_source, req);
      print_summary(r.summary.to_json());
    } else if (c_abl->parsed()) {
      const ExperimentConfig cfg = resolve_config(abl);
      const std::uint64_t seed = resolve_seed(abl);
      for (const auto& name : ablation_arm_names()) {
        const ArmSpec& arm = find_arm(name);
        RunRequest req{seed, (std::filesystem::path(abl.out) / arm_dir_name(arm.name)).string(), abl.budget,
                       abl.wall_time, -1};
        const ArmResult r = run_finetuning(cfg, arm, abl_source, req);
        std::cout << arm.name << " score " << format_double(r.summary.last_row.score) << '\n';
      }
    } else if (c_grid->parsed()) {
      const ExperimentConfig cfg = resolve_config(grd);
      if (grid_arms.empty()) grid_arms = q1_arm_names();
      if (grid_seeds.empty()) grid_seeds = {resolve_seed(grd)};
      for (const auto& a : grid_arms) {
        try {
          find_arm(a);
        } catch (const std::exception& e) {
          throw UsageError(e.what());
        }
      }
      if (grid_pretrain) {
        for (const auto& a : grid_arms) {
          const ArmSpec& arm = find_arm(a);
          if (arm.scratch) continue;
          for (std::uint64_t s : grid_seeds)
            if (!std::filesystem::exists(source_checkpoint_path(grd.out, arm.source_kind, s)))
              run_pretraining(cfg, arm.source_kind,
                              {s, pretrain_dir(grd.out, arm.source_kind, s).string(), grid_pretrain_budget,
                               grd.wall_time, -1});
        }
      }
      const auto rows = run_experiment_grid(cfg, grid_arms, grid_seeds, grd.out, grd.budget, grd.wall_time);
      std::cout << "arm,seed,final_score,final_return,csv\n";
      for (const auto& r : rows)
        std::cout << csv_quote(r.arm) << ',' << r.seed << ',' << format_double(r.final_score) << ','
                  << format_double(r.final_return) << ',' << csv_quote(r.csv_path) << '\n';
    } else if (c_eval->parsed()) {
      const ExperimentConfig cfg = resolve_config(ev);
      if (ev_mode != "task" && ev_mode != "pretrain") throw UsageError("unknown --mode '" + ev_mode + "'");
      const Agent agent = load_checkpoint(ev_ckpt, cfg.network());
      const EnvMode mode = ev_mode == "task" ? EnvMode::finetune(cfg.task) : EnvMode::pretrain();
      print_summary(evaluate_agent(agent, cfg, mode, ev_episodes, resolve_seed(ev)).to_json());
    } else if (c_score->parsed()) {
      const auto rows = read_all(expand_inputs(score_in));
      std::cout << "arm,seeds,median_score,std_score\n";
      for (const auto& [arm, scores] : final_scores(rows))
        std::cout << csv_quote(arm) << ',' << scores.size() << ',' << format_double(median(scores)) << ','
                  << format_double(stddev(scores)) << '\n';
    } else if (c_plot->parsed()) {
      const auto rows = read_all(expand_inputs(plot_in));
      std::filesystem::create_directories(plot_out);
      struct Metric {
        const char* name;
        double (*get)(const MetricRow&);
      };
      const Metric metrics[] = {
          {"score", [](const MetricRow& r) { return r.score; }},
          {"return", [](const MetricRow& r) { return r.episode_return; }},
          {"unique_states", [](const MetricRow& r) { return static_cast<double>(r.unique_states); }},
          {"l_pi", [](const MetricRow& r) { return r.l_pi; }},
          {"l_v", [](const MetricRow& r) { return r.l_v; }},
          {"l_r", [](const MetricRow& r) { return r.l_r; }},
          {"l_spr", [](const MetricRow& r) { return r.l_spr; }},
      };
      for (const auto& m : metrics) {
        const auto path = std::filesystem::path(plot_out) / (std::string(m.name) + ".svg");
        std::ofstream out(path);
        out << render_svg(aggregate_curves(rows, m.get), m.name, m.name);
        if (!out) throw std::runtime_error("cannot write " + path.string());
        std::cout << path.string() << '\n';
      }
    }
  } catch (const UsageError& e) {
    std::cerr << "mbx: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "mbx: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mbx: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
