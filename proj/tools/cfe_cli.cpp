// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 runtime failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cfe/experiment.hpp"
#include "cfe/runtime.hpp"

namespace fs = std::filesystem;
using namespace cfe;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

fs::path resolve_out(const std::string& flag, const ExperimentConfig& c) {
  if (!flag.empty()) return flag;
  if (!c.output_dir.empty()) return c.output_dir;
  throw ConfigError("no output directory: pass --out or set output_dir in the config");
}

void print_report(const EvaluationReport& r) { write_report_csv(std::cout, r.rows); }

int cmd_cluster(const std::vector<std::string>& inputs, std::size_t k, const std::string& rule, std::size_t id,
                const fs::path& out) {
  std::vector<BuildingProfile> profiles;
  for (const auto& in : inputs)
    for (auto& p : load_profiles_csv(in)) profiles.push_back(std::move(p));
  if (rule != "smallest" && rule != "by_id") throw ConfigError("--holdout-rule must be 'smallest' or 'by_id'");
  const auto r = cluster_profiles(profiles, k, rule == "smallest" ? HoldoutRule::Smallest : HoldoutRule::ById, id);
  write_cluster_files(out, r);
  for (std::size_t i = 0; i < r.names.size(); ++i)
    std::cout << r.names[i] << ',' << r.assignment.labels[i]
              << (r.assignment.labels[i] == r.split.holdout_cluster ? ",holdout" : ",train") << '\n';
  return 0;
}

int cmd_meta_train(const ExperimentConfig& c, const fs::path& out) {
  if (!is_meta_variant(c.variant))
    throw ConfigError("meta-train needs a meta variant (cfe, reptile, reptile_ar, reptile_fe), got " +
                      to_string(c.variant));
  stage("config", [&] {
    fs::create_directories(out);
    io::open_out(out / "config.json") << config_to_json(c).dump(2) << '\n';
  });
  const auto setup = stage("cluster", [&] {
    auto s = prepare_tasks(c);
    write_cluster_files(out, s.clusters);
    return s;
  });
  const auto meta = stage("meta-train", [&] { return run_meta_training(c, setup.train, out); });
  stage("report", [&] {
    auto os = io::open_out(out / ("gradnorm_" + to_string(c.variant) + ".csv"));
    write_grad_norms(os, meta.grad_norms);
  });
  std::cout << "meta-trained " << meta.t_phi << " iterations; checkpoint "
            << checkpoint_dir(out, meta.t_phi).string() << '\n';
  return 0;
}

// `key` is either the task hash or "<building_id>@<start_hour>".
std::optional<std::size_t> find_task(const TaskPool& pool, const std::string& key) {
  if (auto i = pool.find(key)) return i;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool.tasks[i].spec.profile_id + "@" + std::to_string(pool.tasks[i].spec.start_hour) == key) return i;
  return std::nullopt;
}

int cmd_meta_test(const fs::path& ckpt, const std::string& config_flag, const std::string& key, std::size_t budget,
                  std::uint64_t seed, const std::string& out_flag) {
  // <run>/checkpoints/<t_phi>/ -> <run>/config.json
  const auto dir = ckpt.has_filename() ? ckpt : ckpt.parent_path();
  const fs::path config_path = config_flag.empty() ? dir.parent_path().parent_path() / "config.json" : fs::path(config_flag);
  const auto c = load_config(config_path);
  const auto loaded = stage("load", [&] { return load_checkpoint(dir); });
  const auto pool = stage("tasks", [&] { return TaskPool::weekly(build_profiles(c)); });
  const auto idx = find_task(pool, key);
  if (!idx) throw ConfigError("no task '" + key + "' in the configured task source");
  const auto updates = budget / c.ppo().n_steps;
  if (updates == 0) throw ConfigError("--budget is smaller than one rollout of " + std::to_string(c.ppo().n_steps));
  const auto& task = pool.tasks[*idx];
  const auto r = stage("meta-test", [&] {
    return meta_test_adapt(loaded.meta, pool.profiles[task.profile], task.spec, c.env, updates, c.ppo(), seed);
  });
  if (out_flag.empty()) {
    write_adapt_log(std::cout, r.log);
  } else {
    auto os = io::open_out(fs::path(out_flag) / "curves" / ("meta-test_" + std::to_string(seed) + ".csv"));
    write_adapt_log(os, r.log);
    io::save_param_vector(fs::path(out_flag) / "adapted", flatten_params(r.params));
    std::cout << "task " << task.spec.key << " final mean reward " << format_number(r.log.back().mean_reward) << '\n';
  }
  return 0;
}

int cmd_run(ExperimentConfig c, const std::optional<std::string>& variant, const std::string& out_flag,
            bool baselines_only) {
  if (variant) {
    c.variant = parse_variant(*variant);
    apply_variant(c.variant, c.meta);
  }
  if (baselines_only && is_meta_variant(c.variant))
    throw ConfigError("baseline takes random, pretrained or rbc; use run or meta-train for " + to_string(c.variant));
  const auto r = run_experiment(c, resolve_out(out_flag, c));
  print_report(r.report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Meta-RL building energy management experiments"};
  app.require_subcommand(1);

  std::vector<std::string> inputs, runs;
  std::string out, config, rule = "smallest", task, variant, checkpoint;
  std::size_t n_clusters = 3, holdout_id = 0, budget = 100000;
  std::uint64_t seed = 0;

  std::string archetype = "residential";
  std::size_t weeks = 4;
  auto* synth = app.add_subcommand("synth", "Write a synthetic building profile as CSV");
  synth->add_option("--archetype", archetype, "residential, office or industrial")->capture_default_str();
  synth->add_option("--weeks", weeks, "Length in weeks")->capture_default_str();
  synth->add_option("--seed", seed, "Generator seed")->capture_default_str();
  synth->add_option("--out", out, "CSV path")->required();

  auto* cluster = app.add_subcommand("cluster", "Cluster building profiles and write the holdout split");
  cluster->add_option("--input", inputs, "Profile CSV files")->required()->expected(1, -1);
  cluster->add_option("--n-clusters", n_clusters, "Number of clusters")->capture_default_str();
  cluster->add_option("--holdout-rule", rule, "smallest or by_id")->capture_default_str();
  cluster->add_option("--holdout-cluster", holdout_id, "Cluster id for by_id")->capture_default_str();
  cluster->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("meta-train", "Meta-train a meta variant");
  train->add_option("--config", config, "Experiment JSON")->required();
  train->add_option("--out", out, "Output directory");

  auto* test = app.add_subcommand("meta-test", "Adapt from a checkpoint on one unseen task");
  test->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  test->add_option("--task", task, "Task key or <building>@<start_hour>")->required();
  test->add_option("--budget", budget, "Environment steps")->capture_default_str();
  test->add_option("--config", config, "Experiment JSON (default: the run's config.json)");
  test->add_option("--seed", seed, "Adaptation seed")->capture_default_str();
  test->add_option("--out", out, "Output directory (default: curve to stdout)");

  auto* baseline = app.add_subcommand("baseline", "Run a non-meta baseline end to end");
  baseline->add_option("--variant", variant, "random, pretrained or rbc")->required();
  baseline->add_option("--config", config, "Experiment JSON")->required();
  baseline->add_option("--out", out, "Output directory");

  auto* run = app.add_subcommand("run", "Run any variant end to end");
  run->add_option("--config", config, "Experiment JSON")->required();
  run->add_option("--variant", variant, "Override the configured variant");
  run->add_option("--out", out, "Output directory");

  auto* report = app.add_subcommand("report", "Merge run directories into one report");
  report->add_option("--runs", runs, "Run directories")->required()->expected(1, -1);
  report->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) {
      const auto p = generate_synthetic_profile(parse_archetype(archetype), seed, weeks);
      if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
      write_profile_csv(p, out);
      std::cout << p.id << '\n';
      return 0;
    }
    if (*cluster) return cmd_cluster(inputs, n_clusters, rule, holdout_id, out);
    if (*train) {
      const auto c = load_config(config);
      return cmd_meta_train(c, resolve_out(out, c));
    }
    if (*test) return cmd_meta_test(checkpoint, config, task, budget, seed, out);
    if (*baseline) return cmd_run(load_config(config), variant, out, true);
    if (*run) return cmd_run(load_config(config), variant.empty() ? std::nullopt : std::optional(variant), out, false);
    if (*report) {
      std::vector<fs::path> dirs(runs.begin(), runs.end());
      merge_runs(dirs, out);
      write_report_csv(std::cout, read_report_csv(fs::path(out) / "report.csv"));
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return 0;
}
