#pragma once

// End-to-end runs: task pool and clustering, meta-training or pretraining,
// seeded adaptation on the held-out cluster, and the CSV report.
//
// Run directory layout:
//   config.json            resolved configuration
//   clusters.json          labels, merge tree, holdout
//   distances.csv          building distance matrix
//   train_log.csv          one row per meta-iteration (meta variants)
//   checkpoints/<t_phi>/   meta-state snapshots (meta variants)
//   pretrain_log.csv, pretrained.{json,bin}   (pretrained variant)
//   report.csv, curves/<variant>_<seed>.csv, gradnorm_<variant>.csv

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfe/config.hpp"
#include "cfe/meta.hpp"
#include "cfe/metrics.hpp"
#include "cfe/param_io.hpp"
#include "cfe/ppo.hpp"
#include "cfe/profiles.hpp"
#include "cfe/task_prep.hpp"

namespace cfe {

// Tags an error with the pipeline stage it came from, keeping its exit class.
template <class Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError("[" + name + "] " + e.what());
  } catch (const std::exception& e) {
    throw Error("[" + name + "] " + e.what());
  }
}

inline std::string format_number(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", x);
  return buf;
}

// ---------------------------------------------------------------- tasks ----

inline std::vector<BuildingProfile> build_profiles(const ExperimentConfig& c) {
  std::vector<BuildingProfile> out;
  if (!c.tasks.csv.empty()) {
    for (const auto& path : c.tasks.csv)
      for (auto& p : load_profiles_csv(path)) out.push_back(std::move(p));
  } else {
    for (std::size_t a = 0; a < c.tasks.archetypes.size(); ++a)
      for (std::size_t b = 0; b < c.tasks.buildings_per_archetype; ++b)
        out.push_back(generate_synthetic_profile(parse_archetype(c.tasks.archetypes[a]),
                                                 derive_seed({c.tasks.profile_seed, a, b}), c.tasks.weeks));
  }
  std::set<std::string> ids;
  for (const auto& p : out)
    if (!ids.insert(p.id).second) throw ConfigError("duplicate building id " + p.id);
  return out;
}

struct ClusterResult {
  std::vector<std::string> names;
  DistanceMatrix distances;
  ClusterAssignment assignment;
  HoldoutSplit split;
};

inline ClusterResult cluster_profiles(const std::vector<BuildingProfile>& profiles, std::size_t n_clusters,
                                      HoldoutRule rule, std::size_t holdout_cluster) {
  if (n_clusters > profiles.size())
    throw ConfigError("n_clusters (" + std::to_string(n_clusters) + ") exceeds the number of buildings (" +
                      std::to_string(profiles.size()) + ")");
  ClusterResult r;
  std::vector<SpectralSignature> sigs;
  for (const auto& p : profiles) {
    r.names.push_back(p.id);
    sigs.push_back(building_signature(p));
  }
  r.distances = cosine_distance_matrix(sigs, r.names);
  r.assignment = hac_average_linkage(r.distances, n_clusters);
  r.split = assign_holdout(r.assignment, rule, holdout_cluster);
  return r;
}

inline void write_cluster_files(const std::filesystem::path& dir, const ClusterResult& r) {
  json merges = json::array();
  for (const auto& m : r.assignment.merges)
    merges.push_back({{"a", m.a}, {"b", m.b}, {"distance", m.distance}, {"size", m.size}});
  std::vector<std::string> train, holdout;
  for (auto i : r.split.train) train.push_back(r.names[i]);
  for (auto i : r.split.holdout) holdout.push_back(r.names[i]);
  const json doc{{"buildings", r.names},       {"labels", r.assignment.labels},
                 {"n_clusters", r.assignment.n_clusters}, {"merges", merges},
                 {"holdout_cluster", r.split.holdout_cluster}, {"holdout", holdout},
                 {"train", train}};
  io::open_out(dir / "clusters.json") << doc.dump(2) << '\n';
  auto os = io::open_out(dir / "distances.csv");
  write_distance_csv(os, r.distances, r.names);
}

struct TaskSetup {
  ClusterResult clusters;
  TaskPool train;
  TaskPool holdout;
};

inline TaskSetup prepare_tasks(const ExperimentConfig& c) {
  TaskSetup s;
  const auto pool = TaskPool::weekly(build_profiles(c));
  s.clusters = cluster_profiles(pool.profiles, c.n_clusters, c.holdout_rule, c.holdout_cluster);
  std::set<std::string> held;
  for (auto i : s.clusters.split.holdout) held.insert(s.clusters.names[i]);
  s.train = pool.filter_profiles(held, false);
  s.holdout = pool.filter_profiles(held, true);
  if (s.train.size() == 0 || s.holdout.size() == 0) throw ConfigError("holdout split leaves an empty task pool");
  return s;
}

// ------------------------------------------------------------- training ----

inline AgentSpec agent_spec(const ExperimentConfig& c) { return AgentSpec::standard(kObsDim, c.env.n_bins, c.width); }

inline std::filesystem::path checkpoint_dir(const std::filesystem::path& out, std::size_t t_phi) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06zu", t_phi);
  return out / "checkpoints" / buf;
}

inline MetaState run_meta_training(const ExperimentConfig& c, const TaskPool& train,
                                   const std::filesystem::path& out) {
  auto log = io::open_out(out / "train_log.csv");
  write_meta_log_header(log);
  MetaTrainHooks hooks;
  hooks.on_iteration = [&](const MetaLogRow& r) { write_meta_log_row(log, r); };
  hooks.on_checkpoint = [&](const MetaState& m) { save_checkpoint(checkpoint_dir(out, m.t_phi), m, c.master_seed); };
  const auto init = MetaState::init(agent_spec(c), c.meta, derive_seed({c.master_seed, fnv1a("meta-init")}));
  return meta_train(train, c.env, c.meta, init, c.master_seed, hooks);
}

// Multi-task PPO: one update per training task in round-robin order, with a
// single optimizer state carried throughout.
inline AgentParams run_pretraining(const ExperimentConfig& c, const TaskPool& train,
                                   const std::filesystem::path& out) {
  const auto spec = agent_spec(c);
  const auto& cfg = c.ppo();
  auto params = AgentParams::init(spec, derive_seed({c.master_seed, fnv1a("pretrain-init")}));
  auto opt = AgentOptimizer::make(params, cfg);
  Rng rng(derive_seed({c.master_seed, fnv1a("pretrain")}));
  std::vector<AdaptLogRow> log;
  const std::size_t total = c.pretrain_total();
  for (std::size_t u = 1; u <= total; ++u) {
    const auto& task = train.tasks[(u - 1) % train.size()];
    Episode env(train.profiles[task.profile], task.spec, c.env);
    const auto buffer = collect_rollout(env, params, spec, cfg.n_steps, rng);
    const auto st = ppo_update(params, opt, spec, buffer, cfg, rng);
    log.push_back({u, u * cfg.n_steps, buffer.mean_reward(), st.actor_loss, st.critic_loss, st.entropy});
  }
  auto os = io::open_out(out / "pretrain_log.csv");
  write_adapt_log(os, log);
  io::save_param_vector(out / "pretrained", flatten_params(params));
  return params;
}

// ----------------------------------------------------------- evaluation ----

struct SeedOutcome {
  std::string task_key;
  std::vector<AdaptLogRow> curve;
  double threshold = 0.0;
  std::optional<std::size_t> updates_to_threshold;
  std::map<std::size_t, EvalMetrics> at_checkpoint;  // by update index
  EvalMetrics final_metrics;
  EvalMetrics rbc;  // same horizon, same task
};

// Sums per-week metrics over consecutive weeks starting at the task's week,
// wrapping inside the profile.
template <class Eval>
EvalMetrics evaluate_horizon(const BuildingProfile& profile, const TaskSpec& task, std::size_t weeks,
                             double cycle_eps, Eval&& eval) {
  EvalMetrics total;
  const std::size_t n_weeks = profile.weeks();
  const std::size_t first = task.start_hour / kHoursPerWeek;
  for (std::size_t w = 0; w < weeks; ++w) {
    const auto start = ((first + w) % n_weeks) * kHoursPerWeek;
    const auto t = w == 0 ? task : TaskSpec::make(profile.id, start);
    const auto m = measure(eval(t, w), cycle_eps);
    total.cycles += m.cycles;
    total.ramping += m.ramping;
    total.cost += m.cost;
    total.mean_reward += m.mean_reward / static_cast<double>(weeks);
  }
  return total;
}

// Learner adaptation: (profile, task, updates, seed, hook) -> AdaptResult.
using Adapter = std::function<AdaptResult(const BuildingProfile&, const TaskSpec&, std::size_t, std::uint64_t,
                                          const UpdateHook&)>;

inline std::uint64_t test_seed(const ExperimentConfig& c, std::size_t s) {
  return derive_seed({c.master_seed, fnv1a("meta-test"), s});
}

inline std::vector<std::size_t> active_checkpoints(const ExperimentConfig& c) {
  std::set<std::size_t> cps;
  for (auto u : c.eval.checkpoints)
    if (u >= 1 && u <= c.test_updates()) cps.insert(u);
  return {cps.begin(), cps.end()};
}

inline SeedOutcome evaluate_seed(const ExperimentConfig& c, const TaskPool& holdout, std::size_t s,
                                 const Adapter* adapt) {
  const auto spec = agent_spec(c);
  const auto& task = holdout.tasks[s % holdout.size()];
  const auto& profile = holdout.profiles[task.profile];
  const double eps = c.eval.cycle_eps_fraction * profile.esu_capacity;
  const std::size_t weeks = c.eval.horizon_weeks;
  const auto seed = test_seed(c, s);

  SeedOutcome o;
  o.task_key = task.spec.key;
  o.rbc = evaluate_horizon(profile, task.spec, weeks, eps,
                           [&](const TaskSpec& t, std::size_t) { return evaluate_rbc(profile, t, c.env); });
  if (!adapt) {
    for (auto u : active_checkpoints(c)) o.at_checkpoint[u] = o.rbc;
    o.final_metrics = o.rbc;
    return o;
  }

  double uniform = 0.0;
  for (std::size_t e = 0; e < c.eval.uniform_episodes; ++e) {
    Rng rng(derive_seed({c.master_seed, fnv1a("uniform"), task_hash(task.spec.key), e}));
    uniform += evaluate_uniform(profile, task.spec, c.env, rng).mean_reward();
  }
  uniform /= static_cast<double>(c.eval.uniform_episodes);
  o.threshold = reward_threshold(uniform, evaluate_rbc(profile, task.spec, c.env).mean_reward(),
                                 c.eval.threshold_fraction);

  const auto cps = active_checkpoints(c);
  const auto agent_eval = [&](const AgentParams& p, std::size_t u) {
    return evaluate_horizon(profile, task.spec, weeks, eps, [&](const TaskSpec& t, std::size_t w) {
      Rng rng(derive_seed({seed, 3, u, w}));
      return evaluate_agent(profile, t, c.env, p, spec, rng);
    });
  };
  const UpdateHook hook = [&](std::size_t u, const AgentParams& p, const RolloutBuffer&) {
    if (std::binary_search(cps.begin(), cps.end(), u)) o.at_checkpoint[u] = agent_eval(p, u);
  };
  const auto updates = c.test_updates();
  auto r = (*adapt)(profile, task.spec, updates, seed, hook);
  o.curve = std::move(r.log);
  o.final_metrics = o.at_checkpoint.contains(updates) ? o.at_checkpoint.at(updates) : agent_eval(r.params, updates);

  std::vector<double> rewards;
  for (const auto& row : o.curve) rewards.push_back(row.mean_reward);
  o.updates_to_threshold = updates_to_threshold(rewards, o.threshold, c.eval.trailing_window);
  return o;
}

// --------------------------------------------------------------- report ----

struct ReportRow {
  std::string variant;
  std::string metric;
  double value = 0.0;
  std::optional<double> rbc_normalized;
};

struct CurveFile {
  std::string variant;
  std::size_t seed = 0;
  std::vector<AdaptLogRow> rows;
};

struct EvaluationReport {
  std::vector<ReportRow> rows;
  std::vector<CurveFile> curves;
  std::map<std::string, std::vector<double>> grad_norms;  // by variant
};

inline constexpr std::size_t kGradNormSmoothing = 10;

inline void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows) {
  os << "variant,metric,value,rbc_normalized\n";
  for (const auto& r : rows)
    os << r.variant << ',' << r.metric << ',' << format_number(r.value) << ','
       << (r.rbc_normalized ? format_number(*r.rbc_normalized) : "") << '\n';
}

inline void write_grad_norms(std::ostream& os, const std::vector<double>& g) {
  os << "t_phi,grad_norm,smoothed\n";
  const auto sm = trailing_mean(g, kGradNormSmoothing);
  for (std::size_t i = 0; i < g.size(); ++i)
    os << i + 1 << ',' << format_number(g[i]) << ',' << format_number(sm[i]) << '\n';
}

inline void emit_report(const EvaluationReport& rep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    auto os = io::open_out(dir / "report.csv");
    write_report_csv(os, rep.rows);
  }
  for (const auto& c : rep.curves) {
    auto os = io::open_out(dir / "curves" / (c.variant + "_" + std::to_string(c.seed) + ".csv"));
    write_adapt_log(os, c.rows);
  }
  for (const auto& [variant, g] : rep.grad_norms) {
    auto os = io::open_out(dir / ("gradnorm_" + variant + ".csv"));
    write_grad_norms(os, g);
  }
}

inline std::vector<ReportRow> read_report_csv(const std::filesystem::path& path) {
  auto is = io::open_in(path);
  std::string line;
  if (!std::getline(is, line) || line != "variant,metric,value,rbc_normalized")
    throw IngestionError(path.string() + ": not a report file");
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 4) throw IngestionError(path.string() + ": malformed row '" + line + "'");
    ReportRow r{cells[0], cells[1], std::stod(cells[2]), std::nullopt};
    if (!cells[3].empty()) r.rbc_normalized = std::stod(cells[3]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// Ratio of means against the rule-based controller on the same tasks; absent
// when the controller scores zero.
inline std::optional<double> rbc_ratio(double value, double rbc) {
  if (!(rbc > 0.0)) return std::nullopt;
  return normalize_to_rbc(value, rbc);
}

inline std::vector<ReportRow> summarize(const ExperimentConfig& c, const std::vector<SeedOutcome>& seeds) {
  const auto name = to_string(c.variant);
  const bool learns = c.variant != Variant::Rbc;
  std::vector<ReportRow> rows;
  const auto avg = [&](auto&& get) {
    std::vector<double> v;
    for (const auto& o : seeds) v.push_back(get(o));
    return mean(v);
  };
  if (learns) {
    const double budget = static_cast<double>(c.test_updates() * c.ppo().n_steps);
    std::vector<double> steps;
    double censored = 0.0;
    for (const auto& o : seeds) {
      if (o.updates_to_threshold) {
        steps.push_back(static_cast<double>(*o.updates_to_threshold * c.ppo().n_steps));
      } else {
        steps.push_back(budget);
        censored += 1.0;
      }
    }
    rows.push_back({name, "steps_to_threshold", median(steps), std::nullopt});
    rows.push_back({name, "steps_to_threshold_censored", censored, std::nullopt});
    rows.push_back({name, "final_mean_reward", avg([](const SeedOutcome& o) { return o.curve.back().mean_reward; }),
                    std::nullopt});
  }
  for (auto u : active_checkpoints(c)) {
    const double v = avg([&](const SeedOutcome& o) { return o.at_checkpoint.at(u).cycles; });
    const double r = avg([](const SeedOutcome& o) { return o.rbc.cycles; });
    rows.push_back({name, "cycles_at_" + std::to_string(u), v, rbc_ratio(v, r)});
  }
  const double ramp = avg([](const SeedOutcome& o) { return o.final_metrics.ramping; });
  rows.push_back({name, "ramping", ramp, rbc_ratio(ramp, avg([](const SeedOutcome& o) { return o.rbc.ramping; }))});
  const double cost = avg([](const SeedOutcome& o) { return o.final_metrics.cost; });
  rows.push_back(
      {name, "financial_cost", cost, rbc_ratio(cost, avg([](const SeedOutcome& o) { return o.rbc.cost; }))});
  rows.push_back({name, "evaluation_weeks", static_cast<double>(c.eval.horizon_weeks), std::nullopt});
  return rows;
}

// ------------------------------------------------------------- pipeline ----

struct RunResult {
  EvaluationReport report;
  std::vector<SeedOutcome> seeds;
  std::optional<MetaState> meta;
};

inline RunResult run_experiment(const ExperimentConfig& c, const std::filesystem::path& out) {
  stage("config", [&] {
    c.validate();
    std::filesystem::create_directories(out);
    io::open_out(out / "config.json") << config_to_json(c).dump(2) << '\n';
  });
  const auto setup = stage("cluster", [&] {
    auto s = prepare_tasks(c);
    write_cluster_files(out, s.clusters);
    return s;
  });

  RunResult result;
  const auto name = to_string(c.variant);
  Adapter adapt;
  if (is_meta_variant(c.variant)) {
    result.meta = stage("meta-train", [&] { return run_meta_training(c, setup.train, out); });
    result.report.grad_norms[name] = result.meta->grad_norms;
    adapt = [&meta = *result.meta, &c](const BuildingProfile& p, const TaskSpec& t, std::size_t updates,
                                       std::uint64_t seed, const UpdateHook& hook) {
      return meta_test_adapt(meta, p, t, c.env, updates, c.ppo(), seed, hook);
    };
  } else if (c.variant == Variant::Random || c.variant == Variant::Pretrained) {
    std::optional<AgentParams> start;
    if (c.variant == Variant::Pretrained)
      start = stage("pretrain", [&] { return run_pretraining(c, setup.train, out); });
    adapt = [start, &c](const BuildingProfile& p, const TaskSpec& t, std::size_t updates, std::uint64_t seed,
                        const UpdateHook& hook) {
      const auto spec = agent_spec(c);
      const auto init = start ? *start : AgentParams::init(spec, derive_seed({seed, 1}));
      Rng rng(derive_seed({seed, 2}));
      return inner_adapt(p, t, c.env, init, spec, updates, c.ppo(), rng, hook);
    };
  }

  result.seeds = stage("meta-test", [&] {
    std::vector<SeedOutcome> seeds(c.eval.seeds);
    parallel_for(seeds.size(), c.meta.threads,
                 [&](std::size_t s) { seeds[s] = evaluate_seed(c, setup.holdout, s, adapt ? &adapt : nullptr); });
    return seeds;
  });
  stage("report", [&] {
    result.report.rows = summarize(c, result.seeds);
    if (adapt)
      for (std::size_t s = 0; s < result.seeds.size(); ++s)
        result.report.curves.push_back({name, s, result.seeds[s].curve});
    emit_report(result.report, out);
  });
  return result;
}

// Concatenates the reports of several run directories, copying their curves
// and gradient-norm files.
inline void merge_runs(const std::vector<std::filesystem::path>& runs, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  std::vector<ReportRow> rows;
  for (const auto& r : runs) {
    auto part = read_report_csv(r / "report.csv");
    rows.insert(rows.end(), part.begin(), part.end());
  }
  fs::create_directories(out / "curves");
  for (const auto& r : runs) {
    if (fs::weakly_canonical(r) == fs::weakly_canonical(out)) continue;
    if (fs::is_directory(r / "curves"))
      for (const auto& e : fs::directory_iterator(r / "curves"))
        fs::copy_file(e.path(), out / "curves" / e.path().filename(), fs::copy_options::overwrite_existing);
    for (const auto& e : fs::directory_iterator(r))
      if (e.path().filename().string().starts_with("gradnorm_"))
        fs::copy_file(e.path(), out / e.path().filename(), fs::copy_options::overwrite_existing);
  }
  auto os = io::open_out(out / "report.csv");
  write_report_csv(os, rows);
}

}  // namespace cfe
