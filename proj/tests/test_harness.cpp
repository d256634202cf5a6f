#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cfe/experiment.hpp"

namespace fs = std::filesystem;
using namespace cfe;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cfe_harness_" + name);
  fs::remove_all(p);
  return p;
}

// Adjacent (charge, discharge) pairs after dropping sub-threshold samples.
std::size_t cycles_oracle(const std::vector<double>& f, double eps) {
  std::vector<int> signs;
  for (double x : f)
    if (std::abs(x) > eps) signs.push_back(x > 0 ? 1 : -1);
  std::size_t n = 0;
  for (std::size_t i = 1; i < signs.size(); ++i) n += signs[i - 1] == 1 && signs[i] == -1;
  return n;
}

ExperimentConfig tiny_config(Variant v) {
  json j = {{"variant", to_string(v)},
            {"master_seed", 7},
            {"ppo", {{"n_steps", 192}, {"n_epochs", 2}, {"minibatch_size", 64}, {"inner_updates", 2}}},
            {"meta", {{"iterations", 4}, {"batch_size", 2}, {"outer_lr", 0.01}}},
            {"width", 16},
            {"pretrain_updates", 2},
            {"tasks", {{"weeks", 2}, {"n_clusters", 2}}},
            {"evaluation",
             {{"seeds", 2}, {"budget_steps", 576}, {"checkpoints", {1, 3, 300}}, {"uniform_episodes", 1}}}};
  return parse_config(j);
}

}  // namespace

// ------------------------------------------------------------- metrics ----

TEST(Cycles, TrivialAndHandTrace) {
  EXPECT_EQ(count_charging_cycles(std::vector<double>(20, 0.0), 0.1), 0u);
  EXPECT_EQ(count_charging_cycles(std::vector<double>{1, 1, -1, -1, 1, 1, -1}, 0.1), 2u);
  std::vector<double> chatter;
  for (int i = 0; i < 50; ++i) chatter.push_back(i % 2 ? 0.05 : -0.05);
  EXPECT_EQ(count_charging_cycles(chatter, 0.1), 0u);
  // Sub-threshold samples between phases keep the phase.
  EXPECT_EQ(count_charging_cycles(std::vector<double>{1, 0.05, 0, -0.05, -1}, 0.1), 1u);
  EXPECT_EQ(count_charging_cycles(std::vector<double>{-1, 1, 1}, 0.1), 0u);
}

TEST(Cycles, MatchesSignCompressionOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> f(1 + uniform_index(rng, 60));
    for (auto& x : f) x = uniform(rng, -1.0, 1.0);
    const double eps = uniform(rng, 0.0, 0.8);
    EXPECT_EQ(count_charging_cycles(f, eps), cycles_oracle(f, eps));
  }
}

TEST(Cycles, InvariantUnderJointRescaling) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> f(100), g(100);
    const double c = uniform(rng, 0.01, 100.0);
    for (std::size_t i = 0; i < f.size(); ++i) g[i] = c * (f[i] = normal(rng));
    EXPECT_EQ(count_charging_cycles(f, 0.3), count_charging_cycles(g, 0.3 * c));
  }
}

TEST(Ramping, Examples) {
  EXPECT_EQ(ramping_metric(std::vector<double>(10, 3.5)), 0.0);
  EXPECT_EQ(ramping_metric(std::vector<double>{0, 2, 1}), 3.0);
  EXPECT_DOUBLE_EQ(ramping_metric(std::vector<double>{0, 6, 3}), 3.0 * 3.0);
  EXPECT_THROW(ramping_metric(std::vector<double>{1}), ContractViolation);
}

TEST(FinancialCost, Examples) {
  EXPECT_EQ(financial_cost(std::vector<double>(5, 0.0), std::vector<double>(5, 0.3)), 0.0);
  EXPECT_DOUBLE_EQ(financial_cost(std::vector<double>{1, 1}, std::vector<double>{0.2, 0.3}), 0.5);
  EXPECT_DOUBLE_EQ(financial_cost(std::vector<double>{1, 1}, std::vector<double>{0.4, 0.6}), 1.0);
  EXPECT_THROW(financial_cost(std::vector<double>{1, 1}, std::vector<double>{0.2}), DimensionMismatch);
}

TEST(NormalizeToRbc, Examples) {
  EXPECT_EQ(normalize_to_rbc(4.2, 4.2), 1.0);
  EXPECT_EQ(normalize_to_rbc(1.0, 2.0), 0.5);
  EXPECT_DOUBLE_EQ(normalize_to_rbc(0.86 * 123.0, 123.0), 0.86);
  EXPECT_THROW(normalize_to_rbc(1.0, 0.0), ContractViolation);
}

TEST(Threshold, TrailingWindow) {
  const std::vector<double> curve{-5, -4, -3, -2, -1};
  // Window means: u=3 -> -4, u=4 -> -3.
  EXPECT_EQ(updates_to_threshold(curve, -3.0, 3), 4u);
  EXPECT_EQ(updates_to_threshold(curve, -4.0, 3), 3u);
  EXPECT_EQ(updates_to_threshold(curve, -4.0, 1), 2u);
  EXPECT_FALSE(updates_to_threshold(curve, -0.5, 3).has_value());
  // A single early spike is not enough with a full window.
  EXPECT_FALSE(updates_to_threshold(std::vector<double>{0, -9, -9, -9}, -1.0, 3).has_value());
  EXPECT_DOUBLE_EQ(reward_threshold(-10.0, -2.0, 0.9), -2.8);
}

TEST(Statistics, MedianSlopeSmoothing) {
  EXPECT_EQ(median({3, 1, 2}), 2.0);
  EXPECT_EQ(median({4, 1, 2, 3}), 2.5);
  EXPECT_NEAR(ls_slope(std::vector<double>{1, 3, 5, 7}), 2.0, 1e-12);
  EXPECT_NEAR(ls_slope(std::vector<double>{5, 5, 5}), 0.0, 1e-12);
  const auto sm = trailing_mean(std::vector<double>{2, 4, 6, 8}, 2);
  EXPECT_EQ(sm, (std::vector<double>{2, 3, 5, 7}));
}

TEST(Evaluation, RbcTraceCoversOneEpisode) {
  const auto p = generate_synthetic_profile(Archetype::Office, 1, 1);
  const auto task = weekly_tasks(p).front();
  const auto tr = evaluate_rbc(p, task, EnvConfig{});
  EXPECT_EQ(tr.grid.size(), kHoursPerWeek);
  EXPECT_EQ(tr.price.front(), p.price[0]);
  for (double r : tr.rewards) EXPECT_LE(r, 0.0);
  // The controller charges every night and discharges every afternoon.
  EXPECT_GE(count_charging_cycles(tr.esu_flow, 0.02 * p.esu_capacity), 5u);
  Rng rng(2);
  EXPECT_EQ(evaluate_uniform(p, task, EnvConfig{}, rng).rewards.size(), kHoursPerWeek);
}

// -------------------------------------------------------------- config ----

TEST(Config, DefaultsAndWiring) {
  const auto c = parse_config(json::object());
  EXPECT_EQ(c.variant, Variant::Cfe);
  EXPECT_EQ(c.eval.seeds, 5u);
  EXPECT_EQ(c.eval.checkpoints, (std::vector<std::size_t>{15, 30, 300}));
  EXPECT_EQ(c.test_updates(), 100000u / 2048u);
  EXPECT_FALSE(c.meta.meta_actor);
  EXPECT_TRUE(c.meta.actor_reuse);

  const std::vector<std::tuple<Variant, bool, bool>> wiring{{Variant::Cfe, false, true},
                                                            {Variant::Reptile, true, false},
                                                            {Variant::ReptileAr, true, true},
                                                            {Variant::ReptileFe, false, false}};
  for (const auto& [v, meta_actor, reuse] : wiring) {
    const auto cv = parse_config({{"variant", to_string(v)}});
    EXPECT_EQ(cv.meta.meta_actor, meta_actor) << to_string(v);
    EXPECT_EQ(cv.meta.actor_reuse, reuse) << to_string(v);
  }
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_config({{"variant", "maml"}}), ConfigError);
  EXPECT_THROW(parse_config({{"ppo", {{"n_step", 10}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"bogus", 1}}), ConfigError);
  EXPECT_THROW(parse_config({{"ppo", {{"n_steps", "many"}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"tasks", {{"csv", {"/nonexistent/profile.csv"}}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"evaluation", {{"seeds", 0}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"evaluation", {{"budget_steps", 100}}}}), ConfigError);
  EXPECT_THROW(parse_config({{"tasks", {{"archetypes", {"castle"}}}}}), ConfigError);
}

TEST(Config, ResolvedJsonRoundTrips) {
  const auto c = tiny_config(Variant::ReptileAr);
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(parse_config(j)), j);
}

// -------------------------------------------------------------- report ----

TEST(Report, HeaderOnlyAndRowCount) {
  const auto dir = scratch("rows");
  emit_report({}, dir);
  EXPECT_EQ(slurp(dir / "report.csv"), "variant,metric,value,rbc_normalized\n");

  EvaluationReport rep;
  for (std::string v : {"cfe", "random", "rbc"})
    for (std::string m : {"ramping", "financial_cost", "cycles_at_15", "steps_to_threshold"})
      rep.rows.push_back({v, m, 1.5, m == "steps_to_threshold" ? std::nullopt : std::optional<double>(0.75)});
  emit_report(rep, dir);
  const auto rows = read_report_csv(dir / "report.csv");
  ASSERT_EQ(rows.size(), 12u);
  EXPECT_EQ(rows[4].variant, "random");
  EXPECT_EQ(rows[4].metric, "ramping");
  EXPECT_FALSE(rows[3].rbc_normalized.has_value());
  EXPECT_EQ(rows[0].rbc_normalized, 0.75);
}

TEST(Report, EmissionIsIdempotent) {
  const auto dir = scratch("idem");
  EvaluationReport rep;
  rep.rows.push_back({"cfe", "ramping", 1.0 / 3.0, 0.1});
  rep.curves.push_back({"cfe", 0, {{1, 2048, -1.25, 0.5, 3.0, 2.9}}});
  rep.grad_norms["cfe"] = {3.0, 2.0, 1.0};
  emit_report(rep, dir);
  const auto a = slurp(dir / "report.csv"), b = slurp(dir / "curves" / "cfe_0.csv"),
             g = slurp(dir / "gradnorm_cfe.csv");
  emit_report(rep, dir);
  EXPECT_EQ(slurp(dir / "report.csv"), a);
  EXPECT_EQ(slurp(dir / "curves" / "cfe_0.csv"), b);
  EXPECT_EQ(slurp(dir / "gradnorm_cfe.csv"), g);
  EXPECT_EQ(g, "t_phi,grad_norm,smoothed\n1,3,3\n2,2,2.5\n3,1,2\n");
}

TEST(Report, UnwritableDirectoryFails) {
  const auto file = scratch("blocker");
  std::ofstream(file) << "x";
  EXPECT_THROW(emit_report({}, file / "sub"), std::exception);
}

// ------------------------------------------------------------ pipeline ----

TEST(Pipeline, RbcNormalizesToOneWithoutTrainingArtifacts) {
  const auto dir = scratch("rbc");
  const auto r = run_experiment(tiny_config(Variant::Rbc), dir);
  std::size_t normalized = 0;
  for (const auto& row : r.report.rows)
    if (row.rbc_normalized) {
      EXPECT_EQ(*row.rbc_normalized, 1.0) << row.metric;
      ++normalized;
    }
  EXPECT_GE(normalized, 3u);
  EXPECT_TRUE(fs::exists(dir / "report.csv"));
  EXPECT_TRUE(fs::exists(dir / "clusters.json"));
  EXPECT_FALSE(fs::exists(dir / "train_log.csv"));
  EXPECT_FALSE(fs::exists(dir / "checkpoints"));
  EXPECT_FALSE(fs::exists(dir / "curves"));
}

TEST(Pipeline, RandomWritesOneCurveRowPerUpdateAndIsReproducible) {
  const auto cfg = tiny_config(Variant::Random);
  const auto a = scratch("random_a"), b = scratch("random_b");
  const auto r = run_experiment(cfg, a);
  run_experiment(cfg, b);
  for (std::size_t s = 0; s < cfg.eval.seeds; ++s) {
    std::ifstream in(a / "curves" / ("random_" + std::to_string(s) + ".csv"));
    std::size_t lines = 0;
    for (std::string l; std::getline(in, l);) ++lines;
    EXPECT_EQ(lines, 1 + cfg.test_updates());
  }
  EXPECT_EQ(slurp(a / "report.csv"), slurp(b / "report.csv"));
  // Checkpoint 300 lies beyond the 3-update budget and is dropped.
  std::set<std::string> metrics;
  for (const auto& row : r.report.rows) metrics.insert(row.metric);
  EXPECT_TRUE(metrics.contains("cycles_at_3"));
  EXPECT_FALSE(metrics.contains("cycles_at_300"));
}

TEST(Pipeline, SerialAndParallelRunsAgreeBytewise) {
  auto cfg = tiny_config(Variant::Cfe);
  const auto a = scratch("cfe_serial"), b = scratch("cfe_parallel");
  run_experiment(cfg, a);
  cfg.meta.threads = 3;
  run_experiment(cfg, b);
  EXPECT_EQ(slurp(a / "report.csv"), slurp(b / "report.csv"));
  EXPECT_EQ(slurp(a / "train_log.csv"), slurp(b / "train_log.csv"));
  EXPECT_EQ(slurp(a / "gradnorm_cfe.csv"), slurp(b / "gradnorm_cfe.csv"));
  EXPECT_TRUE(fs::exists(checkpoint_dir(a, cfg.meta.iterations) / "checkpoint.json"));
}

TEST(Pipeline, VariantsMutateOnlyTheirOwnState) {
  for (auto v : {Variant::Cfe, Variant::Reptile, Variant::ReptileAr, Variant::ReptileFe}) {
    auto cfg = tiny_config(v);
    cfg.meta.schedule.warmup_fraction = 0.0;
    cfg.meta.schedule.eta0 = 1.0;
    cfg.meta.schedule.eta_max = 1.0;
    const auto r = run_experiment(cfg, scratch("wiring_" + to_string(v)));
    ASSERT_TRUE(r.meta.has_value());
    EXPECT_EQ(r.meta->phi_actor.has_value(), cfg.meta.meta_actor) << to_string(v);
    EXPECT_EQ(r.meta->actor_store.empty(), !cfg.meta.actor_reuse) << to_string(v);
    EXPECT_FALSE(r.meta->seen.empty());
  }
}

TEST(Pipeline, PretrainedLogsAndStartsFromSavedParams) {
  const auto dir = scratch("pretrained");
  const auto cfg = tiny_config(Variant::Pretrained);
  run_experiment(cfg, dir);
  const auto saved = io::load_param_vector(dir / "pretrained");
  EXPECT_EQ(saved.size(), flatten_params(AgentParams::init(agent_spec(cfg), 0)).size());
  std::ifstream in(dir / "pretrain_log.csv");
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 1 + cfg.pretrain_total());
}

TEST(Pipeline, StageFailuresAreTagged) {
  const auto dir = scratch("bad_csv");
  fs::create_directories(dir);
  std::ofstream(dir / "broken.csv") << "timestamp,load_kwh\n2020-01-01 00:00,1\n";
  auto cfg = tiny_config(Variant::Random);
  cfg.tasks.csv = {(dir / "broken.csv").string()};
  try {
    run_experiment(cfg, dir / "out");
    FAIL() << "expected a failure";
  } catch (const ConfigError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("[cluster]", 0), 0u) << e.what();
  }
  EXPECT_TRUE(fs::exists(dir / "out" / "config.json"));
}

TEST(Pipeline, MergeConcatenatesRuns) {
  const auto a = scratch("merge_a"), b = scratch("merge_b"), out = scratch("merge_out");
  EvaluationReport ra, rb;
  ra.rows.push_back({"cfe", "ramping", 1.0, 0.5});
  ra.grad_norms["cfe"] = {1.0};
  ra.curves.push_back({"cfe", 0, {}});
  rb.rows.push_back({"random", "ramping", 2.0, 1.0});
  emit_report(ra, a);
  emit_report(rb, b);
  merge_runs({a, b}, out);
  const auto rows = read_report_csv(out / "report.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].variant, "random");
  EXPECT_TRUE(fs::exists(out / "gradnorm_cfe.csv"));
  EXPECT_TRUE(fs::exists(out / "curves" / "cfe_0.csv"));
}

TEST(Clustering, ClusterFilesDescribeTheSplit) {
  const auto dir = scratch("clusters");
  std::vector<BuildingProfile> ps;
  for (auto a : {Archetype::Residential, Archetype::Office, Archetype::Industrial})
    for (std::uint64_t s : {1, 2}) ps.push_back(generate_synthetic_profile(a, s, 1));
  const auto r = cluster_profiles(ps, 3, HoldoutRule::Smallest, 0);
  write_cluster_files(dir, r);
  std::ifstream in(dir / "clusters.json");
  const auto doc = json::parse(in);
  EXPECT_EQ(doc.at("labels").size(), 6u);
  EXPECT_EQ(doc.at("merges").size(), 3u);
  EXPECT_EQ(doc.at("holdout").size() + doc.at("train").size(), 6u);
  // Same-archetype buildings share a label.
  for (std::size_t i = 0; i < 6; i += 2) EXPECT_EQ(r.assignment.labels[i], r.assignment.labels[i + 1]);
  std::ifstream d(dir / "distances.csv");
  std::string header;
  std::getline(d, header);
  EXPECT_EQ(header.rfind("id,residential-", 0), 0u);
  EXPECT_THROW(cluster_profiles(ps, 7, HoldoutRule::Smallest, 0), ConfigError);
}
