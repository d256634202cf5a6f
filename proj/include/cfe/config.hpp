#pragma once

// Experiment configuration: one JSON document, every field optional, unknown
// keys rejected. Parsing and validation errors are ConfigError.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfe/env.hpp"
#include "cfe/error.hpp"
#include "cfe/meta.hpp"
#include "cfe/ppo.hpp"
#include "cfe/profiles.hpp"
#include "cfe/task_prep.hpp"

namespace cfe {

using nlohmann::json;

enum class Variant { Cfe, Reptile, ReptileAr, ReptileFe, Random, Pretrained, Rbc };

inline const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> v{
      {Variant::Cfe, "cfe"},           {Variant::Reptile, "reptile"}, {Variant::ReptileAr, "reptile_ar"},
      {Variant::ReptileFe, "reptile_fe"}, {Variant::Random, "random"},  {Variant::Pretrained, "pretrained"},
      {Variant::Rbc, "rbc"}};
  return v;
}

inline std::string to_string(Variant v) {
  for (const auto& [k, n] : variant_names())
    if (k == v) return n;
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (const auto& [k, n] : variant_names())
    if (n == s) return k;
  throw ConfigError("unknown variant '" + s + "'");
}

inline bool is_meta_variant(Variant v) {
  return v == Variant::Cfe || v == Variant::Reptile || v == Variant::ReptileAr || v == Variant::ReptileFe;
}

// Which parts of the learner a meta variant carries across tasks.
inline void apply_variant(Variant v, MetaConfig& m) {
  m.meta_actor = v == Variant::Reptile || v == Variant::ReptileAr;
  m.actor_reuse = v == Variant::Cfe || v == Variant::ReptileAr;
}

struct TaskSource {
  // Synthetic: one profile per (archetype, building), `weeks` weeks each.
  std::vector<std::string> archetypes{"residential", "office", "industrial"};
  std::size_t buildings_per_archetype = 1;
  std::size_t weeks = 4;
  std::uint64_t profile_seed = 0;
  // CSV: non-empty replaces the synthetic pool.
  std::vector<std::string> csv;
};

struct EvaluationConfig {
  std::size_t seeds = 5;
  std::size_t budget_steps = 100000;
  double budget_scale = 1.0;
  std::vector<std::size_t> checkpoints{15, 30, 300};
  double threshold_fraction = 0.9;
  std::size_t trailing_window = 3;
  std::size_t uniform_episodes = 5;
  double cycle_eps_fraction = 0.02;  // of the storage capacity
  std::size_t horizon_weeks = 1;

  // Whole PPO updates that fit in the scaled step budget.
  std::size_t updates(std::size_t n_steps) const {
    return static_cast<std::size_t>(std::floor(static_cast<double>(budget_steps) * budget_scale /
                                               static_cast<double>(n_steps)));
  }
};

struct ExperimentConfig {
  std::uint64_t master_seed = 0;
  Variant variant = Variant::Cfe;
  MetaConfig meta{};  // meta.inner is the PPO configuration for every variant
  EnvConfig env{};
  std::size_t width = 64;
  TaskSource tasks{};
  std::size_t n_clusters = 3;
  HoldoutRule holdout_rule = HoldoutRule::Smallest;
  std::size_t holdout_cluster = 0;
  EvaluationConfig eval{};
  std::size_t pretrain_updates = 0;  // 0: the meta-training update count N*M*K
  std::string output_dir;

  const PPOConfig& ppo() const { return meta.inner; }
  std::size_t test_updates() const { return eval.updates(meta.inner.n_steps); }
  std::size_t pretrain_total() const {
    return pretrain_updates ? pretrain_updates : meta.iterations * meta.batch_size * meta.inner.updates;
  }

  void validate() const {
    meta.validate();
    env.validate();
    if (width == 0) throw ConfigError("hidden width must be positive");
    if (eval.seeds == 0) throw ConfigError("evaluation needs at least one seed");
    if (!(eval.budget_scale > 0.0)) throw ConfigError("budget_scale must be positive");
    if (test_updates() == 0) throw ConfigError("meta-test budget is smaller than one rollout");
    if (!(eval.threshold_fraction > 0.0 && eval.threshold_fraction <= 1.0))
      throw ConfigError("threshold_fraction must lie in (0, 1]");
    if (eval.trailing_window == 0 || eval.uniform_episodes == 0 || eval.horizon_weeks == 0)
      throw ConfigError("trailing_window, uniform_episodes and horizon_weeks must be positive");
    if (!(eval.cycle_eps_fraction >= 0.0)) throw ConfigError("cycle_eps_fraction must be non-negative");
    if (n_clusters < 2) throw ConfigError("n_clusters must be at least 2 to hold a cluster out");
    if (tasks.csv.empty()) {
      if (tasks.archetypes.empty() || tasks.buildings_per_archetype == 0 || tasks.weeks == 0)
        throw ConfigError("synthetic task source needs archetypes, buildings and weeks");
      for (const auto& a : tasks.archetypes) parse_archetype(a);
    }
    for (const auto& p : tasks.csv)
      if (!std::filesystem::is_regular_file(p)) throw ConfigError("task CSV " + p + " does not exist");
  }
};

namespace detail {

// Reads optional members of one JSON object and rejects the ones never read.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  template <class T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(path_ + "." + key + " has the wrong type");
    }
  }

  const json* child(const char* key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!used_.contains(k)) throw ConfigError("unknown key " + path_ + "." + k);
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline void read_ppo(const json& j, PPOConfig& p) {
  ObjectReader r(j, "ppo");
  r.get("n_steps", p.n_steps);
  r.get("n_epochs", p.n_epochs);
  r.get("minibatch_size", p.minibatch_size);
  r.get("clip", p.clip);
  r.get("gamma", p.gamma);
  r.get("gae_lambda", p.gae_lambda);
  r.get("lr", p.lr);
  r.get("lr_fe", p.lr_fe);
  r.get("lr_actor", p.lr_actor);
  r.get("lr_critic", p.lr_critic);
  r.get("value_coef", p.value_coef);
  r.get("entropy_coef", p.entropy_coef);
  r.get("inner_updates", p.updates);
  r.finish();
}

inline void read_meta(const json& j, MetaConfig& m) {
  ObjectReader r(j, "meta");
  r.get("iterations", m.iterations);
  r.get("batch_size", m.batch_size);
  r.get("outer_lr", m.outer_lr);
  std::string mode = m.outer_mode == OuterMode::Adam ? "adam" : "sgd";
  r.get("outer_optimizer", mode);
  if (mode == "adam")
    m.outer_mode = OuterMode::Adam;
  else if (mode == "sgd")
    m.outer_mode = OuterMode::Sgd;
  else
    throw ConfigError("meta.outer_optimizer must be 'adam' or 'sgd'");
  r.get("revisit_eta0", m.schedule.eta0);
  r.get("revisit_eta_max", m.schedule.eta_max);
  r.get("revisit_degree", m.schedule.degree);
  r.get("revisit_warmup_fraction", m.schedule.warmup_fraction);
  r.get("checkpoint_every", m.checkpoint_every);
  r.finish();
}

inline void read_env(const json& j, EnvConfig& e) {
  ObjectReader r(j, "env");
  r.get("alpha_cost", e.alpha_cost);
  r.get("alpha_ramp", e.alpha_ramp);
  r.get("ramp_window", e.ramp_window);
  r.get("n_bins", e.n_bins);
  r.get("initial_soc", e.initial_soc);
  r.get("rbc_charge_fraction", e.rbc_charge_fraction);
  r.finish();
}

inline void read_tasks(const json& j, ExperimentConfig& c) {
  ObjectReader r(j, "tasks");
  auto& t = c.tasks;
  r.get("archetypes", t.archetypes);
  r.get("buildings_per_archetype", t.buildings_per_archetype);
  r.get("weeks", t.weeks);
  r.get("profile_seed", t.profile_seed);
  r.get("csv", t.csv);
  r.get("n_clusters", c.n_clusters);
  std::string rule = c.holdout_rule == HoldoutRule::Smallest ? "smallest" : "by_id";
  r.get("holdout_rule", rule);
  if (rule == "smallest")
    c.holdout_rule = HoldoutRule::Smallest;
  else if (rule == "by_id")
    c.holdout_rule = HoldoutRule::ById;
  else
    throw ConfigError("tasks.holdout_rule must be 'smallest' or 'by_id'");
  r.get("holdout_cluster", c.holdout_cluster);
  r.finish();
}

inline void read_eval(const json& j, EvaluationConfig& e) {
  ObjectReader r(j, "evaluation");
  r.get("seeds", e.seeds);
  r.get("budget_steps", e.budget_steps);
  r.get("budget_scale", e.budget_scale);
  r.get("checkpoints", e.checkpoints);
  r.get("threshold_fraction", e.threshold_fraction);
  r.get("trailing_window", e.trailing_window);
  r.get("uniform_episodes", e.uniform_episodes);
  r.get("cycle_eps_fraction", e.cycle_eps_fraction);
  r.get("horizon_weeks", e.horizon_weeks);
  r.finish();
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  detail::ObjectReader r(j, "config");
  r.get("master_seed", c.master_seed);
  std::string variant = to_string(c.variant);
  r.get("variant", variant);
  c.variant = parse_variant(variant);
  r.get("threads", c.meta.threads);
  r.get("width", c.width);
  r.get("pretrain_updates", c.pretrain_updates);
  r.get("output_dir", c.output_dir);
  if (const auto* p = r.child("ppo")) detail::read_ppo(*p, c.meta.inner);
  if (const auto* p = r.child("meta")) detail::read_meta(*p, c.meta);
  if (const auto* p = r.child("env")) detail::read_env(*p, c.env);
  if (const auto* p = r.child("tasks")) detail::read_tasks(*p, c);
  if (const auto* p = r.child("evaluation")) detail::read_eval(*p, c.eval);
  r.finish();
  apply_variant(c.variant, c.meta);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

// Fully resolved configuration; parse_config(config_to_json(c)) == c.
inline json config_to_json(const ExperimentConfig& c) {
  const auto& p = c.meta.inner;
  const auto& m = c.meta;
  const auto& t = c.tasks;
  const auto& e = c.eval;
  return {
      {"master_seed", c.master_seed},
      {"variant", to_string(c.variant)},
      {"threads", m.threads},
      {"width", c.width},
      {"pretrain_updates", c.pretrain_updates},
      {"output_dir", c.output_dir},
      {"ppo",
       {{"n_steps", p.n_steps}, {"n_epochs", p.n_epochs}, {"minibatch_size", p.minibatch_size}, {"clip", p.clip},
        {"gamma", p.gamma}, {"gae_lambda", p.gae_lambda}, {"lr", p.lr}, {"lr_fe", p.lr_fe},
        {"lr_actor", p.lr_actor}, {"lr_critic", p.lr_critic}, {"value_coef", p.value_coef},
        {"entropy_coef", p.entropy_coef}, {"inner_updates", p.updates}}},
      {"meta",
       {{"iterations", m.iterations}, {"batch_size", m.batch_size}, {"outer_lr", m.outer_lr},
        {"outer_optimizer", m.outer_mode == OuterMode::Adam ? "adam" : "sgd"},
        {"revisit_eta0", m.schedule.eta0}, {"revisit_eta_max", m.schedule.eta_max},
        {"revisit_degree", m.schedule.degree}, {"revisit_warmup_fraction", m.schedule.warmup_fraction},
        {"checkpoint_every", m.checkpoint_every}}},
      {"env",
       {{"alpha_cost", c.env.alpha_cost}, {"alpha_ramp", c.env.alpha_ramp}, {"ramp_window", c.env.ramp_window},
        {"n_bins", c.env.n_bins}, {"initial_soc", c.env.initial_soc},
        {"rbc_charge_fraction", c.env.rbc_charge_fraction}}},
      {"tasks",
       {{"archetypes", t.archetypes}, {"buildings_per_archetype", t.buildings_per_archetype}, {"weeks", t.weeks},
        {"profile_seed", t.profile_seed}, {"csv", t.csv}, {"n_clusters", c.n_clusters},
        {"holdout_rule", c.holdout_rule == HoldoutRule::Smallest ? "smallest" : "by_id"},
        {"holdout_cluster", c.holdout_cluster}}},
      {"evaluation",
       {{"seeds", e.seeds}, {"budget_steps", e.budget_steps}, {"budget_scale", e.budget_scale},
        {"checkpoints", e.checkpoints}, {"threshold_fraction", e.threshold_fraction},
        {"trailing_window", e.trailing_window}, {"uniform_episodes", e.uniform_episodes},
        {"cycle_eps_fraction", e.cycle_eps_fraction}, {"horizon_weeks", e.horizon_weeks}}},
  };
}

}  // namespace cfe
