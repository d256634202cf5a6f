#pragma once

// Outer loop: Reptile over the shared feature extractor and critic (and the
// actor for full-network variants), a per-task actor store restored on
// revisits, and a revisit schedule that controls how often batches re-draw
// tasks that were already trained on.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cfe/agent_params.hpp"
#include "cfe/env.hpp"
#include "cfe/param_io.hpp"
#include "cfe/ppo.hpp"
#include "cfe/profiles.hpp"
#include "cfe/random.hpp"

namespace cfe {

struct PoolTask {
  TaskSpec spec;
  std::size_t profile = 0;  // index into TaskPool::profiles
};

struct TaskPool {
  std::vector<BuildingProfile> profiles;
  std::vector<PoolTask> tasks;

  // One task per full week of every profile, in profile order.
  static TaskPool weekly(std::vector<BuildingProfile> ps) {
    TaskPool pool;
    pool.profiles = std::move(ps);
    for (std::size_t i = 0; i < pool.profiles.size(); ++i)
      for (auto& t : weekly_tasks(pool.profiles[i])) pool.tasks.push_back({std::move(t), i});
    return pool;
  }

  std::size_t size() const { return tasks.size(); }
  const BuildingProfile& profile_of(std::size_t task) const { return profiles.at(tasks.at(task).profile); }

  std::optional<std::size_t> find(const std::string& key) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i].spec.key == key) return i;
    return std::nullopt;
  }

  // Tasks whose profile id is (or is not) in `ids`.
  TaskPool filter_profiles(const std::set<std::string>& ids, bool keep) const {
    TaskPool out;
    std::vector<std::ptrdiff_t> remap(profiles.size(), -1);
    for (std::size_t i = 0; i < profiles.size(); ++i)
      if (ids.contains(profiles[i].id) == keep) {
        remap[i] = static_cast<std::ptrdiff_t>(out.profiles.size());
        out.profiles.push_back(profiles[i]);
      }
    for (const auto& t : tasks)
      if (remap[t.profile] >= 0) out.tasks.push_back({t.spec, static_cast<std::size_t>(remap[t.profile])});
    return out;
  }
};

struct RevisitSchedule {
  double eta0 = 0.0;
  double eta_max = 0.8;
  double degree = 2.0;
  double warmup_fraction = 0.1;
  std::size_t total = 600;  // H_total, meta-steps in the run

  void validate() const {
    if (!(eta0 >= 0.0 && eta_max <= 1.0 && eta0 <= eta_max)) throw ConfigError("revisit schedule needs 0 <= eta0 <= eta_max <= 1");
    if (!(degree > 0.0)) throw ConfigError("revisit schedule degree must be positive");
    if (total == 0) throw ConfigError("revisit schedule needs a positive total");
  }
};

inline double revisit_probability(const RevisitSchedule& s, double t) {
  const double H = static_cast<double>(s.total);
  if (t < s.warmup_fraction * H) return 0.0;
  const double x = std::clamp(t / H, 0.0, 1.0);
  return s.eta0 + (s.eta_max - s.eta0) * std::pow(x, s.degree);
}

enum class OuterMode { Adam, Sgd };

struct MetaConfig {
  std::size_t iterations = 600;  // N
  std::size_t batch_size = 3;    // M
  double outer_lr = 1e-3;
  OuterMode outer_mode = OuterMode::Adam;
  RevisitSchedule schedule{};
  PPOConfig inner{};
  bool meta_actor = false;   // include the actor head in the meta-parameters
  bool actor_reuse = true;   // restore stored actors on revisit
  std::size_t threads = 1;   // concurrent inner loops per iteration
  std::size_t checkpoint_every = 0;  // 0: every 10% of iterations

  void validate() const {
    if (iterations == 0 || batch_size == 0) throw ConfigError("meta iterations and batch size must be positive");
    if (!(outer_lr >= 0.0)) throw ConfigError("outer learning rate must be non-negative");
    schedule.validate();
    inner.validate();
  }
};

struct MetaState {
  AgentSpec spec;
  nn::ParamVector phi_fe;
  nn::ParamVector phi_critic;
  std::optional<nn::ParamVector> phi_actor;
  nn::AdamState meta_adam;  // over the concatenated meta blocks
  std::map<std::string, nn::ParamVector> actor_store;
  std::set<std::string> seen;
  std::size_t t_phi = 0;
  std::size_t H_total = 0;
  std::vector<double> grad_norms;

  static MetaState init(const AgentSpec& spec, const MetaConfig& cfg, std::uint64_t seed) {
    spec.validate();
    const auto p = AgentParams::init(spec, seed);
    MetaState m;
    m.spec = spec;
    m.phi_fe = p.fe;
    m.phi_critic = p.critic;
    if (cfg.meta_actor) m.phi_actor = p.actor;
    const std::size_t n = m.phi_fe.size() + m.phi_critic.size() + (m.phi_actor ? m.phi_actor->size() : 0);
    m.meta_adam = nn::AdamState::zeros(n, {.lr = cfg.outer_lr});
    m.H_total = cfg.iterations;
    return m;
  }

  std::vector<Block> blocks() const { return phi_actor ? all_blocks() : meta_blocks(); }

  // Meta-parameters as agent params; the actor slot is empty unless meta-learned.
  AgentParams phi() const { return {phi_fe, phi_actor ? *phi_actor : nn::ParamVector{}, phi_critic}; }

  void set_phi(const AgentParams& p) {
    phi_fe = p.fe;
    phi_critic = p.critic;
    if (phi_actor) phi_actor = p.actor;
  }
};

inline std::uint64_t task_hash(const std::string& key) { return fnv1a(key); }

struct Batch {
  std::vector<std::size_t> tasks;  // pool indices, one per slot
  std::vector<bool> revisit;
};

// Slots are drawn independently. A slot revisits with probability eta, taking
// a uniform seen task not already in the batch; otherwise it takes a uniform
// unseen task, falling back to any task not yet in the batch, and only
// repeats when the pool is smaller than the batch.
inline Batch sample_batch(const TaskPool& pool, const MetaState& meta, std::size_t M, const RevisitSchedule& sched,
                          Rng& rng) {
  if (pool.size() == 0) throw ConfigError("task pool is empty");
  const double eta = revisit_probability(sched, static_cast<double>(meta.t_phi));
  Batch b;
  std::vector<bool> taken(pool.size(), false);
  auto candidates = [&](auto pred) {
    std::vector<std::size_t> c;
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (!taken[i] && pred(i)) c.push_back(i);
    return c;
  };
  auto is_seen = [&](std::size_t i) { return meta.seen.contains(pool.tasks[i].spec.key); };
  for (std::size_t slot = 0; slot < M; ++slot) {
    const bool want_revisit = uniform01(rng) < eta;
    std::vector<std::size_t> c;
    if (want_revisit) c = candidates(is_seen);
    if (c.empty()) c = candidates([&](std::size_t i) { return !is_seen(i); });
    if (c.empty()) c = candidates([](std::size_t) { return true; });
    if (c.empty()) {
      c.resize(pool.size());
      std::iota(c.begin(), c.end(), 0);
    }
    const auto pick = c[uniform_index(rng, c.size())];
    taken[pick] = true;
    b.tasks.push_back(pick);
    b.revisit.push_back(is_seen(pick));
  }
  return b;
}

inline AgentParams init_learner_params(const MetaState& meta, const MetaConfig& cfg, const std::string& task_key,
                                       std::uint64_t actor_seed) {
  AgentParams p;
  p.fe = meta.phi_fe;
  p.critic = meta.phi_critic;
  if (cfg.actor_reuse && meta.actor_store.contains(task_key)) {
    p.actor = meta.actor_store.at(task_key);
  } else if (meta.phi_actor) {
    p.actor = *meta.phi_actor;
  } else {
    p.actor = nn::mlp_init(meta.spec.actor, actor_seed);
  }
  return p;
}

inline void store_actor(MetaState& meta, const std::string& task_key, const nn::ParamVector& actor) {
  if (actor.size() != meta.spec.actor.param_count()) throw DimensionMismatch("stored actor does not match the actor spec");
  meta.actor_store[task_key] = actor;
  meta.seen.insert(task_key);
}

// g = phi - mean(theta^K) over the meta blocks, then one Adam (or plain
// interpolation) step. The adapted list is summed in a canonical order so the
// result is bitwise independent of its permutation. Returns ||g||.
inline double reptile_meta_update(MetaState& meta, const std::vector<AgentParams>& adapted, const MetaConfig& cfg) {
  if (adapted.empty()) throw ContractViolation("meta update needs at least one adapted learner");
  const auto blocks = meta.blocks();
  const auto phi = flatten_params(meta.phi(), blocks);
  std::vector<std::vector<double>> thetas;
  for (const auto& a : adapted) {
    auto f = flatten_params(a, blocks);
    if (f.size() != phi.size() || f.manifest != phi.manifest) throw DimensionMismatch("adapted learner does not match meta blocks");
    thetas.push_back(std::move(f.values));
  }
  std::sort(thetas.begin(), thetas.end());
  // Mean of differences, so theta == phi gives g == 0 exactly.
  std::vector<double> g(phi.size(), 0.0);
  for (const auto& t : thetas)
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += phi.values[i] - t[i];
  const auto M = static_cast<double>(thetas.size());
  for (double& x : g) x /= M;
  const double norm = nn::l2_norm(g);

  auto next = phi;
  if (cfg.outer_mode == OuterMode::Adam) {
    if (meta.meta_adam.m.size() != g.size()) throw DimensionMismatch("meta optimizer state does not match meta blocks");
    meta.meta_adam.hyper.lr = cfg.outer_lr;
    nn::adam_step(next.values, g, meta.meta_adam);
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) next.values[i] -= cfg.outer_lr * g[i];
  }
  meta.set_phi(unflatten_params(next, meta.phi(), blocks));
  meta.grad_norms.push_back(norm);
  meta.t_phi += 1;
  return norm;
}

struct MetaLogRow {
  std::size_t t_phi = 0;
  std::vector<std::string> task_keys;
  std::vector<double> mean_rewards;  // last inner update, per slot
  double grad_norm = 0.0;
  std::vector<bool> revisit_flags;
};

inline void write_meta_log_header(std::ostream& os) { os << "t_phi,task_keys,mean_rewards,grad_norm,revisit_flags\n"; }

inline void write_meta_log_row(std::ostream& os, const MetaLogRow& r) {
  std::ostringstream ss;
  ss.precision(10);
  ss << r.t_phi << ',';
  for (std::size_t i = 0; i < r.task_keys.size(); ++i) ss << (i ? ";" : "") << r.task_keys[i];
  ss << ',';
  for (std::size_t i = 0; i < r.mean_rewards.size(); ++i) ss << (i ? ";" : "") << r.mean_rewards[i];
  ss << ',' << r.grad_norm << ',';
  for (std::size_t i = 0; i < r.revisit_flags.size(); ++i) ss << (i ? ";" : "") << (r.revisit_flags[i] ? 1 : 0);
  os << ss.str() << '\n';
}

// Seeds for one slot of one meta-step; independent of thread scheduling.
inline std::uint64_t slot_seed(std::uint64_t master, const std::string& key, std::size_t t_phi, std::size_t slot,
                               std::uint64_t stream) {
  return derive_seed({master, task_hash(key), t_phi, slot, stream});
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first
// failure in index order.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) guarded(i);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct MetaTrainHooks {
  std::function<void(const MetaLogRow&)> on_iteration;
  std::function<void(const MetaState&)> on_checkpoint;
};

inline MetaState meta_train(const TaskPool& pool, const EnvConfig& env_cfg, const MetaConfig& cfg, MetaState meta,
                            std::uint64_t master_seed, const MetaTrainHooks& hooks = {}) {
  cfg.validate();
  if (pool.size() == 0) throw ConfigError("task pool is empty");
  auto sched = cfg.schedule;
  sched.total = meta.H_total = cfg.iterations;
  Rng sampler(derive_seed({master_seed, fnv1a("batch-sampling"), meta.t_phi}));
  const std::size_t every = cfg.checkpoint_every ? cfg.checkpoint_every : std::max<std::size_t>(1, cfg.iterations / 10);

  while (meta.t_phi < cfg.iterations) {
    const auto batch = sample_batch(pool, meta, cfg.batch_size, sched, sampler);
    const std::size_t M = batch.tasks.size();
    std::vector<AgentParams> adapted(M);
    std::vector<double> final_reward(M, 0.0);
    const auto& snapshot = meta;
    parallel_for(M, cfg.threads, [&](std::size_t s) {
      const auto& task = pool.tasks[batch.tasks[s]];
      const auto& key = task.spec.key;
      const auto init = init_learner_params(snapshot, cfg, key, slot_seed(master_seed, key, snapshot.t_phi, s, 1));
      Rng rng(slot_seed(master_seed, key, snapshot.t_phi, s, 2));
      auto r = inner_adapt(pool.profiles[task.profile], task.spec, env_cfg, init, snapshot.spec, cfg.inner.updates,
                           cfg.inner, rng);
      final_reward[s] = r.log.empty() ? 0.0 : r.log.back().mean_reward;
      adapted[s] = std::move(r.params);
    });

    MetaLogRow row;
    row.t_phi = meta.t_phi;
    row.revisit_flags = batch.revisit;
    row.mean_rewards = final_reward;
    for (std::size_t s = 0; s < M; ++s) {
      const auto& key = pool.tasks[batch.tasks[s]].spec.key;
      row.task_keys.push_back(key);
      if (cfg.actor_reuse)
        store_actor(meta, key, adapted[s].actor);
      else
        meta.seen.insert(key);
    }
    row.grad_norm = reptile_meta_update(meta, adapted, cfg);
    if (hooks.on_iteration) hooks.on_iteration(row);
    if (hooks.on_checkpoint && (meta.t_phi % every == 0 || meta.t_phi == cfg.iterations)) hooks.on_checkpoint(meta);
  }
  return meta;
}

// Adaptation on a task never seen in meta-training. The store is ignored and
// the actor is freshly drawn, unless the actor itself was meta-learned.
inline AdaptResult meta_test_adapt(const MetaState& meta, const BuildingProfile& profile, const TaskSpec& task,
                                   const EnvConfig& env_cfg, std::size_t updates, const PPOConfig& cfg,
                                   std::uint64_t seed, const UpdateHook& hook = {}) {
  if (meta.seen.contains(task.key))
    throw ProtocolViolation("task " + task.key + " was seen during meta-training and cannot be used for meta-testing");
  AgentParams init;
  init.fe = meta.phi_fe;
  init.critic = meta.phi_critic;
  init.actor = meta.phi_actor ? *meta.phi_actor : nn::mlp_init(meta.spec.actor, derive_seed({seed, 1}));
  Rng rng(derive_seed({seed, 2}));
  return inner_adapt(profile, task, env_cfg, init, meta.spec, updates, cfg, rng, hook);
}

// Checkpoint layout in `dir`: checkpoint.json (manifest, store index, seeds,
// counters) and params.bin (little-endian float64: meta blocks, then stored
// actors in key order, then the meta optimizer moments).
inline void save_checkpoint(const std::filesystem::path& dir, const MetaState& meta, std::uint64_t master_seed) {
  using io::json;
  const auto phi = flatten_params(meta.phi(), meta.blocks());
  const std::size_t actor_len = meta.spec.actor.param_count();
  json doc;
  doc["format"] = "cfe-checkpoint";
  doc["version"] = 1;
  doc["master_seed"] = master_seed;
  doc["t_phi"] = meta.t_phi;
  doc["H_total"] = meta.H_total;
  doc["agent"] = {{"fe", meta.spec.fe.layer_sizes},
                  {"actor", meta.spec.actor.layer_sizes},
                  {"critic", meta.spec.critic.layer_sizes}};
  doc["meta_actor"] = meta.phi_actor.has_value();
  doc["blocks"] = io::manifest_to_json(phi.manifest);
  std::size_t off = phi.size();
  json store = json::array();
  for (const auto& [key, _] : meta.actor_store) {
    store.push_back({{"task_key", key}, {"offset", off}, {"length", actor_len}});
    off += actor_len;
  }
  doc["actor_store"] = store;
  doc["seen"] = meta.seen;
  doc["meta_adam"] = {{"t", meta.meta_adam.t},
                      {"lr", meta.meta_adam.hyper.lr},
                      {"m_offset", off},
                      {"v_offset", off + meta.meta_adam.m.size()},
                      {"length", meta.meta_adam.m.size()}};
  doc["grad_norms"] = meta.grad_norms;
  std::filesystem::create_directories(dir);
  {
    auto bin = io::open_out(dir / "params.bin", true);
    io::write_f64_le(bin, phi.values);
    for (const auto& [_, a] : meta.actor_store) io::write_f64_le(bin, a.values);
    io::write_f64_le(bin, meta.meta_adam.m);
    io::write_f64_le(bin, meta.meta_adam.v);
  }
  auto js = io::open_out(dir / "checkpoint.json");
  js << doc.dump(2) << '\n';
}

struct Checkpoint {
  MetaState meta;
  std::uint64_t master_seed = 0;
};

inline AgentSpec spec_from_sizes(const std::vector<std::size_t>& fe, const std::vector<std::size_t>& actor,
                                 const std::vector<std::size_t>& critic) {
  using nn::Activation;
  AgentSpec s;
  s.fe.layer_sizes = fe;
  s.actor.layer_sizes = actor;
  s.critic.layer_sizes = critic;
  s.fe.activations.assign(fe.size() - 1, Activation::ReLU);
  s.actor.activations.assign(actor.size() - 1, Activation::Tanh);
  s.actor.activations.back() = Activation::Identity;
  s.critic.activations.assign(critic.size() - 1, Activation::Tanh);
  s.critic.activations.back() = Activation::Identity;
  s.validate();
  return s;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  auto js = io::open_in(dir / "checkpoint.json");
  io::json doc;
  try {
    doc = io::json::parse(js);
    if (doc.at("format") != "cfe-checkpoint") throw IngestionError("not a checkpoint: " + dir.string());
    Checkpoint c;
    c.master_seed = doc.at("master_seed").get<std::uint64_t>();
    auto& m = c.meta;
    const auto& ag = doc.at("agent");
    m.spec = spec_from_sizes(ag.at("fe").get<std::vector<std::size_t>>(), ag.at("actor").get<std::vector<std::size_t>>(),
                             ag.at("critic").get<std::vector<std::size_t>>());
    m.t_phi = doc.at("t_phi").get<std::size_t>();
    m.H_total = doc.at("H_total").get<std::size_t>();
    const bool meta_actor = doc.at("meta_actor").get<bool>();
    const auto manifest = io::manifest_from_json(doc.at("blocks"));
    const auto& adam = doc.at("meta_adam");
    const std::size_t adam_len = adam.at("length").get<std::size_t>();
    const std::size_t total = adam.at("v_offset").get<std::size_t>() + adam_len;
    auto bin = io::open_in(dir / "params.bin", true);
    const auto data = io::read_f64_le(bin, total);

    nn::ParamVector phi{{data.begin(), data.begin() + static_cast<std::ptrdiff_t>(nn::manifest_size(manifest))}, manifest};
    const auto shape = AgentParams::init(m.spec, 0);
    const auto blocks = meta_actor ? all_blocks() : meta_blocks();
    const auto p = unflatten_params(phi, shape, blocks);
    m.phi_fe = p.fe;
    m.phi_critic = p.critic;
    if (meta_actor) m.phi_actor = p.actor;
    for (const auto& e : doc.at("actor_store")) {
      const auto off = e.at("offset").get<std::size_t>();
      const auto len = e.at("length").get<std::size_t>();
      if (len != shape.actor.size() || off + len > data.size()) throw IngestionError("actor store entry out of range");
      nn::ParamVector a{{data.begin() + static_cast<std::ptrdiff_t>(off), data.begin() + static_cast<std::ptrdiff_t>(off + len)},
                        shape.actor.manifest};
      m.actor_store.emplace(e.at("task_key").get<std::string>(), std::move(a));
    }
    m.seen = doc.at("seen").get<std::set<std::string>>();
    const auto mo = adam.at("m_offset").get<std::size_t>();
    const auto vo = adam.at("v_offset").get<std::size_t>();
    m.meta_adam = nn::AdamState::zeros(adam_len, {.lr = adam.at("lr").get<double>()});
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(mo), adam_len, m.meta_adam.m.begin());
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(vo), adam_len, m.meta_adam.v.begin());
    m.meta_adam.t = adam.at("t").get<std::uint64_t>();
    m.grad_norms = doc.at("grad_norms").get<std::vector<double>>();
    return c;
  } catch (const io::json::exception& e) {
    throw IngestionError("malformed checkpoint " + dir.string() + ": " + e.what());
  }
}

}  // namespace cfe
