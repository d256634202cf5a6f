#pragma once

// Inner-loop learner: clipped-surrogate PPO over masked discrete actions. The
// feature extractor sits under both heads and receives the sum of the actor
// and critic loss gradients; each block keeps its own Adam state.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cfe/agent_params.hpp"
#include "cfe/env.hpp"
#include "cfe/neural.hpp"
#include "cfe/random.hpp"

namespace cfe {

struct PPOConfig {
  std::size_t n_steps = 2048;
  std::size_t n_epochs = 10;
  std::size_t minibatch_size = 256;
  double clip = 0.2;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double lr = 3e-4;
  // Per-block overrides; negative means "use lr".
  double lr_fe = -1.0;
  double lr_actor = -1.0;
  double lr_critic = -1.0;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  std::size_t updates = 5;  // K inner updates per adaptation

  double lr_for(Block b) const {
    const double o = b == Block::FeatureExtractor ? lr_fe : b == Block::Actor ? lr_actor : lr_critic;
    return o < 0.0 ? lr : o;
  }

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("gae_lambda must lie in [0, 1]");
    if (!(clip > 0.0)) throw ConfigError("clip must be positive");
    if (n_steps == 0 || n_epochs == 0 || minibatch_size == 0) throw ConfigError("PPO sizes must be positive");
    if (lr < 0.0) throw ConfigError("learning rate must be non-negative");
  }
};

struct Categorical {
  std::vector<double> probs;
  std::vector<double> log_probs;  // -inf on masked bins
};

inline Categorical policy_distribution(std::span<const double> logits, std::span<const std::uint8_t> mask) {
  if (logits.size() != mask.size()) throw DimensionMismatch("policy_distribution: logits and mask lengths differ");
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (mask[k]) mx = std::max(mx, logits[k]);
  if (!std::isfinite(mx)) throw ContractViolation("policy_distribution: no valid action in mask");
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (mask[k]) z += std::exp(logits[k] - mx);
  const double lse = mx + std::log(z);
  Categorical c;
  c.probs.assign(logits.size(), 0.0);
  c.log_probs.assign(logits.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (mask[k]) {
      c.log_probs[k] = logits[k] - lse;
      c.probs[k] = std::exp(c.log_probs[k]);
    }
  return c;
}

inline std::size_t sample_categorical(const Categorical& c, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last_valid = 0;
  for (std::size_t k = 0; k < c.probs.size(); ++k) {
    if (c.probs[k] <= 0.0) continue;
    acc += c.probs[k];
    last_valid = k;
    if (u < acc) return k;
  }
  return last_valid;
}

struct RolloutBuffer {
  std::size_t n_bins = 0;
  nn::Matrix obs;                   // kObsDim x n
  std::vector<std::uint8_t> masks;  // n x n_bins, row per step
  std::vector<std::size_t> actions;
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<std::uint8_t> dones;
  std::vector<double> esu_flow;
  std::vector<double> grid;
  double last_value = 0.0;  // bootstrap V(s_n)

  std::size_t size() const { return actions.size(); }
  std::span<const std::uint8_t> mask(std::size_t i) const { return {masks.data() + i * n_bins, n_bins}; }

  double mean_reward() const {
    return rewards.empty() ? 0.0 : std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(size());
  }
};

// Aligned per-layer copies of all three blocks.
struct AgentLayers {
  nn::Layers fe;
  nn::Layers actor;
  nn::Layers critic;

  static AgentLayers from(const AgentParams& p, const AgentSpec& spec) {
    return {nn::Layers::from(p.fe, spec.fe), nn::Layers::from(p.actor, spec.actor),
            nn::Layers::from(p.critic, spec.critic)};
  }
};

// Networks evaluated on a batch of observations.
struct AgentPass {
  nn::ForwardResult fe;
  nn::ForwardResult actor;
  nn::ForwardResult critic;
};

inline AgentPass agent_forward(const AgentLayers& net, const AgentSpec& spec, const nn::Matrix& obs) {
  AgentPass r;
  r.fe = nn::forward(net.fe, spec.fe, obs);
  r.actor = nn::forward(net.actor, spec.actor, r.fe.output);
  r.critic = nn::forward(net.critic, spec.critic, r.fe.output);
  return r;
}

inline AgentPass agent_forward(const AgentParams& p, const AgentSpec& spec, const nn::Matrix& obs) {
  return agent_forward(AgentLayers::from(p, spec), spec, obs);
}

inline double state_value(const AgentLayers& net, const AgentSpec& spec, const Observation& o) {
  const nn::Matrix x = Eigen::Map<const nn::Matrix>(o.data(), kObsDim, 1);
  const auto z = nn::forward(net.fe, spec.fe, x).output;
  return nn::forward(net.critic, spec.critic, z).output(0, 0);
}

// Runs exactly n_steps transitions on `env`, resetting it on episode end. The
// episode state carries over between calls.
inline RolloutBuffer collect_rollout(Episode& env, const AgentParams& params, const AgentSpec& spec,
                                     std::size_t n_steps, Rng& rng, bool greedy = false) {
  const std::size_t nb = spec.actor.output_size();
  if (nb != env.config().n_bins) throw DimensionMismatch("actor head width differs from the action space");
  RolloutBuffer b;
  b.n_bins = nb;
  b.obs.resize(kObsDim, static_cast<Eigen::Index>(n_steps));
  b.masks.reserve(n_steps * nb);
  for (auto* v : {&b.log_probs, &b.rewards, &b.values, &b.esu_flow, &b.grid}) v->reserve(n_steps);
  b.actions.reserve(n_steps);
  b.dones.reserve(n_steps);
  const auto net = AgentLayers::from(params, spec);

  for (std::size_t i = 0; i < n_steps; ++i) {
    const auto& o = env.observation();
    const nn::Matrix x = Eigen::Map<const nn::Matrix>(o.data(), kObsDim, 1);
    b.obs.col(static_cast<Eigen::Index>(i)) = x;
    const auto pass = agent_forward(net, spec, x);
    const auto mask = env.mask();
    const auto dist = policy_distribution({pass.actor.output.data(), nb}, mask);
    std::size_t a = 0;
    if (greedy) {
      a = static_cast<std::size_t>(std::max_element(dist.probs.begin(), dist.probs.end()) - dist.probs.begin());
    } else {
      a = sample_categorical(dist, rng);
    }
    const auto out = env.step(env.fraction(a));
    b.masks.insert(b.masks.end(), mask.begin(), mask.end());
    b.actions.push_back(a);
    b.log_probs.push_back(dist.log_probs[a]);
    b.values.push_back(pass.critic.output(0, 0));
    b.rewards.push_back(out.reward);
    b.dones.push_back(out.done ? 1 : 0);
    b.esu_flow.push_back(out.info.esu_flow);
    b.grid.push_back(out.info.grid);
    if (out.done) env.reset();
  }
  b.last_value = b.dones.back() ? 0.0 : state_value(net, spec, env.observation());
  return b;
}

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Raw (unnormalized) GAE advantages and lambda-returns.
inline GaeResult compute_gae(const RolloutBuffer& b, double gamma, double lambda) {
  const std::size_t n = b.size();
  GaeResult g;
  g.advantages.assign(n, 0.0);
  g.returns.assign(n, 0.0);
  double next_adv = 0.0;
  double next_value = b.last_value;
  for (std::size_t i = n; i-- > 0;) {
    const double live = b.dones[i] ? 0.0 : 1.0;
    const double delta = b.rewards[i] + gamma * next_value * live - b.values[i];
    next_adv = delta + gamma * lambda * live * next_adv;
    g.advantages[i] = next_adv;
    g.returns[i] = next_adv + b.values[i];
    next_value = b.values[i];
  }
  return g;
}

inline std::vector<double> normalize_advantages(std::vector<double> a) {
  if (a.empty()) return a;
  const double n = static_cast<double>(a.size());
  const double mean = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double var = 0.0;
  for (double x : a) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / n);
  for (double& x : a) x = (x - mean) / (sd + 1e-8);
  return a;
}

// A minibatch in the layout consumed by ppo_loss.
struct PPOBatch {
  nn::Matrix obs;
  std::vector<std::uint8_t> masks;
  std::size_t n_bins = 0;
  std::vector<std::size_t> actions;
  std::vector<double> old_log_probs;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const { return actions.size(); }
};

inline PPOBatch gather_batch(const RolloutBuffer& b, const std::vector<double>& adv, const std::vector<double>& ret,
                             std::span<const std::size_t> idx) {
  PPOBatch m;
  m.n_bins = b.n_bins;
  m.obs.resize(kObsDim, static_cast<Eigen::Index>(idx.size()));
  m.masks.reserve(idx.size() * b.n_bins);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto i = idx[j];
    m.obs.col(static_cast<Eigen::Index>(j)) = b.obs.col(static_cast<Eigen::Index>(i));
    const auto mk = b.mask(i);
    m.masks.insert(m.masks.end(), mk.begin(), mk.end());
    m.actions.push_back(b.actions[i]);
    m.old_log_probs.push_back(b.log_probs[i]);
    m.advantages.push_back(adv[i]);
    m.returns.push_back(ret[i]);
  }
  return m;
}

struct LossTerms {
  bool actor = true;
  bool critic = true;
};

struct PPOLoss {
  double actor_loss = 0.0;   // clipped surrogate minus entropy bonus
  double critic_loss = 0.0;  // value_coef * mean squared error
  double entropy = 0.0;
  double clip_fraction = 0.0;
  AgentParams grad;

  double total() const { return actor_loss + critic_loss; }
};

// Minibatch-mean PPO loss and its exact gradient with respect to all three
// parameter blocks.
inline PPOLoss ppo_loss(const AgentParams& p, const AgentSpec& spec, const PPOBatch& batch, const PPOConfig& cfg,
                        LossTerms terms = {}) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  const auto nb = static_cast<Eigen::Index>(batch.n_bins);
  const double inv_n = 1.0 / static_cast<double>(n);
  const auto net = AgentLayers::from(p, spec);
  const auto pass = agent_forward(net, spec, batch.obs);
  const auto& logits = pass.actor.output;
  const auto& values = pass.critic.output;

  PPOLoss L;
  nn::Matrix d_logits = nn::Matrix::Zero(nb, n);
  nn::Matrix d_values = nn::Matrix::Zero(1, n);
  std::size_t clipped = 0;
  std::vector<double> logp(static_cast<std::size_t>(nb));
  std::vector<double> prob(static_cast<std::size_t>(nb));

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto* mask = batch.masks.data() + static_cast<std::size_t>(i) * batch.n_bins;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < nb; ++k)
      if (mask[k]) mx = std::max(mx, logits(k, i));
    double z = 0.0;
    for (Eigen::Index k = 0; k < nb; ++k)
      if (mask[k]) z += std::exp(logits(k, i) - mx);
    const double lse = mx + std::log(z);
    double ent = 0.0;
    for (Eigen::Index k = 0; k < nb; ++k) {
      if (mask[k]) {
        logp[k] = logits(k, i) - lse;
        prob[k] = std::exp(logp[k]);
        ent -= prob[k] * logp[k];
      } else {
        prob[k] = 0.0;
      }
    }
    L.entropy += ent * inv_n;

    if (terms.actor) {
      const auto a = static_cast<Eigen::Index>(batch.actions[static_cast<std::size_t>(i)]);
      const double adv = batch.advantages[static_cast<std::size_t>(i)];
      const double ratio = std::exp(logp[a] - batch.old_log_probs[static_cast<std::size_t>(i)]);
      const double clipped_ratio = std::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
      const double unclipped_obj = ratio * adv;
      const double clipped_obj = clipped_ratio * adv;
      const bool use_unclipped = unclipped_obj <= clipped_obj;
      if (ratio != clipped_ratio) ++clipped;
      L.actor_loss += (-std::min(unclipped_obj, clipped_obj) - cfg.entropy_coef * ent) * inv_n;
      // d(-surrogate)/d logp_a
      const double g_logp = use_unclipped ? -unclipped_obj * inv_n : 0.0;
      for (Eigen::Index k = 0; k < nb; ++k) {
        if (!mask[k]) continue;
        double g = g_logp * ((k == a ? 1.0 : 0.0) - prob[k]);
        g += cfg.entropy_coef * inv_n * prob[k] * (logp[k] + ent);
        d_logits(k, i) = g;
      }
    }
    if (terms.critic) {
      const double err = values(0, i) - batch.returns[static_cast<std::size_t>(i)];
      L.critic_loss += cfg.value_coef * err * err * inv_n;
      d_values(0, i) = 2.0 * cfg.value_coef * err * inv_n;
    }
  }
  L.clip_fraction = static_cast<double>(clipped) * inv_n;

  const auto ga = nn::backward(net.actor, spec.actor, pass.actor.tape, d_logits);
  const auto gc = nn::backward(net.critic, spec.critic, pass.critic.tape, d_values);
  const nn::Matrix dz = ga.input + gc.input;
  auto gf = nn::backward(net.fe, spec.fe, pass.fe.tape, dz);
  L.grad.fe = std::move(gf.params);
  L.grad.actor = ga.params;
  L.grad.critic = gc.params;
  return L;
}

// One Adam state per parameter block, so a swapped-in actor never inherits
// moments accumulated by another block.
struct AgentOptimizer {
  nn::AdamState fe;
  nn::AdamState actor;
  nn::AdamState critic;

  static AgentOptimizer make(const AgentParams& p, const PPOConfig& cfg) {
    return {nn::AdamState::zeros(p.fe.size(), {.lr = cfg.lr_for(Block::FeatureExtractor)}),
            nn::AdamState::zeros(p.actor.size(), {.lr = cfg.lr_for(Block::Actor)}),
            nn::AdamState::zeros(p.critic.size(), {.lr = cfg.lr_for(Block::Critic)})};
  }
};

struct UpdateStats {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  std::size_t minibatches = 0;
  std::size_t skipped = 0;  // non-finite minibatches
};

inline bool all_finite(const AgentParams& g) {
  for (const auto* v : {&g.fe.values, &g.actor.values, &g.critic.values})
    for (double x : *v)
      if (!std::isfinite(x)) return false;
  return true;
}

inline UpdateStats ppo_update(AgentParams& params, AgentOptimizer& opt, const AgentSpec& spec,
                              const RolloutBuffer& buffer, const PPOConfig& cfg, Rng& rng) {
  const auto gae = compute_gae(buffer, cfg.gamma, cfg.gae_lambda);
  const auto adv = normalize_advantages(gae.advantages);
  const std::size_t n = buffer.size();
  const std::size_t mb = std::min(cfg.minibatch_size, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  UpdateStats st;
  for (std::size_t epoch = 0; epoch < cfg.n_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += mb) {
      const std::size_t len = std::min(mb, n - start);
      const auto batch = gather_batch(buffer, adv, gae.returns, std::span(order).subspan(start, len));
      const auto loss = ppo_loss(params, spec, batch, cfg);
      if (!std::isfinite(loss.total()) || !all_finite(loss.grad)) {
        ++st.skipped;
        continue;
      }
      nn::adam_step(params.fe.span(), loss.grad.fe.span(), opt.fe);
      nn::adam_step(params.actor.span(), loss.grad.actor.span(), opt.actor);
      nn::adam_step(params.critic.span(), loss.grad.critic.span(), opt.critic);
      st.actor_loss += loss.actor_loss;
      st.critic_loss += loss.critic_loss;
      st.entropy += loss.entropy;
      st.clip_fraction += loss.clip_fraction;
      ++st.minibatches;
    }
  }
  if (st.minibatches > 0) {
    const double k = static_cast<double>(st.minibatches);
    st.actor_loss /= k;
    st.critic_loss /= k;
    st.entropy /= k;
    st.clip_fraction /= k;
  }
  return st;
}

struct AdaptLogRow {
  std::size_t update_idx = 0;
  std::size_t env_steps = 0;
  double mean_reward = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
};

inline void write_adapt_log(std::ostream& os, const std::vector<AdaptLogRow>& rows) {
  os << "update_idx,env_steps,mean_reward,actor_loss,critic_loss,entropy\n";
  const auto prec = os.precision(10);
  for (const auto& r : rows)
    os << r.update_idx << ',' << r.env_steps << ',' << r.mean_reward << ',' << r.actor_loss << ',' << r.critic_loss
       << ',' << r.entropy << '\n';
  os.precision(prec);
}

struct AdaptResult {
  AgentParams params;
  std::vector<AdaptLogRow> log;
};

// Called after every update with the 1-based update index, the current
// parameters and the rollout that produced the update.
using UpdateHook = std::function<void(std::size_t, const AgentParams&, const RolloutBuffer&)>;

// K rounds of rollout + PPO update from `init` on one task. Adam states are
// created fresh for every adaptation.
inline AdaptResult inner_adapt(const BuildingProfile& profile, const TaskSpec& task, const EnvConfig& env_cfg,
                               const AgentParams& init, const AgentSpec& spec, std::size_t updates,
                               const PPOConfig& cfg, Rng& rng, const UpdateHook& hook = {}) {
  cfg.validate();
  AdaptResult r{init, {}};
  if (updates == 0) return r;
  Episode env(profile, task, env_cfg);
  auto opt = AgentOptimizer::make(init, cfg);
  for (std::size_t u = 1; u <= updates; ++u) {
    const auto buffer = collect_rollout(env, r.params, spec, cfg.n_steps, rng);
    const auto st = ppo_update(r.params, opt, spec, buffer, cfg, rng);
    r.log.push_back({u, u * cfg.n_steps, buffer.mean_reward(), st.actor_loss, st.critic_loss, st.entropy});
    if (hook) hook(u, r.params, buffer);
  }
  return r;
}

}  // namespace cfe
