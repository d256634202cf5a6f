#pragma once

// Operational metrics over one evaluation horizon, the policies they are
// measured on, and the steps-to-threshold statistic of an adaptation curve.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "cfe/agent_params.hpp"
#include "cfe/env.hpp"
#include "cfe/error.hpp"
#include "cfe/ppo.hpp"
#include "cfe/random.hpp"

namespace cfe {

// Hysteresis automaton: flows inside [-eps, eps] never change the phase, so
// one cycle is one charging phase followed by a discharging phase.
inline std::size_t count_charging_cycles(std::span<const double> esu_flow, double eps) {
  enum class Phase { Idle, Charging, Discharging };
  Phase phase = Phase::Idle;
  std::size_t cycles = 0;
  for (double f : esu_flow) {
    if (f > eps) {
      phase = Phase::Charging;
    } else if (f < -eps) {
      if (phase == Phase::Charging) ++cycles;
      phase = Phase::Discharging;
    }
  }
  return cycles;
}

inline double ramping_metric(std::span<const double> grid) {
  if (grid.size() < 2) throw ContractViolation("ramping_metric needs at least two samples");
  double r = 0.0;
  for (std::size_t t = 1; t < grid.size(); ++t) r += std::abs(grid[t] - grid[t - 1]);
  return r;
}

inline double financial_cost(std::span<const double> grid, std::span<const double> price) {
  if (grid.size() != price.size()) throw DimensionMismatch("financial_cost: grid and price series lengths differ");
  double c = 0.0;
  for (std::size_t t = 0; t < grid.size(); ++t) c += price[t] * grid[t];
  return c;
}

inline double normalize_to_rbc(double value, double rbc) {
  if (!(rbc > 0.0)) throw ContractViolation("RBC reference metric must be positive to normalize against");
  return value / rbc;
}

// One rollout of a fixed policy over the whole episode.
struct EvalTrace {
  std::vector<double> esu_flow;
  std::vector<double> grid;
  std::vector<double> price;
  std::vector<double> rewards;

  double mean_reward() const {
    double s = 0.0;
    for (double r : rewards) s += r;
    return rewards.empty() ? 0.0 : s / static_cast<double>(rewards.size());
  }
};

struct EvalMetrics {
  double cycles = 0.0;
  double ramping = 0.0;
  double cost = 0.0;
  double mean_reward = 0.0;
};

inline EvalMetrics measure(const EvalTrace& tr, double cycle_eps) {
  return {static_cast<double>(count_charging_cycles(tr.esu_flow, cycle_eps)), ramping_metric(tr.grid),
          financial_cost(tr.grid, tr.price), tr.mean_reward()};
}

// `choose(env, rng)` returns the action fraction for the current state.
template <class Policy>
EvalTrace run_episode(const BuildingProfile& profile, const TaskSpec& task, const EnvConfig& cfg, Rng& rng,
                      Policy&& choose) {
  Episode env(profile, task, cfg);
  EvalTrace tr;
  for (bool done = false; !done;) {
    const auto i = task.start_hour + env.state().t;
    const auto out = env.step(choose(env, rng));
    tr.esu_flow.push_back(out.info.esu_flow);
    tr.grid.push_back(out.info.grid);
    tr.price.push_back(profile.price[i]);
    tr.rewards.push_back(out.reward);
    done = out.done;
  }
  return tr;
}

inline EvalTrace evaluate_rbc(const BuildingProfile& profile, const TaskSpec& task, const EnvConfig& cfg) {
  Rng unused(0);
  return run_episode(profile, task, cfg, unused, [](const Episode& env, Rng&) { return env.rbc_action(); });
}

inline EvalTrace evaluate_uniform(const BuildingProfile& profile, const TaskSpec& task, const EnvConfig& cfg,
                                  Rng& rng) {
  return run_episode(profile, task, cfg, rng, [](const Episode& env, Rng& r) {
    const auto mask = env.mask();
    std::vector<std::size_t> valid;
    for (std::size_t k = 0; k < mask.size(); ++k)
      if (mask[k]) valid.push_back(k);
    return env.fraction(valid[uniform_index(r, valid.size())]);
  });
}

// Samples from the learned policy, as during training.
inline EvalTrace evaluate_agent(const BuildingProfile& profile, const TaskSpec& task, const EnvConfig& cfg,
                                const AgentParams& params, const AgentSpec& spec, Rng& rng) {
  const auto net = AgentLayers::from(params, spec);
  return run_episode(profile, task, cfg, rng, [&](const Episode& env, Rng& r) {
    const nn::Matrix x = Eigen::Map<const nn::Matrix>(env.observation().data(), kObsDim, 1);
    const auto pass = agent_forward(net, spec, x);
    const auto mask = env.mask();
    const auto nb = static_cast<std::size_t>(pass.actor.output.rows());
    const auto dist = policy_distribution({pass.actor.output.data(), nb}, mask);
    return env.fraction(sample_categorical(dist, r));
  });
}

// Reward level a learner must reach: a fraction of the way from the uniform
// policy to the rule-based controller.
inline double reward_threshold(double uniform_reward, double rbc_reward, double fraction) {
  return uniform_reward + fraction * (rbc_reward - uniform_reward);
}

// Index (1-based update) of the first update whose trailing-window mean of the
// per-update reward reaches `threshold`; only full windows count.
inline std::optional<std::size_t> updates_to_threshold(std::span<const double> curve, double threshold,
                                                       std::size_t window) {
  if (window == 0) throw ContractViolation("trailing window must be positive");
  double sum = 0.0;
  for (std::size_t u = 0; u < curve.size(); ++u) {
    sum += curve[u];
    if (u >= window) sum -= curve[u - window];
    if (u + 1 >= window && sum / static_cast<double>(window) >= threshold) return u + 1;
  }
  return std::nullopt;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw ContractViolation("median of an empty sample");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(std::span<const double> v) {
  if (v.empty()) throw ContractViolation("mean of an empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Least-squares slope of y against its index.
inline double ls_slope(std::span<const double> y) {
  const auto n = static_cast<double>(y.size());
  if (y.size() < 2) throw ContractViolation("slope needs at least two points");
  double mx = (n - 1) / 2, my = mean(y), sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double dx = static_cast<double>(i) - mx;
    sxy += dx * (y[i] - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

// Trailing moving average; the first window-1 points average what is there.
inline std::vector<double> trailing_mean(std::span<const double> y, std::size_t window) {
  if (window == 0) throw ContractViolation("smoothing window must be positive");
  std::vector<double> out(y.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    sum += y[i];
    if (i >= window) sum -= y[i - window];
    out[i] = sum / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace cfe
