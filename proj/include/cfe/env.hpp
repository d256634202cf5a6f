#pragma once

// Building energy-storage control as a deterministic MDP over one weekly
// episode of a BuildingProfile.
//
// Observation layout (30 entries; energies are divided by the storage
// capacity v, prices by 0.4, temperatures by 30, irradiation by 1000):
//   0-1   hour-of-day sin, cos          2-3   day-of-week sin, cos
//   4     state of charge H/v           5     capacity scale v/50
//   6-9   price t..t+3                  10-13 temperature t..t+3
//   14-17 irradiation t..t+3            18-21 load t, t-1, t-2, t-3
//   22-25 pv t, t-1, t-2, t-3           26    thermal t
//   27    grid draw at t-1              28    ramping sum over the last h steps
//   29    previous action fraction
// Lookups outside the episode window read as 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cfe/error.hpp"
#include "cfe/profiles.hpp"
#include "cfe/random.hpp"

namespace cfe {

constexpr std::size_t kObsDim = 30;
using Observation = std::array<double, kObsDim>;

struct EnvConfig {
  double alpha_cost = 1.0;
  double alpha_ramp = 0.5;
  std::size_t ramp_window = 4;  // h
  std::size_t n_bins = 21;
  double initial_soc = 0.5;
  std::size_t episode_hours = kHoursPerWeek;
  // RBC: charge fraction per hour in the night window.
  double rbc_charge_fraction = 0.15;

  void validate() const {
    if (n_bins < 3 || n_bins % 2 == 0) throw ConfigError("n_bins must be an odd integer >= 3");
    if (alpha_cost < 0.0 || alpha_ramp < 0.0) throw ConfigError("reward weights must be non-negative");
    if (initial_soc < 0.0 || initial_soc > 1.0) throw ConfigError("initial_soc must lie in [0, 1]");
    if (episode_hours != kHoursPerWeek) throw ConfigError("episodes are exactly one week (168 hours)");
  }
};

struct TaskSpec {
  std::string profile_id;
  std::size_t start_hour = 0;
  std::string key;

  static TaskSpec make(std::string profile_id, std::size_t start_hour) {
    TaskSpec t{std::move(profile_id), start_hour, {}};
    const auto h = fnv1a(t.profile_id + "@" + std::to_string(start_hour));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    t.key = buf;
    return t;
  }

  bool operator==(const TaskSpec&) const = default;
};

// One task per full week of each profile.
inline std::vector<TaskSpec> weekly_tasks(const BuildingProfile& p) {
  std::vector<TaskSpec> out;
  for (std::size_t w = 0; w < p.weeks(); ++w) out.push_back(TaskSpec::make(p.id, w * kHoursPerWeek));
  return out;
}

struct EsuState {
  double stored = 0.0;    // H_t [kWh]
  double capacity = 0.0;  // v [kWh]

  double soc() const { return capacity > 0.0 ? stored / capacity : 0.0; }
};

struct ActionRange {
  double lo = 0.0;
  double hi = 0.0;
};

// Discretized charge fractions a_k = -1 + 2k/(n-1).
struct ActionSpace {
  std::size_t n_bins = 21;

  double fraction(std::size_t k) const {
    const auto half = static_cast<std::ptrdiff_t>((n_bins - 1) / 2);
    // exact at the zero bin and both ends
    return static_cast<double>(static_cast<std::ptrdiff_t>(k) - half) / static_cast<double>(half);
  }
  std::size_t zero_bin() const { return (n_bins - 1) / 2; }
};

// Tolerance for comparing bin fractions with range endpoints.
constexpr double kMaskTolerance = 1e-9;

// Feasible charge fractions of capacity. Discharge is limited by the stored
// energy and forbidden while PV covers the demand.
inline ActionRange valid_action_range(double e_pv, double e_demand, const EsuState& esu) {
  if (!(esu.capacity > 0.0)) return {0.0, 0.0};
  const double hi = (esu.capacity - esu.stored) / esu.capacity;
  const double lo = e_pv >= e_demand ? 0.0 : -esu.stored / esu.capacity;
  return {std::min(lo, 0.0), std::max(hi, 0.0)};
}

inline std::vector<std::uint8_t> mask_bins(const ActionSpace& space, ActionRange r) {
  if (r.lo > r.hi) throw ContractViolation("mask_bins: lo > hi");
  std::vector<std::uint8_t> m(space.n_bins, 0);
  for (std::size_t k = 0; k < space.n_bins; ++k) {
    const double a = space.fraction(k);
    m[k] = (a >= r.lo - kMaskTolerance && a <= r.hi + kMaskTolerance) ? 1 : 0;
  }
  m[space.zero_bin()] = 1;
  return m;
}

// r_t = -(a1 * price * E_r[t] + a2 * sum_{t'=t-h}^{t} |E_r[t'] - E_r[t'-1]|).
// `window` holds E_r[t-h-1 .. t] (h + 2 values, oldest first).
inline double reward_fn(std::span<const double> window, double price, double alpha_cost, double alpha_ramp,
                        std::size_t h) {
  if (window.size() != h + 2) throw DimensionMismatch("reward_fn: window must hold h + 2 grid values");
  double ramp = 0.0;
  for (std::size_t k = 1; k < window.size(); ++k) ramp += std::abs(window[k] - window[k - 1]);
  return -(alpha_cost * price * window.back() + alpha_ramp * ramp);
}

struct EnvState {
  std::size_t t = 0;
  EsuState esu;
  // E_r[t-h-1 .. t-1]; pre-episode entries are 0.
  std::deque<double> grid_history;
  double last_action = 0.0;
  Observation observation{};
};

struct StepInfo {
  double grid = 0.0;      // E_r
  double esu_flow = 0.0;  // E_ESU, positive = charge
  bool clamp_bound = false;
};

struct StepOutcome {
  EnvState next;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

namespace env_detail {

inline double at(const std::vector<double>& s, const TaskSpec& task, std::ptrdiff_t t, std::size_t len) {
  if (t < 0 || t >= static_cast<std::ptrdiff_t>(len)) return 0.0;
  const auto idx = task.start_hour + static_cast<std::size_t>(t);
  return idx < s.size() ? s[idx] : 0.0;
}

}  // namespace env_detail

constexpr std::size_t kLookahead = 3;

inline Observation observe(const EnvState& s, const BuildingProfile& p, const TaskSpec& task, const EnvConfig& cfg) {
  using env_detail::at;
  const auto len = cfg.episode_hours;
  const auto t = static_cast<std::ptrdiff_t>(s.t);
  const double v = p.esu_capacity > 0.0 ? p.esu_capacity : 1.0;
  const auto abs = task.start_hour + s.t;
  const double hod = static_cast<double>(p.hour_of_day(abs));
  const double dow = static_cast<double>(p.day_of_week(abs));
  constexpr double tau = 2.0 * std::numbers::pi;

  Observation o{};
  std::size_t i = 0;
  o[i++] = std::sin(tau * hod / 24.0);
  o[i++] = std::cos(tau * hod / 24.0);
  o[i++] = std::sin(tau * dow / 7.0);
  o[i++] = std::cos(tau * dow / 7.0);
  o[i++] = s.esu.soc();
  o[i++] = p.esu_capacity / 50.0;
  for (std::size_t k = 0; k <= kLookahead; ++k) o[i++] = at(p.price, task, t + k, len) / 0.4;
  for (std::size_t k = 0; k <= kLookahead; ++k) o[i++] = at(p.temperature, task, t + k, len) / 30.0;
  for (std::size_t k = 0; k <= kLookahead; ++k) o[i++] = at(p.irradiation, task, t + k, len) / 1000.0;
  for (std::size_t k = 0; k <= 3; ++k) o[i++] = at(p.load, task, t - static_cast<std::ptrdiff_t>(k), len) / v;
  for (std::size_t k = 0; k <= 3; ++k) o[i++] = at(p.pv, task, t - static_cast<std::ptrdiff_t>(k), len) / v;
  o[i++] = at(p.thermal, task, t, len) / v;
  o[i++] = s.grid_history.empty() ? 0.0 : s.grid_history.back() / v;
  double ramp = 0.0;
  for (std::size_t k = 1; k < s.grid_history.size(); ++k) ramp += std::abs(s.grid_history[k] - s.grid_history[k - 1]);
  o[i++] = ramp / v;
  o[i++] = s.last_action;
  return o;
}

inline EnvState reset(const BuildingProfile& p, const TaskSpec& task, const EnvConfig& cfg) {
  if (task.start_hour + cfg.episode_hours > p.hours())
    throw ConfigError("task window of " + task.profile_id + " exceeds the profile length");
  EnvState s;
  s.esu = {cfg.initial_soc * p.esu_capacity, p.esu_capacity};
  s.grid_history.assign(cfg.ramp_window + 1, 0.0);
  s.observation = observe(s, p, task, cfg);
  return s;
}

inline double demand_at(const BuildingProfile& p, const TaskSpec& task, std::size_t t) {
  const auto i = task.start_hour + t;
  return p.load[i] + p.thermal[i];
}

inline ActionRange current_range(const EnvState& s, const BuildingProfile& p, const TaskSpec& task) {
  const auto i = task.start_hour + s.t;
  return valid_action_range(p.pv[i], demand_at(p, task, s.t), s.esu);
}

inline std::vector<std::uint8_t> current_mask(const EnvState& s, const BuildingProfile& p, const TaskSpec& task,
                                              const EnvConfig& cfg) {
  return mask_bins(ActionSpace{cfg.n_bins}, current_range(s, p, task));
}

inline StepOutcome step(const EnvState& s, const BuildingProfile& p, const TaskSpec& task, const EnvConfig& cfg,
                        double a) {
  if (s.t >= cfg.episode_hours) throw ContractViolation("step called on a finished episode");
  const auto range = current_range(s, p, task);
  if (!(a >= range.lo - kMaskTolerance && a <= range.hi + kMaskTolerance))
    throw ContractViolation("action fraction " + std::to_string(a) + " outside the valid range [" +
                            std::to_string(range.lo) + ", " + std::to_string(range.hi) + "]");
  const auto i = task.start_hour + s.t;
  const double v = s.esu.capacity;

  StepOutcome out;
  out.next = s;
  double flow = a * v;
  const double raw = s.esu.stored + flow;
  const double stored = std::clamp(raw, 0.0, v);
  // Corrections within rounding of the mask tolerance are not a binding clamp.
  out.info.clamp_bound = std::abs(stored - raw) > kMaskTolerance * std::max(1.0, v);
  flow = stored - s.esu.stored;
  out.next.esu.stored = stored;
  out.info.esu_flow = flow;
  out.info.grid = std::max(0.0, p.load[i] + p.thermal[i] + flow - p.pv[i]);

  std::vector<double> window(s.grid_history.begin(), s.grid_history.end());
  window.push_back(out.info.grid);
  out.reward = reward_fn(window, p.price[i], cfg.alpha_cost, cfg.alpha_ramp, cfg.ramp_window);

  out.next.grid_history.pop_front();
  out.next.grid_history.push_back(out.info.grid);
  out.next.last_action = a;
  out.next.t = s.t + 1;
  out.done = out.next.t >= cfg.episode_hours;
  if (!out.done) out.next.observation = observe(out.next, p, task, cfg);
  return out;
}

// Time-of-day rule: charge during [22, 06), discharge to cover the residual
// demand during [14, 20), idle otherwise; clipped into the valid range.
inline double rbc_policy(const EnvState& s, const BuildingProfile& p, const TaskSpec& task, const EnvConfig& cfg) {
  const auto i = task.start_hour + s.t;
  const auto hod = p.hour_of_day(i);
  const auto range = current_range(s, p, task);
  double a = 0.0;
  if (hod >= 22 || hod < 6) {
    a = cfg.rbc_charge_fraction;
  } else if (hod >= 14 && hod < 20) {
    const double residual = std::max(0.0, demand_at(p, task, s.t) - p.pv[i]);
    a = s.esu.capacity > 0.0 ? -residual / s.esu.capacity : 0.0;
  }
  return std::clamp(a, range.lo, range.hi);
}

// Convenience wrapper owning the current state of one episode.
class Episode {
 public:
  Episode(const BuildingProfile& profile, TaskSpec task, EnvConfig cfg)
      : profile_(&profile), task_(std::move(task)), cfg_(cfg), state_(cfe::reset(*profile_, task_, cfg_)) {}

  void reset() { state_ = cfe::reset(*profile_, task_, cfg_); }
  const EnvState& state() const { return state_; }
  const Observation& observation() const { return state_.observation; }
  std::vector<std::uint8_t> mask() const { return current_mask(state_, *profile_, task_, cfg_); }
  double fraction(std::size_t bin) const { return ActionSpace{cfg_.n_bins}.fraction(bin); }

  StepOutcome step(double a) {
    auto out = cfe::step(state_, *profile_, task_, cfg_, a);
    state_ = out.next;
    return out;
  }

  double rbc_action() const { return rbc_policy(state_, *profile_, task_, cfg_); }
  const BuildingProfile& profile() const { return *profile_; }
  const TaskSpec& task() const { return task_; }
  const EnvConfig& config() const { return cfg_; }

 private:
  const BuildingProfile* profile_;
  TaskSpec task_;
  EnvConfig cfg_;
  EnvState state_;
};

}  // namespace cfe
