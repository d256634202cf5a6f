#pragma once

// Task selection: each building's load history is smoothed with a natural
// cubic spline, differentiated, turned into a unit-norm magnitude spectrum,
// compared by cosine distance and grouped by average-linkage agglomerative
// clustering. One cluster is then held out for meta-testing.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdio>
#include <iterator>
#include <limits>
#include <mutex>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cfe/error.hpp"
#include "cfe/profiles.hpp"

namespace cfe {

// Derivative of the natural cubic spline through (i, x_i), i = 0..n-1,
// evaluated at the knots.
inline std::vector<double> smoothed_derivative(std::span<const double> x) {
  const std::size_t n = x.size();
  if (n < 4) throw ContractViolation("smoothed_derivative needs at least 4 points");
  for (double v : x)
    if (!std::isfinite(v)) throw NonFiniteError("smoothed_derivative: non-finite sample");
  // Second derivatives m_i with m_0 = m_{n-1} = 0; unit knot spacing gives
  // m_{i-1} + 4 m_i + m_{i+1} = 6 (x_{i+1} - 2 x_i + x_{i-1}).
  std::vector<double> m(n, 0.0), c(n, 0.0), d(n, 0.0);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double rhs = 6.0 * (x[i + 1] - 2.0 * x[i] + x[i - 1]);
    const double denom = 4.0 - (i > 1 ? c[i - 1] : 0.0);
    c[i] = 1.0 / denom;
    d[i] = (rhs - (i > 1 ? d[i - 1] : 0.0)) / denom;
  }
  for (std::size_t i = n - 2; i >= 1; --i) {
    m[i] = d[i] - c[i] * m[i + 1];
    if (i == 1) break;
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i + 1 < n; ++i) out[i] = (x[i + 1] - x[i]) - (2.0 * m[i] + m[i + 1]) / 6.0;
  out[n - 1] = (x[n - 1] - x[n - 2]) + (m[n - 2] + 2.0 * m[n - 1]) / 6.0;
  return out;
}

struct SpectralSignature {
  std::vector<double> magnitudes;  // one-sided, bins 0..n/2
  bool degenerate = false;         // input was identically zero
};

namespace detail {
// FFTW planning is not thread-safe.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

// One-sided DFT magnitudes |sum_t x_t e^{-2 pi i k t / n}|, k = 0..n/2.
inline std::vector<double> dft_magnitudes(std::span<const double> x) {
  const int n = static_cast<int>(x.size());
  if (n == 0) throw ContractViolation("dft of an empty series");
  const int bins = n / 2 + 1;
  double* in = fftw_alloc_real(static_cast<std::size_t>(n));
  fftw_complex* out = fftw_alloc_complex(static_cast<std::size_t>(bins));
  fftw_plan plan;
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
  }
  std::copy(x.begin(), x.end(), in);
  fftw_execute(plan);
  std::vector<double> mag(static_cast<std::size_t>(bins));
  for (int k = 0; k < bins; ++k) mag[static_cast<std::size_t>(k)] = std::hypot(out[k][0], out[k][1]);
  {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);
  return mag;
}

inline SpectralSignature fourier_signature(std::span<const double> derivative) {
  SpectralSignature s;
  s.magnitudes = dft_magnitudes(derivative);
  const double norm = std::sqrt(std::inner_product(s.magnitudes.begin(), s.magnitudes.end(), s.magnitudes.begin(), 0.0));
  if (norm == 0.0) {
    s.degenerate = true;
    return s;
  }
  for (double& v : s.magnitudes) v /= norm;
  return s;
}

inline SpectralSignature series_signature(std::span<const double> x) { return fourier_signature(smoothed_derivative(x)); }

// Signature of a building's full load history.
inline SpectralSignature building_signature(const BuildingProfile& p) { return series_signature(p.load); }

struct DistanceMatrix {
  std::size_t n = 0;
  std::vector<double> d;  // row-major n x n

  double operator()(std::size_t i, std::size_t j) const { return d[i * n + j]; }
  double& operator()(std::size_t i, std::size_t j) { return d[i * n + j]; }

  static DistanceMatrix zeros(std::size_t n) { return {n, std::vector<double>(n * n, 0.0)}; }

  void validate() const {
    if (d.size() != n * n) throw DimensionMismatch("distance matrix storage does not match its size");
    for (std::size_t i = 0; i < n; ++i) {
      if ((*this)(i, i) != 0.0) throw ContractViolation("distance matrix diagonal must be zero");
      for (std::size_t j = 0; j < n; ++j) {
        const double v = (*this)(i, j);
        if (!(v >= 0.0 && v <= 2.0) || v != (*this)(j, i))
          throw ContractViolation("distance matrix must be symmetric with entries in [0, 2]");
      }
    }
  }
};

inline DistanceMatrix cosine_distance_matrix(const std::vector<SpectralSignature>& sigs,
                                             const std::vector<std::string>& names = {}) {
  if (sigs.size() < 2) throw ContractViolation("distance matrix needs at least two signatures");
  for (std::size_t i = 0; i < sigs.size(); ++i)
    if (sigs[i].degenerate)
      throw ContractViolation("degenerate (all-zero) signature for series " +
                              (i < names.size() ? names[i] : std::to_string(i)));
  const std::size_t n = sigs.size();
  auto D = DistanceMatrix::zeros(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const auto& a = sigs[i].magnitudes;
      const auto& b = sigs[j].magnitudes;
      if (a.size() != b.size()) throw DimensionMismatch("signatures have different lengths");
      const double dot = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
      const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
      const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
      const double v = std::clamp(1.0 - dot / (na * nb), 0.0, 2.0);
      D(i, j) = D(j, i) = v;
    }
  return D;
}

struct Merge {
  std::size_t a = 0;  // cluster ids; leaves are 0..n-1, merge s creates n + s
  std::size_t b = 0;
  double distance = 0.0;
  std::size_t size = 0;  // members of the merged cluster
};

struct ClusterAssignment {
  std::vector<Merge> merges;
  std::vector<std::size_t> labels;  // per point, 0..n_clusters-1 ordered by smallest member
  std::size_t n_clusters = 0;

  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> m(n_clusters);
    for (std::size_t i = 0; i < labels.size(); ++i) m[labels[i]].push_back(i);
    return m;
  }
};

inline double average_linkage(const DistanceMatrix& D, const std::vector<std::size_t>& A,
                              const std::vector<std::size_t>& B) {
  double s = 0.0;
  for (auto x : A)
    for (auto y : B) s += D(x, y);
  return s / static_cast<double>(A.size() * B.size());
}

// Repeatedly merges the pair with the smallest average linkage; ties go to
// the lexicographically smallest (min member of a, min member of b).
inline ClusterAssignment hac_average_linkage(const DistanceMatrix& D, std::size_t n_clusters) {
  const std::size_t n = D.n;
  if (n_clusters < 1 || n_clusters > n) throw ConfigError("n_clusters must lie in [1, number of series]");
  struct Node {
    std::size_t id;
    std::vector<std::size_t> members;  // sorted
  };
  std::vector<Node> active;
  for (std::size_t i = 0; i < n; ++i) active.push_back({i, {i}});
  // Cached linkage between active clusters, indexed by position in `active`.
  std::vector<std::vector<double>> link(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) link[i][j] = D(i, j);

  ClusterAssignment out;
  out.n_clusters = n_clusters;
  while (active.size() > n_clusters) {
    std::size_t bi = 0, bj = 1;
    double best = std::numeric_limits<double>::infinity();
    // `active` stays sorted by smallest member, so scanning i < j in order
    // and taking strict improvements implements the tie-break.
    for (std::size_t i = 0; i < active.size(); ++i)
      for (std::size_t j = i + 1; j < active.size(); ++j)
        if (link[i][j] < best) {
          best = link[i][j];
          bi = i;
          bj = j;
        }
    Node merged{n + out.merges.size(), {}};
    std::merge(active[bi].members.begin(), active[bi].members.end(), active[bj].members.begin(),
               active[bj].members.end(), std::back_inserter(merged.members));
    out.merges.push_back({active[bi].id, active[bj].id, best, merged.members.size()});
    // Replace bi with the merged cluster (it keeps the smaller min member), drop bj.
    active[bi] = std::move(merged);
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    link.erase(link.begin() + static_cast<std::ptrdiff_t>(bj));
    for (auto& row : link) row.erase(row.begin() + static_cast<std::ptrdiff_t>(bj));
    for (std::size_t k = 0; k < active.size(); ++k) {
      if (k == bi) continue;
      link[bi][k] = link[k][bi] = average_linkage(D, active[bi].members, active[k].members);
    }
  }
  out.labels.assign(n, 0);
  for (std::size_t c = 0; c < active.size(); ++c)
    for (auto m : active[c].members) out.labels[m] = c;
  return out;
}

enum class HoldoutRule { Smallest, ById };

struct HoldoutSplit {
  std::size_t holdout_cluster = 0;
  std::vector<std::size_t> train;    // point indices
  std::vector<std::size_t> holdout;
};

inline HoldoutSplit assign_holdout(const ClusterAssignment& a, HoldoutRule rule, std::size_t cluster_id = 0) {
  if (a.n_clusters < 2) throw ConfigError("holdout selection needs at least two clusters");
  const auto members = a.members();
  HoldoutSplit s;
  if (rule == HoldoutRule::ById) {
    if (cluster_id >= a.n_clusters) throw ConfigError("holdout cluster id out of range");
    s.holdout_cluster = cluster_id;
  } else {
    s.holdout_cluster = 0;
    for (std::size_t c = 1; c < members.size(); ++c)
      if (members[c].size() < members[s.holdout_cluster].size()) s.holdout_cluster = c;
  }
  for (std::size_t i = 0; i < a.labels.size(); ++i)
    (a.labels[i] == s.holdout_cluster ? s.holdout : s.train).push_back(i);
  return s;
}

struct LadderRung {
  std::size_t cluster = 0;
  double distance = 0.0;
};

// Clusters ordered by average linkage to the reference cluster (ties by id).
// The reference itself is listed first at distance 0 only when requested.
inline std::vector<LadderRung> cluster_distance_ladder(const ClusterAssignment& a, const DistanceMatrix& D,
                                                       std::size_t reference, bool include_reference = false) {
  if (a.n_clusters < 2) throw ConfigError("distance ladder needs at least two clusters");
  if (reference >= a.n_clusters) throw ConfigError("reference cluster id out of range");
  const auto members = a.members();
  std::vector<LadderRung> out;
  for (std::size_t c = 0; c < members.size(); ++c)
    if (c != reference) out.push_back({c, average_linkage(D, members[reference], members[c])});
  std::stable_sort(out.begin(), out.end(), [](const LadderRung& x, const LadderRung& y) { return x.distance < y.distance; });
  if (include_reference) out.insert(out.begin(), {reference, 0.0});
  return out;
}

inline void write_distance_csv(std::ostream& os, const DistanceMatrix& D, const std::vector<std::string>& names) {
  os << "id";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  char buf[32];
  for (std::size_t i = 0; i < D.n; ++i) {
    os << names.at(i);
    for (std::size_t j = 0; j < D.n; ++j) {
      std::snprintf(buf, sizeof buf, "%.12g", D(i, j));
      os << ',' << buf;
    }
    os << '\n';
  }
}

}  // namespace cfe
