#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "cfe/random.hpp"
#include "cfe/task_prep.hpp"

using namespace cfe;

namespace {

std::vector<double> naive_dft_magnitudes(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<double> out(n / 2 + 1);
  for (std::size_t k = 0; k < out.size(); ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * t) / static_cast<double>(n);
      re += x[t] * std::cos(ang);
      im += x[t] * std::sin(ang);
    }
    out[k] = std::sqrt(re * re + im * im);
  }
  return out;
}

DistanceMatrix random_distances(std::size_t n, Rng& rng) {
  auto D = DistanceMatrix::zeros(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) D(i, j) = D(j, i) = uniform01(rng);
  return D;
}

using Members = std::vector<std::size_t>;
struct OracleMerge {
  Members a, b;
  double distance;
};

// Average linkage from the definition, recomputed over all pairs each step.
std::vector<OracleMerge> brute_force_hac(const DistanceMatrix& D, std::size_t k) {
  std::vector<Members> clusters;
  for (std::size_t i = 0; i < D.n; ++i) clusters.push_back({i});
  std::vector<OracleMerge> seq;
  while (clusters.size() > k) {
    std::size_t bi = 0, bj = 0;
    double best = 1e300;
    std::pair<std::size_t, std::size_t> best_key{~0ull, ~0ull};
    for (std::size_t i = 0; i < clusters.size(); ++i)
      for (std::size_t j = 0; j < clusters.size(); ++j) {
        if (i == j) continue;
        const std::pair<std::size_t, std::size_t> key = std::minmax(clusters[i].front(), clusters[j].front());
        double s = 0.0;
        for (auto x : clusters[i])
          for (auto y : clusters[j]) s += D(x, y);
        s /= static_cast<double>(clusters[i].size() * clusters[j].size());
        if (s < best - 1e-15 || (std::abs(s - best) <= 1e-15 && key < best_key)) {
          best = s;
          best_key = key;
          bi = clusters[i].front() < clusters[j].front() ? i : j;
          bj = bi == i ? j : i;
        }
      }
    seq.push_back({clusters[bi], clusters[bj], best});
    Members m = clusters[bi];
    m.insert(m.end(), clusters[bj].begin(), clusters[bj].end());
    std::sort(m.begin(), m.end());
    clusters[bi] = m;
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  return seq;
}

std::vector<Members> merge_members(const ClusterAssignment& a, std::size_t n) {
  std::vector<Members> by_id;
  for (std::size_t i = 0; i < n; ++i) by_id.push_back({i});
  for (const auto& m : a.merges) {
    Members u = by_id[m.a];
    u.insert(u.end(), by_id[m.b].begin(), by_id[m.b].end());
    std::sort(u.begin(), u.end());
    by_id.push_back(u);
  }
  return by_id;
}

std::set<std::set<std::size_t>> partition(const std::vector<std::size_t>& labels) {
  std::map<std::size_t, std::set<std::size_t>> m;
  for (std::size_t i = 0; i < labels.size(); ++i) m[labels[i]].insert(i);
  std::set<std::set<std::size_t>> out;
  for (auto& [_, s] : m) out.insert(s);
  return out;
}

SpectralSignature unit(std::vector<double> v) { return {std::move(v), false}; }

}  // namespace

TEST(SplineDerivative, ConstantAndLinear) {
  const std::vector<double> c(50, 4.2);
  for (double d : smoothed_derivative(c)) EXPECT_LT(std::abs(d), 1e-9);
  std::vector<double> lin(30);
  for (std::size_t t = 0; t < lin.size(); ++t) lin[t] = 3.0 * static_cast<double>(t);
  for (double d : smoothed_derivative(lin)) EXPECT_NEAR(d, 3.0, 1e-12);
}

TEST(SplineDerivative, MatchesAnalyticDerivativeOfSine) {
  std::vector<double> x(168);
  const double w = 2.0 * std::numbers::pi / 24.0;
  for (std::size_t t = 0; t < x.size(); ++t) x[t] = std::sin(w * static_cast<double>(t));
  const auto d = smoothed_derivative(x);
  for (std::size_t t = 5; t + 5 < x.size(); ++t) EXPECT_NEAR(d[t], w * std::cos(w * static_cast<double>(t)), 1e-3) << t;
}

TEST(SplineDerivative, TooShortThrows) {
  EXPECT_THROW(smoothed_derivative(std::vector<double>{1, 2, 3}), ContractViolation);
}

TEST(FourierSignature, MatchesNaiveDft) {
  Rng rng(5);
  for (std::size_t n : {16u, 17u, 31u, 168u}) {
    std::vector<double> x(n);
    for (auto& v : x) v = normal(rng);
    const auto got = dft_magnitudes(x);
    const auto want = naive_dft_magnitudes(x);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-9);
    const auto sig = fourier_signature(x);
    double norm = 0.0;
    for (double m : sig.magnitudes) norm += m * m;
    EXPECT_NEAR(norm, 1.0, 1e-12);
  }
}

TEST(FourierSignature, SingleToneConcentratesInItsBin) {
  const std::size_t n = 64, k = 5;
  std::vector<double> x(n);
  for (std::size_t t = 0; t < n; ++t) x[t] = std::cos(2.0 * std::numbers::pi * k * t / n);
  const auto s = fourier_signature(x);
  for (std::size_t b = 0; b < s.magnitudes.size(); ++b) EXPECT_NEAR(s.magnitudes[b], b == k ? 1.0 : 0.0, 1e-12);
}

TEST(FourierSignature, AmplitudeInvariantAndZeroDegenerate) {
  Rng rng(1);
  std::vector<double> x(40), y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    x[i] = normal(rng);
    y[i] = 2.0 * x[i];
  }
  EXPECT_EQ(fourier_signature(x).magnitudes, fourier_signature(y).magnitudes);
  const auto z = series_signature(std::vector<double>(24, 1.5));
  EXPECT_TRUE(z.degenerate);
}

TEST(CosineDistance, ExamplesAndOracle) {
  const auto same = cosine_distance_matrix({unit({0.6, 0.8}), unit({0.6, 0.8})});
  EXPECT_NEAR(same(0, 1), 0.0, 1e-15);
  const auto orth = cosine_distance_matrix({unit({1.0, 0.0}), unit({0.0, 1.0})});
  EXPECT_EQ(orth(0, 1), 1.0);
  Rng rng(2);
  std::vector<SpectralSignature> sigs;
  for (int i = 0; i < 5; ++i) {
    std::vector<double> v(9);
    for (auto& e : v) e = uniform01(rng);
    sigs.push_back(unit(v));
  }
  const auto D = cosine_distance_matrix(sigs);
  D.validate();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      if (i == j) {
        EXPECT_EQ(D(i, j), 0.0);
        continue;
      }
      double dot = 0, na = 0, nb = 0;
      for (std::size_t k = 0; k < 9; ++k) {
        dot += sigs[i].magnitudes[k] * sigs[j].magnitudes[k];
        na += sigs[i].magnitudes[k] * sigs[i].magnitudes[k];
        nb += sigs[j].magnitudes[k] * sigs[j].magnitudes[k];
      }
      EXPECT_NEAR(D(i, j), 1.0 - dot / std::sqrt(na * nb), 1e-12);
    }
}

TEST(CosineDistance, DegenerateSignatureNamesTheSeries) {
  try {
    cosine_distance_matrix({unit({1.0}), SpectralSignature{{0.0}, true}}, {"alpha", "bravo"});
    FAIL();
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("bravo"), std::string::npos);
  }
}

TEST(Hac, EachPointOwnClusterWhenKEqualsN) {
  Rng rng(3);
  const auto D = random_distances(6, rng);
  const auto a = hac_average_linkage(D, 6);
  EXPECT_TRUE(a.merges.empty());
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(a.labels[i], i);
  EXPECT_THROW(hac_average_linkage(D, 0), ConfigError);
  EXPECT_THROW(hac_average_linkage(D, 7), ConfigError);
}

TEST(Hac, RecoversSeparatedGroups) {
  auto D = DistanceMatrix::zeros(6);
  const std::vector<int> group{0, 1, 0, 1, 1, 0};
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j)
      if (i != j) D(i, j) = group[i] == group[j] ? 0.05 + 0.01 * static_cast<double>(i + j) : 0.9;
  const auto a = hac_average_linkage(D, 2);
  EXPECT_EQ(a.labels, (std::vector<std::size_t>{0, 1, 0, 1, 1, 0}));
}

TEST(Hac, MergeSequenceMatchesBruteForceOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 7);
    const auto D = random_distances(n, rng);
    const std::size_t k = 1 + uniform_index(rng, n);
    const auto a = hac_average_linkage(D, k);
    const auto want = brute_force_hac(D, k);
    const auto members = merge_members(a, n);
    ASSERT_EQ(a.merges.size(), want.size());
    for (std::size_t s = 0; s < want.size(); ++s) {
      EXPECT_EQ(members[a.merges[s].a], want[s].a) << trial << ":" << s;
      EXPECT_EQ(members[a.merges[s].b], want[s].b) << trial << ":" << s;
      EXPECT_NEAR(a.merges[s].distance, want[s].distance, 1e-12);
    }
  }
}

TEST(Hac, TiesGoToLexicographicallySmallestPair) {
  auto D = DistanceMatrix::zeros(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i != j) D(i, j) = 0.5;
  const auto a = hac_average_linkage(D, 1);
  ASSERT_EQ(a.merges.size(), 3u);
  EXPECT_EQ(a.merges[0].a, 0u);
  EXPECT_EQ(a.merges[0].b, 1u);
  EXPECT_EQ(a.merges[1].a, 4u);
  EXPECT_EQ(a.merges[1].b, 2u);
  EXPECT_EQ(a.merges[2].a, 5u);
  EXPECT_EQ(a.merges[2].b, 3u);
}

TEST(Hac, AmplitudeScalingLeavesLabelsUnchanged) {
  Rng rng(6);
  std::vector<BuildingProfile> ps;
  for (std::uint64_t i = 0; i < 7; ++i) ps.push_back(generate_synthetic_profile(static_cast<Archetype>(i % 3), i, 2));
  std::vector<SpectralSignature> base, scaled;
  for (const auto& p : ps) {
    base.push_back(building_signature(p));
    auto load = p.load;
    const double c = 0.1 + 10.0 * uniform01(rng);
    for (double& v : load) v *= c;
    scaled.push_back(series_signature(load));
  }
  for (std::size_t k = 1; k <= 7; ++k)
    EXPECT_EQ(hac_average_linkage(cosine_distance_matrix(base), k).labels,
              hac_average_linkage(cosine_distance_matrix(scaled), k).labels);
}

TEST(Hac, PermutingInputsPermutesLabels) {
  Rng rng(7);
  const auto D = random_distances(8, rng);
  std::vector<std::size_t> perm{3, 0, 7, 5, 1, 6, 2, 4};
  auto P = DistanceMatrix::zeros(8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) P(i, j) = D(perm[i], perm[j]);
  const auto a = hac_average_linkage(D, 3);
  const auto b = hac_average_linkage(P, 3);
  std::vector<std::size_t> back(8);
  for (std::size_t i = 0; i < 8; ++i) back[perm[i]] = b.labels[i];
  EXPECT_EQ(partition(a.labels), partition(back));
}

TEST(Holdout, SmallestByIdAndCoverage) {
  ClusterAssignment a;
  a.n_clusters = 3;
  a.labels = {0, 0, 1, 0, 2, 1, 0, 0, 2, 1};  // sizes 5, 3, 2
  const auto s = assign_holdout(a, HoldoutRule::Smallest);
  EXPECT_EQ(s.holdout_cluster, 2u);
  EXPECT_EQ(s.holdout.size(), 2u);
  const auto b = assign_holdout(a, HoldoutRule::ById, 1);
  EXPECT_EQ(b.holdout, (std::vector<std::size_t>{2, 5, 9}));
  std::set<std::size_t> all(b.train.begin(), b.train.end());
  for (auto h : b.holdout) EXPECT_TRUE(all.insert(h).second);
  EXPECT_EQ(all.size(), 10u);
  ClusterAssignment one;
  one.n_clusters = 1;
  one.labels = {0, 0};
  EXPECT_THROW(assign_holdout(one, HoldoutRule::Smallest), ConfigError);
}

TEST(Holdout, SmallestTieGoesToLowestId) {
  ClusterAssignment a;
  a.n_clusters = 3;
  a.labels = {0, 1, 1, 2};
  EXPECT_EQ(assign_holdout(a, HoldoutRule::Smallest).holdout_cluster, 0u);
}

TEST(Ladder, PlantedOrder) {
  // Four clusters of two points; inter-cluster distance from cluster 0 is
  // planted as 0.2 (c2), 0.5 (c3), 0.8 (c1).
  const std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2, 3, 3};
  const std::vector<double> from0{0.0, 0.8, 0.2, 0.5};
  auto D = DistanceMatrix::zeros(8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      if (i == j) continue;
      const auto li = labels[i], lj = labels[j];
      D(i, j) = li == lj ? 0.01 : (li == 0 ? from0[lj] : lj == 0 ? from0[li] : 0.6);
    }
  ClusterAssignment a;
  a.n_clusters = 4;
  a.labels = labels;
  const auto ladder = cluster_distance_ladder(a, D, 0);
  ASSERT_EQ(ladder.size(), 3u);
  EXPECT_EQ(ladder[0].cluster, 2u);
  EXPECT_EQ(ladder[1].cluster, 3u);
  EXPECT_EQ(ladder[2].cluster, 1u);
  EXPECT_NEAR(ladder[1].distance, 0.5, 1e-15);
  const auto with_ref = cluster_distance_ladder(a, D, 0, true);
  EXPECT_EQ(with_ref.front().cluster, 0u);
  EXPECT_EQ(with_ref.front().distance, 0.0);
}

TEST(Ladder, TwoClustersGiveTheOther) {
  ClusterAssignment a;
  a.n_clusters = 2;
  a.labels = {0, 1};
  auto D = DistanceMatrix::zeros(2);
  D(0, 1) = D(1, 0) = 0.3;
  const auto l = cluster_distance_ladder(a, D, 1);
  ASSERT_EQ(l.size(), 1u);
  EXPECT_EQ(l[0].cluster, 0u);
}

TEST(DistanceCsv, Format) {
  auto D = DistanceMatrix::zeros(2);
  D(0, 1) = D(1, 0) = 0.25;
  std::ostringstream os;
  write_distance_csv(os, D, {"a", "b"});
  EXPECT_EQ(os.str(), "id,a,b\na,0,0.25\nb,0.25,0\n");
}
