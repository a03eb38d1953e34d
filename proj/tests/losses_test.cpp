#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <set>

#include <gtest/gtest.h>

#include "cctr/error.hpp"
#include "cctr/losses.hpp"
#include "support.hpp"

namespace cctr {
namespace {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;
using loss::DtwCost;
using loss::PairVariant;
using testing::random_tensor;

constexpr PairVariant kVariants[] = {PairVariant::L0, PairVariant::L1, PairVariant::L2,
                                     PairVariant::L3};

// ---- independent oracles ----

// Every monotone path from (0,0) to (r-1,c-1), as cell lists.
void enumerate_paths(std::size_t r, std::size_t c, std::size_t i, std::size_t j,
                     std::vector<std::pair<std::size_t, std::size_t>>& cur,
                     const std::function<void(const std::vector<std::pair<std::size_t, std::size_t>>&)>& visit) {
  cur.emplace_back(i, j);
  if (i == r - 1 && j == c - 1) {
    visit(cur);
  } else {
    if (i + 1 < r && j + 1 < c) enumerate_paths(r, c, i + 1, j + 1, cur, visit);
    if (i + 1 < r) enumerate_paths(r, c, i + 1, j, cur, visit);
    if (j + 1 < c) enumerate_paths(r, c, i, j + 1, cur, visit);
  }
  cur.pop_back();
}

double path_sum(const std::vector<double>& D, std::size_t cols,
                const std::vector<std::pair<std::size_t, std::size_t>>& path, DtwCost cost) {
  double s = 0.0;
  for (const auto& [i, j] : path) {
    const double d = D[i * cols + j];
    s += cost == DtwCost::similarity ? d : 1.0 - d;
  }
  return s;
}

// DTW distance by exhaustive search over monotone paths.
double brute_dtw(const std::vector<double>& D, std::size_t r, std::size_t c, DtwCost cost) {
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::pair<std::size_t, std::size_t>> cur;
  enumerate_paths(r, c, 0, 0, cur, [&](const auto& p) { best = std::min(best, path_sum(D, c, p, cost)); });
  return cost == DtwCost::similarity ? best : -best;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
}

std::vector<double> cosine_matrix(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = cosine(a.data().subspan(i * d, d), b.data().subspan(j * d, d));
  return out;
}

double pair_term(double sigma, double ds) { return std::log1p(std::exp(-sigma * ds)); }

// Pairwise loss of one window by direct double loop.
double brute_pairwise(const std::vector<double>& s, const std::vector<double>& y, PairVariant v,
                      double sigma) {
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!(y[i] > y[j])) continue;
      const double ds = s[i] - s[j], dy = y[i] - y[j];
      bool in = false;
      switch (v) {
        case PairVariant::L0: in = true; break;
        case PairVariant::L1: in = dy - ds >= 0; break;
        case PairVariant::L2: in = ds <= 0; break;
        case PairVariant::L3: in = 0 < ds && ds < dy; break;
      }
      if (in) total += pair_term(sigma, ds);
    }
  return total;
}

std::vector<double> uniforms(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform();
  return v;
}

// Random orthogonal d x d matrix by Gram-Schmidt on Gaussian columns.
std::vector<double> random_rotation(Rng& rng, std::size_t d) {
  std::vector<std::vector<double>> cols;
  while (cols.size() < d) {
    auto v = testing::normals(rng, d);
    for (const auto& u : cols) {
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += u[k] * v[k];
      for (std::size_t k = 0; k < d; ++k) v[k] -= dot * u[k];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    cols.push_back(v);
  }
  std::vector<double> q(d * d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) q[i * d + j] = cols[j][i];
  return q;
}

// ---- pointwise ----

TEST(Pointwise, HalfEverywhereIsLn2) {
  const std::vector<double> y(6, 0.5);
  EXPECT_NEAR(loss::pointwise_logloss(Tensor({2, 3}, std::vector<double>(6, 0.5)), y).item(),
              std::log(2.0), 1e-15);
}

TEST(Pointwise, SinglePositive) {
  EXPECT_NEAR(loss::pointwise_logloss(Tensor({1}, {0.9}), std::vector<double>{1.0}).item(),
              -std::log(0.9), 1e-12);
  EXPECT_NEAR(-std::log(0.9), 0.10536, 1e-5);
}

TEST(Pointwise, VanishesAsPredictionsReachLabels) {
  double prev = 1.0;
  for (double eps : {1e-2, 1e-4, 1e-6}) {
    const double l =
        loss::pointwise_logloss(Tensor({2}, {eps, 1 - eps}), std::vector<double>{0, 1}).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-5);
}

TEST(Pointwise, ClampsSaturatedPredictions) {
  const double l = loss::pointwise_logloss(Tensor({1}, {0.0}), std::vector<double>{1.0}).item();
  EXPECT_NEAR(l, -std::log(1e-7), 1e-9);
}

TEST(Pointwise, LabelOutsideUnitIntervalThrows) {
  EXPECT_THROW(loss::pointwise_logloss(Tensor({2}, {0.5, 0.5}), std::vector<double>{0.2, 1.1}),
               LabelError);
  EXPECT_THROW(loss::pointwise_logloss(Tensor({1}, {0.5}), std::vector<double>{-0.1}), LabelError);
}

TEST(Pointwise, MatchesDirectMean) {
  Rng rng(1);
  const auto s = uniforms(rng, 12), y = uniforms(rng, 12);
  double want = 0.0;
  for (std::size_t k = 0; k < 12; ++k) want -= y[k] * std::log(s[k]) + (1 - y[k]) * std::log(1 - s[k]);
  EXPECT_NEAR(loss::pointwise_logloss(Tensor({3, 4}, s), y).item(), want / 12, 1e-12);
}

// ---- pairwise ----

TEST(Pairwise, TiedScoresGiveLn2ForAdmittingVariants) {
  for (auto v : {PairVariant::L0, PairVariant::L1, PairVariant::L2}) {
    const auto r = loss::pairwise_loss(Tensor({2}, {0.4, 0.4}), std::vector<double>{0.9, 0.1}, v, 10);
    EXPECT_NEAR(r.loss.item(), std::log(2.0), 1e-15) << loss::admits(v, 0, 0.8);
    EXPECT_EQ(r.admitted, 1u);
  }
  // L3 needs a strictly positive score gap.
  const auto l3 = loss::pairwise_loss(Tensor({2}, {0.4, 0.4}), std::vector<double>{0.9, 0.1},
                                      PairVariant::L3, 10);
  EXPECT_EQ(l3.admitted, 0u);
}

TEST(Pairwise, BoundaryAwareDropsOvershootingPair) {
  Parameter p("s", Tensor({2}, {0.95, 0.05}));
  Tape tape;
  const auto r = loss::pairwise_loss(tape.param(p), std::vector<double>{0.9, 0.1}, PairVariant::L1, 10);
  EXPECT_EQ(r.loss.item(), 0.0);
  EXPECT_EQ(r.admitted, 0u);
  tape.backward(r.loss);
  for (double g : tape.grad(p)) EXPECT_EQ(g, 0.0);
}

TEST(Pairwise, UnconstrainedHandValue) {
  const auto r = loss::pairwise_loss(Tensor({2}, {0.9, 0.1}), std::vector<double>{1.0, 0.0},
                                     PairVariant::L0, 1.0);
  EXPECT_NEAR(r.loss.item(), 0.37110, 1e-5);
  EXPECT_NEAR(r.loss.item(), std::log1p(std::exp(-0.8)), 1e-15);
}

TEST(Pairwise, ShortWindowHasNoPairs) {
  const auto r = loss::pairwise_loss(Tensor({1}, {0.3}), std::vector<double>{0.5}, PairVariant::L0, 10);
  EXPECT_TRUE(r.no_pairs);
  EXPECT_EQ(r.loss.item(), 0.0);
}

TEST(Pairwise, EqualLabelsAreSkipped) {
  const auto r = loss::pairwise_loss(Tensor({3}, {0.1, 0.5, 0.9}), std::vector<double>{0.4, 0.4, 0.4},
                                     PairVariant::L0, 10);
  EXPECT_EQ(r.admitted, 0u);
  EXPECT_EQ(r.loss.item(), 0.0);
}

TEST(PairwiseProperty, MatchesDoubleLoopOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t b = 1 + rng.below(3), n = 2 + rng.below(8);
    const auto s = uniforms(rng, b * n);
    auto y = uniforms(rng, b * n);
    if (trial % 3 == 0) {
      for (double& v : y) v = std::round(v * 4) / 4;  // label ties
    }
    const double sigma = 0.5 + 10 * rng.uniform();
    for (auto v : kVariants) {
      double want = 0.0;
      for (std::size_t w = 0; w < b; ++w) {
        want += brute_pairwise({s.begin() + w * n, s.begin() + (w + 1) * n},
                               {y.begin() + w * n, y.begin() + (w + 1) * n}, v, sigma);
      }
      want /= static_cast<double>(b);
      const auto r = loss::pairwise_loss(Tensor({b, n}, s), y, v, sigma);
      EXPECT_NEAR(r.loss.item(), want, 1e-12 * (1 + want));
    }
  }
}

TEST(PairwiseProperty, BoundaryPartitionOnRandomPairs) {
  Rng rng(3);
  int checked = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double si = rng.uniform(), sj = rng.uniform(), yi = rng.uniform(), yj = rng.uniform();
    if (yi == yj) continue;
    const double dy = std::abs(yi - yj), ds = yi > yj ? si - sj : sj - si;
    const bool l1 = loss::admits(PairVariant::L1, ds, dy);
    const bool l2 = loss::admits(PairVariant::L2, ds, dy);
    const bool l3 = loss::admits(PairVariant::L3, ds, dy);
    if (dy - ds < 0) {
      EXPECT_FALSE(l1);
      // The L1 term for this pair is exactly zero.
      const std::vector<double> y{yi, yj};
      EXPECT_EQ(loss::pairwise_loss(Tensor({2}, {si, sj}), y, PairVariant::L1, 10).loss.item(), 0.0);
    }
    if (ds != 0 && ds != dy) {
      EXPECT_EQ(static_cast<int>(l2) + static_cast<int>(l3) + static_cast<int>(!l1), 1);
      EXPECT_EQ(l1, l2 || l3);
      ++checked;
    }
  }
  EXPECT_GT(checked, 900);
}

TEST(PairwiseProperty, ShiftingAllScoresChangesNothing) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(8);
    // Scores on a 1/64 grid so the shift is exact in binary.
    std::vector<double> s(n);
    for (double& v : s) v = static_cast<double>(rng.below(64)) / 64;
    const auto y = uniforms(rng, n);
    const double c = static_cast<double>(rng.below(64)) / 64 - 0.5;
    std::vector<double> shifted = s;
    for (double& v : shifted) v += c;
    for (auto v : kVariants) {
      const auto a = loss::pairwise_loss(Tensor({n}, s), y, v, 10);
      const auto b = loss::pairwise_loss(Tensor({n}, shifted), y, v, 10);
      EXPECT_EQ(a.admitted, b.admitted);
      EXPECT_NEAR(a.loss.item(), b.loss.item(), 1e-12);
    }
  }
}

TEST(Pairwise, AdmissionUsesDetachedScores) {
  // The gradient of an admitted pair is the plain logistic gradient, with no
  // contribution from the indicator.
  Parameter p("s", Tensor({2}, {0.3, 0.2}));
  Tape tape;
  tape.backward(loss::pairwise_loss(tape.param(p), std::vector<double>{0.8, 0.1}, PairVariant::L1, 10).loss);
  const double g = -10.0 / (1.0 + std::exp(10.0 * 0.1));
  EXPECT_NEAR(tape.grad(p)[0], g, 1e-12);
  EXPECT_NEAR(tape.grad(p)[1], -g, 1e-12);
}

// ---- similarity matrix ----

TEST(Similarity, OrthonormalRowsGiveIdentity) {
  const Tensor e({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto D = loss::dtw_similarity_matrix(e, e);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(D[i * 3 + j], i == j ? 1.0 / (1.0 + 1e-12) : 0.0, 1e-15);
}

TEST(Similarity, AntiparallelIsMinusOne) {
  const auto D = loss::dtw_similarity_matrix(Tensor({1, 2}, {0.6, 0.8}), Tensor({1, 2}, {-0.6, -0.8}));
  EXPECT_NEAR(D.item(), -1.0 / (1.0 + 1e-12), 1e-15);
}

TEST(Similarity, MatchesDirectCosine) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4});
    const auto want = cosine_matrix(a, b);
    const auto D = loss::dtw_similarity_matrix(a, b);
    for (std::size_t k = 0; k < 9; ++k) EXPECT_NEAR(D[k], want[k], 1e-12);
  }
}

TEST(Similarity, ZeroRowIsGuarded) {
  const auto D = loss::dtw_similarity_matrix(Tensor({1, 2}, {0, 0}), Tensor({1, 2}, {1, 0}));
  EXPECT_TRUE(std::isfinite(D.item()));
}

// ---- DTW ----

TEST(Dtw, SingleCell) {
  const auto r = loss::dtw_accumulate(Tensor({1, 1}, {0.7}));
  EXPECT_EQ(r.distance, 0.7);
  ASSERT_EQ(r.path.size(), 1u);
  EXPECT_EQ(r.path[0], (std::pair<std::size_t, std::size_t>{0, 0}));
}

TEST(Dtw, TwoByTwoIdentity) {
  const auto r = loss::dtw_accumulate(Tensor({2, 2}, {1, 0, 0, 1}));
  EXPECT_EQ(r.cumulative, (std::vector<double>{1, 1, 1, 2}));
  EXPECT_EQ(r.distance, 2.0);
  EXPECT_EQ(r.distance, brute_dtw({1, 0, 0, 1}, 2, 2, DtwCost::similarity));
}

TEST(Dtw, ConstantMatrixTakesTheDiagonal) {
  for (std::size_t n = 1; n <= 6; ++n) {
    const double c = 0.25 * static_cast<double>(n);
    const std::vector<double> D(n * n, c);
    const auto r = loss::dtw_accumulate(Tensor({n, n}, D));
    EXPECT_DOUBLE_EQ(r.distance, c * static_cast<double>(n));
    EXPECT_DOUBLE_EQ(r.distance, brute_dtw(D, n, n, DtwCost::similarity));
    ASSERT_EQ(r.path.size(), n);
    for (std::size_t k = 0; k < n; ++k) EXPECT_EQ(r.path[k], (std::pair<std::size_t, std::size_t>{k, k}));
  }
}

TEST(DtwProperty, MatchesExhaustivePathSearch) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t r = 1 + rng.below(6), c = 1 + rng.below(6);
    std::vector<double> D(r * c);
    for (double& v : D) v = rng.uniform(-1, 1);
    if (trial % 4 == 0) {
      for (double& v : D) v = std::round(v * 2) / 2;  // many ties
    }
    for (auto cost : {DtwCost::similarity, DtwCost::distance}) {
      const auto res = loss::dtw_accumulate(D, r, c, cost);
      EXPECT_NEAR(res.distance, brute_dtw(D, r, c, cost), 1e-9);
      // The backtracked path is monotone and achieves the optimum.
      ASSERT_FALSE(res.path.empty());
      EXPECT_EQ(res.path.front(), (std::pair<std::size_t, std::size_t>{0, 0}));
      EXPECT_EQ(res.path.back(), (std::pair<std::size_t, std::size_t>{r - 1, c - 1}));
      for (std::size_t k = 1; k < res.path.size(); ++k) {
        const auto di = res.path[k].first - res.path[k - 1].first;
        const auto dj = res.path[k].second - res.path[k - 1].second;
        EXPECT_TRUE((di == 1 && dj == 1) || (di == 1 && dj == 0) || (di == 0 && dj == 1));
      }
      const double along = path_sum(D, c, res.path, cost);
      EXPECT_NEAR(cost == DtwCost::similarity ? along : -along, res.distance, 1e-9);
    }
  }
}

TEST(DtwProperty, CumulativeSatisfiesRecurrence) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(6);
    std::vector<double> D(n * n);
    for (double& v : D) v = rng.uniform(-1, 1);
    const auto r = loss::dtw_accumulate(D, n, n);
    const auto& C = r.cumulative;
    EXPECT_EQ(C[0], D[0]);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == 0 && j == 0) continue;
        double best = std::numeric_limits<double>::infinity();
        if (i > 0 && j > 0) best = std::min(best, C[(i - 1) * n + j - 1]);
        if (i > 0) best = std::min(best, C[(i - 1) * n + j]);
        if (j > 0) best = std::min(best, C[i * n + j - 1]);
        EXPECT_EQ(C[i * n + j], D[i * n + j] + best);
      }
    EXPECT_EQ(r.distance, C.back());
  }
}

TEST(DtwProperty, InvariantUnderSharedRotation) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 2 + rng.below(5), d = 2 + rng.below(5);
    const Tensor a = random_tensor(rng, {n, d}), b = random_tensor(rng, {n, d});
    const Tensor q({d, d}, random_rotation(rng, d));
    for (auto cost : {DtwCost::similarity, DtwCost::distance}) {
      const double before = loss::dtw_distance(loss::dtw_similarity_matrix(a, b), cost).item();
      const double after =
          loss::dtw_distance(loss::dtw_similarity_matrix(ad::matmul(a, q), ad::matmul(b, q)), cost).item();
      EXPECT_NEAR(before, after, 1e-9);
    }
  }
}

TEST(Dtw, GradientFlowsOnlyAlongThePath) {
  Rng rng(9);
  const std::size_t n = 5;
  Parameter p("D", random_tensor(rng, {n, n}));
  Tape tape;
  const auto d = loss::dtw_distance(tape.param(p));
  tape.backward(d);
  const auto r = loss::dtw_accumulate(p.value);
  std::set<std::size_t> on_path;
  for (const auto& [i, j] : r.path) on_path.insert(i * n + j);
  const auto g = tape.grad(p);
  for (std::size_t k = 0; k < n * n; ++k) EXPECT_EQ(g[k], on_path.count(k) ? 1.0 : 0.0);
}

TEST(Dtw, TieOrderPrefersDiagonalThenUp) {
  // All three predecessors of the last cell tie at 0.
  const std::vector<double> D{0, 0, 0, 0};
  EXPECT_EQ(loss::dtw_accumulate(D, 2, 2).path.size(), 2u);
  const loss::TieOrder up_first{loss::DtwStep::up, loss::DtwStep::diagonal, loss::DtwStep::left};
  const auto r = loss::dtw_accumulate(D, 2, 2, DtwCost::similarity, up_first);
  ASSERT_EQ(r.path.size(), 3u);
  EXPECT_EQ(r.path[1], (std::pair<std::size_t, std::size_t>{0, 1}));
}

// ---- negatives and InfoNCE ----

TEST(Negatives, LengthTwoIsAlwaysTheSwap) {
  const Tensor v({2, 3}, {1, 2, 3, 4, 5, 6});
  for (const auto& neg : loss::make_negatives(v, 8, 3)) {
    EXPECT_EQ(neg.to_vector(), (std::vector<double>{4, 5, 6, 1, 2, 3}));
  }
}

TEST(Negatives, ReproducibleFromSeed) {
  Rng rng(10);
  const Tensor v = random_tensor(rng, {6, 4});
  const auto a = loss::make_negatives(v, 8, 7), b = loss::make_negatives(v, 8, 7);
  ASSERT_EQ(a.size(), 8u);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(a[k].to_vector(), b[k].to_vector());
}

TEST(Negatives, PermuteRowsAndNeverIdentity) {
  Rng rng(11);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t n = 2 + rng.below(5);
    const auto perms = loss::negative_permutations(n, 8, seed);
    ASSERT_EQ(perms.size(), 8u);
    for (const auto& p : perms) {
      std::vector<std::size_t> sorted = p;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t k = 0; k < n; ++k) EXPECT_EQ(sorted[k], k);
      bool identity = true;
      for (std::size_t k = 0; k < n; ++k) identity = identity && p[k] == k;
      EXPECT_FALSE(identity);
    }
    const Tensor v = random_tensor(rng, {n, 3});
    for (const auto& neg : loss::make_negatives(v, 4, seed)) {
      std::multiset<std::vector<double>> want, got;
      for (std::size_t i = 0; i < n; ++i) {
        want.insert({v.data().begin() + i * 3, v.data().begin() + (i + 1) * 3});
        got.insert({neg.data().begin() + i * 3, neg.data().begin() + (i + 1) * 3});
      }
      EXPECT_EQ(want, got);
    }
  }
}

TEST(Negatives, SingleTimestampThrows) {
  EXPECT_THROW(loss::make_negatives(Tensor({1, 3}, {1, 2, 3}), 2, 0), NegativeSamplingError);
}

TEST(InfoNce, EqualDistancesGiveLogOfCount) {
  // Identical rows make every permutation produce the same similarity matrix.
  const Tensor text({4, 2}, {1, 0, 0, 1, 1, 1, 2, -1});
  const Tensor visual({4, 2}, {1, 2, 1, 2, 1, 2, 1, 2});
  const auto negs = loss::make_negatives(visual, 8, 1);
  EXPECT_NEAR(loss::align_infonce(text, visual, negs, 1.0).item(), std::log(9.0), 1e-12);
}

TEST(InfoNce, DominantPositiveDrivesLossToZero) {
  const Tensor text({3, 2}, {1, 0, 0, 1, -1, 0});
  const Tensor visual({3, 2}, {1, 0, 0, 1, -1, 0});
  const auto negs = loss::make_negatives(visual, 8, 2);
  // The positive pairing has the largest DTW score here.
  const double pos = loss::dtw_distance(loss::dtw_similarity_matrix(text, visual)).item();
  for (const auto& n : negs) {
    EXPECT_GT(pos, loss::dtw_distance(loss::dtw_similarity_matrix(text, n)).item());
  }
  double prev = std::numeric_limits<double>::infinity();
  for (double tau : {1.0, 0.1, 0.01}) {
    const double l = loss::align_infonce(text, visual, negs, tau).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-12);
}

TEST(InfoNce, HandBuiltPairMatchesComposedOracle) {
  const Tensor text({2, 2}, {1.0, 0.2, -0.3, 0.9});
  const Tensor visual({2, 2}, {0.8, -0.1, 0.4, 0.7});
  const Tensor swapped({2, 2}, {0.4, 0.7, 0.8, -0.1});
  for (auto cost : {DtwCost::similarity, DtwCost::distance}) {
    const double dp = brute_dtw(cosine_matrix(text, visual), 2, 2, cost);
    const double dn = brute_dtw(cosine_matrix(text, swapped), 2, 2, cost);
    const double tau = 0.5;
    const double want = -std::log(std::exp(dp / tau) / (std::exp(dp / tau) + std::exp(dn / tau)));
    const Tensor negs[] = {swapped};
    EXPECT_NEAR(loss::align_infonce(text, visual, negs, tau, cost).item(), want, 1e-9);
  }
}

TEST(InfoNce, LargeDistancesDoNotOverflow) {
  const Tensor text({2, 2}, {1, 0, 0, 1});
  const Tensor visual({2, 2}, {1, 0, 0, 1});
  const Tensor negs[] = {Tensor({2, 2}, {0, 1, 1, 0})};
  const double l = loss::align_infonce(text, visual, negs, 1e-4).item();
  EXPECT_TRUE(std::isfinite(l));
}

TEST(AlignLoss, BatchIsMeanOfWindows) {
  Rng rng(12);
  const std::size_t b = 3, n = 5, d = 4;
  const Tensor text = random_tensor(rng, {b, n, d}), visual = random_tensor(rng, {b, n, d});
  loss::LossConfig lc;
  lc.negatives = 5;
  lc.tau = 0.7;
  double want = 0.0;
  for (std::size_t w = 0; w < b; ++w) {
    const Tensor t = ad::reshape(ad::slice(text, 0, w, w + 1), {n, d});
    const Tensor v = ad::reshape(ad::slice(visual, 0, w, w + 1), {n, d});
    want += loss::align_infonce(t, v, loss::make_negatives(v, lc.negatives, mix_seed(99, w)), lc.tau).item();
  }
  EXPECT_NEAR(loss::align_loss(text, visual, lc, 99).item(), want / b, 1e-12);
}

// ---- combined ----

TEST(Combined, WeightedSum) {
  loss::LossConfig lc;
  const auto total = loss::combined_loss(Tensor::scalar(1.0), Tensor::scalar(2.0), Tensor::scalar(3.0), lc);
  EXPECT_NEAR(total.item(), 1.55, 1e-12);
}

TEST(Combined, ZeroWeightsLeavePointwise) {
  loss::LossConfig lc;
  lc.lambda_align = 0.0;
  lc.lambda_pair = 0.0;
  lc.lambda_point = 1.0;
  EXPECT_EQ(loss::combined_loss(Tensor::scalar(0.42), Tensor::scalar(7.0), Tensor::scalar(9.0), lc).item(), 0.42);
}

TEST(Combined, GradientIsWeightedSumOfParts) {
  Parameter a("a", Tensor::scalar(0.3)), b("b", Tensor::scalar(-1.2)), c("c", Tensor::scalar(2.0));
  loss::LossConfig lc;
  Tape tape;
  const auto pa = tape.param(a), pb = tape.param(b), pc = tape.param(c);
  tape.backward(loss::combined_loss(ad::mul(pa, pa), ad::exp(pb), ad::scale(pc, 3.0), lc));
  EXPECT_NEAR(tape.grad(a)[0], 0.65 * 2 * 0.3, 1e-15);
  EXPECT_NEAR(tape.grad(b)[0], 0.15 * std::exp(-1.2), 1e-15);
  EXPECT_NEAR(tape.grad(c)[0], 0.20 * 3.0, 1e-15);
}

TEST(Config, RejectsInvalidValues) {
  loss::LossConfig lc;
  lc.sigma = 0;
  EXPECT_THROW(lc.validate(), ConfigError);
  lc = {};
  lc.lambda_pair = -1;
  EXPECT_THROW(lc.validate(), ConfigError);
  lc = {};
  lc.negatives = 0;
  EXPECT_THROW(lc.validate(), ConfigError);
}

}  // namespace
}  // namespace cctr
