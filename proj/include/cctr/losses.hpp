#pragma once

// Training objectives: pointwise LogLoss, boundary-aware pairwise ranking
// losses, DTW-based contrastive alignment between text and visual sequences,
// and their weighted combination.

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cctr/autodiff.hpp"

namespace cctr::loss {

using ad::Tensor;

// Which pairs (y_i > y_j) a pairwise loss admits, with ds = s_i - s_j and
// dy = y_i - y_j:  L0 all; L1 dy - ds >= 0; L2 ds <= 0; L3 0 < ds < dy.
enum class PairVariant { L0, L1, L2, L3 };

// similarity: cost matrix is the cosine similarity itself and the distance
// is C[n,n]. distance: cost is 1 - cosine and the distance is -C[n,n].
enum class DtwCost { similarity, distance };

enum class DtwStep { diagonal, up, left };

// Preference order among tied predecessors in the DTW recurrence.
using TieOrder = std::array<DtwStep, 3>;
inline constexpr TieOrder kDefaultTieOrder{DtwStep::diagonal, DtwStep::up, DtwStep::left};

struct LossConfig {
  double lambda_point = 0.65;
  double lambda_align = 0.15;
  double lambda_pair = 0.20;
  double sigma = 10.0;
  double tau = 1.0;
  std::size_t negatives = 8;
  PairVariant variant = PairVariant::L1;
  TieOrder tie_order = kDefaultTieOrder;
  DtwCost dtw_cost = DtwCost::similarity;

  void validate() const;
};

// ---- pointwise ----

// Mean binary cross-entropy; s is clamped to [1e-7, 1 - 1e-7]. y has one
// entry per element of s and must lie in [0, 1].
Tensor pointwise_logloss(const Tensor& s, std::span<const double> y);

// ---- pairwise ----

bool admits(PairVariant variant, double ds, double dy);

struct PairwiseResult {
  Tensor loss;
  std::size_t admitted = 0;
  bool no_pairs = false;
};

// s is n or b x n; y matches. Per window, sums log(1 + exp(-sigma (s_i - s_j)))
// over admitted pairs with y_i > y_j; the batch value is the mean over
// windows. Admission is decided on detached s.
PairwiseResult pairwise_loss(const Tensor& s, std::span<const double> y, PairVariant variant,
                             double sigma);

// Smallest distance of any pair with y_i > y_j from an admission boundary
// (ds = 0 or ds = dy). Infinity when there are no pairs.
double pair_admission_margin(std::span<const double> s, std::span<const double> y,
                             std::size_t window);

// ---- DTW ----

// Row-wise cosine similarity; text is [n,d] or [b,n,d], visual likewise.
// Denominators carry +1e-12.
Tensor dtw_similarity_matrix(const Tensor& text, const Tensor& visual);

struct DtwResult {
  std::size_t rows = 0, cols = 0;
  std::vector<double> similarity;  // D, row-major
  std::vector<double> cumulative;  // C, row-major
  // 0-based (i, j) from (0, 0) to (rows-1, cols-1).
  std::vector<std::pair<std::size_t, std::size_t>> path;
  double distance = 0.0;
};

DtwResult dtw_accumulate(std::span<const double> similarity, std::size_t rows, std::size_t cols,
                         DtwCost cost = DtwCost::similarity, TieOrder ties = kDefaultTieOrder);
DtwResult dtw_accumulate(const Tensor& similarity, DtwCost cost = DtwCost::similarity,
                         TieOrder ties = kDefaultTieOrder);

// Differentiable DTW distance of an [n,m] similarity matrix. The gradient
// reaches only the cells on the backtracked path (hard-min subgradient).
Tensor dtw_distance(const Tensor& similarity, DtwCost cost = DtwCost::similarity,
                    TieOrder ties = kDefaultTieOrder);

// Smallest gap between the best and second-best predecessor over all cells
// with more than one predecessor. Infinity for 1x1.
double dtw_min_predecessor_gap(const DtwResult& r);

// ---- contrastive alignment ----

// `count` random non-identity permutations of [0, n). Throws
// NegativeSamplingError for n < 2.
std::vector<std::vector<std::size_t>> negative_permutations(std::size_t n, std::size_t count,
                                                            std::uint64_t seed);

// Row-permuted copies of an [n,d] visual sequence.
std::vector<Tensor> make_negatives(const Tensor& visual, std::size_t count, std::uint64_t seed);

// -log(exp(d+/tau) / (exp(d+/tau) + sum exp(d-/tau))) for one window.
Tensor align_infonce(const Tensor& text, const Tensor& visual, std::span<const Tensor> negatives,
                     double tau, DtwCost cost = DtwCost::similarity,
                     TieOrder ties = kDefaultTieOrder);

// Batched form over [b,n,d] sequences; the mean of per-window InfoNCE.
// Window w draws its negatives from mix_seed(seed, w). A negative's
// similarity matrix is the positive one with permuted columns.
Tensor align_loss(const Tensor& text, const Tensor& visual, const LossConfig& config,
                  std::uint64_t seed);

// ---- combined ----

Tensor combined_loss(const Tensor& point, const Tensor& align, const Tensor& pair,
                     const LossConfig& config);

}  // namespace cctr::loss
