#include "cctr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cctr/error.hpp"
#include "cctr/rng.hpp"

namespace cctr::loss {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Windows and length for an n or b x n prediction tensor.
std::pair<std::size_t, std::size_t> windows_of(const Tensor& s) {
  if (s.rank() == 1) return {1, s.dim(0)};
  if (s.rank() == 2) return {s.dim(0), s.dim(1)};
  throw DimensionError("expected predictions of shape n or b x n, got " +
                       ad::to_string(s.shape()));
}

// Offsets of the predecessor of (i, j) for a step kind.
std::pair<std::size_t, std::size_t> predecessor(DtwStep step, std::size_t i, std::size_t j) {
  switch (step) {
    case DtwStep::diagonal:
      return {i - 1, j - 1};
    case DtwStep::up:
      return {i - 1, j};
    case DtwStep::left:
      return {i, j - 1};
  }
  return {i, j};
}

bool step_valid(DtwStep step, std::size_t i, std::size_t j) {
  switch (step) {
    case DtwStep::diagonal:
      return i > 0 && j > 0;
    case DtwStep::up:
      return i > 0;
    case DtwStep::left:
      return j > 0;
  }
  return false;
}

}  // namespace

void LossConfig::validate() const {
  const auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("loss config: ") + what);
  };
  for (double l : {lambda_point, lambda_align, lambda_pair}) {
    need(std::isfinite(l) && l >= 0.0, "lambda weights must be finite and >= 0");
  }
  need(sigma > 0.0 && std::isfinite(sigma), "sigma must be > 0");
  need(tau > 0.0 && std::isfinite(tau), "tau must be > 0");
  need(negatives >= 1, "negatives must be >= 1");
  std::array<bool, 3> seen{};
  for (DtwStep s : tie_order) seen[static_cast<std::size_t>(s)] = true;
  need(seen[0] && seen[1] && seen[2], "tie_order must be a permutation of diagonal, up, left");
}

// ---------------------------------------------------------------------------

Tensor pointwise_logloss(const Tensor& s, std::span<const double> y) {
  if (y.size() != s.size()) {
    throw DimensionError("pointwise_logloss: " + std::to_string(y.size()) + " labels for " +
                         ad::to_string(s.shape()) + " predictions");
  }
  for (double v : y) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw LabelError("pointwise_logloss: label " + std::to_string(v) + " outside [0,1]");
    }
  }
  const Tensor labels(s.shape(), std::vector<double>(y.begin(), y.end()));
  const Tensor sc = ad::clamp(s, 1e-7, 1.0 - 1e-7);
  const Tensor ll = ad::add(ad::mul(labels, ad::log(sc)),
                            ad::mul(ad::add_scalar(ad::neg(labels), 1.0),
                                    ad::log(ad::add_scalar(ad::neg(sc), 1.0))));
  return ad::neg(ad::mean(ll));
}

// ---------------------------------------------------------------------------

bool admits(PairVariant variant, double ds, double dy) {
  switch (variant) {
    case PairVariant::L0:
      return true;
    case PairVariant::L1:
      return dy - ds >= 0.0;
    case PairVariant::L2:
      return ds <= 0.0;
    case PairVariant::L3:
      return ds > 0.0 && ds < dy;
  }
  return false;
}

PairwiseResult pairwise_loss(const Tensor& s, std::span<const double> y, PairVariant variant,
                             double sigma) {
  const auto [b, n] = windows_of(s);
  if (y.size() != b * n) {
    throw DimensionError("pairwise_loss: " + std::to_string(y.size()) + " labels for " +
                         ad::to_string(s.shape()) + " predictions");
  }
  PairwiseResult r;
  if (n < 2) {
    r.loss = Tensor::scalar(0.0);
    r.no_pairs = true;
    return r;
  }
  const auto sv = s.data();
  std::vector<double> mask(b * n * n, 0.0);
  for (std::size_t w = 0; w < b; ++w)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double dy = y[w * n + i] - y[w * n + j];
        if (!(dy > 0.0)) continue;
        const double ds = sv[w * n + i] - sv[w * n + j];
        if (admits(variant, ds, dy)) {
          mask[(w * n + i) * n + j] = 1.0;
          ++r.admitted;
        }
      }
  r.no_pairs = r.admitted == 0;
  const Tensor s3 = ad::reshape(s, {b, n});
  const Tensor diff = ad::sub(ad::reshape(s3, {b, n, 1}), ad::reshape(s3, {b, 1, n}));
  const Tensor terms = ad::softplus(ad::scale(diff, -sigma));
  const Tensor admitted = ad::mul(terms, Tensor({b, n, n}, std::move(mask)));
  r.loss = ad::scale(ad::sum(admitted), 1.0 / static_cast<double>(b));
  return r;
}

double pair_admission_margin(std::span<const double> s, std::span<const double> y,
                             std::size_t window) {
  double margin = kInf;
  for (std::size_t base = 0; base + window <= s.size(); base += window)
    for (std::size_t i = 0; i < window; ++i)
      for (std::size_t j = 0; j < window; ++j) {
        const double dy = y[base + i] - y[base + j];
        if (!(dy > 0.0)) continue;
        const double ds = s[base + i] - s[base + j];
        margin = std::min({margin, std::abs(ds), std::abs(dy - ds)});
      }
  return margin;
}

// ---------------------------------------------------------------------------

Tensor dtw_similarity_matrix(const Tensor& text, const Tensor& visual) {
  if (text.rank() != visual.rank() || text.rank() < 2 || text.rank() > 3 ||
      text.dim(-1) != visual.dim(-1) || (text.rank() == 3 && text.dim(0) != visual.dim(0))) {
    throw DimensionError("dtw_similarity_matrix: incompatible sequences " +
                         ad::to_string(text.shape()) + " and " + ad::to_string(visual.shape()));
  }
  const auto norms = [](const Tensor& x) { return ad::sqrt(ad::sum(ad::mul(x, x), -1, true)); };
  const Tensor dots = ad::matmul(text, ad::transpose(visual));
  const Tensor denom =
      ad::add_scalar(ad::matmul(norms(text), ad::transpose(norms(visual))), 1e-12);
  return ad::div(dots, denom);
}

DtwResult dtw_accumulate(std::span<const double> similarity, std::size_t rows, std::size_t cols,
                         DtwCost cost, TieOrder ties) {
  if (rows == 0 || cols == 0 || similarity.size() != rows * cols) {
    throw DimensionError("dtw_accumulate: matrix of " + std::to_string(similarity.size()) +
                         " entries is not " + std::to_string(rows) + " x " +
                         std::to_string(cols));
  }
  DtwResult r;
  r.rows = rows;
  r.cols = cols;
  r.similarity.assign(similarity.begin(), similarity.end());
  r.cumulative.assign(rows * cols, 0.0);
  const auto cell = [&](std::size_t i, std::size_t j) {
    const double d = similarity[i * cols + j];
    return cost == DtwCost::similarity ? d : 1.0 - d;
  };
  auto& C = r.cumulative;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      double best = kInf;
      if (i > 0 && j > 0) best = std::min(best, C[(i - 1) * cols + j - 1]);
      if (i > 0) best = std::min(best, C[(i - 1) * cols + j]);
      if (j > 0) best = std::min(best, C[i * cols + j - 1]);
      C[i * cols + j] = cell(i, j) + (i == 0 && j == 0 ? 0.0 : best);
    }

  std::size_t i = rows - 1, j = cols - 1;
  r.path.emplace_back(i, j);
  while (i > 0 || j > 0) {
    bool have = false;
    double best = kInf;
    std::pair<std::size_t, std::size_t> next{i, j};
    for (DtwStep step : ties) {
      if (!step_valid(step, i, j)) continue;
      const auto [pi, pj] = predecessor(step, i, j);
      const double c = C[pi * cols + pj];
      if (!have || c < best) {
        have = true;
        best = c;
        next = {pi, pj};
      }
    }
    std::tie(i, j) = next;
    r.path.emplace_back(i, j);
  }
  std::reverse(r.path.begin(), r.path.end());
  const double last = C[rows * cols - 1];
  r.distance = cost == DtwCost::similarity ? last : -last;
  return r;
}

DtwResult dtw_accumulate(const Tensor& similarity, DtwCost cost, TieOrder ties) {
  if (similarity.rank() != 2) {
    throw RankError("dtw_accumulate: expects a matrix, got " +
                    ad::to_string(similarity.shape()));
  }
  return dtw_accumulate(similarity.data(), similarity.dim(0), similarity.dim(1), cost, ties);
}

Tensor dtw_distance(const Tensor& similarity, DtwCost cost, TieOrder ties) {
  const DtwResult r = dtw_accumulate(similarity, cost, ties);
  const std::size_t cols = r.cols;
  std::vector<std::size_t> cells;
  cells.reserve(r.path.size());
  for (const auto& [i, j] : r.path) cells.push_back(i * cols + j);
  const Tensor inputs[] = {similarity};
  // d C[n,n] / d D[i,j] is 1 on the path in both cost conventions.
  return ad::Tape::record({}, std::vector<double>{r.distance}, inputs,
                          [cells = std::move(cells)](std::span<const double> g,
                                                     std::span<const std::span<double>> gin) {
                            for (std::size_t c : cells) gin[0][c] += g[0];
                          });
}

double dtw_min_predecessor_gap(const DtwResult& r) {
  double gap = kInf;
  const auto& C = r.cumulative;
  const std::size_t cols = r.cols;
  for (std::size_t i = 0; i < r.rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      std::vector<double> pred;
      if (i > 0 && j > 0) pred.push_back(C[(i - 1) * cols + j - 1]);
      if (i > 0) pred.push_back(C[(i - 1) * cols + j]);
      if (j > 0) pred.push_back(C[i * cols + j - 1]);
      if (pred.size() < 2) continue;
      std::sort(pred.begin(), pred.end());
      gap = std::min(gap, pred[1] - pred[0]);
    }
  return gap;
}

// ---------------------------------------------------------------------------

std::vector<std::vector<std::size_t>> negative_permutations(std::size_t n, std::size_t count,
                                                            std::uint64_t seed) {
  if (n < 2) {
    throw NegativeSamplingError("make_negatives: a sequence of length " + std::to_string(n) +
                                " has no non-identity permutation");
  }
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> perms;
  perms.reserve(count);
  while (perms.size() < count) {
    auto p = rng.permutation(n);
    bool identity = true;
    for (std::size_t i = 0; i < n && identity; ++i) identity = p[i] == i;
    if (!identity) perms.push_back(std::move(p));
  }
  return perms;
}

std::vector<Tensor> make_negatives(const Tensor& visual, std::size_t count, std::uint64_t seed) {
  if (visual.rank() != 2) {
    throw RankError("make_negatives: expects an n x d sequence, got " +
                    ad::to_string(visual.shape()));
  }
  std::vector<Tensor> out;
  for (const auto& p : negative_permutations(visual.dim(0), count, seed)) {
    out.push_back(ad::index_select(visual, 0, p));
  }
  return out;
}

namespace {

// -log softmax(distances / tau)[0] for a vector of N+1 scalar distances.
Tensor infonce_from_distances(std::span<const Tensor> distances, double tau) {
  std::vector<Tensor> parts;
  parts.reserve(distances.size());
  for (const Tensor& d : distances) parts.push_back(ad::reshape(d, {1}));
  const Tensor logits = ad::scale(ad::concat(parts, 0), 1.0 / tau);
  return ad::sub(ad::logsumexp(logits, 0), ad::reshape(ad::slice(logits, 0, 0, 1), {}));
}

}  // namespace

Tensor align_infonce(const Tensor& text, const Tensor& visual, std::span<const Tensor> negatives,
                     double tau, DtwCost cost, TieOrder ties) {
  std::vector<Tensor> distances;
  distances.push_back(dtw_distance(dtw_similarity_matrix(text, visual), cost, ties));
  for (const Tensor& neg : negatives) {
    distances.push_back(dtw_distance(dtw_similarity_matrix(text, neg), cost, ties));
  }
  return infonce_from_distances(distances, tau);
}

Tensor align_loss(const Tensor& text, const Tensor& visual, const LossConfig& config,
                  std::uint64_t seed) {
  if (text.rank() != 3) {
    throw RankError("align_loss: expects b x n x d sequences, got " + ad::to_string(text.shape()));
  }
  const std::size_t b = text.dim(0), n = text.dim(1);
  const Tensor sims = dtw_similarity_matrix(text, visual);
  std::vector<Tensor> per_window;
  per_window.reserve(b);
  for (std::size_t w = 0; w < b; ++w) {
    const Tensor D = ad::reshape(ad::slice(sims, 0, w, w + 1), {n, n});
    std::vector<Tensor> distances;
    distances.push_back(dtw_distance(D, config.dtw_cost, config.tie_order));
    for (const auto& p : negative_permutations(n, config.negatives, mix_seed(seed, w))) {
      distances.push_back(dtw_distance(ad::index_select(D, 1, p), config.dtw_cost,
                                       config.tie_order));
    }
    per_window.push_back(ad::reshape(infonce_from_distances(distances, config.tau), {1}));
  }
  return ad::mean(ad::concat(per_window, 0));
}

Tensor combined_loss(const Tensor& point, const Tensor& align, const Tensor& pair,
                     const LossConfig& config) {
  return ad::add(ad::add(ad::scale(point, config.lambda_point),
                         ad::scale(align, config.lambda_align)),
                 ad::scale(pair, config.lambda_pair));
}

}  // namespace cctr::loss
