#include "cctr/suite.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "cctr/error.hpp"
#include "cctr/losses.hpp"
#include "cctr/model.hpp"
#include "cctr/rng.hpp"

namespace cctr::suite {

namespace {

using ad::GradCheckResult;
using ad::Parameter;
using ad::Shape;
using ad::Tape;
using ad::Tensor;

constexpr std::size_t kN = 5;
constexpr std::size_t kB = 2;
constexpr std::size_t kD = 8;
constexpr std::size_t kVisual = 6;
constexpr std::size_t kText = 7;
constexpr double kStableMargin = 1e-3;
constexpr int kMaxRedraws = 500;

Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

Tensor gaussian(Rng& rng, const Shape& shape, double sd = 1.0) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.normal(0.0, sd);
  return Tensor(shape, std::move(v));
}

// Random fixed weights turn any tensor into a scalar with O(1) gradients.
struct Readout {
  Tensor weights;
  Tensor operator()(const Tensor& t) const { return ad::sum(ad::mul(t, weights)); }
};

Readout readout(Rng& rng, const Shape& shape) { return {uniform(rng, shape, -1.0, 1.0)}; }

using PointFn = std::function<Tensor(std::span<const Tensor>)>;

Target point_target(std::string name, std::string group, std::vector<Tensor> point, PointFn f) {
  return {std::move(name), std::move(group), [point = std::move(point), f = std::move(f)]() {
            return ad::grad_check(f, point, kStep);
          }};
}

// Unary op on values drawn from [lo, hi].
Target unary_target(const std::string& name, Rng& rng, double lo, double hi,
                    Tensor (*op)(const Tensor&)) {
  const Tensor x = uniform(rng, {3, 4}, lo, hi);
  const Readout r = readout(rng, {3, 4});
  return point_target(name, "primitive", {x},
                      [r, op](std::span<const Tensor> p) { return r(op(p[0])); });
}

model::ModelConfig small_model(bool pre_norm) {
  model::ModelConfig c;
  c.n = kN;
  c.d = kD;
  c.d_h = 4;
  c.n_heads = 2;
  c.perceiver_layers = 1;
  c.decoder_layers = 1;
  c.ffn_hidden = 16;
  c.visual_dim = kVisual;
  c.text_dim = kText;
  c.streamers = 3;
  c.pre_norm = pre_norm;
  return c;
}

model::Batch small_batch(Rng& rng) {
  model::Batch b;
  b.visual = gaussian(rng, {kB, kN, kVisual});
  b.text = gaussian(rng, {kB, kN, kText});
  b.streamers = {1, 7};  // 7 is past the table and takes the fallback row
  return b;
}

// Parameter-form target over the model parameters whose names start with
// one of the prefixes.
Target model_target(std::string name, std::shared_ptr<model::ContentCtr> m,
                    std::vector<std::string> prefixes,
                    std::function<Tensor(const model::ContentCtr&, Tape&)> f) {
  return {std::move(name), "block", [m, prefixes = std::move(prefixes), f = std::move(f)]() {
            std::vector<Parameter*> params;
            for (Parameter* p : m->parameters()) {
              for (const auto& pre : prefixes) {
                if (p->name.rfind(pre, 0) == 0) {
                  params.push_back(p);
                  break;
                }
              }
            }
            if (params.empty()) throw Error("no parameters selected");
            return ad::grad_check(params, [&](Tape& tape) { return f(*m, tape); }, kStep);
          }};
}

double dtw_gap(const Tensor& similarity, loss::DtwCost cost) {
  return loss::dtw_min_predecessor_gap(loss::dtw_accumulate(similarity, cost));
}

// Smallest predecessor gap over the positive and every negative DTW problem
// that align_loss builds for these sequences.
double align_gap(const Tensor& text, const Tensor& visual, const loss::LossConfig& lc,
                 std::uint64_t seed) {
  const Tensor sims = loss::dtw_similarity_matrix(text.detach(), visual.detach());
  const std::size_t b = text.dim(0), n = text.dim(1);
  double gap = std::numeric_limits<double>::infinity();
  for (std::size_t w = 0; w < b; ++w) {
    const Tensor D = ad::reshape(ad::slice(sims, 0, w, w + 1), {n, n});
    gap = std::min(gap, dtw_gap(D, lc.dtw_cost));
    for (const auto& p : loss::negative_permutations(n, lc.negatives, mix_seed(seed, w))) {
      gap = std::min(gap, dtw_gap(ad::index_select(D, 1, p), lc.dtw_cost));
    }
  }
  return gap;
}

// True when some frame meets the same partners on the positive path and on
// every negative path. Its InfoNCE gradient then cancels to exactly zero,
// which central differences cannot resolve against a relative error.
bool align_cancels(const Tensor& text, const Tensor& visual, const loss::LossConfig& lc,
                   std::uint64_t seed) {
  const Tensor sims = loss::dtw_similarity_matrix(text.detach(), visual.detach());
  const std::size_t b = text.dim(0), n = text.dim(1);
  using Pairs = std::vector<std::uint8_t>;  // n x n, text row, visual column
  const auto pairs = [n](const Tensor& D, std::span<const std::size_t> cols, loss::DtwCost cost) {
    Pairs m(n * n, 0);
    for (const auto& [i, c] : loss::dtw_accumulate(D, cost).path) m[i * n + cols[c]] = 1;
    return m;
  };
  std::vector<std::size_t> identity(n);
  for (std::size_t k = 0; k < n; ++k) identity[k] = k;
  for (std::size_t w = 0; w < b; ++w) {
    const Tensor D = ad::reshape(ad::slice(sims, 0, w, w + 1), {n, n});
    std::vector<Pairs> all{pairs(D, identity, lc.dtw_cost)};
    for (const auto& p : loss::negative_permutations(n, lc.negatives, mix_seed(seed, w))) {
      all.push_back(pairs(ad::index_select(D, 1, p), p, lc.dtw_cost));
    }
    for (std::size_t f = 0; f < n; ++f) {
      bool row_same = true, col_same = true;
      for (std::size_t k = 1; k < all.size(); ++k) {
        for (std::size_t j = 0; j < n; ++j) {
          row_same = row_same && all[k][f * n + j] == all[0][f * n + j];
          col_same = col_same && all[k][j * n + f] == all[0][j * n + f];
        }
      }
      if (row_same || col_same) return true;
    }
  }
  return false;
}

void add_primitives(std::vector<Target>& t, Rng& rng) {
  {
    const Tensor a = uniform(rng, {2, 3}, -1, 1), b = uniform(rng, {3}, -1, 1);
    const Readout r = readout(rng, {2, 3});
    t.push_back(point_target("add", "primitive", {a, b},
                             [r](std::span<const Tensor> p) { return r(ad::add(p[0], p[1])); }));
    t.push_back(point_target("sub", "primitive", {a, b},
                             [r](std::span<const Tensor> p) { return r(ad::sub(p[0], p[1])); }));
    t.push_back(point_target("mul", "primitive", {a, b},
                             [r](std::span<const Tensor> p) { return r(ad::mul(p[0], p[1])); }));
  }
  {
    const Tensor a = uniform(rng, {2, 3}, -1, 1), b = uniform(rng, {2, 1}, 1, 2);
    const Readout r = readout(rng, {2, 3});
    t.push_back(point_target("div", "primitive", {a, b},
                             [r](std::span<const Tensor> p) { return r(ad::div(p[0], p[1])); }));
  }
  {
    const Tensor x = uniform(rng, {3, 4}, -1, 1);
    const Readout r = readout(rng, {3, 4});
    t.push_back(point_target("scale", "primitive", {x}, [r](std::span<const Tensor> p) {
      return r(ad::scale(p[0], -1.7));
    }));
    t.push_back(point_target("add_scalar", "primitive", {x}, [r](std::span<const Tensor> p) {
      return r(ad::mul(ad::add_scalar(p[0], 0.3), p[0]));
    }));
  }
  t.push_back(unary_target("neg", rng, -1, 1, &ad::neg));
  t.push_back(unary_target("exp", rng, -1, 1, &ad::exp));
  t.push_back(unary_target("log", rng, 0.5, 2, &ad::log));
  t.push_back(unary_target("sqrt", rng, 0.5, 2, &ad::sqrt));
  t.push_back(unary_target("tanh", rng, -2, 2, &ad::tanh));
  t.push_back(unary_target("sigmoid", rng, -3, 3, &ad::sigmoid));
  t.push_back(unary_target("gelu", rng, -3, 3, &ad::gelu));
  t.push_back(unary_target("softplus", rng, -3, 3, &ad::softplus));
  {
    // Keep probe points away from the clamp bounds.
    std::vector<double> v;
    while (v.size() < 12) {
      const double x = rng.uniform(-2, 2);
      if (std::abs(std::abs(x) - 1.0) > 0.05) v.push_back(x);
    }
    const Tensor x({3, 4}, v);
    const Readout r = readout(rng, {3, 4});
    t.push_back(point_target("clamp", "primitive", {x}, [r](std::span<const Tensor> p) {
      return r(ad::clamp(p[0], -1.0, 1.0));
    }));
  }
  {
    const Tensor x = uniform(rng, {2, 3, 4}, -1, 1);
    const Readout r1 = readout(rng, {2, 4}), r2 = readout(rng, {2, 1, 4}),
                  r3 = readout(rng, {2, 3});
    t.push_back(point_target("sum", "primitive", {x}, [r1](std::span<const Tensor> p) {
      return ad::add(r1(ad::sum(p[0], 1)), ad::mul(ad::sum(p[0]), ad::sum(p[0])));
    }));
    t.push_back(point_target("mean", "primitive", {x}, [r2](std::span<const Tensor> p) {
      return ad::add(r2(ad::mean(p[0], 1, true)), ad::mul(ad::mean(p[0]), ad::mean(p[0])));
    }));
    t.push_back(point_target("logsumexp", "primitive", {x}, [r3](std::span<const Tensor> p) {
      return r3(ad::logsumexp(p[0], -1));
    }));
    const Readout r4 = readout(rng, {2, 3, 4});
    t.push_back(point_target("softmax", "primitive", {x}, [r4](std::span<const Tensor> p) {
      return r4(ad::softmax(p[0], -1));
    }));
    const Tensor mask = model::attention_mask(4, model::MaskMode::causal);
    const Tensor sq = uniform(rng, {2, 4, 4}, -1, 1);
    const Readout r5 = readout(rng, {2, 4, 4});
    t.push_back(point_target("masked_softmax", "primitive", {sq},
                             [r5, mask](std::span<const Tensor> p) {
                               return r5(ad::softmax(ad::add(p[0], mask), -1));
                             }));
  }
  {
    const Tensor a = uniform(rng, {3, 4}, -1, 1), b = uniform(rng, {4, 2}, -1, 1);
    const Readout r = readout(rng, {3, 2});
    t.push_back(point_target("matmul", "primitive", {a, b}, [r](std::span<const Tensor> p) {
      return r(ad::matmul(p[0], p[1]));
    }));
    const Tensor a3 = uniform(rng, {2, 3, 4}, -1, 1), b3 = uniform(rng, {2, 4, 2}, -1, 1),
                 b1 = uniform(rng, {1, 4, 2}, -1, 1);
    const Readout r3 = readout(rng, {2, 3, 2});
    t.push_back(point_target("matmul_batched", "primitive", {a3, b3},
                             [r3](std::span<const Tensor> p) { return r3(ad::matmul(p[0], p[1])); }));
    t.push_back(point_target("matmul_broadcast", "primitive", {a3, b1},
                             [r3](std::span<const Tensor> p) { return r3(ad::matmul(p[0], p[1])); }));
    t.push_back(point_target("matmul_3d_2d", "primitive", {a3, b},
                             [r3](std::span<const Tensor> p) { return r3(ad::matmul(p[0], p[1])); }));
  }
  {
    const Tensor x = uniform(rng, {2, 3, 4}, -1, 1);
    const Readout rt = readout(rng, {2, 4, 3}), rp = readout(rng, {4, 2, 3}),
                  rr = readout(rng, {6, 4}), rb = readout(rng, {3, 2, 3, 4});
    t.push_back(point_target("transpose", "primitive", {x},
                             [rt](std::span<const Tensor> p) { return rt(ad::transpose(p[0])); }));
    t.push_back(point_target("permute", "primitive", {x}, [rp](std::span<const Tensor> p) {
      return rp(ad::permute(p[0], {2, 0, 1}));
    }));
    t.push_back(point_target("reshape", "primitive", {x}, [rr](std::span<const Tensor> p) {
      return rr(ad::reshape(p[0], {6, 4}));
    }));
    t.push_back(point_target("broadcast_to", "primitive", {x}, [rb](std::span<const Tensor> p) {
      return rb(ad::broadcast_to(p[0], {3, 2, 3, 4}));
    }));
    const Tensor y = uniform(rng, {2, 2, 4}, -1, 1);
    const Readout rc = readout(rng, {2, 5, 4}), rs = readout(rng, {2, 2, 4}),
                  ri = readout(rng, {2, 4, 4});
    t.push_back(point_target("concat", "primitive", {x, y}, [rc](std::span<const Tensor> p) {
      return rc(ad::concat({p[0], p[1]}, 1));
    }));
    t.push_back(point_target("slice", "primitive", {x}, [rs](std::span<const Tensor> p) {
      return rs(ad::slice(p[0], 1, 1, 3));
    }));
    const std::vector<std::size_t> idx{2, 0, 2, 1};
    t.push_back(point_target("index_select", "primitive", {x},
                             [ri, idx](std::span<const Tensor> p) {
                               return ri(ad::index_select(p[0], 1, idx));
                             }));
  }
}

void add_blocks(std::vector<Target>& t, Rng& rng, std::uint64_t seed) {
  auto m = std::make_shared<model::ContentCtr>(small_model(false), mix_seed(seed, 11));
  auto mn = std::make_shared<model::ContentCtr>(small_model(true), mix_seed(seed, 12));
  const model::Batch batch = small_batch(rng);
  const Tensor tokens = gaussian(rng, {kB, kN, 2, kD});
  const Tensor latent = gaussian(rng, {kB, kN, kD});
  const Readout r_fuse = readout(rng, {kB, kN, 2, kD});
  const Readout r_seq = readout(rng, {kB, kN, kD});
  const Readout r_s = readout(rng, {kB, kN});
  const std::vector<std::uint64_t> ids = batch.streamers;

  t.push_back(model_target("fuse", m, {"proj_"}, [=](const model::ContentCtr& mm, Tape& tape) {
    return r_fuse(mm.fuse(&tape, batch.visual, batch.text).tokens);
  }));
  t.push_back(model_target("streamer_embedding", m, {"streamer_table"},
                           [=](const model::ContentCtr& mm, Tape& tape) {
                             return r_seq(ad::broadcast_to(
                                 ad::reshape(mm.streamer_embedding(&tape, ids), {kB, 1, kD}),
                                 {kB, kN, kD}));
                           }));
  t.push_back(model_target("perceiver_block", m, {"perceiver.", "streamer_table"},
                           [=](const model::ContentCtr& mm, Tape& tape) {
                             return r_seq(
                                 mm.perceive(&tape, tokens, mm.streamer_embedding(&tape, ids)));
                           }));
  t.push_back(model_target("decoder_block", m, {"decoder.", "positional"},
                           [=](const model::ContentCtr& mm, Tape& tape) {
                             return r_seq(mm.decode(&tape, latent));
                           }));
  t.push_back(model_target("decoder_block_pre_norm", mn, {"decoder.", "positional"},
                           [=](const model::ContentCtr& mm, Tape& tape) {
                             return r_seq(mm.decode(&tape, latent));
                           }));
  t.push_back(model_target("prediction_head", m, {"head."},
                           [=](const model::ContentCtr& mm, Tape& tape) {
                             return r_s(mm.predict(&tape, latent));
                           }));
  t.push_back(model_target("forward_mean_s", m, {""}, [=](const model::ContentCtr& mm, Tape& tape) {
    return ad::mean(mm.forward(&tape, batch).s);
  }));
}

void add_losses(std::vector<Target>& t, Rng& rng, std::uint64_t seed) {
  {
    const Tensor s = uniform(rng, {kB, kN}, 0.05, 0.95);
    std::vector<double> y(kB * kN);
    for (double& v : y) v = rng.uniform();
    t.push_back(point_target("logloss", "loss", {s}, [y](std::span<const Tensor> p) {
      return loss::pointwise_logloss(p[0], y);
    }));
  }
  for (auto variant : {loss::PairVariant::L0, loss::PairVariant::L1, loss::PairVariant::L2,
                       loss::PairVariant::L3}) {
    // Redraw until every pair is clear of its admission boundaries.
    std::vector<double> s(kB * kN), y(kB * kN);
    for (int k = 0;; ++k) {
      if (k == kMaxRedraws) throw ProbeError("pairwise: no stable probe point found");
      for (double& v : s) v = rng.uniform(0.05, 0.95);
      for (double& v : y) v = rng.uniform();
      if (loss::pair_admission_margin(s, y, kN) > kStableMargin) break;
    }
    const std::string name = "pairwise_L" + std::to_string(static_cast<int>(variant));
    t.push_back(point_target(name, "loss", {Tensor({kB, kN}, s)},
                             [y, variant](std::span<const Tensor> p) {
                               return loss::pairwise_loss(p[0], y, variant, 10.0).loss;
                             }));
  }
  {
    const Tensor text = gaussian(rng, {kN, kD}), visual = gaussian(rng, {kN, kD});
    const Readout r = readout(rng, {kN, kN});
    t.push_back(point_target("dtw_similarity_matrix", "loss", {text, visual},
                             [r](std::span<const Tensor> p) {
                               return r(loss::dtw_similarity_matrix(p[0], p[1]));
                             }));
  }
  for (auto cost : {loss::DtwCost::similarity, loss::DtwCost::distance}) {
    Tensor D;
    for (int k = 0;; ++k) {
      if (k == kMaxRedraws) throw ProbeError("dtw: no stable probe point found");
      D = uniform(rng, {kN, kN}, -1, 1);
      if (dtw_gap(D, cost) > kStableMargin) break;
    }
    const std::string name =
        cost == loss::DtwCost::similarity ? "dtw_distance_similarity" : "dtw_distance_cost";
    t.push_back(point_target(name, "loss", {D}, [cost](std::span<const Tensor> p) {
      return loss::dtw_distance(p[0], cost);
    }));
  }
  {
    loss::LossConfig lc;
    lc.negatives = 4;
    const std::uint64_t neg_seed = mix_seed(seed, 21);
    Tensor text, visual;
    for (int k = 0;; ++k) {
      if (k == kMaxRedraws) throw ProbeError("align_infonce: no stable probe point found");
      text = gaussian(rng, {1, kN, kD});
      visual = gaussian(rng, {1, kN, kD});
      if (align_gap(text, visual, lc, neg_seed) > kStableMargin &&
          !align_cancels(text, visual, lc, neg_seed)) {
        break;
      }
    }
    // align_infonce with the same negatives align_loss would draw for window 0.
    const auto perms = loss::negative_permutations(kN, lc.negatives, mix_seed(neg_seed, 0));
    t.push_back(point_target(
        "align_infonce", "loss", {ad::reshape(text, {kN, kD}), ad::reshape(visual, {kN, kD})},
        [perms, lc](std::span<const Tensor> p) {
          std::vector<Tensor> negatives;
          for (const auto& perm : perms) negatives.push_back(ad::index_select(p[1], 0, perm));
          return loss::align_infonce(p[0], p[1], negatives, lc.tau, lc.dtw_cost, lc.tie_order);
        }));
  }
  {
    loss::LossConfig lc;
    const std::uint64_t neg_seed = mix_seed(seed, 22);
    Tensor text, visual;
    for (int k = 0;; ++k) {
      if (k == kMaxRedraws) throw ProbeError("align_loss: no stable probe point found");
      text = gaussian(rng, {kB, kN, kD});
      visual = gaussian(rng, {kB, kN, kD});
      if (align_gap(text, visual, lc, neg_seed) > kStableMargin &&
          !align_cancels(text, visual, lc, neg_seed)) {
        break;
      }
    }
    t.push_back(point_target("align_loss", "loss", {text, visual},
                             [lc, neg_seed](std::span<const Tensor> p) {
                               return loss::align_loss(p[0], p[1], lc, neg_seed);
                             }));
  }
}

void add_composed(std::vector<Target>& t, Rng& rng, std::uint64_t seed) {
  loss::LossConfig lc;
  lc.negatives = 4;
  const std::uint64_t neg_seed = mix_seed(seed, 31);
  std::shared_ptr<model::ContentCtr> m;
  model::Batch batch;
  std::vector<double> y(kB * kN);
  for (int k = 0;; ++k) {
    if (k == kMaxRedraws) throw ProbeError("composed objective: no stable probe point found");
    m = std::make_shared<model::ContentCtr>(small_model(false), mix_seed(seed, 100 + k));
    batch = small_batch(rng);
    for (double& v : y) v = rng.uniform();
    const auto out = m->forward(nullptr, batch);
    const auto s = out.s.data();
    if (loss::pair_admission_margin(s, y, kN) > kStableMargin &&
        align_gap(out.text_seq, out.visual_seq, lc, neg_seed) > kStableMargin) {
      break;
    }
  }
  t.push_back({"combined_objective", "model", [m, batch, y, lc, neg_seed]() {
                 auto params = m->parameters();
                 return ad::grad_check(
                     params,
                     [&](Tape& tape) {
                       const auto out = m->forward(&tape, batch);
                       const Tensor point = loss::pointwise_logloss(out.s, y);
                       const Tensor pair =
                           loss::pairwise_loss(out.s, y, lc.variant, lc.sigma).loss;
                       const Tensor align =
                           loss::align_loss(out.text_seq, out.visual_seq, lc, neg_seed);
                       return loss::combined_loss(point, align, pair, lc);
                     },
                     kStep);
               }});
}

}  // namespace

std::vector<Target> gradcheck_targets(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Target> t;
  add_primitives(t, rng);
  add_blocks(t, rng, seed);
  add_losses(t, rng, seed);
  add_composed(t, rng, seed);
  return t;
}

bool Report::passed() const { return failures() == 0; }

std::size_t Report::failures() const {
  std::size_t n = 0;
  for (const auto& o : outcomes) n += o.passed ? 0 : 1;
  return n;
}

Report run_targets(std::span<const Target> targets, double tolerance, std::ostream* out) {
  Report report;
  for (const Target& target : targets) {
    Outcome o{target.name, target.group, {}, false, {}};
    try {
      o.result = target.run();
      o.passed = o.result.max_rel_error < tolerance;
    } catch (const std::exception& e) {
      o.error = e.what();
    }
    if (out) {
      char line[256];
      if (o.error.empty()) {
        std::snprintf(line, sizeof line, "%-26s %-9s max_rel_err=%.3e coords=%zu %s", o.name.c_str(),
                      o.group.c_str(), o.result.max_rel_error, o.result.coordinates,
                      o.passed ? "PASS" : "FAIL");
        *out << line;
        if (!o.passed) {
          *out << " worst=" << o.result.worst_param << "[" << o.result.worst_index
               << "] analytic=" << o.result.analytic << " numeric=" << o.result.numeric;
        }
      } else {
        std::snprintf(line, sizeof line, "%-26s %-9s ERROR ", o.name.c_str(), o.group.c_str());
        *out << line << o.error;
      }
      *out << '\n';
    }
    report.outcomes.push_back(std::move(o));
  }
  if (out) {
    *out << report.outcomes.size() << " targets, " << report.failures() << " failed\n";
  }
  return report;
}

}  // namespace cctr::suite
