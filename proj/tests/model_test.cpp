#include <cmath>
#include <limits>
#include <set>

#include <gtest/gtest.h>

#include "cctr/error.hpp"
#include "cctr/gradcheck.hpp"
#include "cctr/model.hpp"
#include "support.hpp"

namespace cctr {
namespace {

using ad::Tape;
using ad::Tensor;
using model::Batch;
using model::ContentCtr;
using model::MaskMode;
using model::ModelConfig;
using testing::random_tensor;

constexpr double kInf = std::numeric_limits<double>::infinity();

ModelConfig small(std::size_t n = 4, std::size_t d = 8) {
  ModelConfig c;
  c.n = n;
  c.d = d;
  c.d_h = 4;
  c.n_heads = 2;
  c.ffn_hidden = 16;
  c.visual_dim = 6;
  c.text_dim = 5;
  c.streamers = 3;
  return c;
}

Batch random_batch(Rng& rng, const ModelConfig& c, std::size_t b, double scale = 1.0) {
  Batch batch;
  batch.visual = random_tensor(rng, {b, c.n, c.visual_dim}, scale);
  batch.text = random_tensor(rng, {b, c.n, c.text_dim}, scale);
  for (std::size_t k = 0; k < b; ++k) batch.streamers.push_back(rng.below(c.streamers + 2));
  return batch;
}

void set_param(ContentCtr& m, const std::string& name, std::vector<double> values) {
  ad::Parameter* p = m.find(name);
  ASSERT_NE(p, nullptr) << name;
  p->value = Tensor(p->value.shape(), std::move(values));
}

// Copy of x with every entry at timestamps > i replaced by fresh noise.
Tensor perturb_after(Rng& rng, const Tensor& x, std::size_t i) {
  std::vector<double> v = x.to_vector();
  const std::size_t b = x.dim(0), n = x.dim(1), w = x.size() / (b * n);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = i + 1; t < n; ++t)
      for (std::size_t k = 0; k < w; ++k) v[(bi * n + t) * w + k] = 10.0 * rng.normal();
  return Tensor(x.shape(), std::move(v));
}

TEST(Mask, CausalThreeByThree) {
  const auto m = model::attention_mask(3, MaskMode::causal);
  const std::vector<double> want{0, -kInf, -kInf, 0, 0, -kInf, 0, 0, 0};
  EXPECT_EQ(m.to_vector(), want);
}

TEST(Mask, FullIsAllZero) {
  const auto m = model::attention_mask(4, MaskMode::full);
  for (double v : m.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mask, FirstRowAttendsOnlyToItself) {
  Rng rng(2);
  const Tensor scores = random_tensor(rng, {4, 4}, 3.0);
  const auto w = ad::softmax(ad::add(scores, model::attention_mask(4, MaskMode::causal)), 1);
  EXPECT_EQ(w[0], 1.0);
  for (std::size_t j = 1; j < 4; ++j) EXPECT_EQ(w[j], 0.0);
}

TEST(Fuse, IdentityVisualProjectionAndZeroText) {
  ModelConfig c = small();
  c.visual_dim = c.d;
  ContentCtr m(c, 3);
  std::vector<double> eye(c.d * c.d, 0.0);
  for (std::size_t k = 0; k < c.d; ++k) eye[k * c.d + k] = 1.0;
  set_param(m, "proj_visual.0.weight", eye);
  set_param(m, "proj_visual.0.bias", std::vector<double>(c.d, 0.0));
  Rng rng(4);
  const Tensor visual = random_tensor(rng, {2, c.n, c.d});
  const auto fused = m.fuse(nullptr, visual, Tensor::zeros({2, c.n, c.text_dim}));
  const auto text_bias = m.find("proj_text.0.bias")->value;
  ASSERT_EQ(fused.tokens.shape(), (ad::Shape{2, c.n, 2, c.d}));
  for (std::size_t bi = 0; bi < 2 * c.n; ++bi)
    for (std::size_t k = 0; k < c.d; ++k) {
      EXPECT_EQ(fused.tokens[(bi * 2 + 0) * c.d + k], visual[bi * c.d + k]);
      EXPECT_EQ(fused.tokens[(bi * 2 + 1) * c.d + k], text_bias[k]);
    }
}

TEST(Fuse, LargeWidthShape) {
  ModelConfig c = small(20, 512);
  c.d_h = 64;
  c.n_heads = 8;
  ContentCtr m(c, 1);
  Rng rng(5);
  const auto fused = m.fuse(nullptr, random_tensor(rng, {2, 20, c.visual_dim}),
                            random_tensor(rng, {2, 20, c.text_dim}));
  EXPECT_EQ(fused.tokens.shape(), (ad::Shape{2, 20, 2, 512}));
  EXPECT_EQ(fused.visual_seq.shape(), (ad::Shape{2, 20, 512}));
  EXPECT_EQ(fused.text_seq.shape(), (ad::Shape{2, 20, 512}));
}

TEST(Fuse, BatchPermutationPermutesOutput) {
  const ModelConfig c = small();
  ContentCtr m(c, 6);
  Rng rng(6);
  const Tensor v = random_tensor(rng, {3, c.n, c.visual_dim});
  const Tensor t = random_tensor(rng, {3, c.n, c.text_dim});
  const std::vector<std::size_t> perm{2, 0, 1};
  const auto a = m.fuse(nullptr, v, t).tokens;
  const auto b = m.fuse(nullptr, ad::index_select(v, 0, perm), ad::index_select(t, 0, perm)).tokens;
  EXPECT_EQ(ad::index_select(a, 0, perm).to_vector(), b.to_vector());
}

TEST(Fuse, WrongWidthThrows) {
  ContentCtr m(small(), 1);
  EXPECT_THROW(m.fuse(nullptr, Tensor::zeros({1, 4, 7}), Tensor::zeros({1, 4, 5})),
               DimensionError);
}

TEST(StreamerTable, SameIdSameRowUnknownIdsShareFallback) {
  const ModelConfig c = small();
  ContentCtr m(c, 2);
  const std::vector<std::uint64_t> ids{1, 1, 3, 99, 0};
  const auto e = m.streamer_embedding(nullptr, ids);
  const auto row = [&](std::size_t k) {
    return std::vector<double>(e.data().begin() + k * c.d, e.data().begin() + (k + 1) * c.d);
  };
  EXPECT_EQ(row(0), row(1));
  EXPECT_EQ(row(2), row(3));
  EXPECT_NE(row(0), row(2));
  EXPECT_NE(row(4), row(2));
}

TEST(Perceiver, ZeroedBranchesPassStreamerThrough) {
  const ModelConfig c = small();
  ContentCtr m(c, 7);
  m.zero_residual_branches();
  Rng rng(7);
  const Tensor tokens = random_tensor(rng, {2, c.n, 2, c.d});
  const Tensor eu = random_tensor(rng, {2, c.d});
  const auto out = m.perceive(nullptr, tokens, eu);
  ASSERT_EQ(out.shape(), (ad::Shape{2, c.n, c.d}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < c.n; ++i)
      for (std::size_t k = 0; k < c.d; ++k) EXPECT_EQ(out[(b * c.n + i) * c.d + k], eu[b * c.d + k]);
}

TEST(Perceiver, ShapeContract) {
  const ModelConfig c = small(4, 8);
  ContentCtr m(c, 8);
  Rng rng(8);
  const auto out = m.perceive(nullptr, random_tensor(rng, {1, 4, 2, 8}), random_tensor(rng, {1, 8}));
  EXPECT_EQ(out.shape(), (ad::Shape{1, 4, 8}));
}

TEST(PerceiverProperty, SwappingTimestampsSwapsRows) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    ModelConfig c = small(5, 8);
    c.perceiver_layers = 1 + rng.below(2);
    ContentCtr m(c, seed);
    const Tensor tokens = random_tensor(rng, {2, c.n, 2, c.d});
    const Tensor eu = random_tensor(rng, {2, c.d});
    const std::size_t i = rng.below(c.n);
    std::size_t j = rng.below(c.n - 1);
    if (j >= i) ++j;
    std::vector<std::size_t> swap(c.n);
    for (std::size_t k = 0; k < c.n; ++k) swap[k] = k == i ? j : k == j ? i : k;
    const auto a = m.perceive(nullptr, tokens, eu);
    const auto b = m.perceive(nullptr, ad::index_select(tokens, 1, swap), eu);
    ASSERT_EQ(ad::index_select(a, 1, swap).to_vector(), b.to_vector()) << "seed " << seed;
  }
}

TEST(Decoder, ZeroedBranchesAreIdentity) {
  ModelConfig c = small();
  c.use_positional = false;
  c.decoder_layers = 2;
  ContentCtr m(c, 9);
  m.zero_residual_branches();
  Rng rng(9);
  const Tensor x = random_tensor(rng, {2, c.n, c.d});
  EXPECT_EQ(m.decode(nullptr, x).to_vector(), x.to_vector());
}

TEST(Decoder, ZeroedBranchesAddOnlyPositions) {
  const ModelConfig c = small();
  ContentCtr m(c, 10);
  m.zero_residual_branches();
  Rng rng(10);
  const Tensor x = random_tensor(rng, {1, c.n, c.d});
  const auto h = m.decode(nullptr, x);
  const auto pos = m.find("positional")->value;
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(h[k], x[k] + pos[k]);
}

TEST(DecoderProperty, CausalRowsIgnoreTheFuture) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const ModelConfig c = small(6, 8);
    ContentCtr m(c, static_cast<std::uint64_t>(trial));
    const Tensor x = random_tensor(rng, {2, c.n, c.d});
    const std::size_t i = rng.below(c.n - 1);
    const auto a = m.decode(nullptr, x);
    const auto b = m.decode(nullptr, perturb_after(rng, x, i));
    for (std::size_t bi = 0; bi < 2; ++bi)
      for (std::size_t t = 0; t <= i; ++t)
        for (std::size_t k = 0; k < c.d; ++k) {
          const std::size_t at = (bi * c.n + t) * c.d + k;
          ASSERT_EQ(a[at], b[at]) << "trial " << trial << " t " << t;
        }
  }
}

TEST(Predict, ZeroHeadGivesHalf) {
  const ModelConfig c = small();
  ContentCtr m(c, 12);
  set_param(m, "head.weight", std::vector<double>(c.d, 0.0));
  set_param(m, "head.bias", {0.0});
  Rng rng(12);
  const auto s = m.predict(nullptr, random_tensor(rng, {3, c.n, c.d}));
  EXPECT_EQ(s.shape(), (ad::Shape{3, c.n}));
  for (double v : s.data()) EXPECT_EQ(v, 0.5);
}

TEST(Predict, IncreasingLogitIncreasesScore) {
  const ModelConfig c = small();
  ContentCtr m(c, 13);
  std::vector<double> w(c.d, 0.0);
  w[0] = 1.0;
  set_param(m, "head.weight", w);
  set_param(m, "head.bias", {0.0});
  std::vector<double> h(5 * c.d, 0.0);
  for (std::size_t t = 0; t < 5; ++t) h[t * c.d] = -2.0 + t;
  const auto s = m.predict(nullptr, Tensor({1, 5, c.d}, h));
  for (std::size_t t = 1; t < 5; ++t) EXPECT_GT(s[t], s[t - 1]);
}

TEST(Forward, LargeConfigShapes) {
  ModelConfig c = small(20, 512);
  c.d_h = 64;
  c.n_heads = 8;
  c.ffn_hidden = 1024;
  ContentCtr m(c, 14);
  Rng rng(14);
  const auto out = m.forward(nullptr, random_batch(rng, c, 48));
  EXPECT_EQ(out.s.shape(), (ad::Shape{48, 20}));
  EXPECT_EQ(out.visual_seq.shape(), (ad::Shape{48, 20, 512}));
  EXPECT_EQ(out.text_seq.shape(), (ad::Shape{48, 20, 512}));
}

TEST(Forward, DeskConfigForwardAndBackward) {
  const ModelConfig c = small(6, 16);
  ContentCtr m(c, 15);
  Rng rng(15);
  Tape tape;
  const auto out = m.forward(&tape, random_batch(rng, c, 2));
  tape.backward(ad::mean(out.s));
  double norm = 0.0;
  for (auto* p : m.parameters())
    for (double g : tape.grad(*p)) norm += g * g;
  EXPECT_GT(norm, 0.0);
  EXPECT_TRUE(std::isfinite(norm));
}

TEST(Forward, MeanScoreGradientMatchesFiniteDifferences) {
  const ModelConfig c = small(4, 8);
  ContentCtr m(c, 16);
  Rng rng(16);
  const auto batch = random_batch(rng, c, 2);
  const auto params = m.parameters();
  const auto r = ad::grad_check(params, [&](Tape& t) { return ad::mean(m.forward(&t, batch).s); });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_param << "[" << r.worst_index << "]";
  std::size_t total = 0;
  for (auto* p : params) total += p->value.size();
  EXPECT_EQ(r.coordinates, total);
}

TEST(ForwardProperty, ScoresStayInsideOpenIntervalForLargeInputs) {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = small(5, 8);
    c.pre_norm = trial % 2 == 1;
    ContentCtr m(c, static_cast<std::uint64_t>(trial));
    const auto s = m.forward(nullptr, random_batch(rng, c, 2, 1e3)).s;
    for (double v : s.data()) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(ForwardProperty, CausalScoresIgnoreFutureInputs) {
  Rng rng(18);
  for (int trial = 0; trial < 100; ++trial) {
    const ModelConfig c = small(8, 8);
    ContentCtr m(c, static_cast<std::uint64_t>(trial));
    const auto batch = random_batch(rng, c, 2);
    const std::size_t i = rng.below(c.n - 1);
    Batch moved = batch;
    moved.visual = perturb_after(rng, batch.visual, i);
    moved.text = perturb_after(rng, batch.text, i);
    const auto a = m.forward(nullptr, batch).s;
    const auto b = m.forward(nullptr, moved).s;
    for (std::size_t bi = 0; bi < 2; ++bi)
      for (std::size_t t = 0; t <= i; ++t) ASSERT_EQ(a[bi * c.n + t], b[bi * c.n + t]);
  }
}

TEST(ForwardProperty, FullMaskSeesTheFuture) {
  Rng rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig c = small(8, 8);
    c.mask_mode = MaskMode::full;
    ContentCtr m(c, static_cast<std::uint64_t>(trial));
    const auto batch = random_batch(rng, c, 1);
    const std::size_t i = rng.below(c.n - 1);
    Batch moved = batch;
    moved.visual = perturb_after(rng, batch.visual, i);
    const auto a = m.forward(nullptr, batch).s;
    const auto b = m.forward(nullptr, moved).s;
    bool changed = false;
    for (std::size_t t = 0; t <= i; ++t) changed = changed || a[t] != b[t];
    EXPECT_TRUE(changed) << "trial " << trial;
  }
}

TEST(ForwardProperty, RepeatedForwardIsBitIdentical) {
  const ModelConfig c = small();
  ContentCtr m(c, 20);
  Rng rng(20);
  const auto batch = random_batch(rng, c, 3);
  EXPECT_EQ(m.forward(nullptr, batch).s.to_vector(), m.forward(nullptr, batch).s.to_vector());
}

TEST(Config, RejectsDegenerateValues) {
  ModelConfig c = small();
  c.n = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small();
  c.n_heads = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Parameters, NamesAreUnique) {
  ContentCtr m(small(), 1);
  std::set<std::string> names;
  for (auto* p : m.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
}

}  // namespace
}  // namespace cctr
