#include <cmath>

#include <gtest/gtest.h>

#include "cctr/checkpoint.hpp"
#include "cctr/error.hpp"
#include "cctr/train.hpp"
#include "support.hpp"

namespace cctr {
namespace {

using testing::TempDir;
using train::DataBundle;

DataBundle small_bundle(std::uint64_t seed = 3) {
  DataBundle b;
  b.generator.streamers = 3;
  b.generator.windows_per_streamer = 8;
  b.generator.n = 6;
  b.generator.visual_dim = 6;
  b.generator.text_dim = 8;
  b.generator.embed_visual_dim = 8;
  b.generator.embed_text_dim = 8;
  b.seed = seed;
  auto d = data::generate_dataset(b.generator, seed);
  b.train = std::move(d.train);
  b.test = std::move(d.test);
  return b;
}

RunConfig small_run() {
  RunConfig c;
  c.model.n = 0;
  c.model.visual_dim = 0;
  c.model.text_dim = 0;
  c.model.streamers = 0;
  c.model.d = 8;
  c.model.d_h = 4;
  c.model.n_heads = 2;
  c.model.ffn_hidden = 16;
  c.loss.negatives = 3;
  c.optim.learning_rate = 5e-3;
  c.optim.epochs = 3;
  c.optim.batch_size = 5;
  c.seed = 11;
  return c;
}

void expect_same_params(const model::ContentCtr& a, const model::ContentCtr& b) {
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t k = 0; k < pa.size(); ++k) {
    EXPECT_EQ(pa[k]->name, pb[k]->name);
    EXPECT_EQ(pa[k]->value.to_vector(), pb[k]->value.to_vector()) << pa[k]->name;
  }
}

TEST(Train, DeterministicGivenSeed) {
  TempDir dir;
  const auto bundle = small_bundle();
  const auto cfg = small_run();
  train::train(cfg, bundle, {dir / "a"});
  train::train(cfg, bundle, {dir / "b"});
  for (const char* leaf : {kCheckpointBlob, kCheckpointManifest, train::kMetricsCsv}) {
    EXPECT_EQ(testing::read_file(dir / "a" / leaf), testing::read_file(dir / "b" / leaf)) << leaf;
  }
}

TEST(Train, SeedChangesTheRun) {
  const auto bundle = small_bundle();
  auto cfg = small_run();
  cfg.optim.epochs = 1;
  const auto a = train::train(cfg, bundle, {});
  cfg.seed = 12;
  const auto b = train::train(cfg, bundle, {});
  EXPECT_NE(a.model.parameters()[0]->value.to_vector(), b.model.parameters()[0]->value.to_vector());
}

TEST(Train, UnusedLossColumnsAreZero) {
  TempDir dir;
  auto cfg = small_run();
  cfg.loss.lambda_pair = 0;
  cfg.loss.lambda_align = 0;
  const auto r = train::train(cfg, small_bundle(), {dir.path()});
  ASSERT_EQ(r.history.size(), 3u);
  for (const auto& m : train::parse_metrics_csv(testing::read_file(dir / train::kMetricsCsv))) {
    EXPECT_EQ(m.l_pair, 0.0);
    EXPECT_EQ(m.l_align, 0.0);
    EXPECT_GT(m.l_point, 0.0);
  }
}

TEST(Train, MetricsCsvHeaderAndRoundTrip) {
  std::vector<train::EpochMetrics> rows{{1, 0.5, 0.25, 2.0, 0.1, 0.2, 1.125}, {2, 0.4, 0.2, 1.5, 0.3, 0.35, 0.9}};
  const auto text = train::metrics_csv(rows);
  EXPECT_EQ(text.substr(0, text.find('\n')), "epoch,L_Point,L_Pair,L_align,train_tau,test_tau,avg_s_over_y");
  const auto back = train::parse_metrics_csv(text);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].epoch, 2u);
  EXPECT_EQ(back[0].avg_s_over_y, 1.125);
  EXPECT_EQ(back[1].test_tau, 0.35);
}

TEST(Checkpoint, SaveLoadIsBitExact) {
  TempDir dir;
  auto cfg = small_run();
  cfg.optim.epochs = 1;
  const auto r = train::train(cfg, small_bundle(), {dir.path()});
  const auto ck = load_checkpoint(dir.path());
  EXPECT_EQ(ck.epoch, 1u);
  ASSERT_TRUE(ck.run);
  EXPECT_EQ(to_json(*ck.run).dump(), to_json(*ck.run).dump());
  expect_same_params(restore_model(ck), r.model);
}

TEST(Checkpoint, CorruptBlobIsRejected) {
  TempDir dir;
  auto cfg = small_run();
  cfg.optim.epochs = 1;
  train::train(cfg, small_bundle(), {dir.path()});
  auto bytes = testing::read_file(dir / kCheckpointBlob);
  bytes[0] ^= 0x20;
  std::ofstream(dir / kCheckpointBlob, std::ios::binary) << bytes;
  EXPECT_THROW(load_checkpoint(dir.path()), FormatError);
}

TEST(Checkpoint, ShapeMismatchIsADimensionError) {
  TempDir dir;
  auto cfg = small_run();
  cfg.optim.epochs = 1;
  train::train(cfg, small_bundle(), {dir.path()});
  auto ck = load_checkpoint(dir.path());
  ck.tensors["head.weight"] = ad::Tensor({3, 1}, {0, 0, 0});
  EXPECT_THROW(restore_model(ck), DimensionError);
  ck = load_checkpoint(dir.path());
  ck.tensors.erase("head.bias");
  EXPECT_THROW(restore_model(ck), DimensionError);
}

TEST(Resume, NextEpochIsBitIdentical) {
  TempDir dir;
  const auto bundle = small_bundle();
  const auto cfg = small_run();
  train::train(cfg, bundle, {dir / "full"});
  train::TrainOptions first{dir / "part"};
  first.stop_after = 2;
  EXPECT_EQ(train::train(cfg, bundle, first).history.size(), 2u);
  train::TrainOptions second{dir / "resumed"};
  second.resume = dir / "part";
  const auto r = train::train(cfg, bundle, second);
  EXPECT_EQ(r.history.size(), 3u);
  EXPECT_EQ(testing::read_file(dir / "full" / kCheckpointBlob), testing::read_file(dir / "resumed" / kCheckpointBlob));
  EXPECT_EQ(testing::read_file(dir / "full" / train::kMetricsCsv),
            testing::read_file(dir / "resumed" / train::kMetricsCsv));
}

TEST(Resume, DifferentConfigIsRejected) {
  TempDir dir;
  const auto bundle = small_bundle();
  auto cfg = small_run();
  cfg.optim.epochs = 1;
  train::train(cfg, bundle, {dir / "a"});
  cfg.optim.learning_rate *= 2;
  train::TrainOptions o{dir / "b"};
  o.resume = dir / "a";
  EXPECT_THROW(train::train(cfg, bundle, o), ConfigError);
}

TEST(Eval, OwnTrainingDataReproducesTrainTau) {
  const auto bundle = small_bundle();
  const auto r = train::train(small_run(), bundle, {});
  const auto ev = train::evaluate(r.model, train::embed(bundle.train, bundle.generator));
  EXPECT_GE(ev.report.tau, r.history.back().train_tau - 1e-9);
}

TEST(Eval, ConstantPredictorSkipsEveryWindow) {
  const auto bundle = small_bundle();
  auto cfg = small_run();
  cfg.model = train::resolve_model(cfg.model, bundle);
  model::ContentCtr m(cfg.model, 1);
  auto* w = m.find("head.weight");
  ASSERT_NE(w, nullptr);
  w->value = ad::Tensor::zeros(w->value.shape());
  const auto e = train::embed(bundle.test, bundle.generator);
  const auto ev = train::evaluate(m, e);
  EXPECT_EQ(ev.report.windows, 0u);
  EXPECT_EQ(ev.report.skipped_windows, e.windows);
}

TEST(Eval, PredictionsCsvHasOneRowPerTimestamp) {
  const auto bundle = small_bundle();
  auto cfg = small_run();
  cfg.model = train::resolve_model(cfg.model, bundle);
  const model::ContentCtr m(cfg.model, 2);
  const auto e = train::embed(bundle.test, bundle.generator);
  const auto csv = train::predictions_csv(train::evaluate(m, e), e);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "window,timestamp,s,y");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), 1 + e.windows * e.n);
}

TEST(Divergence, AbortsAndKeepsLastGoodCheckpoint) {
  TempDir dir;
  auto cfg = small_run();
  cfg.optim.learning_rate = 1e37;
  cfg.optim.epochs = 6;
  EXPECT_THROW(train::train(cfg, small_bundle(), {dir.path()}), DivergenceError);
  const auto ck = load_checkpoint(dir.path());
  for (const auto& [name, t] : ck.tensors) {
    for (double v : t.data()) ASSERT_TRUE(std::isfinite(v)) << name;
  }
  EXPECT_NO_THROW(restore_model(ck));
}

TEST(ResolveModel, FillsDataFieldsAndChecksTheRest) {
  const auto bundle = small_bundle();
  const auto m = train::resolve_model(small_run().model, bundle);
  EXPECT_EQ(m.n, bundle.generator.n);
  EXPECT_EQ(m.visual_dim, bundle.generator.embed_visual_dim);
  EXPECT_EQ(m.text_dim, bundle.generator.embed_text_dim);
  auto bad = small_run().model;
  bad.n = bundle.generator.n + 1;
  EXPECT_THROW(train::resolve_model(bad, bundle), ConfigError);
}

TEST(RunConfigJson, RoundTripAndStrictness) {
  const auto c = small_run();
  EXPECT_EQ(to_json(run_config_from_json(to_json(c))), to_json(c));
  Json j = to_json(c);
  j["optim"]["learnign_rate"] = 1.0;
  EXPECT_THROW(run_config_from_json(j), ConfigError);
  j = to_json(c);
  j["loss"]["sigma"] = "ten";
  EXPECT_THROW(run_config_from_json(j), ConfigError);
}

}  // namespace
}  // namespace cctr
