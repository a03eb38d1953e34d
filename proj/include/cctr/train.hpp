#pragma once

// Dataset directories, provider embedding, the training loop and evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cctr/config.hpp"
#include "cctr/data.hpp"
#include "cctr/metrics.hpp"
#include "cctr/model.hpp"

namespace cctr::train {

inline constexpr char kDataManifest[] = "manifest.json";
inline constexpr char kMetricsCsv[] = "metrics.csv";

// A generated dataset directory: manifest.json plus train and test files.
struct DataBundle {
  data::GeneratorConfig generator;
  std::uint64_t seed = 0;
  std::vector<data::SampleWindow> train;
  std::vector<data::SampleWindow> test;
};

// Writes <dir>/train.<ext>, <dir>/test.<ext> and the manifest; returns the manifest.
Json write_bundle(const std::filesystem::path& dir, const data::GeneratorConfig& generator,
                  std::uint64_t seed, const data::Dataset& dataset, data::Format format);
DataBundle load_bundle(const std::filesystem::path& dir);

// Windows pushed through the frozen providers, stored flat.
struct Embedded {
  std::size_t windows = 0, n = 0, visual_dim = 0, text_dim = 0;
  std::vector<double> visual;  // windows x n x visual_dim
  std::vector<double> text;    // windows x n x text_dim
  std::vector<double> y;       // windows x n
  std::vector<std::uint64_t> streamers;
};

Embedded embed(std::span<const data::SampleWindow> windows, const data::GeneratorConfig& generator);
model::Batch make_batch(const Embedded& e, std::span<const std::size_t> rows);
std::vector<double> batch_labels(const Embedded& e, std::span<const std::size_t> rows);

// Fills the data-derived model fields (n, widths, streamers) left at 0 and
// checks the others against the dataset.
model::ModelConfig resolve_model(const model::ModelConfig& config, const DataBundle& bundle);

struct Evaluation {
  metrics::MetricsReport report;
  std::vector<std::vector<double>> predictions;  // per window, n values
};

// Tape-free forward over every window. mAP positives are the top quarter
// (rounded up) of each window by label.
Evaluation evaluate(const model::ContentCtr& model, const Embedded& e);
std::string predictions_csv(const Evaluation& ev, const Embedded& e);

struct EpochMetrics {
  std::size_t epoch = 0;
  double l_point = 0.0, l_pair = 0.0, l_align = 0.0;  // training means, unweighted
  double train_tau = 0.0, test_tau = 0.0, avg_s_over_y = 0.0;
};

std::string metrics_csv(std::span<const EpochMetrics> rows);
std::vector<EpochMetrics> parse_metrics_csv(const std::string& text);

struct TrainOptions {
  std::filesystem::path out_dir;                  // empty: write nothing
  std::optional<std::filesystem::path> resume;    // checkpoint directory to continue from
  std::optional<std::size_t> stop_after;          // stop once this many epochs are complete
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  model::ContentCtr model;
  std::vector<EpochMetrics> history;  // includes epochs restored from a resumed run
};

// Throws DivergenceError on a non-finite loss; the last checkpoint written
// to out_dir is then the last good one.
TrainResult train(const RunConfig& config, const DataBundle& bundle, const TrainOptions& options);

// %.9g
std::string fmt9(double v);

}  // namespace cctr::train
