#pragma once

// The subcommands behind the cctr binary. Each throws on failure; the binary
// maps exception types to exit codes with exit_code().

#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cctr/config.hpp"
#include "cctr/losses.hpp"
#include "cctr/train.hpp"

namespace cctr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitRuntime = 2;
inline constexpr int kExitGradcheck = 3;

// Config, format, label, shape and rank problems are validation failures;
// everything else is a runtime failure.
int exit_code(const std::exception& e);

struct GenerateOptions {
  std::optional<std::filesystem::path> config;  // default generator config when absent
  std::filesystem::path out;
  std::uint64_t seed = 0;
  data::Format format = data::Format::binary;
};
Json cmd_generate(const GenerateOptions& o);

struct TrainCommandOptions {
  std::filesystem::path config;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;  // overrides the config seed
  std::optional<std::filesystem::path> resume;
  std::optional<std::size_t> max_epochs;
};
train::TrainResult cmd_train(const TrainCommandOptions& o, std::ostream* log);

struct EvalOptions {
  std::filesystem::path ckpt;
  std::filesystem::path data;
  std::string split = "test";  // test | train
  std::optional<std::filesystem::path> out;  // metrics.json and predictions.csv
};
train::Evaluation cmd_eval(const EvalOptions& o);

inline constexpr const char* kAblationNames[] = {"Model1", "Model2", "Model3",
                                                 "Model4", "Model5", "Ours"};

struct AblationRow {
  std::string model;
  RunConfig config;
  bool ok = false;
  std::string error;
  std::vector<train::EpochMetrics> history;
};

// The six loss configurations derived from base: point only, point plus each
// pairwise variant, and point plus L1 plus alignment. base must enable both
// the pairwise and the alignment term.
std::vector<RunConfig> ablation_configs(const RunConfig& base);
// Trains every row with the same seed; a failing row is recorded and skipped.
// With out_dir set, row k writes to out_dir/<name>.
std::vector<AblationRow> run_ablation(const RunConfig& base, const train::DataBundle& bundle,
                                      const std::optional<std::filesystem::path>& out_dir,
                                      std::ostream* log);
std::string ablation_csv(const std::vector<AblationRow>& rows);

struct AblateOptions {
  std::filesystem::path config;
  std::filesystem::path data;
  std::filesystem::path out;
  std::optional<std::uint64_t> seed;
};
std::vector<AblationRow> cmd_ablate(const AblateOptions& o, std::ostream* log);

struct Alignment {
  std::size_t n = 0;
  std::vector<double> similarity;  // n x n, rows are text timestamps
  std::vector<std::pair<std::size_t, std::size_t>> path;
};

// Without a model, compares raw visual features with text decoded back into
// visual space; with one, compares the model's fused text and visual sequences.
Alignment align_window(const data::SampleWindow& window, const train::DataBundle& bundle,
                       const model::ContentCtr* model, loss::DtwCost cost);
// Median of i - j over the path, averaging the two middle values.
double median_offset(const Alignment& a);
std::string similarity_csv(const Alignment& a);
std::string path_csv(const Alignment& a);

struct AlignOptions {
  std::optional<std::filesystem::path> ckpt;
  std::filesystem::path data;
  std::size_t sample = 0;
  std::string split = "test";
  loss::DtwCost cost = loss::DtwCost::distance;
  std::filesystem::path out;
};
Alignment cmd_align(const AlignOptions& o);

// Returns true when every target passes.
bool cmd_gradcheck(std::uint64_t seed, std::ostream& out);

}  // namespace cctr::cli
