#pragma once

// JSON forms of every configuration struct. Parsing is strict: unknown keys
// and wrong types raise ConfigError naming the offending field. Absent keys
// keep their defaults.

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "cctr/data.hpp"
#include "cctr/losses.hpp"
#include "cctr/model.hpp"

namespace cctr {

using Json = nlohmann::json;

enum class Schedule { constant, cosine };

struct OptimConfig {
  double learning_rate = 5e-5;
  std::size_t epochs = 12;
  std::size_t batch_size = 48;
  Schedule schedule = Schedule::constant;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

// Model fields n, visual_dim, text_dim and streamers set to 0 are filled in
// from the dataset at training time.
struct RunConfig {
  model::ModelConfig model;
  loss::LossConfig loss;
  OptimConfig optim;
  std::uint64_t seed = 0;

  RunConfig();
  void validate() const;
};

Json to_json(const model::ModelConfig& c);
Json to_json(const loss::LossConfig& c);
Json to_json(const OptimConfig& c);
Json to_json(const RunConfig& c);
Json to_json(const data::GeneratorConfig& c);

// `where` prefixes field names in error messages.
model::ModelConfig model_config_from_json(const Json& j, const std::string& where = "model");
loss::LossConfig loss_config_from_json(const Json& j, const std::string& where = "loss");
OptimConfig optim_config_from_json(const Json& j, const std::string& where = "optim");
RunConfig run_config_from_json(const Json& j);
data::GeneratorConfig generator_config_from_json(const Json& j);

// Reads and parses a JSON file; syntax errors become ConfigError.
Json read_json_file(const std::filesystem::path& path);
RunConfig load_run_config(const std::filesystem::path& path);
data::GeneratorConfig load_generator_config(const std::filesystem::path& path);

std::string to_string(loss::PairVariant v);
loss::PairVariant parse_variant(const std::string& s);

}  // namespace cctr
