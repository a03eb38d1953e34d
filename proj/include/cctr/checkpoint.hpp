#pragma once

// On-disk checkpoints: <dir>/checkpoint.json lists every tensor with its
// shape and byte offset; <dir>/checkpoint.bin holds the values as
// little-endian f32, starting with the magic string.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>

#include "cctr/adam.hpp"
#include "cctr/config.hpp"
#include "cctr/model.hpp"

namespace cctr {

inline constexpr char kCheckpointMagic[] = "CCTR-CKPT-1";
inline constexpr char kCheckpointManifest[] = "checkpoint.json";
inline constexpr char kCheckpointBlob[] = "checkpoint.bin";

struct Checkpoint {
  model::ModelConfig model;
  std::optional<RunConfig> run;       // absent for bare model snapshots
  std::size_t epoch = 0;              // completed epochs
  std::uint64_t adam_step = 0;
  std::map<std::string, ad::Tensor> tensors;  // parameters, plus adam.m/<name>, adam.v/<name>
};

// Rounds every value to the nearest f32, so that save/load is lossless.
void quantize_to_f32(std::span<ad::Parameter* const> params);
void quantize_to_f32(ad::AdamState& state);

// Writes both files into dir (created if missing). adam may be null.
void save_checkpoint(const std::filesystem::path& dir, const model::ContentCtr& model,
                     const ad::AdamState* adam, std::size_t epoch,
                     const std::optional<RunConfig>& run = std::nullopt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// Model with every parameter taken from the checkpoint. Throws
// DimensionError if a parameter is missing or shaped differently.
model::ContentCtr restore_model(const Checkpoint& ckpt);
// Adam moments for params, from the checkpoint's adam.m / adam.v entries.
ad::AdamState restore_adam(const Checkpoint& ckpt, std::span<ad::Parameter* const> params,
                           ad::AdamConfig config);

}  // namespace cctr
