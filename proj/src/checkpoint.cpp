#include "cctr/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cctr/error.hpp"

namespace cctr {

namespace {

constexpr std::size_t kHeaderBytes = 16;  // magic, zero padded

std::vector<double> rounded(std::span<const double> values) {
  std::vector<double> out(values.size());
  for (std::size_t k = 0; k < values.size(); ++k) {
    out[k] = static_cast<double>(static_cast<float>(values[k]));
  }
  return out;
}

void put_f32(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xFF));
}

double get_f32(const std::string& bytes, std::size_t at) {
  std::uint32_t bits = 0;
  for (int k = 0; k < 4; ++k) {
    bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + k])) << (8 * k);
  }
  return static_cast<double>(std::bit_cast<float>(bits));
}

struct Entry {
  std::string name;
  const ad::Tensor* tensor;
};

}  // namespace

void quantize_to_f32(std::span<ad::Parameter* const> params) {
  for (ad::Parameter* p : params) {
    p->value = ad::Tensor(p->value.shape(), rounded(p->value.data()));
  }
}

void quantize_to_f32(ad::AdamState& state) {
  for (auto& m : state.m) m = rounded(m);
  for (auto& v : state.v) v = rounded(v);
}

void save_checkpoint(const std::filesystem::path& dir, const model::ContentCtr& model,
                     const ad::AdamState* adam, std::size_t epoch,
                     const std::optional<RunConfig>& run) {
  std::filesystem::create_directories(dir);
  const auto params = model.parameters();
  std::vector<ad::Tensor> moments;
  std::vector<Entry> entries;
  for (const ad::Parameter* p : params) entries.push_back({p->name, &p->value});
  if (adam) {
    if (adam->m.size() != params.size() || adam->v.size() != params.size()) {
      throw DimensionError("save_checkpoint: optimizer state does not match the model");
    }
    moments.reserve(2 * params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
      moments.emplace_back(params[k]->value.shape(), adam->m[k]);
      moments.emplace_back(params[k]->value.shape(), adam->v[k]);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
      entries.push_back({"adam.m/" + params[k]->name, &moments[2 * k]});
      entries.push_back({"adam.v/" + params[k]->name, &moments[2 * k + 1]});
    }
  }

  std::string blob(kHeaderBytes, '\0');
  std::memcpy(blob.data(), kCheckpointMagic, sizeof kCheckpointMagic - 1);
  Json tensors = Json::array();
  for (const Entry& e : entries) {
    tensors.push_back(Json{{"name", e.name},
                           {"shape", e.tensor->shape()},
                           {"offset", blob.size()},
                           {"count", e.tensor->size()}});
    for (double v : e.tensor->data()) put_f32(blob, v);
  }
  Json manifest{{"format", kCheckpointMagic},
                {"blob", kCheckpointBlob},
                {"epoch", epoch},
                {"adam_step", adam ? adam->t : 0},
                {"model", to_json(model.config())},
                {"run", run ? to_json(*run) : Json(nullptr)},
                {"tensors", tensors}};

  std::ofstream bin(dir / kCheckpointBlob, std::ios::binary | std::ios::trunc);
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  std::ofstream js(dir / kCheckpointManifest, std::ios::trunc);
  js << manifest.dump(2) << '\n';
  if (!bin || !js) throw Error("cannot write checkpoint to " + dir.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto where = (dir / kCheckpointManifest).string();
  const Json manifest = read_json_file(dir / kCheckpointManifest);
  Checkpoint ck;
  std::string blob;
  try {
    if (manifest.at("format").get<std::string>() != kCheckpointMagic) {
      throw FormatError(where + ": unknown checkpoint format");
    }
    std::ifstream in(dir / manifest.at("blob").get<std::string>(), std::ios::binary);
    if (!in) throw FormatError(where + ": missing blob file");
    std::ostringstream ss;
    ss << in.rdbuf();
    blob = ss.str();
    if (blob.size() < kHeaderBytes ||
        blob.compare(0, sizeof kCheckpointMagic - 1, kCheckpointMagic) != 0) {
      throw FormatError(where + ": blob does not start with " + kCheckpointMagic);
    }
    ck.model = model_config_from_json(manifest.at("model"), "model");
    if (!manifest.at("run").is_null()) ck.run = run_config_from_json(manifest.at("run"));
    ck.epoch = manifest.at("epoch").get<std::size_t>();
    ck.adam_step = manifest.at("adam_step").get<std::uint64_t>();
    for (const Json& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<ad::Shape>();
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (ad::numel(shape) != count) throw FormatError(where + ": bad count for " + name);
      if (offset < kHeaderBytes || offset > blob.size() || (blob.size() - offset) / 4 < count) {
        throw FormatError(where + ": tensor " + name + " lies outside the blob");
      }
      std::vector<double> values(count);
      for (std::size_t k = 0; k < count; ++k) {
        values[k] = get_f32(blob, offset + 4 * k);
        if (!std::isfinite(values[k])) throw FormatError(where + ": non-finite value in " + name);
      }
      ck.tensors.emplace(name, ad::Tensor(shape, std::move(values)));
    }
  } catch (const Json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  return ck;
}

model::ContentCtr restore_model(const Checkpoint& ckpt) {
  model::ContentCtr m(ckpt.model, 0);
  for (ad::Parameter* p : m.parameters()) {
    const auto it = ckpt.tensors.find(p->name);
    if (it == ckpt.tensors.end()) {
      throw DimensionError("checkpoint has no tensor for parameter " + p->name);
    }
    if (it->second.shape() != p->value.shape()) {
      throw DimensionError("checkpoint tensor " + p->name + " has shape " +
                           ad::to_string(it->second.shape()) + ", model expects " +
                           ad::to_string(p->value.shape()));
    }
    p->value = it->second;
  }
  return m;
}

ad::AdamState restore_adam(const Checkpoint& ckpt, std::span<ad::Parameter* const> params,
                           ad::AdamConfig config) {
  ad::AdamState state = ad::make_adam_state(params, config);
  state.t = ckpt.adam_step;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto m = ckpt.tensors.find("adam.m/" + params[k]->name);
    const auto v = ckpt.tensors.find("adam.v/" + params[k]->name);
    if (m == ckpt.tensors.end() || v == ckpt.tensors.end()) {
      throw DimensionError("checkpoint has no optimizer state for " + params[k]->name);
    }
    if (m->second.size() != state.m[k].size() || v->second.size() != state.v[k].size()) {
      throw DimensionError("optimizer state for " + params[k]->name + " has the wrong size");
    }
    state.m[k] = m->second.to_vector();
    state.v[k] = v->second.to_vector();
  }
  return state;
}

}  // namespace cctr
