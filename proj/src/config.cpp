#include "cctr/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "cctr/error.hpp"

namespace cctr {

namespace {

// Strict reader over one JSON object.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected a JSON object");
  }

  void get(const char* key, std::size_t& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const char* key, std::uint64_t& out, int) {
    if (const Json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, int& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "expected an integer");
      const auto x = v->get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) fail(key, "integer out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const char* key, double& out) {
    if (const Json* v = find(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const Json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  const Json* object(const char* key) {
    const Json* v = find(key);
    if (v && !v->is_object()) fail(key, "expected an object");
    return v;
  }
  template <class E>
  void choice(const char* key, E& out, std::initializer_list<std::pair<const char*, E>> options) {
    const Json* v = find(key);
    if (!v) return;
    std::string names;
    if (v->is_string()) {
      for (const auto& [name, value] : options) {
        if (v->get<std::string>() == name) {
          out = value;
          return;
        }
      }
    }
    for (const auto& [name, value] : options) names += std::string(names.empty() ? "" : "|") + name;
    fail(key, "expected one of " + names);
  }
  const Json* find(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError("field '" + path(key) + "': " + what);
  }
  std::string path(const std::string& key) const {
    return where_.empty() ? key : where_ + "." + key;
  }
  // Rejects keys that were never asked for.
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown field '" + path(key) + "'");
    }
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

const char* step_name(loss::DtwStep s) {
  switch (s) {
    case loss::DtwStep::diagonal:
      return "diagonal";
    case loss::DtwStep::up:
      return "up";
    case loss::DtwStep::left:
      return "left";
  }
  return "?";
}

}  // namespace

void OptimConfig::validate() const {
  const auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("optim config: ") + what);
  };
  need(std::isfinite(learning_rate) && learning_rate > 0.0, "learning_rate must be > 0");
  need(epochs >= 1, "epochs must be >= 1");
  need(batch_size >= 1, "batch_size must be >= 1");
  need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must be in [0,1)");
  need(std::isfinite(epsilon) && epsilon > 0.0, "epsilon must be > 0");
}

RunConfig::RunConfig() {
  model.n = 0;
  model.visual_dim = 0;
  model.text_dim = 0;
  model.streamers = 0;
}

void RunConfig::validate() const {
  model::ModelConfig m = model;
  if (m.n == 0) m.n = 2;
  if (m.visual_dim == 0) m.visual_dim = 1;
  if (m.text_dim == 0) m.text_dim = 1;
  if (m.streamers == 0) m.streamers = 1;
  m.validate();
  loss.validate();
  optim.validate();
}

std::string to_string(loss::PairVariant v) {
  switch (v) {
    case loss::PairVariant::L0:
      return "L0";
    case loss::PairVariant::L1:
      return "L1";
    case loss::PairVariant::L2:
      return "L2";
    case loss::PairVariant::L3:
      return "L3";
  }
  return "?";
}

loss::PairVariant parse_variant(const std::string& s) {
  if (s == "L0") return loss::PairVariant::L0;
  if (s == "L1") return loss::PairVariant::L1;
  if (s == "L2") return loss::PairVariant::L2;
  if (s == "L3") return loss::PairVariant::L3;
  throw ConfigError("unknown pairwise variant '" + s + "' (expected L0|L1|L2|L3)");
}

Json to_json(const model::ModelConfig& c) {
  return Json{{"n", c.n},
              {"d", c.d},
              {"d_h", c.d_h},
              {"n_heads", c.n_heads},
              {"perceiver_layers", c.perceiver_layers},
              {"decoder_layers", c.decoder_layers},
              {"ffn_hidden", c.ffn_hidden},
              {"mask_mode", c.mask_mode == model::MaskMode::causal ? "causal" : "full"},
              {"use_positional", c.use_positional},
              {"pre_norm", c.pre_norm},
              {"proj_depth", c.proj_depth},
              {"visual_dim", c.visual_dim},
              {"text_dim", c.text_dim},
              {"streamers", c.streamers}};
}

Json to_json(const loss::LossConfig& c) {
  Json ties = Json::array();
  for (auto s : c.tie_order) ties.push_back(step_name(s));
  return Json{{"lambda_point", c.lambda_point},
              {"lambda_align", c.lambda_align},
              {"lambda_pair", c.lambda_pair},
              {"sigma", c.sigma},
              {"tau", c.tau},
              {"negatives", c.negatives},
              {"variant", to_string(c.variant)},
              {"tie_order", ties},
              {"dtw_cost", c.dtw_cost == loss::DtwCost::similarity ? "similarity" : "distance"}};
}

Json to_json(const OptimConfig& c) {
  return Json{{"learning_rate", c.learning_rate},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"schedule", c.schedule == Schedule::constant ? "constant" : "cosine"},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"epsilon", c.epsilon}};
}

Json to_json(const RunConfig& c) {
  return Json{{"model", to_json(c.model)},
              {"loss", to_json(c.loss)},
              {"optim", to_json(c.optim)},
              {"seed", c.seed}};
}

Json to_json(const data::GeneratorConfig& c) {
  return Json{{"streamers", c.streamers},
              {"windows_per_streamer", c.windows_per_streamer},
              {"n", c.n},
              {"visual_dim", c.visual_dim},
              {"text_dim", c.text_dim},
              {"test_fraction", c.test_fraction},
              {"walk_step", c.walk_step},
              {"spike_prob", c.spike_prob},
              {"spike_min", c.spike_min},
              {"spike_max", c.spike_max},
              {"highlight_strength", c.highlight_strength},
              {"direction_spread", c.direction_spread},
              {"content_scale", c.content_scale},
              {"content_persistence", c.content_persistence},
              {"feature_noise", c.feature_noise},
              {"text_noise", c.text_noise},
              {"lag_min", c.lag_min},
              {"lag_max", c.lag_max},
              {"ctr_gain", c.ctr_gain},
              {"ctr_bias", c.ctr_bias},
              {"label_noise", c.label_noise},
              {"min_exposure", c.min_exposure},
              {"embed_visual_dim", c.embed_visual_dim},
              {"embed_text_dim", c.embed_text_dim},
              {"provider_seed", c.provider_seed},
              {"provider_gain", c.provider_gain}};
}

model::ModelConfig model_config_from_json(const Json& j, const std::string& where) {
  model::ModelConfig c;
  Fields f(j, where);
  f.get("n", c.n);
  f.get("d", c.d);
  f.get("d_h", c.d_h);
  f.get("n_heads", c.n_heads);
  f.get("perceiver_layers", c.perceiver_layers);
  f.get("decoder_layers", c.decoder_layers);
  f.get("ffn_hidden", c.ffn_hidden);
  f.choice("mask_mode", c.mask_mode,
           {{"causal", model::MaskMode::causal}, {"full", model::MaskMode::full}});
  f.get("use_positional", c.use_positional);
  f.get("pre_norm", c.pre_norm);
  f.get("proj_depth", c.proj_depth);
  f.get("visual_dim", c.visual_dim);
  f.get("text_dim", c.text_dim);
  f.get("streamers", c.streamers);
  f.finish();
  return c;
}

loss::LossConfig loss_config_from_json(const Json& j, const std::string& where) {
  loss::LossConfig c;
  Fields f(j, where);
  f.get("lambda_point", c.lambda_point);
  f.get("lambda_align", c.lambda_align);
  f.get("lambda_pair", c.lambda_pair);
  f.get("sigma", c.sigma);
  f.get("tau", c.tau);
  f.get("negatives", c.negatives);
  f.choice("variant", c.variant,
           {{"L0", loss::PairVariant::L0},
            {"L1", loss::PairVariant::L1},
            {"L2", loss::PairVariant::L2},
            {"L3", loss::PairVariant::L3}});
  if (const Json* t = f.find("tie_order")) {
    if (!t->is_array() || t->size() != 3) f.fail("tie_order", "expected three step names");
    std::set<std::string> used;
    for (std::size_t k = 0; k < 3; ++k) {
      const Json& s = (*t)[k];
      const std::string name = s.is_string() ? s.get<std::string>() : "";
      if (name == "diagonal") {
        c.tie_order[k] = loss::DtwStep::diagonal;
      } else if (name == "up") {
        c.tie_order[k] = loss::DtwStep::up;
      } else if (name == "left") {
        c.tie_order[k] = loss::DtwStep::left;
      } else {
        f.fail("tie_order", "entries must be diagonal, up or left");
      }
      if (!used.insert(name).second) f.fail("tie_order", "must be a permutation of the three steps");
    }
  }
  f.choice("dtw_cost", c.dtw_cost,
           {{"similarity", loss::DtwCost::similarity}, {"distance", loss::DtwCost::distance}});
  f.finish();
  return c;
}

OptimConfig optim_config_from_json(const Json& j, const std::string& where) {
  OptimConfig c;
  Fields f(j, where);
  f.get("learning_rate", c.learning_rate);
  f.get("epochs", c.epochs);
  f.get("batch_size", c.batch_size);
  f.choice("schedule", c.schedule,
           {{"constant", Schedule::constant}, {"cosine", Schedule::cosine}});
  f.get("beta1", c.beta1);
  f.get("beta2", c.beta2);
  f.get("epsilon", c.epsilon);
  f.finish();
  return c;
}

RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  Fields f(j, "");
  if (const Json* m = f.object("model")) {
    // Data-derived fields default to "from the dataset" here.
    Json filled = *m;
    for (const char* key : {"n", "visual_dim", "text_dim", "streamers"}) {
      if (!filled.contains(key)) filled[key] = std::size_t{0};
    }
    c.model = model_config_from_json(filled, "model");
  }
  if (const Json* l = f.object("loss")) c.loss = loss_config_from_json(*l, "loss");
  if (const Json* o = f.object("optim")) c.optim = optim_config_from_json(*o, "optim");
  f.get("seed", c.seed, 0);
  f.finish();
  c.validate();
  return c;
}

data::GeneratorConfig generator_config_from_json(const Json& j) {
  data::GeneratorConfig c;
  Fields f(j, "");
  f.get("streamers", c.streamers);
  f.get("windows_per_streamer", c.windows_per_streamer);
  f.get("n", c.n);
  f.get("visual_dim", c.visual_dim);
  f.get("text_dim", c.text_dim);
  f.get("test_fraction", c.test_fraction);
  f.get("walk_step", c.walk_step);
  f.get("spike_prob", c.spike_prob);
  f.get("spike_min", c.spike_min);
  f.get("spike_max", c.spike_max);
  f.get("highlight_strength", c.highlight_strength);
  f.get("direction_spread", c.direction_spread);
  f.get("content_scale", c.content_scale);
  f.get("content_persistence", c.content_persistence);
  f.get("feature_noise", c.feature_noise);
  f.get("text_noise", c.text_noise);
  f.get("lag_min", c.lag_min);
  f.get("lag_max", c.lag_max);
  f.get("ctr_gain", c.ctr_gain);
  f.get("ctr_bias", c.ctr_bias);
  f.get("label_noise", c.label_noise);
  f.get("min_exposure", c.min_exposure);
  f.get("embed_visual_dim", c.embed_visual_dim);
  f.get("embed_text_dim", c.embed_text_dim);
  f.get("provider_seed", c.provider_seed, 0);
  f.get("provider_gain", c.provider_gain);
  f.finish();
  c.validate();
  return c;
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return run_config_from_json(read_json_file(path));
}

data::GeneratorConfig load_generator_config(const std::filesystem::path& path) {
  return generator_config_from_json(read_json_file(path));
}

}  // namespace cctr
