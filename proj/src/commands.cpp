#include "cctr/commands.hpp"

#include <algorithm>
#include <fstream>
#include <system_error>

#include "cctr/checkpoint.hpp"
#include "cctr/error.hpp"
#include "cctr/suite.hpp"

namespace cctr::cli {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

bool same_path(const std::filesystem::path& a, const std::filesystem::path& b) {
  std::error_code ec;
  return std::filesystem::weakly_canonical(a, ec) == std::filesystem::weakly_canonical(b, ec);
}

void require_distinct(const std::filesystem::path& in, const std::filesystem::path& out) {
  if (same_path(in, out)) {
    throw ConfigError("output directory " + out.string() + " is also an input");
  }
}

const std::vector<data::SampleWindow>& split_of(const train::DataBundle& b,
                                                const std::string& split) {
  if (split == "train") return b.train;
  if (split == "test") return b.test;
  throw ConfigError("unknown split '" + split + "' (expected train or test)");
}

// The checkpoint's model, checked against the dataset's shapes.
model::ContentCtr model_for(const Checkpoint& ck, const train::DataBundle& bundle) {
  const auto& g = bundle.generator;
  if (ck.model.n != g.n || ck.model.visual_dim != g.embed_visual_dim ||
      ck.model.text_dim != g.embed_text_dim) {
    throw DimensionError("checkpoint expects n=" + std::to_string(ck.model.n) + ", widths " +
                         std::to_string(ck.model.visual_dim) + "/" +
                         std::to_string(ck.model.text_dim) + " but the dataset has n=" +
                         std::to_string(g.n) + ", widths " + std::to_string(g.embed_visual_dim) +
                         "/" + std::to_string(g.embed_text_dim));
  }
  return restore_model(ck);
}

void log_epoch(std::ostream* log, const std::string& prefix, const train::EpochMetrics& m) {
  if (!log) return;
  *log << prefix << "epoch " << m.epoch << " L_Point=" << train::fmt9(m.l_point)
       << " L_Pair=" << train::fmt9(m.l_pair) << " L_align=" << train::fmt9(m.l_align)
       << " train_tau=" << train::fmt9(m.train_tau) << " test_tau=" << train::fmt9(m.test_tau)
       << '\n';
}

}  // namespace

int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const LabelError*>(&e) || dynamic_cast<const DimensionError*>(&e) ||
      dynamic_cast<const RankError*>(&e)) {
    return kExitValidation;
  }
  return kExitRuntime;
}

// ---- generate ----

Json cmd_generate(const GenerateOptions& o) {
  const data::GeneratorConfig g = o.config ? load_generator_config(*o.config) : data::GeneratorConfig{};
  g.validate();
  return train::write_bundle(o.out, g, o.seed, data::generate_dataset(g, o.seed), o.format);
}

// ---- train ----

train::TrainResult cmd_train(const TrainCommandOptions& o, std::ostream* log) {
  RunConfig config = load_run_config(o.config);
  if (o.seed) config.seed = *o.seed;
  require_distinct(o.data, o.out);
  if (o.resume) require_distinct(*o.resume, o.out);
  const auto bundle = train::load_bundle(o.data);
  train::TrainOptions opts;
  opts.out_dir = o.out;
  opts.resume = o.resume;
  opts.stop_after = o.max_epochs;
  opts.on_epoch = [log](const train::EpochMetrics& m) { log_epoch(log, "", m); };
  return train::train(config, bundle, opts);
}

// ---- eval ----

train::Evaluation cmd_eval(const EvalOptions& o) {
  const auto bundle = train::load_bundle(o.data);
  const auto& windows = split_of(bundle, o.split);
  const auto model = model_for(load_checkpoint(o.ckpt), bundle);
  const auto e = train::embed(windows, bundle.generator);
  auto ev = train::evaluate(model, e);
  if (o.out) {
    require_distinct(o.data, *o.out);
    require_distinct(o.ckpt, *o.out);
    std::filesystem::create_directories(*o.out);
    write_text(*o.out / "metrics.json", ev.report.to_json() + "\n");
    write_text(*o.out / "predictions.csv", train::predictions_csv(ev, e));
  }
  return ev;
}

// ---- ablate ----

std::vector<RunConfig> ablation_configs(const RunConfig& base) {
  if (base.loss.lambda_pair <= 0.0 || base.loss.lambda_align <= 0.0) {
    throw ConfigError("ablation: the base config needs lambda_pair > 0 and lambda_align > 0");
  }
  std::vector<RunConfig> rows;
  RunConfig point = base;
  point.loss.lambda_pair = 0.0;
  point.loss.lambda_align = 0.0;
  rows.push_back(point);
  for (auto v : {loss::PairVariant::L0, loss::PairVariant::L1, loss::PairVariant::L2,
                 loss::PairVariant::L3}) {
    RunConfig c = base;
    c.loss.variant = v;
    c.loss.lambda_align = 0.0;
    rows.push_back(c);
  }
  RunConfig ours = base;
  ours.loss.variant = loss::PairVariant::L1;
  rows.push_back(ours);
  return rows;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const train::DataBundle& bundle,
                                      const std::optional<std::filesystem::path>& out_dir,
                                      std::ostream* log) {
  const auto configs = ablation_configs(base);
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < configs.size(); ++k) {
    AblationRow row;
    row.model = kAblationNames[k];
    row.config = configs[k];
    train::TrainOptions opts;
    if (out_dir) opts.out_dir = *out_dir / row.model;
    opts.on_epoch = [log, &row](const train::EpochMetrics& m) { log_epoch(log, row.model + " ", m); };
    try {
      row.history = train::train(row.config, bundle, opts).history;
      row.ok = true;
    } catch (const std::exception& e) {
      row.error = e.what();
      if (log) *log << row.model << " failed: " << e.what() << '\n';
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "model,status,tau,avg_s_over_y,L_Point,L_Pair,L_align\n";
  for (const auto& r : rows) {
    if (!r.ok || r.history.empty()) {
      out += r.model + ",failed,,,,,\n";
      continue;
    }
    const auto& m = r.history.back();
    out += r.model + ",ok," + train::fmt9(m.test_tau) + "," + train::fmt9(m.avg_s_over_y) + "," +
           train::fmt9(m.l_point) + "," + train::fmt9(m.l_pair) + "," + train::fmt9(m.l_align) +
           "\n";
  }
  return out;
}

std::vector<AblationRow> cmd_ablate(const AblateOptions& o, std::ostream* log) {
  RunConfig base = load_run_config(o.config);
  if (o.seed) base.seed = *o.seed;
  require_distinct(o.data, o.out);
  const auto bundle = train::load_bundle(o.data);
  std::filesystem::create_directories(o.out);
  auto rows = run_ablation(base, bundle, o.out, log);
  write_text(o.out / "ablation.csv", ablation_csv(rows));
  return rows;
}

// ---- align ----

Alignment align_window(const data::SampleWindow& window, const train::DataBundle& bundle,
                       const model::ContentCtr* model, loss::DtwCost cost) {
  const auto& g = bundle.generator;
  const std::size_t n = window.segments.size();
  ad::Tensor D;
  if (model) {
    const auto e = train::embed(std::span<const data::SampleWindow>(&window, 1), g);
    const std::size_t row = 0;
    const auto out = model->forward(nullptr, train::make_batch(e, std::span(&row, 1)));
    const std::size_t d = out.text_seq.dim(2);
    D = loss::dtw_similarity_matrix(ad::reshape(out.text_seq, {n, d}),
                                    ad::reshape(out.visual_seq, {n, d}));
  } else {
    const auto decoded = data::decode_text(window, data::text_map(g, bundle.seed), g.visual_dim);
    std::vector<double> text, visual;
    for (std::size_t i = 0; i < n; ++i) {
      text.insert(text.end(), decoded[i].begin(), decoded[i].end());
      visual.insert(visual.end(), window.segments[i].visual.begin(),
                    window.segments[i].visual.end());
    }
    D = loss::dtw_similarity_matrix(ad::Tensor({n, g.visual_dim}, std::move(text)),
                                    ad::Tensor({n, g.visual_dim}, std::move(visual)));
  }
  const auto r = loss::dtw_accumulate(D, cost);
  return {n, D.to_vector(), r.path};
}

double median_offset(const Alignment& a) {
  std::vector<double> off;
  off.reserve(a.path.size());
  for (const auto& [i, j] : a.path) off.push_back(static_cast<double>(i) - static_cast<double>(j));
  std::sort(off.begin(), off.end());
  const std::size_t m = off.size() / 2;
  return off.size() % 2 == 1 ? off[m] : 0.5 * (off[m - 1] + off[m]);
}

std::string similarity_csv(const Alignment& a) {
  std::string out;
  for (std::size_t i = 0; i < a.n; ++i) {
    for (std::size_t j = 0; j < a.n; ++j) {
      if (j > 0) out += ',';
      out += train::fmt9(a.similarity[i * a.n + j]);
    }
    out += '\n';
  }
  return out;
}

std::string path_csv(const Alignment& a) {
  std::string out = "i,j\n";
  for (const auto& [i, j] : a.path) out += std::to_string(i) + "," + std::to_string(j) + "\n";
  return out;
}

Alignment cmd_align(const AlignOptions& o) {
  require_distinct(o.data, o.out);
  if (o.ckpt) require_distinct(*o.ckpt, o.out);
  const auto bundle = train::load_bundle(o.data);
  const auto& windows = split_of(bundle, o.split);
  if (o.sample >= windows.size()) {
    throw ConfigError("sample " + std::to_string(o.sample) + " is out of range: the " + o.split +
                      " split has " + std::to_string(windows.size()) + " windows");
  }
  std::optional<model::ContentCtr> model;
  if (o.ckpt) model.emplace(model_for(load_checkpoint(*o.ckpt), bundle));
  const auto a = align_window(windows[o.sample], bundle, model ? &*model : nullptr, o.cost);
  std::filesystem::create_directories(o.out);
  write_text(o.out / "similarity.csv", similarity_csv(a));
  write_text(o.out / "path.csv", path_csv(a));
  return a;
}

// ---- gradcheck ----

bool cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
  out << "gradcheck seed " << seed << '\n';
  const auto targets = suite::gradcheck_targets(seed);
  return suite::run_targets(targets, suite::kTolerance, &out).passed();
}

}  // namespace cctr::cli
