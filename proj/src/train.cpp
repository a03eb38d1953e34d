#include "cctr/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cctr/adam.hpp"
#include "cctr/checkpoint.hpp"
#include "cctr/error.hpp"
#include "cctr/losses.hpp"
#include "cctr/rng.hpp"

namespace cctr::train {

namespace {

constexpr std::uint64_t kInitStream = 0x1417;
constexpr std::uint64_t kOrderStream = 0x0DE4;
constexpr std::uint64_t kNegativeStream = 0x4E6;
constexpr std::size_t kEvalChunk = 64;

const char* format_name(data::Format f) { return f == data::Format::jsonl ? "jsonl" : "binary"; }

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

double mean_of(double total, std::size_t count) {
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

}  // namespace

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---- dataset directories ----

Json write_bundle(const std::filesystem::path& dir, const data::GeneratorConfig& generator,
                  std::uint64_t seed, const data::Dataset& dataset, data::Format format) {
  std::filesystem::create_directories(dir);
  const std::string ext = data::format_extension(format);
  Json manifest{{"generator", to_json(generator)}, {"seed", seed}, {"format", format_name(format)}};
  for (const auto& [split, samples] :
       {std::pair{"train", &dataset.train}, std::pair{"test", &dataset.test}}) {
    const std::string file = std::string(split) + ext;
    data::save(dir / file, *samples, format);
    manifest[split] = Json{{"file", file},
                           {"count", samples->size()},
                           {"hash", data::file_hash(dir / file)}};
  }
  write_text(dir / kDataManifest, manifest.dump(2) + "\n");
  return manifest;
}

DataBundle load_bundle(const std::filesystem::path& dir) {
  const Json manifest = read_json_file(dir / kDataManifest);
  DataBundle b;
  try {
    b.generator = generator_config_from_json(manifest.at("generator"));
    b.seed = manifest.at("seed").get<std::uint64_t>();
    const auto format = data::parse_format(manifest.at("format").get<std::string>());
    b.train = data::load(dir / manifest.at("train").at("file").get<std::string>(), format);
    b.test = data::load(dir / manifest.at("test").at("file").get<std::string>(), format);
    if (b.train.size() != manifest.at("train").at("count").get<std::size_t>() ||
        b.test.size() != manifest.at("test").at("count").get<std::size_t>()) {
      throw FormatError(dir.string() + ": sample counts disagree with the manifest");
    }
  } catch (const Json::exception& e) {
    throw FormatError((dir / kDataManifest).string() + ": " + e.what());
  }
  for (const auto* split : {&b.train, &b.test}) {
    for (const auto& w : *split) {
      if (w.segments.size() != b.generator.n || w.segments[0].visual.size() != b.generator.visual_dim ||
          w.segments[0].text.size() != b.generator.text_dim) {
        throw FormatError(dir.string() + ": samples do not match the generator config");
      }
    }
  }
  return b;
}

// ---- embedding and batching ----

Embedded embed(std::span<const data::SampleWindow> windows, const data::GeneratorConfig& g) {
  const auto vp = data::EmbeddingProvider::for_config(data::EmbeddingProvider::Kind::visual, g);
  const auto tp = data::EmbeddingProvider::for_config(data::EmbeddingProvider::Kind::text, g);
  Embedded e;
  e.windows = windows.size();
  e.n = g.n;
  e.visual_dim = vp.out_dim();
  e.text_dim = tp.out_dim();
  e.visual.reserve(e.windows * e.n * e.visual_dim);
  e.text.reserve(e.windows * e.n * e.text_dim);
  for (const auto& w : windows) {
    if (w.segments.size() != e.n) throw DimensionError("embed: window length differs from n");
    e.streamers.push_back(w.streamer_id);
    for (const auto& s : w.segments) {
      const auto v = vp.embed_frames(std::span<const std::vector<float>>(&s.visual, 1));
      const auto t = tp.embed(std::span<const float>(s.text));
      e.visual.insert(e.visual.end(), v.begin(), v.end());
      e.text.insert(e.text.end(), t.begin(), t.end());
      e.y.push_back(s.ctr);
    }
  }
  return e;
}

model::Batch make_batch(const Embedded& e, std::span<const std::size_t> rows) {
  const std::size_t b = rows.size();
  std::vector<double> visual, text;
  visual.reserve(b * e.n * e.visual_dim);
  text.reserve(b * e.n * e.text_dim);
  model::Batch batch;
  for (std::size_t r : rows) {
    const auto vs = e.visual.begin() + static_cast<std::ptrdiff_t>(r * e.n * e.visual_dim);
    const auto ts = e.text.begin() + static_cast<std::ptrdiff_t>(r * e.n * e.text_dim);
    visual.insert(visual.end(), vs, vs + static_cast<std::ptrdiff_t>(e.n * e.visual_dim));
    text.insert(text.end(), ts, ts + static_cast<std::ptrdiff_t>(e.n * e.text_dim));
    batch.streamers.push_back(e.streamers[r]);
  }
  batch.visual = ad::Tensor({b, e.n, e.visual_dim}, std::move(visual));
  batch.text = ad::Tensor({b, e.n, e.text_dim}, std::move(text));
  return batch;
}

std::vector<double> batch_labels(const Embedded& e, std::span<const std::size_t> rows) {
  std::vector<double> y;
  y.reserve(rows.size() * e.n);
  for (std::size_t r : rows) {
    const auto ys = e.y.begin() + static_cast<std::ptrdiff_t>(r * e.n);
    y.insert(y.end(), ys, ys + static_cast<std::ptrdiff_t>(e.n));
  }
  return y;
}

model::ModelConfig resolve_model(const model::ModelConfig& config, const DataBundle& bundle) {
  model::ModelConfig m = config;
  const auto& g = bundle.generator;
  const auto fill = [](std::size_t& field, std::size_t value, const char* name) {
    if (field == 0) {
      field = value;
    } else if (field != value) {
      throw ConfigError("field 'model." + std::string(name) + "' is " + std::to_string(field) +
                        " but the dataset has " + std::to_string(value));
    }
  };
  fill(m.n, g.n, "n");
  fill(m.visual_dim, g.embed_visual_dim, "visual_dim");
  fill(m.text_dim, g.embed_text_dim, "text_dim");
  if (m.streamers == 0) m.streamers = g.streamers;
  m.validate();
  return m;
}

// ---- evaluation ----

Evaluation evaluate(const model::ContentCtr& model, const Embedded& e) {
  Evaluation ev;
  ev.predictions.reserve(e.windows);
  for (std::size_t start = 0; start < e.windows; start += kEvalChunk) {
    std::vector<std::size_t> rows;
    for (std::size_t r = start; r < std::min(e.windows, start + kEvalChunk); ++r) rows.push_back(r);
    const auto out = model.forward(nullptr, make_batch(e, rows));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto s = out.s.data().subspan(k * e.n, e.n);
      ev.predictions.emplace_back(s.begin(), s.end());
    }
  }

  auto& rep = ev.report;
  double tau_sum = 0.0, s_sum = 0.0, y_sum = 0.0;
  const std::size_t positives = (e.n + 3) / 4;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<std::size_t> groups;
  for (std::size_t w = 0; w < e.windows; ++w) {
    const auto& s = ev.predictions[w];
    const std::span<const double> y(e.y.data() + w * e.n, e.n);
    for (std::size_t i = 0; i < e.n; ++i) {
      s_sum += s[i];
      y_sum += y[i];
    }
    try {
      const auto t = metrics::kendall_tau(s, y);
      tau_sum += t.tau;
      rep.components += t.components;
      ++rep.windows;
    } catch (const UndefinedTauError&) {
      ++rep.skipped_windows;
    }
    std::vector<std::size_t> order(e.n);
    for (std::size_t i = 0; i < e.n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return y[a] > y[b]; });
    std::vector<std::uint8_t> lab(e.n, 0);
    for (std::size_t k = 0; k < positives; ++k) lab[order[k]] = 1;
    scores.insert(scores.end(), s.begin(), s.end());
    labels.insert(labels.end(), lab.begin(), lab.end());
    groups.insert(groups.end(), e.n, w);
  }
  rep.tau = mean_of(tau_sum, rep.windows);
  rep.avg_s_over_y = y_sum > 0.0 ? s_sum / y_sum : 0.0;
  rep.map = metrics::mean_average_precision(scores, labels, groups).map;
  return ev;
}

std::string predictions_csv(const Evaluation& ev, const Embedded& e) {
  std::string out = "window,timestamp,s,y\n";
  for (std::size_t w = 0; w < ev.predictions.size(); ++w) {
    for (std::size_t i = 0; i < e.n; ++i) {
      out += std::to_string(w) + "," + std::to_string(i) + "," + fmt9(ev.predictions[w][i]) + "," +
             fmt9(e.y[w * e.n + i]) + "\n";
    }
  }
  return out;
}

// ---- metrics csv ----

std::string metrics_csv(std::span<const EpochMetrics> rows) {
  std::string out = "epoch,L_Point,L_Pair,L_align,train_tau,test_tau,avg_s_over_y\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + fmt9(r.l_point) + "," + fmt9(r.l_pair) + "," +
           fmt9(r.l_align) + "," + fmt9(r.train_tau) + "," + fmt9(r.test_tau) + "," +
           fmt9(r.avg_s_over_y) + "\n";
  }
  return out;
}

std::vector<EpochMetrics> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  std::vector<EpochMetrics> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochMetrics r;
    char comma;
    std::istringstream ls(line);
    if (!(ls >> r.epoch >> comma >> r.l_point >> comma >> r.l_pair >> comma >> r.l_align >>
          comma >> r.train_tau >> comma >> r.test_tau >> comma >> r.avg_s_over_y)) {
      throw FormatError("malformed metrics row: " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

// ---- training ----

TrainResult train(const RunConfig& config_in, const DataBundle& bundle,
                  const TrainOptions& options) {
  RunConfig config = config_in;
  config.model = resolve_model(config.model, bundle);
  config.validate();
  if (bundle.train.empty()) throw ConfigError("training set is empty");

  const Embedded train_set = embed(bundle.train, bundle.generator);
  const Embedded test_set = embed(bundle.test, bundle.generator);
  const auto& lc = config.loss;
  const auto& oc = config.optim;
  const ad::AdamConfig adam_config{oc.learning_rate, oc.beta1, oc.beta2, oc.epsilon};

  TrainResult result{model::ContentCtr(config.model, mix_seed(config.seed, kInitStream)), {}};
  auto params = result.model.parameters();
  ad::AdamState adam = ad::make_adam_state(std::span<ad::Parameter* const>(params), adam_config);
  std::size_t start_epoch = 0;

  if (options.resume) {
    const Checkpoint ck = load_checkpoint(*options.resume);
    if (!ck.run || to_json(*ck.run) != to_json(config)) {
      throw ConfigError("resume: checkpoint was written with a different run config");
    }
    result.model = restore_model(ck);
    params = result.model.parameters();
    adam = restore_adam(ck, params, adam_config);
    start_epoch = ck.epoch;
    const auto csv = *options.resume / kMetricsCsv;
    if (std::filesystem::exists(csv)) {
      for (const auto& r : parse_metrics_csv(read_text(csv))) {
        if (r.epoch <= start_epoch) result.history.push_back(r);
      }
    }
  } else {
    quantize_to_f32(params);
  }

  const bool writing = !options.out_dir.empty();
  if (writing) {
    std::filesystem::create_directories(options.out_dir);
    if (!options.resume) save_checkpoint(options.out_dir, result.model, &adam, 0, config);
  }

  const std::size_t steps_per_epoch = (train_set.windows + oc.batch_size - 1) / oc.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * oc.epochs);
  const std::size_t last_epoch = std::min(oc.epochs, options.stop_after.value_or(oc.epochs));

  for (std::size_t epoch = start_epoch; epoch < last_epoch; ++epoch) {
    const std::uint64_t epoch_seed = mix_seed(mix_seed(config.seed, kOrderStream), epoch);
    const auto order = Rng(epoch_seed).permutation(train_set.windows);
    double sum_point = 0.0, sum_pair = 0.0, sum_align = 0.0;

    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      const std::size_t lo = step * oc.batch_size;
      const std::size_t hi = std::min(train_set.windows, lo + oc.batch_size);
      const std::span<const std::size_t> rows(order.data() + lo, hi - lo);
      const auto batch = make_batch(train_set, rows);
      const auto y = batch_labels(train_set, rows);

      ad::Tape tape;
      model::ForwardOutput out;
      try {
        out = result.model.forward(&tape, batch);
      } catch (const DegenerateRowError& e) {
        // Overflowed attention scores.
        throw DivergenceError("non-finite forward at epoch " + std::to_string(epoch + 1) +
                              ", step " + std::to_string(step + 1) + ": " + e.what());
      }
      const ad::Tensor point = loss::pointwise_logloss(out.s, y);
      ad::Tensor pair = ad::Tensor::scalar(0.0);
      ad::Tensor align = ad::Tensor::scalar(0.0);
      if (lc.lambda_pair > 0.0) pair = loss::pairwise_loss(out.s, y, lc.variant, lc.sigma).loss;
      if (lc.lambda_align > 0.0) {
        const auto neg_seed = mix_seed(mix_seed(mix_seed(config.seed, kNegativeStream), epoch), step);
        align = loss::align_loss(out.text_seq, out.visual_seq, lc, neg_seed);
      }
      const ad::Tensor total = loss::combined_loss(point, align, pair, lc);
      if (!std::isfinite(total.item())) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                              std::to_string(step + 1));
      }
      tape.backward(total);
      std::vector<std::vector<double>> grads;
      grads.reserve(params.size());
      for (const ad::Parameter* p : params) grads.push_back(tape.grad(*p));

      double lr = oc.learning_rate;
      if (oc.schedule == Schedule::cosine) {
        const double g = static_cast<double>(epoch * steps_per_epoch + step);
        lr = 0.5 * oc.learning_rate * (1.0 + std::cos(std::numbers::pi * g / total_steps));
      }
      ad::adam_step(params, grads, adam, lr);

      sum_point += point.item();
      sum_pair += pair.item();
      sum_align += align.item();
    }

    quantize_to_f32(params);
    quantize_to_f32(adam);
    for (const ad::Parameter* p : params) {
      for (double v : p->value.data()) {
        if (!std::isfinite(v)) {
          throw DivergenceError("non-finite parameter " + p->name + " after epoch " +
                                std::to_string(epoch + 1));
        }
      }
    }

    EpochMetrics m;
    m.epoch = epoch + 1;
    m.l_point = mean_of(sum_point, steps_per_epoch);
    m.l_pair = mean_of(sum_pair, steps_per_epoch);
    m.l_align = mean_of(sum_align, steps_per_epoch);
    m.train_tau = evaluate(result.model, train_set).report.tau;
    if (test_set.windows > 0) {
      const auto ev = evaluate(result.model, test_set);
      m.test_tau = ev.report.tau;
      m.avg_s_over_y = ev.report.avg_s_over_y;
    }
    result.history.push_back(m);
    if (writing) {
      save_checkpoint(options.out_dir, result.model, &adam, epoch + 1, config);
      write_text(options.out_dir / kMetricsCsv, metrics_csv(result.history));
    }
    if (options.on_epoch) options.on_epoch(m);
  }
  return result;
}

}  // namespace cctr::train
