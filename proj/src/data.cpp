#include "cctr/data.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

#include "cctr/error.hpp"
#include "cctr/rng.hpp"

namespace cctr::data {

namespace {

// Stream ids for mix_seed so that independent parts of the generator never
// share random draws.
constexpr std::uint64_t kSharedDirection = 0xD1;
constexpr std::uint64_t kStreamerDirection = 0xD2;
constexpr std::uint64_t kTextMap = 0xD3;
constexpr std::uint64_t kSplit = 0xD4;
constexpr std::uint64_t kWindow = 0xA11;

std::vector<double> unit_gaussian(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (double& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

std::vector<double> streamer_direction(const GeneratorConfig& c, std::uint64_t seed,
                                       std::size_t streamer) {
  Rng shared_rng(mix_seed(seed, kSharedDirection));
  Rng own_rng(mix_seed(mix_seed(seed, kStreamerDirection), streamer));
  const auto shared = unit_gaussian(shared_rng, c.visual_dim);
  const auto own = unit_gaussian(own_rng, c.visual_dim);
  std::vector<double> h(c.visual_dim);
  double norm = 0.0;
  for (std::size_t k = 0; k < h.size(); ++k) {
    h[k] = shared[k] + c.direction_spread * own[k];
    norm += h[k] * h[k];
  }
  norm = std::sqrt(norm);
  for (double& x : h) x /= norm;
  return h;
}

// Folds x back into [0,1] by reflection at the edges, so the walk does not
// pile up exact ties at the bounds.
double reflect01(double x) {
  x = std::fmod(std::fabs(x), 2.0);
  return x > 1.0 ? 2.0 - x : x;
}

double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

SampleWindow generate_window(const GeneratorConfig& c, std::span<const double> direction,
                             std::span<const double> map, std::uint32_t streamer,
                             std::uint64_t window_seed) {
  Rng rng(window_seed);
  const std::size_t dv = c.visual_dim, dt = c.text_dim;
  const double rho = c.content_persistence;
  const double innovation = std::sqrt(std::max(0.0, 1.0 - rho * rho));

  std::vector<double> content(dv);
  for (double& x : content) x = rng.normal();

  SampleWindow w;
  w.streamer_id = streamer;
  w.seed = window_seed;
  w.segments.resize(c.n);
  double z = rng.uniform();
  for (std::size_t i = 0; i < c.n; ++i) {
    if (i > 0) {
      z = reflect01(z + c.walk_step * rng.normal());
      const double u = rng.uniform();
      const double jump = rng.uniform(c.spike_min, c.spike_max);
      if (u < c.spike_prob) z = reflect01(z + jump);
      for (double& x : content) x = rho * x + innovation * rng.normal();
    }
    double along = 0.0;
    for (std::size_t k = 0; k < dv; ++k) along += content[k] * direction[k];

    std::vector<double> visual(dv);
    for (std::size_t k = 0; k < dv; ++k) {
      const double scene = content[k] - along * direction[k];
      visual[k] = c.highlight_strength * z * direction[k] + c.content_scale * scene +
                  c.feature_noise * rng.normal();
    }
    Segment& seg = w.segments[i];
    seg.visual.assign(visual.begin(), visual.end());
    seg.text.resize(dt);
    for (std::size_t r = 0; r < dt; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < dv; ++k) acc += map[r * dv + k] * visual[k];
      seg.text[r] = static_cast<float>(acc + c.text_noise * rng.normal());
    }
    const double logit = c.ctr_gain * z + c.ctr_bias + c.label_noise * rng.normal();
    seg.ctr = static_cast<float>(std::clamp(sigmoid(logit), 0.0, 1.0));
  }
  const int span = c.lag_max - c.lag_min + 1;
  const int lag = c.lag_min + static_cast<int>(rng.below(static_cast<std::size_t>(span)));
  return inject_misalignment(std::move(w), lag);
}

// ---- little-endian encoding ----

void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(byte(pos_ + k)) << (8 * k);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(byte(pos_ + k)) << (8 * k);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  unsigned char byte(std::size_t i) const { return static_cast<unsigned char>(bytes_[i]); }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("binary dataset: truncated payload");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

void encode_sample(std::string& out, const SampleWindow& w) {
  put_u32(out, w.streamer_id);
  put_u32(out, static_cast<std::uint32_t>(w.lag));
  for (const Segment& s : w.segments) {
    for (float f : s.visual) put_f32(out, f);
    for (float f : s.text) put_f32(out, f);
    put_f32(out, s.ctr);
  }
}

void check_sample(const SampleWindow& w, std::size_t n, std::size_t dv, std::size_t dt,
                  const std::string& where) {
  if (w.segments.size() != n) {
    throw FormatError(where + ": expected " + std::to_string(n) + " segments, got " +
                      std::to_string(w.segments.size()));
  }
  for (const Segment& s : w.segments) {
    if (s.visual.size() != dv || s.text.size() != dt) {
      throw FormatError(where + ": inconsistent embedding widths");
    }
    for (float f : s.visual)
      if (!std::isfinite(f)) throw FormatError(where + ": non-finite visual value");
    for (float f : s.text)
      if (!std::isfinite(f)) throw FormatError(where + ": non-finite text value");
    if (!std::isfinite(s.ctr) || s.ctr < 0.0f || s.ctr > 1.0f) {
      throw FormatError(where + ": ctr outside [0,1]");
    }
  }
}

void append_float(std::string& out, float f) {
  char buf[32];
  // The shortest double text of a float value parses back to that exact value.
  auto res = std::to_chars(buf, buf + sizeof buf, static_cast<double>(f));
  out.append(buf, res.ptr);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------

void GeneratorConfig::validate() const {
  const auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("generator config: " + what);
  };
  need(streamers >= 1, "streamers must be >= 1");
  need(windows_per_streamer >= 1, "windows_per_streamer must be >= 1");
  need(n >= 2, "n must be >= 2");
  need(visual_dim >= 1, "visual_dim must be >= 1");
  need(text_dim >= visual_dim, "text_dim must be >= visual_dim");
  need(test_fraction >= 0.0 && test_fraction < 1.0, "test_fraction must be in [0,1)");
  need(lag_min <= lag_max, "lag_min must be <= lag_max");
  const int bound = static_cast<int>(n);
  need(std::abs(lag_min) < bound && std::abs(lag_max) < bound, "lag range requires |k| < n");
  need(content_persistence >= 0.0 && content_persistence < 1.0,
       "content_persistence must be in [0,1)");
  need(spike_prob >= 0.0 && spike_prob <= 1.0, "spike_prob must be in [0,1]");
  need(spike_min <= spike_max, "spike_min must be <= spike_max");
  for (double v : {walk_step, highlight_strength, direction_spread, content_scale, feature_noise,
                   text_noise, label_noise, min_exposure}) {
    need(std::isfinite(v) && v >= 0.0, "scales and noise levels must be finite and >= 0");
  }
  need(std::isfinite(ctr_gain) && std::isfinite(ctr_bias), "ctr_gain and ctr_bias must be finite");
  need(std::isfinite(provider_gain) && provider_gain > 0.0, "provider_gain must be > 0");
  need(embed_visual_dim >= 1 && embed_text_dim >= 1, "embedding widths must be >= 1");
}

std::vector<double> text_map(const GeneratorConfig& c, std::uint64_t seed) {
  const std::size_t dv = c.visual_dim, dt = c.text_dim;
  Rng rng(mix_seed(seed, kTextMap));
  // Gram-Schmidt on random columns.
  std::vector<std::vector<double>> cols;
  while (cols.size() < dv) {
    std::vector<double> v(dt);
    for (double& x : v) x = rng.normal();
    for (const auto& q : cols) {
      double dot = 0.0;
      for (std::size_t r = 0; r < dt; ++r) dot += v[r] * q[r];
      for (std::size_t r = 0; r < dt; ++r) v[r] -= dot * q[r];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    cols.push_back(std::move(v));
  }
  std::vector<double> map(dt * dv);
  for (std::size_t r = 0; r < dt; ++r)
    for (std::size_t k = 0; k < dv; ++k) map[r * dv + k] = cols[k][r];
  return map;
}

std::vector<std::vector<double>> decode_text(const SampleWindow& window,
                                             std::span<const double> map,
                                             std::size_t visual_dim) {
  std::vector<std::vector<double>> out;
  for (const Segment& s : window.segments) {
    const std::size_t dt = s.text.size();
    if (map.size() != dt * visual_dim) throw DimensionError("decode_text: map size mismatch");
    std::vector<double> v(visual_dim, 0.0);
    for (std::size_t r = 0; r < dt; ++r)
      for (std::size_t k = 0; k < visual_dim; ++k) v[k] += map[r * visual_dim + k] * s.text[r];
    out.push_back(std::move(v));
  }
  return out;
}

Dataset generate_dataset(const GeneratorConfig& c, std::uint64_t seed) {
  c.validate();
  const auto map = text_map(c, seed);
  const std::size_t per = c.windows_per_streamer;
  const auto test_count = static_cast<std::size_t>(
      std::llround(static_cast<double>(per) * c.test_fraction));
  Dataset ds;
  for (std::size_t u = 0; u < c.streamers; ++u) {
    const auto direction = streamer_direction(c, seed, u);
    Rng split_rng(mix_seed(mix_seed(seed, kSplit), u));
    const auto order = split_rng.permutation(per);
    std::vector<bool> is_test(per, false);
    for (std::size_t k = 0; k < test_count; ++k) is_test[order[k]] = true;
    for (std::size_t k = 0; k < per; ++k) {
      const std::uint64_t index = u * per + k;
      SampleWindow w = generate_window(c, direction, map, static_cast<std::uint32_t>(u),
                                       mix_seed(mix_seed(seed, kWindow), index));
      (is_test[k] ? ds.test : ds.train).push_back(std::move(w));
    }
  }
  return ds;
}

SampleWindow inject_misalignment(SampleWindow window, int k) {
  const int n = static_cast<int>(window.segments.size());
  if (std::abs(k) >= n) {
    throw ConfigError("inject_misalignment: |k| = " + std::to_string(std::abs(k)) +
                      " must be < n = " + std::to_string(n));
  }
  if (k == 0) return window;
  std::vector<std::vector<float>> text;
  text.reserve(window.segments.size());
  for (const Segment& s : window.segments) text.push_back(s.text);
  for (int i = 0; i < n; ++i) {
    window.segments[static_cast<std::size_t>(i)].text =
        text[static_cast<std::size_t>(std::clamp(i - k, 0, n - 1))];
  }
  window.lag += k;
  return window;
}

// ---------------------------------------------------------------------------

EmbeddingProvider::EmbeddingProvider(Kind kind, std::size_t raw_dim, std::size_t out_dim,
                                     std::uint64_t seed, double gain)
    : kind_(kind), raw_dim_(raw_dim), out_dim_(out_dim) {
  if (raw_dim == 0 || out_dim == 0) throw ConfigError("embedding provider: zero width");
  Rng rng(seed);
  const double scale = gain / std::sqrt(static_cast<double>(raw_dim));
  weight_.resize(out_dim * raw_dim);
  for (double& w : weight_) w = rng.normal(0.0, scale);
  bias_.resize(out_dim);
  for (double& b : bias_) b = rng.normal(0.0, 0.1);
}

EmbeddingProvider EmbeddingProvider::for_config(Kind kind, const GeneratorConfig& c) {
  if (kind == Kind::visual) {
    return EmbeddingProvider(kind, c.visual_dim, c.embed_visual_dim, mix_seed(c.provider_seed, 1),
                             c.provider_gain);
  }
  return EmbeddingProvider(kind, c.text_dim, c.embed_text_dim, mix_seed(c.provider_seed, 2),
                           c.provider_gain);
}

std::vector<double> EmbeddingProvider::embed(std::span<const double> raw) const {
  if (raw.size() != raw_dim_) {
    throw DimensionError(std::string(kind_ == Kind::visual ? "visual" : "text") +
                         " provider: expects " + std::to_string(raw_dim_) + " values, got " +
                         std::to_string(raw.size()));
  }
  std::vector<double> out(out_dim_);
  for (std::size_t r = 0; r < out_dim_; ++r) {
    double acc = bias_[r];
    for (std::size_t k = 0; k < raw_dim_; ++k) acc += weight_[r * raw_dim_ + k] * raw[k];
    out[r] = std::tanh(acc);
  }
  return out;
}

std::vector<double> EmbeddingProvider::embed(std::span<const float> raw) const {
  std::vector<double> wide(raw.begin(), raw.end());
  return embed(std::span<const double>(wide));
}

std::vector<double> EmbeddingProvider::embed_frames(
    std::span<const std::vector<float>> frames) const {
  if (frames.empty()) throw DimensionError("embed_frames: no frames");
  std::vector<double> acc(out_dim_, 0.0);
  for (const auto& f : frames) {
    const auto e = embed(std::span<const float>(f));
    for (std::size_t k = 0; k < out_dim_; ++k) acc[k] += e[k];
  }
  for (double& x : acc) x /= static_cast<double>(frames.size());
  return acc;
}

// ---------------------------------------------------------------------------

Format parse_format(const std::string& name) {
  if (name == "jsonl") return Format::jsonl;
  if (name == "binary") return Format::binary;
  throw ConfigError("unknown dataset format '" + name + "' (expected jsonl or binary)");
}

std::string format_extension(Format f) { return f == Format::jsonl ? ".jsonl" : ".bin"; }

void save_jsonl(const std::filesystem::path& path, std::span<const SampleWindow> samples) {
  std::string out;
  for (const SampleWindow& w : samples) {
    out += "{\"streamer_id\":" + std::to_string(w.streamer_id) +
           ",\"lag\":" + std::to_string(w.lag) + ",\"segments\":[";
    for (std::size_t i = 0; i < w.segments.size(); ++i) {
      const Segment& s = w.segments[i];
      if (i) out += ',';
      out += "{\"visual\":[";
      for (std::size_t k = 0; k < s.visual.size(); ++k) {
        if (k) out += ',';
        append_float(out, s.visual[k]);
      }
      out += "],\"text\":[";
      for (std::size_t k = 0; k < s.text.size(); ++k) {
        if (k) out += ',';
        append_float(out, s.text[k]);
      }
      out += "],\"ctr\":";
      append_float(out, s.ctr);
      out += '}';
    }
    out += "]}\n";
  }
  write_file(path, out);
}

std::vector<SampleWindow> load_jsonl(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::vector<SampleWindow> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      SampleWindow w;
      w.streamer_id = j.at("streamer_id").get<std::uint32_t>();
      w.lag = j.at("lag").get<std::int32_t>();
      for (const auto& sj : j.at("segments")) {
        Segment s;
        for (const auto& v : sj.at("visual")) s.visual.push_back(static_cast<float>(v.get<double>()));
        for (const auto& v : sj.at("text")) s.text.push_back(static_cast<float>(v.get<double>()));
        s.ctr = static_cast<float>(sj.at("ctr").get<double>());
        w.segments.push_back(std::move(s));
      }
      samples.push_back(std::move(w));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    const SampleWindow& w = samples.back();
    const SampleWindow& first = samples.front();
    if (w.segments.empty()) throw FormatError(where + ": sample without segments");
    check_sample(w, first.segments.size(), first.segments[0].visual.size(),
                 first.segments[0].text.size(), where);
  }
  return samples;
}

void save_binary(const std::filesystem::path& path, std::span<const SampleWindow> samples) {
  std::size_t n = 0, dv = 0, dt = 0;
  if (!samples.empty() && !samples[0].segments.empty()) {
    n = samples[0].segments.size();
    dv = samples[0].segments[0].visual.size();
    dt = samples[0].segments[0].text.size();
  }
  std::string out(kBinaryMagic, sizeof kBinaryMagic - 1);
  put_u32(out, kBinaryVersion);
  put_u32(out, static_cast<std::uint32_t>(n));
  put_u32(out, static_cast<std::uint32_t>(dv));
  put_u32(out, static_cast<std::uint32_t>(dt));
  put_u64(out, samples.size());
  for (const SampleWindow& w : samples) {
    check_sample(w, n, dv, dt, "save_binary");
    encode_sample(out, w);
  }
  write_file(path, out);
}

std::vector<SampleWindow> load_binary(const std::filesystem::path& path) {
  Reader r(read_file(path));
  const std::string where = path.string();
  std::string magic;
  try {
    magic = r.raw(sizeof kBinaryMagic - 1);
  } catch (const FormatError&) {
    throw FormatError(where + ": bad magic");
  }
  if (magic != std::string(kBinaryMagic, sizeof kBinaryMagic - 1)) {
    throw FormatError(where + ": bad magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kBinaryVersion) {
    throw FormatError(where + ": unsupported version " + std::to_string(version));
  }
  const std::size_t n = r.u32(), dv = r.u32(), dt = r.u32();
  const std::uint64_t count = r.u64();
  const std::uint64_t per_sample = 8 + n * (dv + dt + 1) * 4;
  if (count > 0 && r.remaining() / per_sample < count) {
    throw FormatError(where + ": truncated payload");
  }
  std::vector<SampleWindow> samples;
  samples.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    SampleWindow w;
    w.streamer_id = r.u32();
    w.lag = static_cast<std::int32_t>(r.u32());
    w.segments.resize(n);
    for (Segment& s : w.segments) {
      s.visual.resize(dv);
      s.text.resize(dt);
      for (float& f : s.visual) f = r.f32();
      for (float& f : s.text) f = r.f32();
      s.ctr = r.f32();
    }
    check_sample(w, n, dv, dt, where + " sample " + std::to_string(k));
    samples.push_back(std::move(w));
  }
  if (r.remaining() != 0) throw FormatError(where + ": trailing bytes after payload");
  return samples;
}

void save(const std::filesystem::path& path, std::span<const SampleWindow> samples, Format f) {
  if (f == Format::jsonl) {
    save_jsonl(path, samples);
  } else {
    save_binary(path, samples);
  }
}

std::vector<SampleWindow> load(const std::filesystem::path& path, Format f) {
  return f == Format::jsonl ? load_jsonl(path) : load_binary(path);
}

std::uint64_t window_hash(const SampleWindow& w) {
  std::string bytes;
  encode_sample(bytes, w);
  return fnv1a(bytes);
}

std::string file_hash(const std::filesystem::path& path) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << fnv1a(read_file(path));
  return os.str();
}

}  // namespace cctr::data
