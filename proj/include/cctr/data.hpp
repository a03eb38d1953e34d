#pragma once

// Synthetic live-stream windows with planted highlight structure, frozen
// embedding providers standing in for pretrained encoders, and the JSONL /
// binary sample formats.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cctr::data {

struct Segment {
  std::vector<float> visual;  // visual_dim raw values
  std::vector<float> text;    // text_dim raw values (ASR and comments, one channel)
  float ctr = 0.0f;
};

struct SampleWindow {
  std::uint32_t streamer_id = 0;
  std::int32_t lag = 0;          // planted text lag in segments
  std::uint64_t seed = 0;        // per-window generator seed (not serialized)
  std::vector<Segment> segments;
};

struct GeneratorConfig {
  std::size_t streamers = 10;
  std::size_t windows_per_streamer = 20;
  std::size_t n = 8;
  std::size_t visual_dim = 12;
  std::size_t text_dim = 16;           // >= visual_dim
  double test_fraction = 0.2;

  // Latent highlight intensity z in [0,1]: random walk with spikes, reflected at the edges.
  double walk_step = 0.15;
  double spike_prob = 0.15;
  double spike_min = 0.3;
  double spike_max = 0.6;

  double highlight_strength = 2.0;     // scale of z along the streamer direction
  double direction_spread = 0.3;       // streamer directions = shared + spread * own
  double content_scale = 1.0;          // timestamp-specific scene content
  double content_persistence = 0.3;    // AR(1) coefficient of scene content
  double feature_noise = 0.05;
  double text_noise = 0.05;
  int lag_min = 0;
  int lag_max = 0;

  double ctr_gain = 4.0;
  double ctr_bias = -2.0;
  double label_noise = 0.0;
  // Exposure filtering has no synthetic analogue; kept for config parity.
  double min_exposure = 0.0;

  // Frozen providers.
  std::size_t embed_visual_dim = 16;
  std::size_t embed_text_dim = 16;
  std::uint64_t provider_seed = 0xC0FFEE;
  double provider_gain = 1.0;          // weight scale is gain / sqrt(raw_dim)

  void validate() const;
};

struct Dataset {
  std::vector<SampleWindow> train;
  std::vector<SampleWindow> test;
};

// Deterministic in (config, seed). Window w uses seed mix_seed(seed, w).
Dataset generate_dataset(const GeneratorConfig& config, std::uint64_t seed);

// The generator's text map: text_dim x visual_dim with orthonormal columns,
// row-major. Its transpose maps text back into visual space.
std::vector<double> text_map(const GeneratorConfig& config, std::uint64_t seed);
// Projects each text vector back into visual space with the text map.
std::vector<std::vector<double>> decode_text(const SampleWindow& window,
                                             std::span<const double> map,
                                             std::size_t visual_dim);

// text'[i] = text[clamp(i - k, 0, n - 1)]. Throws ConfigError for |k| >= n.
SampleWindow inject_misalignment(SampleWindow window, int k);

// Frozen random features: tanh(W x + b) with W, b drawn from the seed.
class EmbeddingProvider {
 public:
  enum class Kind { visual, text };

  EmbeddingProvider(Kind kind, std::size_t raw_dim, std::size_t out_dim, std::uint64_t seed,
                    double gain = 1.0);
  // Provider pair for a generator config.
  static EmbeddingProvider for_config(Kind kind, const GeneratorConfig& config);

  Kind kind() const { return kind_; }
  std::size_t raw_dim() const { return raw_dim_; }
  std::size_t out_dim() const { return out_dim_; }
  std::span<const double> weight() const { return weight_; }  // out x raw
  std::span<const double> bias() const { return bias_; }

  std::vector<double> embed(std::span<const float> raw) const;
  std::vector<double> embed(std::span<const double> raw) const;
  // Mean of per-frame embeddings (several frames sampled from one segment).
  std::vector<double> embed_frames(std::span<const std::vector<float>> frames) const;

 private:
  Kind kind_;
  std::size_t raw_dim_, out_dim_;
  std::vector<double> weight_;
  std::vector<double> bias_;
};

// ---- serialization ----

enum class Format { jsonl, binary };

Format parse_format(const std::string& name);
std::string format_extension(Format f);

void save_jsonl(const std::filesystem::path& path, std::span<const SampleWindow> samples);
std::vector<SampleWindow> load_jsonl(const std::filesystem::path& path);

inline constexpr char kBinaryMagic[] = "CCTR-DATA1";  // 10 bytes on disk
inline constexpr std::uint32_t kBinaryVersion = 1;

void save_binary(const std::filesystem::path& path, std::span<const SampleWindow> samples);
std::vector<SampleWindow> load_binary(const std::filesystem::path& path);

void save(const std::filesystem::path& path, std::span<const SampleWindow> samples, Format f);
std::vector<SampleWindow> load(const std::filesystem::path& path, Format f);

// FNV-1a over the canonical serialized bytes of one window.
std::uint64_t window_hash(const SampleWindow& w);
// FNV-1a over a file's bytes, as 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

}  // namespace cctr::data
