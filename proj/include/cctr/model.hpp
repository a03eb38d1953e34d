#pragma once

// ContentCTR network: per-timestamp feature fusion, a Perceiver block that
// lets a streamer-conditioned latent query attend over the fused visual and
// text tokens of one timestamp, a masked self-attention decoder across
// timestamps, and a sigmoid head producing one CTR estimate per timestamp.

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "cctr/autodiff.hpp"

namespace cctr::model {

using ad::Parameter;
using ad::Tape;
using ad::Tensor;

enum class MaskMode { causal, full };

struct ModelConfig {
  std::size_t n = 8;                 // window length
  std::size_t d = 16;                // model width
  std::size_t d_h = 4;               // per-head width
  std::size_t n_heads = 2;
  std::size_t perceiver_layers = 1;
  std::size_t decoder_layers = 1;
  std::size_t ffn_hidden = 32;
  MaskMode mask_mode = MaskMode::causal;
  bool use_positional = true;
  bool pre_norm = false;
  std::size_t proj_depth = 1;        // affine layers in each projection head
  std::size_t visual_dim = 16;       // provider embedding widths
  std::size_t text_dim = 16;
  std::size_t streamers = 1;         // table rows, plus one fallback row

  void validate() const;
};

// Additive attention mask: 0 where attention is allowed, -inf elsewhere.
// Causal allows j <= i.
Tensor attention_mask(std::size_t n, MaskMode mode);

struct Linear {
  Parameter weight;  // in x out
  Parameter bias;    // out
  bool has_bias = true;
  Tensor operator()(Tape* tape, const Tensor& x) const;
};

struct LayerNorm {
  Parameter gain;
  Parameter bias;
  Tensor operator()(Tape* tape, const Tensor& x) const;
};

struct Attention {
  Linear query, key, value, out;
};

struct FeedForward {
  Linear up, down;
};

struct Block {
  LayerNorm attn_norm, ffn_norm;  // used only with pre_norm
  Attention attn;
  FeedForward ffn;
};

struct Batch {
  Tensor visual;                          // b x n x visual_dim
  Tensor text;                            // b x n x text_dim
  std::vector<std::uint64_t> streamers;  // b ids; ids >= table size use the fallback row
};

struct Fused {
  Tensor tokens;      // b x n x 2 x d, slot 0 visual, slot 1 text
  Tensor visual_seq;  // b x n x d  (S_p)
  Tensor text_seq;    // b x n x d  (S_a)
};

struct ForwardOutput {
  Tensor s;           // b x n, in (0,1)
  Tensor visual_seq;  // b x n x d
  Tensor text_seq;    // b x n x d
};

class ContentCtr {
 public:
  ContentCtr(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Stable order; names are unique.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Parameter* find(std::string_view name);

  // All stages take a nullable tape; without one they run as constants.
  Fused fuse(Tape* tape, const Tensor& visual, const Tensor& text) const;
  Tensor streamer_embedding(Tape* tape, std::span<const std::uint64_t> ids) const;
  Tensor perceive(Tape* tape, const Tensor& tokens, const Tensor& streamer) const;
  Tensor decode(Tape* tape, const Tensor& latent) const;
  Tensor predict(Tape* tape, const Tensor& hidden) const;
  ForwardOutput forward(Tape* tape, const Batch& batch) const;

  // Zeroes attention output maps and FFN output layers, which turns every
  // residual block into the identity.
  void zero_residual_branches();

 private:
  void visit(const std::function<void(Parameter&)>& fn);
  Tensor attend(Tape* tape, const Attention& a, const Tensor& q, const Tensor& kv,
                const Tensor* mask) const;
  Tensor feed_forward(Tape* tape, const FeedForward& f, const Tensor& x) const;

  ModelConfig config_;
  std::vector<Linear> proj_visual_;
  std::vector<Linear> proj_text_;
  Parameter streamer_table_;  // (streamers + 1) x d
  std::vector<Block> perceiver_;
  Parameter positional_;      // n x d
  std::vector<Block> decoder_;
  Linear head_;               // d x 1
};

}  // namespace cctr::model
