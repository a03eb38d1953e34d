#include "cctr/model.hpp"

#include <cmath>
#include <limits>

#include "cctr/error.hpp"
#include "cctr/rng.hpp"

namespace cctr::model {

namespace {

Tensor bind(Tape* tape, const Parameter& p) { return tape ? tape->param(p) : p.value; }

Tensor gaussian(Rng& rng, ad::Shape shape, double stddev) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v));
}

Linear make_linear(Rng& rng, const std::string& name, std::size_t in, std::size_t out,
                   bool bias = true) {
  Linear l;
  l.weight = Parameter(name + ".weight",
                       gaussian(rng, {in, out}, 1.0 / std::sqrt(static_cast<double>(in))));
  l.has_bias = bias;
  if (bias) l.bias = Parameter(name + ".bias", Tensor::zeros({out}));
  return l;
}

LayerNorm make_norm(const std::string& name, std::size_t d) {
  return LayerNorm{Parameter(name + ".gain", Tensor::ones({d})),
                   Parameter(name + ".bias", Tensor::zeros({d}))};
}

Block make_block(Rng& rng, const std::string& name, const ModelConfig& c) {
  const std::size_t inner = c.n_heads * c.d_h;
  Block b;
  b.attn_norm = make_norm(name + ".attn_norm", c.d);
  b.ffn_norm = make_norm(name + ".ffn_norm", c.d);
  b.attn.query = make_linear(rng, name + ".attn.query", c.d, inner);
  // A key bias only shifts every score in a row equally, which softmax ignores.
  b.attn.key = make_linear(rng, name + ".attn.key", c.d, inner, false);
  b.attn.value = make_linear(rng, name + ".attn.value", c.d, inner);
  b.attn.out = make_linear(rng, name + ".attn.out", inner, c.d);
  b.ffn.up = make_linear(rng, name + ".ffn.up", c.d, c.ffn_hidden);
  b.ffn.down = make_linear(rng, name + ".ffn.down", c.ffn_hidden, c.d);
  return b;
}

std::vector<Linear> make_projection(Rng& rng, const std::string& name, std::size_t in,
                                    std::size_t d, std::size_t depth) {
  std::vector<Linear> layers;
  for (std::size_t i = 0; i < depth; ++i) {
    layers.push_back(make_linear(rng, name + "." + std::to_string(i), i == 0 ? in : d, d));
  }
  return layers;
}

Tensor project(Tape* tape, const std::vector<Linear>& layers, const Tensor& x) {
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i > 0) h = ad::gelu(h);
    h = layers[i](tape, h);
  }
  return h;
}

}  // namespace

void ModelConfig::validate() const {
  const auto need = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("model config: ") + what);
  };
  need(n >= 2, "n must be >= 2");
  need(d >= 1 && d_h >= 1 && n_heads >= 1, "d, d_h and n_heads must be >= 1");
  need(perceiver_layers >= 1 && decoder_layers >= 1, "layer counts must be >= 1");
  need(ffn_hidden >= 1, "ffn_hidden must be >= 1");
  need(proj_depth >= 1, "proj_depth must be >= 1");
  need(visual_dim >= 1 && text_dim >= 1, "provider dimensions must be >= 1");
  need(streamers >= 1, "streamers must be >= 1");
}

Tensor attention_mask(std::size_t n, MaskMode mode) {
  std::vector<double> m(n * n, 0.0);
  if (mode == MaskMode::causal) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = -std::numeric_limits<double>::infinity();
  }
  return Tensor({n, n}, std::move(m));
}

Tensor Linear::operator()(Tape* tape, const Tensor& x) const {
  const std::size_t in = weight.value.dim(0);
  const std::size_t out = weight.value.dim(1);
  if (x.rank() == 0 || x.dim(-1) != in) {
    throw DimensionError("linear " + weight.name + ": expects trailing dimension " +
                         std::to_string(in) + ", got " + ad::to_string(x.shape()));
  }
  ad::Shape shape = x.shape();
  const std::size_t rows = x.size() / in;
  Tensor h = ad::matmul(ad::reshape(x, {rows, in}), bind(tape, weight));
  if (has_bias) h = ad::add(h, bind(tape, bias));
  shape.back() = out;
  return ad::reshape(h, std::move(shape));
}

Tensor LayerNorm::operator()(Tape* tape, const Tensor& x) const {
  const Tensor mu = ad::mean(x, -1, true);
  const Tensor centered = ad::sub(x, mu);
  const Tensor var = ad::mean(ad::mul(centered, centered), -1, true);
  const Tensor normed = ad::div(centered, ad::sqrt(ad::add_scalar(var, 1e-5)));
  return ad::add(ad::mul(normed, bind(tape, gain)), bind(tape, bias));
}

ContentCtr::ContentCtr(ModelConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& c = config_;
  proj_visual_ = make_projection(rng, "proj_visual", c.visual_dim, c.d, c.proj_depth);
  proj_text_ = make_projection(rng, "proj_text", c.text_dim, c.d, c.proj_depth);
  streamer_table_ = Parameter("streamer_table",
                              gaussian(rng, {c.streamers + 1, c.d},
                                       1.0 / std::sqrt(static_cast<double>(c.d))));
  for (std::size_t i = 0; i < c.perceiver_layers; ++i) {
    perceiver_.push_back(make_block(rng, "perceiver." + std::to_string(i), c));
  }
  positional_ = Parameter("positional", gaussian(rng, {c.n, c.d}, 0.02));
  for (std::size_t i = 0; i < c.decoder_layers; ++i) {
    decoder_.push_back(make_block(rng, "decoder." + std::to_string(i), c));
  }
  head_ = make_linear(rng, "head", c.d, 1);
}

void ContentCtr::visit(const std::function<void(Parameter&)>& fn) {
  const auto linear = [&](Linear& l) {
    fn(l.weight);
    if (l.has_bias) fn(l.bias);
  };
  const auto block = [&](Block& b) {
    if (config_.pre_norm) {
      fn(b.attn_norm.gain);
      fn(b.attn_norm.bias);
      fn(b.ffn_norm.gain);
      fn(b.ffn_norm.bias);
    }
    linear(b.attn.query);
    linear(b.attn.key);
    linear(b.attn.value);
    linear(b.attn.out);
    linear(b.ffn.up);
    linear(b.ffn.down);
  };
  for (auto& l : proj_visual_) linear(l);
  for (auto& l : proj_text_) linear(l);
  fn(streamer_table_);
  for (auto& b : perceiver_) block(b);
  if (config_.use_positional) fn(positional_);
  for (auto& b : decoder_) block(b);
  linear(head_);
}

std::vector<Parameter*> ContentCtr::parameters() {
  std::vector<Parameter*> out;
  visit([&](Parameter& p) { out.push_back(&p); });
  return out;
}

std::vector<const Parameter*> ContentCtr::parameters() const {
  auto ptrs = const_cast<ContentCtr*>(this)->parameters();
  return {ptrs.begin(), ptrs.end()};
}

Parameter* ContentCtr::find(std::string_view name) {
  Parameter* hit = nullptr;
  visit([&](Parameter& p) {
    if (p.name == name) hit = &p;
  });
  return hit;
}

void ContentCtr::zero_residual_branches() {
  const auto zero = [](Parameter& p) { p.value = Tensor::zeros(p.value.shape()); };
  for (auto* blocks : {&perceiver_, &decoder_}) {
    for (Block& b : *blocks) {
      zero(b.attn.out.weight);
      zero(b.attn.out.bias);
      zero(b.ffn.down.weight);
      zero(b.ffn.down.bias);
    }
  }
}

Tensor ContentCtr::attend(Tape* tape, const Attention& a, const Tensor& q, const Tensor& kv,
                          const Tensor* mask) const {
  const std::size_t batch = q.dim(0);
  const std::size_t tq = q.dim(1);
  const std::size_t tk = kv.dim(1);
  const std::size_t h = config_.n_heads;
  const std::size_t dh = config_.d_h;
  const auto heads = [&](const Tensor& x, std::size_t t) {
    return ad::reshape(ad::permute(ad::reshape(x, {batch, t, h, dh}), {0, 2, 1, 3}),
                       {batch * h, t, dh});
  };
  const Tensor qh = heads(a.query(tape, q), tq);
  const Tensor kh = heads(a.key(tape, kv), tk);
  const Tensor vh = heads(a.value(tape, kv), tk);
  Tensor scores = ad::scale(ad::matmul(qh, ad::transpose(kh)),
                            1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask) scores = ad::add(scores, *mask);
  const Tensor ctx = ad::matmul(ad::softmax(scores, -1), vh);
  const Tensor merged =
      ad::reshape(ad::permute(ad::reshape(ctx, {batch, h, tq, dh}), {0, 2, 1, 3}),
                  {batch, tq, h * dh});
  return a.out(tape, merged);
}

Tensor ContentCtr::feed_forward(Tape* tape, const FeedForward& f, const Tensor& x) const {
  return f.down(tape, ad::gelu(f.up(tape, x)));
}

Fused ContentCtr::fuse(Tape* tape, const Tensor& visual, const Tensor& text) const {
  const auto& c = config_;
  if (visual.rank() != 3 || visual.dim(2) != c.visual_dim) {
    throw DimensionError("fuse: visual embeddings must be b x n x " +
                         std::to_string(c.visual_dim) + ", got " +
                         ad::to_string(visual.shape()));
  }
  if (text.rank() != 3 || text.dim(2) != c.text_dim || text.dim(0) != visual.dim(0) ||
      text.dim(1) != visual.dim(1)) {
    throw DimensionError("fuse: text embeddings must be " + std::to_string(visual.dim(0)) +
                         " x " + std::to_string(visual.dim(1)) + " x " +
                         std::to_string(c.text_dim) + ", got " + ad::to_string(text.shape()));
  }
  const std::size_t b = visual.dim(0), n = visual.dim(1);
  Fused f;
  f.visual_seq = project(tape, proj_visual_, visual);
  f.text_seq = project(tape, proj_text_, text);
  f.tokens = ad::concat({ad::reshape(f.visual_seq, {b, n, 1, c.d}),
                         ad::reshape(f.text_seq, {b, n, 1, c.d})},
                        2);
  return f;
}

Tensor ContentCtr::streamer_embedding(Tape* tape, std::span<const std::uint64_t> ids) const {
  const std::size_t fallback = config_.streamers;
  std::vector<std::size_t> rows;
  rows.reserve(ids.size());
  for (std::uint64_t id : ids) rows.push_back(id < fallback ? static_cast<std::size_t>(id) : fallback);
  return ad::index_select(bind(tape, streamer_table_), 0, rows);
}

Tensor ContentCtr::perceive(Tape* tape, const Tensor& tokens, const Tensor& streamer) const {
  const std::size_t d = config_.d;
  if (tokens.rank() != 4 || tokens.dim(2) != 2 || tokens.dim(3) != d) {
    throw DimensionError("perceive: tokens must be b x n x 2 x " + std::to_string(d) +
                         ", got " + ad::to_string(tokens.shape()));
  }
  const std::size_t b = tokens.dim(0), n = tokens.dim(1);
  if (streamer.rank() != 2 || streamer.dim(0) != b || streamer.dim(1) != d) {
    throw DimensionError("perceive: streamer embedding must be " + std::to_string(b) + " x " +
                         std::to_string(d) + ", got " + ad::to_string(streamer.shape()));
  }
  const Tensor flat_tokens = ad::reshape(tokens, {b * n, 2, d});
  Tensor x = ad::reshape(ad::broadcast_to(ad::reshape(streamer, {b, 1, 1, d}), {b, n, 1, d}),
                         {b * n, 1, d});
  for (const Block& blk : perceiver_) {
    const Tensor kv = ad::concat({flat_tokens, x}, 1);
    if (config_.pre_norm) {
      x = ad::add(x, attend(tape, blk.attn, blk.attn_norm(tape, x), blk.attn_norm(tape, kv), nullptr));
      x = ad::add(x, feed_forward(tape, blk.ffn, blk.ffn_norm(tape, x)));
    } else {
      x = ad::add(x, attend(tape, blk.attn, x, kv, nullptr));
      x = ad::add(x, feed_forward(tape, blk.ffn, x));
    }
  }
  return ad::reshape(x, {b, n, d});
}

Tensor ContentCtr::decode(Tape* tape, const Tensor& latent) const {
  const std::size_t d = config_.d;
  if (latent.rank() != 3 || latent.dim(2) != d) {
    throw DimensionError("decode: expects b x n x " + std::to_string(d) + ", got " +
                         ad::to_string(latent.shape()));
  }
  const std::size_t n = latent.dim(1);
  Tensor x = latent;
  if (config_.use_positional) {
    if (n > config_.n) {
      throw DimensionError("decode: window of " + std::to_string(n) +
                           " exceeds positional table of " + std::to_string(config_.n));
    }
    Tensor pos = bind(tape, positional_);
    if (n < config_.n) pos = ad::slice(pos, 0, 0, n);
    x = ad::add(x, pos);
  }
  const Tensor mask = attention_mask(n, config_.mask_mode);
  const Tensor* mask_ptr = config_.mask_mode == MaskMode::causal ? &mask : nullptr;
  for (const Block& blk : decoder_) {
    if (config_.pre_norm) {
      const Tensor h = blk.attn_norm(tape, x);
      x = ad::add(x, attend(tape, blk.attn, h, h, mask_ptr));
      x = ad::add(x, feed_forward(tape, blk.ffn, blk.ffn_norm(tape, x)));
    } else {
      x = ad::add(x, attend(tape, blk.attn, x, x, mask_ptr));
      x = ad::add(x, feed_forward(tape, blk.ffn, x));
    }
  }
  return x;
}

Tensor ContentCtr::predict(Tape* tape, const Tensor& hidden) const {
  if (hidden.rank() != 3) {
    throw DimensionError("predict: expects b x n x d, got " + ad::to_string(hidden.shape()));
  }
  const Tensor logits = head_(tape, hidden);
  return ad::sigmoid(ad::reshape(logits, {hidden.dim(0), hidden.dim(1)}));
}

ForwardOutput ContentCtr::forward(Tape* tape, const Batch& batch) const {
  const Fused fused = fuse(tape, batch.visual, batch.text);
  if (batch.streamers.size() != batch.visual.dim(0)) {
    throw DimensionError("forward: " + std::to_string(batch.streamers.size()) +
                         " streamer ids for batch of " + std::to_string(batch.visual.dim(0)));
  }
  const Tensor eu = streamer_embedding(tape, batch.streamers);
  const Tensor latent = perceive(tape, fused.tokens, eu);
  const Tensor hidden = decode(tape, latent);
  return ForwardOutput{predict(tape, hidden), fused.visual_seq, fused.text_seq};
}

}  // namespace cctr::model
