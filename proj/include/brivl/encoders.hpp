#pragma once

// Image and text towers. Both end in a two-layer ReLU MLP whose output is
// L2-normalized, so dot products between towers are cosine similarities.

#include <array>
#include <concepts>
#include <cstdint>
#include <string>
#include <vector>

#include "brivl/config.hpp"
#include "brivl/ops.hpp"
#include "brivl/params.hpp"
#include "brivl/rng.hpp"
#include "brivl/tokenizer.hpp"

namespace brivl {

// Ids are row-major [batch, max_len]; positions >= lengths[b] are padding.
struct TokenBatch {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;

  std::size_t batch() const { return lengths.size(); }

  std::vector<std::uint8_t> mask() const {
    std::vector<std::uint8_t> m(ids.size(), 0);
    for (std::size_t b = 0; b < lengths.size(); ++b)
      for (std::size_t i = 0; i < lengths[b]; ++i) m[b * max_len + i] = 1;
    return m;
  }

  static TokenBatch from_rows(const std::vector<TokenRow>& rows, std::size_t max_len) {
    TokenBatch tb;
    tb.max_len = max_len;
    for (const auto& r : rows) {
      if (r.ids.size() != max_len) throw ShapeError("TokenBatch: row width differs from max_len");
      tb.ids.insert(tb.ids.end(), r.ids.begin(), r.ids.end());
      tb.lengths.push_back(r.length);
    }
    return tb;
  }

  static TokenBatch from_texts(const std::vector<std::string>& texts, std::size_t max_len) {
    std::vector<TokenRow> rows;
    rows.reserve(texts.size());
    for (const auto& t : texts) rows.push_back(tokenize(t, max_len));
    return from_rows(rows, max_len);
  }
};

namespace layers {

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicParamSet<T>& p, const std::string& prefix) {
  return ops::add_bias(ops::matmul(x, p.at(prefix + ".w")), p.at(prefix + ".b"));
}

inline constexpr float kReluGain = 1.41421356f;

inline void add_linear(ParamSet& p, const std::string& prefix, std::size_t in, std::size_t out, SplitMix64& rng,
                       float gain = 1.0f) {
  p.add(prefix + ".w", init::kaiming_uniform({in, out}, in, rng, gain));
  p.add(prefix + ".b", init::zeros({out}));
}

inline void add_conv(ParamSet& p, const std::string& prefix, std::size_t in, std::size_t out, std::size_t k,
                     SplitMix64& rng, float gain = kReluGain) {
  p.add(prefix + ".w", init::kaiming_uniform({out, in, k, k}, in * k * k, rng, gain));
  p.add(prefix + ".b", init::zeros({out}));
}

inline void add_mlp(ParamSet& p, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
                    SplitMix64& rng) {
  add_linear(p, prefix + ".fc1", in, hidden, rng, kReluGain);
  add_linear(p, prefix + ".fc2", hidden, out, rng);
}

template <typename T>
BasicTensor<T> mlp(const BasicTensor<T>& x, const BasicParamSet<T>& p, const std::string& prefix) {
  return linear(ops::relu(linear(x, p, prefix + ".fc1")), p, prefix + ".fc2");
}

inline void add_sa_block(ParamSet& p, const std::string& prefix, std::size_t layers, std::size_t width,
                         SplitMix64& rng) {
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string lp = prefix + "." + std::to_string(l);
    for (const char* name : {".q", ".k", ".v", ".o"}) add_linear(p, lp + ".attn" + name, width, width, rng);
    p.add(lp + ".ln1.g", init::ones({width}));
    p.add(lp + ".ln1.b", init::zeros({width}));
    add_linear(p, lp + ".ffn.fc1", width, 4 * width, rng, kReluGain);
    add_linear(p, lp + ".ffn.fc2", 4 * width, width, rng);
    p.add(lp + ".ln2.g", init::ones({width}));
    p.add(lp + ".ln2.b", init::zeros({width}));
  }
}

// Stack of post-norm transformer encoder layers over [batch * seq_len, width]:
//   S' = LayerNorm(S + MultiHeadAttn(S))
//   S  = LayerNorm(S' + FFN(S'))
template <typename T>
BasicTensor<T> sa_block(const BasicTensor<T>& x, const BasicParamSet<T>& p, const std::string& prefix,
                        std::size_t layers, std::size_t seq_len, std::size_t heads,
                        const std::vector<std::uint8_t>& mask = {}) {
  BasicTensor<T> s = x;
  for (std::size_t l = 0; l < layers; ++l) {
    const std::string lp = prefix + "." + std::to_string(l);
    const BasicTensor<T> attn = ops::multi_head_attention(linear(s, p, lp + ".attn.q"), linear(s, p, lp + ".attn.k"),
                                                  linear(s, p, lp + ".attn.v"), seq_len, heads, mask);
    const BasicTensor<T> s1 = ops::layer_norm(ops::add(s, linear(attn, p, lp + ".attn.o")), p.at(lp + ".ln1.g"),
                                      p.at(lp + ".ln1.b"));
    const BasicTensor<T> ffn = mlp(s1, p, lp + ".ffn");
    s = ops::layer_norm(ops::add(s1, ffn), p.at(lp + ".ln2.g"), p.at(lp + ".ln2.b"));
  }
  return s;
}

}  // namespace layers

// Desk-scale CNN backbone: three 3x3 conv + ReLU stages with 8, 12 and 12
// channels. Stage 1: valid conv, 2x2 average pool stride 2. Stage 2: valid
// conv, 2x2 average pool stride 1. Stage 3: same-padded conv, no pooling.
// A 32x32 input gives a 12-channel 12x12 map.
inline constexpr std::array<std::size_t, 3> kBackboneChannels{8, 12, 12};

inline std::size_t backbone_output_side(std::size_t image_size) {
  if (image_size < 8) throw InvalidArgument("backbone: image_size " + std::to_string(image_size) + " too small");
  const std::size_t s1 = (image_size - 2) / 2;
  if (s1 < 4) throw InvalidArgument("backbone: image_size " + std::to_string(image_size) + " too small");
  return s1 - 3;
}

template <typename T>
struct BasicImageForward {
  BasicTensor<T> feature_map;  // last map before patch pooling [N, C, h, w]
  BasicTensor<T> patches;      // patch features after the SA block [N * N_p, C]
  BasicTensor<T> embedding;    // [N, d], unit rows
};

using ImageForward = BasicImageForward<float>;

template <typename T>
class BasicImageEncoder {
 public:
  // Pixels are standardized with fixed constants before the first conv.
  static constexpr float kPixelMean = 0.5f;
  static constexpr float kPixelStd = 0.25f;

  BasicImageEncoder(const EncoderConfig& cfg, SplitMix64& rng)
    requires std::same_as<T, float>
      : cfg_(cfg) {
    validate(cfg);
    const std::size_t c = kBackboneChannels.back();
    layers::add_conv(params_, "backbone.conv1", 3, kBackboneChannels[0], 3, rng);
    layers::add_conv(params_, "backbone.conv2", kBackboneChannels[0], kBackboneChannels[1], 3, rng);
    layers::add_conv(params_, "backbone.conv3", kBackboneChannels[1], kBackboneChannels[2], 3, rng);
    layers::add_sa_block(params_, "sa", cfg.sa_layers, c, rng);
    layers::add_mlp(params_, "head", c, cfg.mlp_hidden, cfg.embed_dim, rng);
  }

  BasicImageEncoder(const EncoderConfig& cfg, BasicParamSet<T> params) : cfg_(cfg), params_(std::move(params)) { validate(cfg); }

  static void validate(const EncoderConfig& cfg) {
    cfg.validate();
    if (kBackboneChannels.back() % cfg.sa_heads != 0)
      throw InvalidArgument("image encoder: sa_heads must divide the backbone width " +
                            std::to_string(kBackboneChannels.back()));
    const std::size_t side = backbone_output_side(cfg.image_size);
    for (std::size_t s : cfg.mspp_scales)
      if (side % s != 0)
        throw InvalidArgument("image encoder: feature map side " + std::to_string(side) +
                              " not divisible by scale " + std::to_string(s));
  }

  const EncoderConfig& config() const { return cfg_; }
  BasicParamSet<T>& params() { return params_; }
  const BasicParamSet<T>& params() const { return params_; }

  BasicImageEncoder frozen_copy() const { return BasicImageEncoder(cfg_, params_.clone(false)); }

  template <typename U>
  BasicImageEncoder<U> cast() const {
    return BasicImageEncoder<U>(cfg_, params_.template cast<U>());
  }

  BasicTensor<T> backbone(const BasicTensor<T>& images) const {
    check_images(images);
    const auto& p = params_;
    const BasicTensor<T> centered = ops::scale(ops::add_scalar(images, -kPixelMean), 1.0f / kPixelStd);
    BasicTensor<T> x = ops::relu(ops::conv2d(centered, p.at("backbone.conv1.w"), p.at("backbone.conv1.b"), 0));
    x = ops::avg_pool2d(x, 2, 2);
    x = ops::relu(ops::conv2d(x, p.at("backbone.conv2.w"), p.at("backbone.conv2.b"), 0));
    x = ops::avg_pool2d(x, 2, 1);
    return ops::relu(ops::conv2d(x, p.at("backbone.conv3.w"), p.at("backbone.conv3.b"), 1));
  }

  BasicTensor<T> sa_block(const BasicTensor<T>& patches) const {
    if (!cfg_.use_sa) return patches;
    return layers::sa_block(patches, params_, "sa", cfg_.sa_layers, cfg_.patch_count(), cfg_.sa_heads);
  }

  BasicImageForward<T> forward(const BasicTensor<T>& images) const {
    BasicImageForward<T> f;
    f.feature_map = backbone(images);
    f.patches = sa_block(ops::mspp(f.feature_map, cfg_.mspp_scales));
    const BasicTensor<T> pooled = ops::masked_mean_rows(f.patches, cfg_.patch_count());
    f.embedding = ops::l2_normalize(layers::mlp(pooled, params_, "head"));
    return f;
  }

  BasicTensor<T> encode(const BasicTensor<T>& images) const { return forward(images).embedding; }

 private:
  void check_images(const BasicTensor<T>& images) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size)
      throw ShapeError("image encoder: expected [N,3," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
  }

  EncoderConfig cfg_;
  BasicParamSet<T> params_;
};

using ImageEncoder = BasicImageEncoder<float>;

template <typename T>
class BasicTextEncoder {
 public:
  BasicTextEncoder(const EncoderConfig& cfg, SplitMix64& rng)
    requires std::same_as<T, float>
      : cfg_(cfg) {
    cfg.validate();
    const std::size_t w = cfg.text_width;
    // Embedding tables are initialized like a linear layer with fan-in w.
    params_.add("token_embedding", init::kaiming_uniform({cfg.vocab_size, w}, w, rng));
    params_.add("position_embedding", init::kaiming_uniform({cfg.max_text_len, w}, w, rng));
    layers::add_sa_block(params_, "sa", cfg.sa_layers, w, rng);
    layers::add_mlp(params_, "head", w, cfg.mlp_hidden, cfg.embed_dim, rng);
  }

  BasicTextEncoder(const EncoderConfig& cfg, BasicParamSet<T> params) : cfg_(cfg), params_(std::move(params)) { cfg.validate(); }

  const EncoderConfig& config() const { return cfg_; }
  BasicParamSet<T>& params() { return params_; }
  const BasicParamSet<T>& params() const { return params_; }

  BasicTextEncoder frozen_copy() const { return BasicTextEncoder(cfg_, params_.clone(false)); }

  template <typename U>
  BasicTextEncoder<U> cast() const {
    return BasicTextEncoder<U>(cfg_, params_.template cast<U>());
  }

  BasicTensor<T> encode(const TokenBatch& tokens) const {
    check_tokens(tokens);
    const std::size_t L = cfg_.max_text_len;
    std::vector<std::size_t> positions(tokens.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % L;
    const auto mask = tokens.mask();
    BasicTensor<T> x = ops::add(ops::gather_rows(params_.at("token_embedding"), tokens.ids),
                        ops::gather_rows(params_.at("position_embedding"), positions));
    if (cfg_.use_sa) x = layers::sa_block(x, params_, "sa", cfg_.sa_layers, L, cfg_.sa_heads, mask);
    const BasicTensor<T> pooled = ops::masked_mean_rows(x, L, mask);
    return ops::l2_normalize(layers::mlp(pooled, params_, "head"));
  }

  BasicTensor<T> encode(const std::vector<std::string>& texts) const {
    return encode(TokenBatch::from_texts(texts, cfg_.max_text_len));
  }

 private:
  void check_tokens(const TokenBatch& tokens) const {
    if (tokens.max_len != cfg_.max_text_len || tokens.ids.size() != tokens.batch() * cfg_.max_text_len ||
        tokens.batch() == 0)
      throw ShapeError("text encoder: token batch must be [N," + std::to_string(cfg_.max_text_len) + "]");
    for (std::size_t b = 0; b < tokens.batch(); ++b) {
      if (tokens.lengths[b] == 0) throw InvalidArgument("text encoder: text " + std::to_string(b) + " is empty");
      if (tokens.lengths[b] > cfg_.max_text_len)
        throw InvalidArgument("text encoder: text " + std::to_string(b) + " longer than max_text_len");
    }
    for (std::size_t id : tokens.ids)
      if (id >= cfg_.vocab_size) throw InvalidArgument("text encoder: token id " + std::to_string(id) + " >= vocab_size");
  }

  EncoderConfig cfg_;
  BasicParamSet<T> params_;
};

using TextEncoder = BasicTextEncoder<float>;

}  // namespace brivl
