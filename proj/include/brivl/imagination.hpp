#pragma once

// Imagining what a trained model "sees" for a text: gradient descent on the
// input pixels (visualize_text) or on a generator's code grid with
// per-iteration snapping onto the codebook (generate_from_text). The models
// are never modified; both procedures work on frozen copies.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "brivl/binary_io.hpp"
#include "brivl/config.hpp"
#include "brivl/encoders.hpp"
#include "brivl/errors.hpp"
#include "brivl/generator.hpp"
#include "brivl/ops.hpp"
#include "brivl/rng.hpp"
#include "brivl/tensor.hpp"

namespace brivl {

struct ImagineResult {
  Tensor image;                 // [1, 3, S, S] in [0, 1]
  std::vector<double> cosines;  // cos(z_i, z_t) before the first step and after every step
  std::vector<double> neuron;   // mean target-channel activation, same indexing (empty without a target)
  Tensor codes;                 // final code grid [h*w, d_c] (generation only)
};

namespace imagine_detail {

inline Tensor text_embedding(const TextEncoder& text, const std::string& prompt) {
  NoGradGuard guard;
  return text.encode(std::vector<std::string>{prompt});
}

}  // namespace imagine_detail

// Seeded uniform noise image [1, 3, S, S].
inline Tensor noise_image(std::size_t image_size, std::uint64_t seed) {
  SplitMix64 rng = derive_stream(seed, 0x715);
  std::vector<float> px(3 * image_size * image_size);
  for (auto& v : px) v = rng.uniform();
  return Tensor::from({1, 3, image_size, image_size}, std::move(px));
}

// Gradient descent on the pixels of a noise image to minimise
//   L = -cos(z_i, z_t) - alpha * mean(target channel of the last feature map)
// with pixels clamped to [0, 1] after every step.
inline ImagineResult visualize_text(const std::string& prompt, const ImageEncoder& image_encoder,
                                    const TextEncoder& text_encoder, const VisConfig& cfg) {
  cfg.validate();
  if (cfg.neuron_channel && *cfg.neuron_channel >= kBackboneChannels.back())
    throw InvalidArgument("visualize_text: neuron channel " + std::to_string(*cfg.neuron_channel) +
                          " out of range (channels: " + std::to_string(kBackboneChannels.back()) + ")");
  const ImageEncoder image = image_encoder.frozen_copy();
  const Tensor zt = imagine_detail::text_embedding(text_encoder, prompt);
  const std::size_t side = image.config().image_size;

  ImagineResult out;
  std::vector<float> px = noise_image(side, cfg.seed).values();
  for (std::size_t it = 0;; ++it) {
    Tensor x = Tensor::from({1, 3, side, side}, px, true);
    const ImageForward f = image.forward(x);
    const Tensor cos = ops::cosine_similarity(f.embedding, zt);
    Tensor loss = ops::scale(cos, -1.0f);
    if (cfg.neuron_channel) {
      const Tensor act = ops::mean(ops::slice(f.feature_map, 1, *cfg.neuron_channel, *cfg.neuron_channel + 1));
      out.neuron.push_back(act.item());
      loss = ops::sub(loss, ops::scale(act, cfg.neuron_weight));
    }
    if (!std::isfinite(loss.item()))
      throw NumericalError("visualize_text: non-finite loss at iteration " + std::to_string(it));
    out.cosines.push_back(cos.item());
    if (it == cfg.iterations) break;
    loss.backward();
    const auto g = x.grad();
    for (std::size_t i = 0; i < px.size(); ++i) {
      if (!std::isfinite(g[i])) throw NumericalError("visualize_text: non-finite gradient at iteration " + std::to_string(it));
      px[i] = std::clamp(px[i] - cfg.lr * g[i], 0.0f, 1.0f);
    }
  }
  out.image = Tensor::from({1, 3, side, side}, std::move(px));
  return out;
}

// Gradient descent on a code grid U fed through a frozen generator:
//   U' = U - lambda * dL/dU, L = -cos(image_encoder(g(U)), z_t), U = quantize(U')
// U starts from codebook entries sampled per cell.
inline ImagineResult generate_from_text(const std::string& prompt, const ImageEncoder& image_encoder,
                                        const TextEncoder& text_encoder, const ToyGenerator& generator,
                                        const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (!(cfg.lr > 0.0f)) throw InvalidArgument("generate_from_text: learning rate must be positive");
  if (generator.image_size() != image_encoder.config().image_size)
    throw ShapeError("generate_from_text: generator emits " + std::to_string(generator.image_size()) +
                     " px images, encoder expects " + std::to_string(image_encoder.config().image_size));
  const ImageEncoder image = image_encoder.frozen_copy();
  const ToyGenerator gen = generator.frozen_copy();
  const Codebook& cb = gen.codebook();
  const Tensor zt = imagine_detail::text_embedding(text_encoder, prompt);
  const std::size_t cells = gen.cells(), dc = cb.dim();

  SplitMix64 rng = derive_stream(seed, 0xC0DE);
  std::vector<float> u(cells * dc);
  for (std::size_t c = 0; c < cells; ++c) {
    auto e = cb.entry(rng.below(cb.size()));
    std::copy(e.begin(), e.end(), u.begin() + c * dc);
  }

  ImagineResult out;
  for (std::size_t it = 0;; ++it) {
    Tensor grid = Tensor::from({cells, dc}, u, true);
    const Tensor x = gen.decode(grid);
    const Tensor cos = ops::cosine_similarity(image.encode(x), zt);
    if (!std::isfinite(cos.item()))
      throw NumericalError("generate_from_text: non-finite loss at iteration " + std::to_string(it));
    out.cosines.push_back(cos.item());
    if (it == cfg.iterations) {
      out.image = x.detach();
      break;
    }
    ops::scale(cos, -1.0f).backward();
    const auto g = grid.grad();
    std::vector<float> raw(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (!std::isfinite(g[i]))
        throw NumericalError("generate_from_text: non-finite gradient at iteration " + std::to_string(it));
      raw[i] = u[i] - cfg.lr * g[i];
    }
    u = quantize(Tensor::from({cells, dc}, std::move(raw)), cb).values();
  }
  out.codes = Tensor::from({cells, dc}, std::move(u));
  return out;
}

// ---------------------------------------------------------------------------
// Output files

// Binary PPM (P6, 8-bit) of image [1, 3, S, S] or [3, S, S] with values in [0, 1].
inline std::vector<std::uint8_t> encode_ppm(const Tensor& image) {
  const std::size_t r = image.rank();
  if (!((r == 4 && image.dim(0) == 1 && image.dim(1) == 3) || (r == 3 && image.dim(0) == 3)))
    throw ShapeError("encode_ppm: expected [1,3,H,W] or [3,H,W], got " + shape_str(image.shape()));
  const std::size_t h = image.dim(r - 2), w = image.dim(r - 1), plane = h * w;
  const std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(image.data()[c * plane + p], 0.0f, 1.0f);
      out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0f)));
    }
  return out;
}

inline void write_ppm(const std::string& path, const Tensor& image) { write_file_bytes(path, encode_ppm(image)); }

// Two columns: iteration index and cosine similarity.
inline std::string format_trace(const std::vector<double>& cosines) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < cosines.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu %.9g\n", i, cosines[i]);
    out += buf;
  }
  return out;
}

inline void write_trace(const std::string& path, const std::vector<double>& cosines) {
  const std::string text = format_trace(cosines);
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

}  // namespace brivl
