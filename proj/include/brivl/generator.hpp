#pragma once

// Toy vector-quantized autoencoder standing in for a pre-trained image
// generator: images map to an h x w grid of codebook entries and back.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "brivl/config.hpp"
#include "brivl/datagen.hpp"
#include "brivl/encoders.hpp"
#include "brivl/errors.hpp"
#include "brivl/ops.hpp"
#include "brivl/optim.hpp"
#include "brivl/params.hpp"
#include "brivl/rng.hpp"
#include "brivl/tensor.hpp"

namespace brivl {

// N_c entries of dimension d_c, stored as a [N_c, d_c] tensor.
class Codebook {
 public:
  Codebook() = default;
  explicit Codebook(Tensor entries) : entries_(std::move(entries)) { validate(); }

  std::size_t size() const { return entries_.dim(0); }
  std::size_t dim() const { return entries_.dim(1); }
  const Tensor& entries() const { return entries_; }
  Tensor& entries() { return entries_; }
  std::span<const float> entry(std::size_t k) const { return entries_.data().subspan(k * dim(), dim()); }

  void validate() const {
    if (!entries_.defined() || entries_.rank() != 2 || entries_.numel() == 0) throw InvalidArgument("codebook: empty");
    if (entries_.dim(0) < 2) throw InvalidArgument("codebook: needs at least 2 entries");
    for (float v : entries_.data())
      if (!std::isfinite(v)) throw NumericalError("codebook: non-finite entry");
  }

 private:
  Tensor entries_;
};

// Index of the nearest entry (squared Euclidean distance, accumulated in
// double) for every row of grid [cells, d_c]. Ties go to the smallest index.
inline std::vector<std::size_t> nearest_codes(const Tensor& grid, const Tensor& codebook) {
  if (!codebook.defined() || codebook.rank() != 2 || codebook.dim(0) == 0) throw InvalidArgument("quantize: empty codebook");
  if (grid.rank() != 2 || grid.dim(1) != codebook.dim(1))
    throw ShapeError("quantize: grid " + shape_str(grid.shape()) + " does not match codebook " +
                     shape_str(codebook.shape()));
  const std::size_t d = grid.dim(1), nc = codebook.dim(0);
  const float* g = grid.data().data();
  const float* c = codebook.data().data();
  std::vector<std::size_t> idx(grid.dim(0));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < nc; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(g[r * d + j]) - c[k * d + j];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        idx[r] = k;
      }
    }
  }
  return idx;
}

// Snaps every cell of U' [cells, d_c] onto its nearest codebook entry.
inline Tensor quantize(const Tensor& grid, const Codebook& codebook) {
  if (!codebook.entries().defined() || codebook.entries().numel() == 0) throw InvalidArgument("quantize: empty codebook");
  const auto idx = nearest_codes(grid, codebook.entries());
  const std::size_t d = codebook.dim();
  std::vector<float> out(grid.numel());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    auto e = codebook.entry(idx[r]);
    std::copy(e.begin(), e.end(), out.begin() + r * d);
  }
  return Tensor::from(grid.shape(), std::move(out));
}

struct VqLosses {
  Tensor total;
  Tensor reconstruction;
  Tensor codebook;
  Tensor commitment;
  std::vector<std::size_t> codes;
};

// Encoder: per stage conv3x3(pad 1) + relu + 2x2 average pool, then a 1x1
// conv to d_c. Decoder: a 1x1 conv from d_c, per stage a stride-2 2x2
// transposed conv + relu, then conv3x3(pad 1) to RGB and a sigmoid.
class ToyGenerator {
 public:
  static constexpr float kCommitment = 0.25f;

  ToyGenerator(const GeneratorConfig& cfg, std::size_t image_size, SplitMix64& rng)
      : cfg_(cfg), image_size_(image_size) {
    validate();
    const std::size_t dc = cfg.code_dim;
    std::size_t in = 3;
    for (std::size_t s = 0; s < stages(); ++s) {
      layers::add_conv(params_, "enc.conv" + std::to_string(s), in, channels(s), 3, rng);
      in = channels(s);
    }
    layers::add_conv(params_, "enc.proj", in, dc, 1, rng, 1.0f);
    layers::add_conv(params_, "dec.proj", dc, channels(stages() - 1), 1, rng);
    for (std::size_t s = stages(); s-- > 0;) {
      const std::size_t from = channels(s), to = s ? channels(s - 1) : channels(0);
      params_.add("dec.up" + std::to_string(s) + ".w", init::kaiming_uniform({from, to, 2, 2}, from, rng));
      params_.add("dec.up" + std::to_string(s) + ".b", init::zeros({to}));
    }
    layers::add_conv(params_, "dec.out", channels(0), 3, 3, rng, 1.0f);
    std::vector<float> cb(cfg.codebook_size * dc);
    for (auto& v : cb) v = rng.uniform(-1.0f, 1.0f);
    codebook_ = Codebook(Tensor::from({cfg.codebook_size, dc}, std::move(cb), true));
  }

  ToyGenerator(const GeneratorConfig& cfg, std::size_t image_size, ParamSet params, Codebook codebook)
      : cfg_(cfg), image_size_(image_size), params_(std::move(params)), codebook_(std::move(codebook)) {
    validate();
    SplitMix64 rng(0);
    const ToyGenerator shape_ref(cfg, image_size, rng);
    params_.check_mirrors(shape_ref.params_, "ToyGenerator");
    if (codebook_.size() != cfg.codebook_size || codebook_.dim() != cfg.code_dim)
      throw ShapeError("ToyGenerator: codebook " + shape_str(codebook_.entries().shape()) + " does not match config");
  }

  const GeneratorConfig& config() const { return cfg_; }
  std::size_t image_size() const { return image_size_; }
  std::size_t grid() const { return cfg_.grid; }
  std::size_t cells() const { return cfg_.grid * cfg_.grid; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  Codebook& codebook() { return codebook_; }
  const Codebook& codebook() const { return codebook_; }

  ToyGenerator frozen_copy() const {
    Tensor cb = codebook_.entries().detach();
    cb.set_requires_grad(false);
    return ToyGenerator(cfg_, image_size_, params_.clone(false), Codebook(cb));
  }

  // images [N,3,S,S] -> pre-quantization codes [N*h*w, d_c]
  Tensor encode(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != image_size_ || images.dim(3) != image_size_)
      throw ShapeError("ToyGenerator::encode: expected [N,3," + std::to_string(image_size_) + "," +
                       std::to_string(image_size_) + "], got " + shape_str(images.shape()));
    Tensor h = images;
    for (std::size_t s = 0; s < stages(); ++s) {
      const std::string p = "enc.conv" + std::to_string(s);
      h = ops::avg_pool2d(ops::relu(ops::conv2d(h, params_.at(p + ".w"), params_.at(p + ".b"), 1)), 2, 2);
    }
    h = ops::conv2d(h, params_.at("enc.proj.w"), params_.at("enc.proj.b"));
    return ops::nchw_to_rows(h);
  }

  // Code grid [N*h*w, d_c] -> images [N,3,S,S] in (0,1).
  Tensor decode(const Tensor& grid) const {
    if (grid.rank() != 2 || grid.dim(1) != cfg_.code_dim || grid.dim(0) % cells() != 0)
      throw ShapeError("ToyGenerator::decode: expected [n*" + std::to_string(cells()) + "," +
                       std::to_string(cfg_.code_dim) + "], got " + shape_str(grid.shape()));
    Tensor h = ops::rows_to_nchw(grid, grid.dim(0) / cells(), cfg_.grid, cfg_.grid);
    h = ops::relu(ops::conv2d(h, params_.at("dec.proj.w"), params_.at("dec.proj.b")));
    for (std::size_t s = stages(); s-- > 0;) {
      const std::string p = "dec.up" + std::to_string(s);
      h = ops::relu(ops::conv_transpose2d(h, params_.at(p + ".w"), params_.at(p + ".b"), 2));
    }
    return ops::sigmoid(ops::conv2d(h, params_.at("dec.out.w"), params_.at("dec.out.b"), 1));
  }

  // decode(quantize(encode(x))) without gradients.
  Tensor reconstruct(const Tensor& images) const {
    NoGradGuard guard;
    return decode(quantize(encode(images), codebook_));
  }

  // Reconstruction MSE plus codebook and commitment terms; the quantizer
  // passes gradients straight through to the encoder.
  VqLosses losses(const Tensor& images) const {
    VqLosses out;
    const Tensor ze = encode(images);
    out.codes = nearest_codes(ze, codebook_.entries());
    const Tensor zq = ops::gather_rows(codebook_.entries(), out.codes);
    const Tensor ze_const = ze.detach();
    const Tensor zq_const = zq.detach();
    const Tensor st = ops::add(ze, ops::sub(zq_const, ze_const).detach());
    const Tensor x = decode(st);
    auto mse = [](const Tensor& a, const Tensor& b) {
      const Tensor d = ops::sub(a, b);
      return ops::mean(ops::mul(d, d));
    };
    out.reconstruction = mse(x, images);
    out.codebook = mse(zq, ze_const);
    out.commitment = mse(ze, zq_const);
    out.total = ops::add(ops::add(out.reconstruction, out.codebook), ops::scale(out.commitment, kCommitment));
    return out;
  }

 private:
  std::size_t stages() const { return static_cast<std::size_t>(std::lround(std::log2(image_size_ / cfg_.grid))); }
  static std::size_t channels(std::size_t stage) { return stage == 0 ? 16 : 32; }

  void validate() const {
    cfg_.validate();
    if (image_size_ == 0 || image_size_ % cfg_.grid != 0)
      throw InvalidArgument("ToyGenerator: image size " + std::to_string(image_size_) + " not a multiple of grid " +
                            std::to_string(cfg_.grid));
    const std::size_t ratio = image_size_ / cfg_.grid;
    if (ratio < 2 || (ratio & (ratio - 1)) != 0)
      throw InvalidArgument("ToyGenerator: image size / grid must be a power of two >= 2");
  }

  GeneratorConfig cfg_;
  std::size_t image_size_;
  ParamSet params_;
  Codebook codebook_;
};

struct GeneratorTrainLog {
  std::vector<float> losses;  // total loss per step
  bool non_decreasing_start = false;
  std::size_t restarts = 0;
};

// Fraction of codebook entries chosen at least once for the given images.
inline double codebook_usage(const ToyGenerator& g, const Tensor& images) {
  NoGradGuard guard;
  const auto codes = nearest_codes(g.encode(images), g.codebook().entries());
  std::vector<bool> used(g.codebook().size(), false);
  for (std::size_t c : codes) used[c] = true;
  std::size_t n = 0;
  for (bool u : used) n += u;
  return static_cast<double>(n) / static_cast<double>(used.size());
}

inline double reconstruction_mse(const ToyGenerator& g, const Tensor& images) {
  const Tensor r = g.reconstruct(images);
  double acc = 0.0;
  for (std::size_t i = 0; i < r.numel(); ++i) {
    const double d = static_cast<double>(r.data()[i]) - images.data()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(r.numel());
}

// Trains the generator by reconstruction on the training split. The codebook
// starts from encoder outputs of the first batch; entries unused over a
// window of steps are restarted at random encoder outputs.
inline GeneratorTrainLog train_toy_generator(ToyGenerator& g, const PairDataset& ds, std::uint64_t seed,
                                             const std::function<void(std::size_t, float)>& on_step = {}) {
  constexpr std::size_t kBatch = 32, kRestartWindow = 100;
  const auto train = ds.indices(Split::kTrain);
  if (train.empty()) throw InvalidArgument("train_toy_generator: no training records");
  if (ds.image_size != g.image_size())
    throw ShapeError("train_toy_generator: dataset images are " + std::to_string(ds.image_size) + " px, generator expects " +
                     std::to_string(g.image_size()));
  SplitMix64 rng = derive_stream(seed, 0x6E4);
  auto sample = [&] {
    std::vector<std::size_t> idx(std::min(kBatch, train.size()));
    for (auto& i : idx) i = train[rng.below(train.size())];
    return images_to_tensor(ds, idx);
  };

  Codebook& cb = g.codebook();
  {
    NoGradGuard guard;
    const Tensor ze = g.encode(sample());
    auto dst = cb.entries().data();
    for (std::size_t k = 0; k < cb.size(); ++k) {
      auto src = ze.data().subspan(rng.below(ze.dim(0)) * cb.dim(), cb.dim());
      std::copy(src.begin(), src.end(), dst.begin() + k * cb.dim());
    }
  }

  ParamSet all;
  for (auto& [n, t] : g.params()) all.add(n, t);
  all.add("codebook", cb.entries());
  AdamState adam = AdamState::for_params(all);
  const AdamConfig acfg{g.config().train_lr, 0.0f};

  GeneratorTrainLog log;
  std::vector<std::size_t> usage(cb.size(), 0);
  for (std::size_t step = 0; step < g.config().train_steps; ++step) {
    const Tensor images = sample();
    all.zero_grad();
    const VqLosses l = g.losses(images);
    const float loss = l.total.item();
    if (!std::isfinite(loss)) throw NumericalError("train_toy_generator: non-finite loss at step " + std::to_string(step));
    l.total.backward();
    for (auto& [_, p] : all)
      if (!p.has_grad()) p.mutable_grad();
    adam_step(all, adam, acfg);
    log.losses.push_back(loss);
    for (std::size_t c : l.codes) ++usage[c];
    if (on_step) on_step(step, loss);

    if ((step + 1) % kRestartWindow == 0) {
      NoGradGuard guard;
      const Tensor ze = g.encode(sample());
      auto dst = cb.entries().data();
      for (std::size_t k = 0; k < cb.size(); ++k) {
        if (usage[k] == 0) {
          auto src = ze.data().subspan(rng.below(ze.dim(0)) * cb.dim(), cb.dim());
          std::copy(src.begin(), src.end(), dst.begin() + k * cb.dim());
          std::fill(adam.m.back().begin() + k * cb.dim(), adam.m.back().begin() + (k + 1) * cb.dim(), 0.0f);
          std::fill(adam.v.back().begin() + k * cb.dim(), adam.v.back().begin() + (k + 1) * cb.dim(), 0.0f);
          ++log.restarts;
        }
        usage[k] = 0;
      }
    }
  }
  all.zero_grad();
  if (log.losses.size() >= 100) {
    auto first = log.losses.begin();
    log.non_decreasing_start = *std::min_element(first + 1, first + 100) >= *first;
  }
  return log;
}

}  // namespace brivl
