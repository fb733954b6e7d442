#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "brivl/config.hpp"
#include "brivl/contrastive.hpp"
#include "brivl/datagen.hpp"
#include "brivl/encoders.hpp"
#include "brivl/optim.hpp"

namespace brivl {

struct PairBatch {
  Tensor images;  // [N,3,S,S]
  TokenBatch tokens;
};

struct StepMetrics {
  std::uint64_t step = 0;
  float loss_total = 0.0f;
  float loss_i2t = 0.0f;
  float loss_t2i = 0.0f;
  std::size_t queue_fill = 0;
};

inline std::string metrics_header() { return "step,loss_total,loss_i2t,loss_t2i,queue_fill"; }

inline std::string format_metrics(const StepMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%llu,%.9g,%.9g,%.9g,%zu", static_cast<unsigned long long>(m.step),
                static_cast<double>(m.loss_total), static_cast<double>(m.loss_i2t), static_cast<double>(m.loss_t2i),
                m.queue_fill);
  return buf;
}

inline PairBatch make_batch(const PairDataset& ds, const std::vector<std::size_t>& indices, std::size_t max_text_len) {
  PairBatch b;
  b.images = images_to_tensor(ds, indices);
  std::vector<std::string> texts;
  texts.reserve(indices.size());
  for (std::size_t i : indices) texts.push_back(ds.records.at(i).text);
  b.tokens = TokenBatch::from_texts(texts, max_text_len);
  return b;
}

// Random graying (p = 0.2, luminance replicated to all channels) and color
// jitter (brightness and contrast factors uniform in [0.8, 1.2]).
inline Tensor augment_images(const Tensor& images, SplitMix64& rng) {
  const std::size_t n = images.dim(0), plane = images.dim(2) * images.dim(3);
  std::vector<float> out(images.values());
  for (std::size_t i = 0; i < n; ++i) {
    float* px = out.data() + i * 3 * plane;
    const bool gray = rng.bernoulli(0.2);
    const float brightness = rng.uniform(0.8f, 1.2f);
    const float contrast = rng.uniform(0.8f, 1.2f);
    if (gray)
      for (std::size_t p = 0; p < plane; ++p) {
        const float y = 0.299f * px[p] + 0.587f * px[plane + p] + 0.114f * px[2 * plane + p];
        px[p] = px[plane + p] = px[2 * plane + p] = y;
      }
    double mean = 0.0;
    for (std::size_t k = 0; k < 3 * plane; ++k) mean += px[k];
    const float mu = static_cast<float>(mean / (3 * plane));
    for (std::size_t k = 0; k < 3 * plane; ++k)
      px[k] = std::clamp(((px[k] - mu) * contrast + mu) * brightness, 0.0f, 1.0f);
  }
  return Tensor::from(images.shape(), std::move(out));
}

// Four-tower training state: online and momentum encoders for both
// modalities, their negative queues and the online towers' Adam moments.
class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg)
      : cfg_(cfg),
        image_(make_image(cfg)),
        text_(make_text(cfg)),
        image_m_(image_.frozen_copy()),
        text_m_(text_.frozen_copy()) {
    cfg.validate();
    adam_image_ = AdamState::for_params(image_.params());
    adam_text_ = AdamState::for_params(text_.params());
    image_queue_ = NegativeQueue(cfg.trainer.queue_size, cfg.encoder.embed_dim);
    text_queue_ = NegativeQueue(cfg.trainer.queue_size, cfg.encoder.embed_dim);
  }

  const RunConfig& config() const { return cfg_; }
  ImageEncoder& image_encoder() { return image_; }
  TextEncoder& text_encoder() { return text_; }
  const ImageEncoder& image_encoder() const { return image_; }
  const TextEncoder& text_encoder() const { return text_; }
  ImageEncoder& image_momentum() { return image_m_; }
  TextEncoder& text_momentum() { return text_m_; }
  const ImageEncoder& image_momentum() const { return image_m_; }
  const TextEncoder& text_momentum() const { return text_m_; }
  NegativeQueue& image_queue() { return image_queue_; }
  NegativeQueue& text_queue() { return text_queue_; }
  const NegativeQueue& image_queue() const { return image_queue_; }
  const NegativeQueue& text_queue() const { return text_queue_; }
  AdamState& adam_image() { return adam_image_; }
  AdamState& adam_text() { return adam_text_; }
  const AdamState& adam_image() const { return adam_image_; }
  const AdamState& adam_text() const { return adam_text_; }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }
  std::uint64_t epoch() const { return epoch_; }
  void set_epoch(std::uint64_t e) { epoch_ = e; }

  bool queue_mode() const { return cfg_.trainer.loss_mode == LossMode::kQueue; }

  // Number of enqueue-only steps before the queues are full.
  std::size_t warmup_steps() const {
    if (!queue_mode()) return 0;
    return (cfg_.trainer.queue_size + cfg_.trainer.batch_size - 1) / cfg_.trainer.batch_size;
  }

  bool warm() const { return !queue_mode() || image_queue_.full(); }

  // Momentum forward and enqueue only; no loss, no parameter change.
  std::size_t warmup_step(const PairBatch& batch) {
    check_batch(batch);
    NoGradGuard guard;
    image_queue_.enqueue(image_m_.encode(batch.images));
    text_queue_.enqueue(text_m_.encode(batch.tokens));
    return image_queue_.size();
  }

  // One optimization step. Either every piece of state advances or none does.
  StepMetrics train_step(const PairBatch& batch) {
    check_batch(batch);
    if (!warm()) throw InvalidArgument("train_step: queues are not warm; run warm-up first");
    const Tensor images = training_images(batch.images, step_);

    image_.params().zero_grad();
    text_.params().zero_grad();
    NegativeQueue iq = image_queue_, tq = text_queue_;
    const LossTerms loss = forward_loss(images, batch.tokens, iq, tq);
    StepMetrics m = to_metrics(loss, queue_mode() ? iq.size() : 0);
    if (!std::isfinite(m.loss_total) || !std::isfinite(m.loss_i2t) || !std::isfinite(m.loss_t2i))
      throw NumericalError("train_step: non-finite loss at step " + std::to_string(step_));

    loss.total.backward();
    for (const ParamSet* ps : {&image_.params(), &text_.params()})
      for (const auto& [name, p] : *ps) {
        if (!p.has_grad()) continue;
        for (float g : p.grad())
          if (!std::isfinite(g)) throw NumericalError("train_step: non-finite gradient in " + name);
      }
    // Parameters that the loss does not reach (none in practice) get a zero gradient.
    for (ParamSet* ps : {&image_.params(), &text_.params()})
      for (auto& [_, p] : *ps)
        if (!p.has_grad()) p.mutable_grad();

    const AdamConfig adam{cfg_.trainer.lr, cfg_.trainer.weight_decay};
    adam_step(image_.params(), adam_image_, adam);
    adam_step(text_.params(), adam_text_, adam);
    if (queue_mode()) {
      momentum_update(image_.params(), image_m_.params(), cfg_.trainer.momentum);
      momentum_update(text_.params(), text_m_.params(), cfg_.trainer.momentum);
      image_queue_ = std::move(iq);
      text_queue_ = std::move(tq);
    }
    image_.params().zero_grad();
    text_.params().zero_grad();
    m.step = ++step_;
    return m;
  }

  // The loss the next train_step would see on this batch, given queue
  // snapshots (taken before the step), without augmentation or updates.
  StepMetrics evaluate_loss(const PairBatch& batch, const NegativeQueue& image_queue,
                            const NegativeQueue& text_queue) const {
    check_batch(batch);
    NoGradGuard guard;
    NegativeQueue iq = image_queue, tq = text_queue;
    return to_metrics(forward_loss(batch.images, batch.tokens, iq, tq), iq.size());
  }

  // Deterministic per-epoch shuffle of the training indices.
  std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& train_indices, std::uint64_t epoch) const {
    std::vector<std::size_t> order = train_indices;
    SplitMix64 rng = derive_stream(cfg_.trainer.seed ^ 0x5EEDF00DULL, epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
  }

  // Fills the queues from the start of a dedicated shuffle.
  void warmup(const PairDataset& ds, const std::vector<std::size_t>& train_indices) {
    const std::size_t nb = cfg_.trainer.batch_size;
    const auto order = epoch_order(train_indices, 1u << 30);
    std::size_t offset = 0;
    while (!warm()) {
      if (offset + nb > order.size()) offset = 0;
      warmup_step(make_batch(ds, {order.begin() + offset, order.begin() + offset + nb}, cfg_.encoder.max_text_len));
      offset += nb;
    }
  }

  // Runs one full epoch (incomplete trailing batch dropped) and advances the
  // epoch counter.
  void run_epoch(const PairDataset& ds, const std::vector<std::size_t>& train_indices,
                 const std::function<void(const StepMetrics&)>& on_step = {}) {
    const std::size_t nb = cfg_.trainer.batch_size;
    if (train_indices.size() < nb) throw InvalidArgument("run_epoch: fewer training records than one batch");
    const auto order = epoch_order(train_indices, epoch_);
    for (std::size_t off = 0; off + nb <= order.size(); off += nb) {
      const auto m =
          train_step(make_batch(ds, {order.begin() + off, order.begin() + off + nb}, cfg_.encoder.max_text_len));
      if (on_step) on_step(m);
    }
    ++epoch_;
  }

 private:
  static ImageEncoder make_image(const RunConfig& cfg) {
    SplitMix64 rng = derive_stream(cfg.trainer.seed, 0x1A);
    return ImageEncoder(cfg.encoder, rng);
  }
  static TextEncoder make_text(const RunConfig& cfg) {
    SplitMix64 rng = derive_stream(cfg.trainer.seed, 0x7E);
    return TextEncoder(cfg.encoder, rng);
  }

  Tensor training_images(const Tensor& images, std::uint64_t step) const {
    if (!cfg_.trainer.augment) return images;
    SplitMix64 rng = derive_stream(cfg_.trainer.seed ^ 0xA116ULL, step);
    return augment_images(images, rng);
  }

  void check_batch(const PairBatch& batch) const {
    const std::size_t n = batch.images.dim(0);
    if (batch.tokens.batch() != n) throw ShapeError("train_step: image and text batch sizes differ");
    if (queue_mode() && n != cfg_.trainer.batch_size)
      throw ShapeError("train_step: queue mode needs batches of exactly " + std::to_string(cfg_.trainer.batch_size));
  }

  // Online forward, momentum forward, enqueue into the given queues, loss.
  LossTerms forward_loss(const Tensor& images, const TokenBatch& tokens, NegativeQueue& iq, NegativeQueue& tq) const {
    const Tensor zi = image_.encode(images);
    const Tensor zt = text_.encode(tokens);
    if (!queue_mode()) return in_batch_loss(zi, zt, cfg_.trainer.tau);
    Tensor ki, kt;
    {
      NoGradGuard guard;
      ki = image_m_.encode(images);
      kt = text_m_.encode(tokens);
    }
    const auto image_ids = iq.enqueue(ki);
    const auto text_ids = tq.enqueue(kt);
    return total_loss(zi, zt, tq, text_ids, iq, image_ids, cfg_.trainer.tau);
  }

  static StepMetrics to_metrics(const LossTerms& loss, std::size_t fill) {
    StepMetrics m;
    m.loss_total = loss.total.item();
    m.loss_i2t = loss.i2t.item();
    m.loss_t2i = loss.t2i.item();
    m.queue_fill = fill;
    return m;
  }

  RunConfig cfg_;
  ImageEncoder image_;
  TextEncoder text_;
  ImageEncoder image_m_;
  TextEncoder text_m_;
  AdamState adam_image_;
  AdamState adam_text_;
  NegativeQueue image_queue_;
  NegativeQueue text_queue_;
  std::uint64_t step_ = 0;
  std::uint64_t epoch_ = 0;
};

}  // namespace brivl
