#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "brivl/errors.hpp"
#include "brivl/ops.hpp"
#include "brivl/params.hpp"
#include "brivl/tensor.hpp"

namespace brivl {

// theta_m <- m * theta_m + (1 - m) * theta for every parameter tensor.
inline void momentum_update(const ParamSet& online, ParamSet& shadow, float m) {
  if (!(m >= 0.0f && m <= 1.0f)) throw InvalidArgument("momentum_update: m must lie in [0,1]");
  shadow.check_mirrors(online, "momentum_update");
  auto src = online.begin();
  for (auto dst = shadow.begin(); dst != shadow.end(); ++dst, ++src) {
    auto theta = src->second.data();
    auto theta_m = dst->second.data();
    if (m == 0.0f) {
      std::copy(theta.begin(), theta.end(), theta_m.begin());
      continue;
    }
    for (std::size_t i = 0; i < theta.size(); ++i) theta_m[i] += (1.0f - m) * (theta[i] - theta_m[i]);
  }
}

// Fixed-capacity FIFO of d-dimensional embeddings. Every pushed row gets a
// monotonically increasing id, so callers locate their positives by id
// rather than by value.
class NegativeQueue {
 public:
  NegativeQueue() = default;
  NegativeQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim), data_(capacity * dim) {
    if (capacity == 0 || dim == 0) throw InvalidArgument("NegativeQueue: capacity and dim must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  bool full() const { return size_ == capacity_; }
  std::uint64_t next_id() const { return next_id_; }

  // Appends the rows of batch [n, d], evicting the oldest entries when full.
  // Returns the ids given to the new rows.
  template <typename T>
  std::vector<std::uint64_t> enqueue(const BasicTensor<T>& batch) {
    if (batch.rank() != 2 || batch.dim(1) != dim_)
      throw ShapeError("enqueue: expected [n," + std::to_string(dim_) + "], got " + shape_str(batch.shape()));
    const std::size_t n = batch.dim(0);
    if (n > capacity_)
      throw InvalidArgument("enqueue: batch of " + std::to_string(n) + " exceeds capacity " + std::to_string(capacity_));
    std::vector<std::uint64_t> ids;
    ids.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
      if (size_ == capacity_) {
        head_ = (head_ + 1) % capacity_;
        --size_;
      }
      const std::size_t slot = (head_ + size_) % capacity_;
      const T* row = batch.data().data() + r * dim_;
      for (std::size_t c = 0; c < dim_; ++c) data_[slot * dim_ + c] = static_cast<float>(row[c]);
      ++size_;
      ids.push_back(next_id_++);
    }
    return ids;
  }

  // Position counted from the oldest entry, or nullopt once evicted.
  std::optional<std::size_t> position_of(std::uint64_t id) const {
    const std::uint64_t oldest = next_id_ - size_;
    if (id < oldest || id >= next_id_) return std::nullopt;
    return static_cast<std::size_t>(id - oldest);
  }

  std::span<const float> entry(std::size_t position) const {
    if (position >= size_) throw InvalidArgument("NegativeQueue: position out of range");
    return {data_.data() + ((head_ + position) % capacity_) * dim_, dim_};
  }

  // Entries oldest first as a constant [size, d] tensor.
  template <typename T = float>
  BasicTensor<T> entries() const {
    if (size_ == 0) throw InvalidArgument("NegativeQueue: empty");
    std::vector<T> out(size_ * dim_);
    for (std::size_t p = 0; p < size_; ++p) {
      auto e = entry(p);
      std::copy(e.begin(), e.end(), out.begin() + p * dim_);
    }
    return BasicTensor<T>::from({size_, dim_}, std::move(out));
  }

  // Rebuilds a queue from its entries (oldest first) and id counter.
  static NegativeQueue restore(std::size_t capacity, std::size_t dim, const std::vector<float>& entries,
                               std::uint64_t next_id) {
    NegativeQueue q(capacity, dim);
    const std::size_t n = entries.size() / dim;
    if (n * dim != entries.size() || n > capacity || next_id < n)
      throw InvalidArgument("NegativeQueue::restore: inconsistent entries");
    std::copy(entries.begin(), entries.end(), q.data_.begin());
    q.size_ = n;
    q.next_id_ = next_id;
    return q;
  }

 private:
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::vector<float> data_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
  std::uint64_t next_id_ = 0;
};

// InfoNCE of each anchor against its positive (identified by queue id) and
// every other queue entry:
//   L = -1/N_b sum_i log( exp(z_i.p_i/tau) / sum_{q in Q} exp(z_i.q/tau) )
// Queue entries are constants; gradients flow into the anchors only.
template <typename T>
BasicTensor<T> info_nce(const BasicTensor<T>& anchors, const NegativeQueue& queue,
                        const std::vector<std::uint64_t>& positive_ids, std::type_identity_t<T> tau) {
  if (!(tau > 0.0f)) throw InvalidArgument("info_nce: tau must be positive");
  if (anchors.rank() != 2 || anchors.dim(1) != queue.dim())
    throw ShapeError("info_nce: anchors " + shape_str(anchors.shape()) + " do not match queue dim " +
                     std::to_string(queue.dim()));
  if (positive_ids.size() != anchors.dim(0)) throw ShapeError("info_nce: one positive id per anchor required");
  std::vector<std::size_t> targets;
  targets.reserve(positive_ids.size());
  for (std::uint64_t id : positive_ids) {
    const auto pos = queue.position_of(id);
    if (!pos) throw InvalidArgument("info_nce: positive id " + std::to_string(id) + " is not in the queue");
    targets.push_back(*pos);
  }
  const BasicTensor<T> keys_t = ops::transpose(queue.entries<T>());
  const BasicTensor<T> logits = ops::scale(ops::matmul(anchors, keys_t), T(1) / tau);
  // One positive column plus |Q|-1 negatives per row.
  if (logits.dim(1) != queue.size()) throw ShapeError("info_nce: logit columns differ from queue size");
  return ops::cross_entropy(logits, targets);
}

template <typename T>
struct BasicLossTerms {
  BasicTensor<T> total;
  BasicTensor<T> i2t;
  BasicTensor<T> t2i;
};

using LossTerms = BasicLossTerms<float>;

// L_total = L_i2t (image anchors vs text queue) + L_t2i (text anchors vs image queue).
template <typename T>
BasicLossTerms<T> total_loss(const BasicTensor<T>& image_anchors, const BasicTensor<T>& text_anchors,
                             const NegativeQueue& text_queue, const std::vector<std::uint64_t>& text_positive_ids,
                             const NegativeQueue& image_queue, const std::vector<std::uint64_t>& image_positive_ids,
                             std::type_identity_t<T> tau) {
  BasicLossTerms<T> t;
  t.i2t = info_nce(image_anchors, text_queue, text_positive_ids, tau);
  t.t2i = info_nce(text_anchors, image_queue, image_positive_ids, tau);
  t.total = ops::add(t.i2t, t.t2i);
  return t;
}

// In-batch (SimCLR-style) symmetric loss: cross-entropy over the N_b x N_b
// similarity matrix with the diagonal as targets, averaged over directions.
template <typename T>
BasicLossTerms<T> in_batch_loss(const BasicTensor<T>& image_anchors, const BasicTensor<T>& text_anchors,
                                std::type_identity_t<T> tau) {
  if (!(tau > 0.0f)) throw InvalidArgument("in_batch_loss: tau must be positive");
  if (image_anchors.rank() != 2 || image_anchors.shape() != text_anchors.shape())
    throw ShapeError("in_batch_loss: anchors " + shape_str(image_anchors.shape()) + " and " +
                     shape_str(text_anchors.shape()) + " differ");
  const std::size_t n = image_anchors.dim(0);
  if (n < 2) throw InvalidArgument("in_batch_loss: needs at least 2 pairs per batch");
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  const BasicTensor<T> logits = ops::scale(ops::matmul(image_anchors, ops::transpose(text_anchors)), T(1) / tau);
  BasicLossTerms<T> t;
  t.i2t = ops::cross_entropy(logits, diag);
  t.t2i = ops::cross_entropy(ops::transpose(logits), diag);
  t.total = ops::scale(ops::add(t.i2t, t.t2i), T(0.5));
  return t;
}

}  // namespace brivl
