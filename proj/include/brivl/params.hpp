#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "brivl/errors.hpp"
#include "brivl/rng.hpp"
#include "brivl/tensor.hpp"

namespace brivl {

// Ordered, named collection of leaf tensors making up one model.
template <typename T>
class BasicParamSet {
 public:
  using TensorType = BasicTensor<T>;

  TensorType& add(std::string name, TensorType t) {
    for (const auto& [n, _] : items_)
      if (n == name) throw InvalidArgument("ParamSet: duplicate parameter " + name);
    t.set_requires_grad(true);
    items_.emplace_back(std::move(name), std::move(t));
    return items_.back().second;
  }

  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  const TensorType& at(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw InvalidArgument("ParamSet: no parameter named " + name);
  }
  TensorType& at(const std::string& name) { return const_cast<TensorType&>(std::as_const(*this).at(name)); }

  // Deep copy; the copy's tensors share nothing with this set.
  BasicParamSet clone(bool requires_grad = true) const {
    BasicParamSet out;
    for (const auto& [n, t] : items_) {
      TensorType c = t.detach();
      c.set_requires_grad(requires_grad);
      out.items_.emplace_back(n, std::move(c));
    }
    return out;
  }

  // Same names and values converted to scalar type U (fresh leaves).
  template <typename U>
  BasicParamSet<U> cast(bool requires_grad = true) const {
    BasicParamSet<U> out;
    for (const auto& [n, t] : items_) {
      std::vector<U> v(t.values().begin(), t.values().end());
      out.add(n, BasicTensor<U>::from(t.shape(), std::move(v)));
      if (!requires_grad) out.at(n).set_requires_grad(false);
    }
    return out;
  }

  void zero_grad() {
    for (auto& [_, t] : items_) t.zero_grad();
  }

  void copy_values_from(const BasicParamSet& other) {
    check_mirrors(other, "copy_values_from");
    for (std::size_t i = 0; i < items_.size(); ++i) {
      auto src = other.items_[i].second.data();
      auto dst = items_[i].second.data();
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }

  void check_mirrors(const BasicParamSet& other, const char* op) const {
    if (other.items_.size() != items_.size())
      throw ShapeError(std::string(op) + ": parameter counts differ");
    for (std::size_t i = 0; i < items_.size(); ++i)
      if (items_[i].first != other.items_[i].first || items_[i].second.shape() != other.items_[i].second.shape())
        throw ShapeError(std::string(op) + ": parameter " + items_[i].first + " " +
                         shape_str(items_[i].second.shape()) + " does not mirror " + other.items_[i].first + " " +
                         shape_str(other.items_[i].second.shape()));
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.numel();
    return n;
  }

  // FNV-1a over names and raw value bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) h = (h ^ p[i]) * 1099511628211ULL;
    };
    for (const auto& [n, t] : items_) {
      mix(reinterpret_cast<const unsigned char*>(n.data()), n.size());
      mix(reinterpret_cast<const unsigned char*>(t.data().data()), t.numel() * sizeof(T));
    }
    return h;
  }

 private:
  std::vector<std::pair<std::string, TensorType>> items_;
};

using ParamSet = BasicParamSet<float>;
using DParamSet = BasicParamSet<double>;

namespace init {

// Kaiming uniform: bound = gain * sqrt(3 / fan_in), so the output variance
// is gain^2 / 3 * 3 / fan_in per input. Use gain sqrt(2) ahead of a ReLU.
inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, SplitMix64& rng, float gain = 1.0f) {
  const float bound = gain * std::sqrt(3.0f / static_cast<float>(fan_in));
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }
inline Tensor ones(Shape shape) { return Tensor::full(std::move(shape), 1.0f, true); }

}  // namespace init

}  // namespace brivl
