#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "brivl/errors.hpp"
#include "brivl/params.hpp"

namespace brivl {

struct AdamConfig {
  float lr = 1e-3f;
  float weight_decay = 1e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Per-parameter first and second moments plus the shared step count.
struct AdamState {
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
  std::uint64_t t = 0;

  static AdamState for_params(const ParamSet& params) {
    AdamState s;
    for (const auto& [_, p] : params) {
      s.m.emplace_back(p.numel(), 0.0f);
      s.v.emplace_back(p.numel(), 0.0f);
    }
    return s;
  }
};

// Classic Adam: weight decay is added to the gradient before the moment
// updates. Throws before touching anything if a gradient is missing.
inline void adam_step(ParamSet& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameters");
  for (const auto& [name, p] : params)
    if (!p.has_grad()) throw InvalidArgument("adam_step: parameter " + name + " has no gradient");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(cfg.beta1), static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(cfg.beta2), static_cast<double>(state.t));
  std::size_t k = 0;
  for (auto& [_, p] : params) {
    auto value = p.data();
    auto grad = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const float g = grad[i] + cfg.weight_decay * value[i];
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      value[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
    ++k;
  }
}

}  // namespace brivl
