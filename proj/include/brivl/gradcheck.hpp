#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "brivl/errors.hpp"
#include "brivl/rng.hpp"
#include "brivl/tensor.hpp"

namespace brivl {

struct GradCheckReport {
  std::string op;
  double max_rel_error = 0.0;
  std::vector<double> errors;  // one per checked element

  bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  // Gradients far below the floor are compared in absolute terms.
  double floor = 1e-2;
  // Check at most this many elements (0 = all), chosen by seed.
  std::size_t max_elements = 0;
  std::uint64_t seed = 7;
};

template <typename T>
using ScalarFunction = std::function<BasicTensor<T>(const BasicTensor<T>&)>;

// Compares the reverse-mode gradient of f at x against central differences
// (f(x + h e_i) - f(x - h e_i)) / 2h. Run it on DTensor for tight tolerances.
template <typename T>
GradCheckReport finite_difference_check(const std::string& name, const ScalarFunction<T>& f, BasicTensor<T> x,
                                        const GradCheckOptions& opts = {}) {
  if (!(opts.step > 0.0)) throw InvalidArgument("finite_difference_check: step must be positive");
  if (!x.requires_grad()) throw InvalidArgument("finite_difference_check: x must require grad");

  x.zero_grad();
  const BasicTensor<T> loss = f(x);
  if (loss.numel() != 1) throw ShapeError("finite_difference_check: f must return a scalar");
  loss.backward();
  std::vector<T> analytic(x.numel(), T(0));
  if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  x.zero_grad();

  auto eval = [&] {
    NoGradGuard guard;
    return static_cast<double>(f(x).item());
  };
  const double again = eval();
  if (again != static_cast<double>(loss.item()))
    throw InvalidArgument("finite_difference_check(" + name + "): f is not deterministic (" +
                          std::to_string(loss.item()) + " vs " + std::to_string(again) + ")");

  std::vector<std::size_t> indices(x.numel());
  std::iota(indices.begin(), indices.end(), std::size_t{0});
  if (opts.max_elements != 0 && indices.size() > opts.max_elements) {
    SplitMix64 rng(opts.seed);
    for (std::size_t i = indices.size() - 1; i > 0; --i) std::swap(indices[i], indices[rng.below(i + 1)]);
    indices.resize(opts.max_elements);
    std::sort(indices.begin(), indices.end());
  }

  GradCheckReport report;
  report.op = name;
  auto values = x.data();
  for (std::size_t i : indices) {
    const T original = values[i];
    const T plus = static_cast<T>(original + opts.step);
    const T minus = static_cast<T>(original - opts.step);
    values[i] = plus;
    const double fp = eval();
    values[i] = minus;
    const double fm = eval();
    values[i] = original;
    const double numeric = (fp - fm) / (static_cast<double>(plus) - static_cast<double>(minus));
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
    const double err = std::abs(a - numeric) / denom;
    report.errors.push_back(err);
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  return report;
}

}  // namespace brivl
