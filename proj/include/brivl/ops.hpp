#pragma once

// Differentiable primitives. Shapes are explicit: apart from scalar-with-
// tensor helpers there is no implicit broadcasting. Every shape violation
// throws ShapeError naming the primitive and the offending shapes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "brivl/parallel.hpp"
#include "brivl/tensor.hpp"

namespace brivl::ops {

namespace detail {

using brivl::detail::input_grad;
using brivl::detail::make_result;
using brivl::detail::Node;

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b, const std::string& why = "") {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b) +
                   (why.empty() ? "" : " (" + why + ")"));
}

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": bad shape " + shape_str(a) + " (" + why + ")");
}

template <typename T>
void require_rank(const char* op, const BasicTensor<T>& t, std::size_t rank) {
  if (t.rank() != rank) shape_fail(op, t.shape(), "expected rank " + std::to_string(rank));
}

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0.0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0.0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = a[p * m + i];
      if (av == T(0.0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

struct Spatial {
  std::size_t n, c, h, w;
};

template <typename T>
Spatial spatial(const char* op, const BasicTensor<T>& x) {
  require_rank(op, x, 4);
  return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

// col[(c*k+ky)*k+kx, oy*ow+ox] = x[c, oy+ky-pad, ox+kx-pad]
template <typename T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
                   std::size_t oh, std::size_t ow, T* col) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((ci * k + ky) * k + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
            dst[oy * ow + ox] = (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w))
                                    ? x[(ci * h + iy) * w + ix]
                                    : T(0.0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
                   std::size_t oh, std::size_t ow, T* x) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((ci * k + ky) * k + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            x[(ci * h + iy) * w + ix] += src[oy * ow + ox];
          }
        }
      }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_fail("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (T* g = detail::input_grad(n, k))
        for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_fail("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
    if (T* g = detail::input_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] -= n.grad[i];
  });
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_fail("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](detail::Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * bv[i];
    if (T* g = detail::input_grad(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * av[i];
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, std::type_identity_t<T> s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return detail::make_result<T>("scale", a.shape(), std::move(out), {a}, [s](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i] * s;
  });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, std::type_identity_t<T> s) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  return detail::make_result<T>("add_scalar", a.shape(), std::move(out), {a}, [](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > T(0.0) ? x.data()[i] : T(0.0);
  return detail::make_result<T>("relu", x.shape(), std::move(out), {x}, [](detail::Node<T>& n) {
    const auto& xv = n.inputs[0]->value;
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        if (xv[i] > T(0.0)) g[i] += n.grad[i];
  });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1.0) / (T(1.0) + std::exp(-x.data()[i]));
  return detail::make_result<T>("sigmoid", x.shape(), std::move(out), {x}, [](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        const T y = n.value[i];
        g[i] += n.grad[i] * y * (T(1.0) - y);
      }
  });
}

// ---------------------------------------------------------------------------
// Reductions to a scalar

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  return detail::make_result<T>("sum", {1}, {static_cast<T>(acc)}, {x}, [](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      const std::size_t count = n.inputs[0]->value.size();
      for (std::size_t i = 0; i < count; ++i) g[i] += n.grad[0];
    }
  });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double acc = 0.0;
  for (T v : x.data()) acc += v;
  const std::size_t count = x.numel();
  return detail::make_result<T>("mean", {1}, {static_cast<T>(acc / count)}, {x}, [count](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0)) {
      const T share = n.grad[0] / static_cast<T>(count);
      for (std::size_t i = 0; i < count; ++i) g[i] += share;
    }
  });
}

// Dot product of two same-shape tensors, treated as flat vectors.
template <typename T>
BasicTensor<T> dot(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) detail::shape_fail("dot", a.shape(), b.shape());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.data()[i]) * b.data()[i];
  return detail::make_result<T>("dot", {1}, {static_cast<T>(acc)}, {a, b}, [](detail::Node<T>& n) {
    const auto& av = n.inputs[0]->value;
    const auto& bv = n.inputs[1]->value;
    const T g0 = n.grad[0];
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < av.size(); ++i) g[i] += g0 * bv[i];
    if (T* g = detail::input_grad(n, 1))
      for (std::size_t i = 0; i < av.size(); ++i) g[i] += g0 * av[i];
  });
}

// Cosine similarity of two same-size tensors, treated as flat vectors.
template <typename T>
BasicTensor<T> cosine_similarity(const BasicTensor<T>& a, const BasicTensor<T>& b, std::type_identity_t<T> eps = T(1e-12)) {
  if (a.numel() != b.numel()) detail::shape_fail("cosine_similarity", a.shape(), b.shape());
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  const double na = std::max(std::sqrt(aa), static_cast<double>(eps));
  const double nb = std::max(std::sqrt(bb), static_cast<double>(eps));
  const double cos = ab / (na * nb);
  return detail::make_result<T>("cosine_similarity", {1}, {static_cast<T>(cos)}, {a, b},
                             [na, nb, cos](detail::Node<T>& n) {
                               const auto& av = n.inputs[0]->value;
                               const auto& bv = n.inputs[1]->value;
                               const double g0 = n.grad[0];
                               if (T* g = detail::input_grad(n, 0))
                                 for (std::size_t i = 0; i < av.size(); ++i)
                                   g[i] += static_cast<T>(g0 * (bv[i] / (na * nb) - cos * av[i] / (na * na)));
                               if (T* g = detail::input_grad(n, 1))
                                 for (std::size_t i = 0; i < av.size(); ++i)
                                   g[i] += static_cast<T>(g0 * (av[i] / (na * nb) - cos * bv[i] / (nb * nb)));
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

// [m,k] x [k,n] -> [m,n]
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) detail::shape_fail("matmul", a.shape(), b.shape(), "inner dimensions differ");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0.0));
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node<T>& node) {
    const T* g = node.grad.data();
    if (T* ga = detail::input_grad(node, 0)) detail::gemm_nt(m, k, n, g, node.inputs[1]->value.data(), ga);
    if (T* gb = detail::input_grad(node, 1)) detail::gemm_tn(k, n, m, node.inputs[0]->value.data(), g, gb);
  });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_result<T>("transpose", {n, m}, std::move(out), {a}, [m, n](detail::Node<T>& node) {
    if (T* g = detail::input_grad(node, 0))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[i * n + j] += node.grad[j * m + i];
  });
}

// x[..., n] + bias[n], bias repeated over every leading index.
template <typename T>
BasicTensor<T> add_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  detail::require_rank("add_bias", bias, 1);
  if (x.rank() < 1 || x.shape().back() != bias.dim(0)) detail::shape_fail("add_bias", x.shape(), bias.shape());
  const std::size_t n = bias.dim(0), rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x.data()[r * n + j] + bias.data()[j];
  return detail::make_result<T>("add_bias", x.shape(), std::move(out), {x, bias}, [rows, n](detail::Node<T>& node) {
    if (T* g = detail::input_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
    if (T* g = detail::input_grad(node, 1))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += node.grad[r * n + j];
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) detail::shape_fail("reshape", x.shape(), shape, "element counts differ");
  return detail::make_result<T>("reshape", std::move(shape), x.values(), {x}, [](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i] += n.grad[i];
  });
}

// Elements [begin, end) along one axis.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank()) detail::shape_fail("slice", x.shape(), "axis " + std::to_string(axis) + " out of range");
  if (begin >= end || end > x.dim(axis))
    detail::shape_fail("slice", x.shape(),
                       "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                           std::to_string(axis));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis), len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<T> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(x.data().data() + (o * full + begin) * inner, len * inner, out.data() + o * len * inner);
  return detail::make_result<T>("slice", std::move(shape), std::move(out), {x},
                             [outer, inner, full, begin, len](detail::Node<T>& n) {
                               if (T* g = detail::input_grad(n, 0))
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < len * inner; ++i)
                                     g[(o * full + begin) * inner + i] += n.grad[o * len * inner + i];
                             });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) detail::shape_fail("concat", first, "axis " + std::to_string(axis) + " out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) detail::shape_fail("concat", first, p.shape(), "ranks differ");
    for (std::size_t i = 0; i < first.size(); ++i)
      if (i != axis && p.dim(i) != first[i]) detail::shape_fail("concat", first, p.shape(), "non-axis dims differ");
    total += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  Shape shape = first;
  shape[axis] = total;
  std::vector<T> out(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.data().data() + o * len * inner, len * inner, out.data() + (o * total + off) * inner);
    off += len;
  }
  std::vector<std::size_t> lens;
  for (const auto& p : parts) lens.push_back(p.dim(axis));
  return detail::make_result<T>("concat", std::move(shape), std::move(out), parts,
                             [outer, inner, total, offsets, lens](detail::Node<T>& n) {
                               for (std::size_t k = 0; k < lens.size(); ++k) {
                                 T* g = detail::input_grad(n, k);
                                 if (!g) continue;
                                 for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t i = 0; i < lens[k] * inner; ++i)
                                     g[o * lens[k] * inner + i] += n.grad[(o * total + offsets[k]) * inner + i];
                               }
                             });
}

// Rows of table[V, w] selected by ids.
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, const std::vector<std::size_t>& ids) {
  detail::require_rank("gather_rows", table, 2);
  if (ids.empty()) detail::shape_fail("gather_rows", table.shape(), "no ids");
  const std::size_t v = table.dim(0), w = table.dim(1);
  std::vector<T> out(ids.size() * w);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= v)
      throw InvalidArgument("gather_rows: id " + std::to_string(ids[r]) + " out of range for " + shape_str(table.shape()));
    std::copy_n(table.data().data() + ids[r] * w, w, out.data() + r * w);
  }
  return detail::make_result<T>("gather_rows", {ids.size(), w}, std::move(out), {table}, [ids, w](detail::Node<T>& n) {
    if (T* g = detail::input_grad(n, 0))
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t j = 0; j < w; ++j) g[ids[r] * w + j] += n.grad[r * w + j];
  });
}

// ---------------------------------------------------------------------------
// Normalization and softmax (over the last axis)

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma, const BasicTensor<T>& beta, std::type_identity_t<T> eps = T(1e-5)) {
  detail::require_rank("layer_norm", gamma, 1);
  detail::require_rank("layer_norm", beta, 1);
  if (x.rank() < 1 || x.shape().back() != gamma.dim(0) || gamma.shape() != beta.shape())
    detail::shape_fail("layer_norm", x.shape(), gamma.shape());
  const std::size_t n = gamma.dim(0), rows = x.numel() / n;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= n;
    const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = static_cast<T>(xr[j] - mu) * is;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gamma.data()[j] + beta.data()[j];
    }
  }
  return detail::make_result<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                             [rows, n, xhat, inv_std](detail::Node<T>& node) {
                               const auto& gv = node.inputs[1]->value;
                               T* gx = detail::input_grad(node, 0);
                               T* gg = detail::input_grad(node, 1);
                               T* gb = detail::input_grad(node, 2);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const T* go = node.grad.data() + r * n;
                                 const T* h = xhat->data() + r * n;
                                 double m1 = 0.0, m2 = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) {
                                   const double dh = go[j] * gv[j];
                                   m1 += dh;
                                   m2 += dh * h[j];
                                   if (gg) gg[j] += go[j] * h[j];
                                   if (gb) gb[j] += go[j];
                                 }
                                 if (!gx) continue;
                                 m1 /= n;
                                 m2 /= n;
                                 for (std::size_t j = 0; j < n; ++j)
                                   gx[r * n + j] += static_cast<T>((*inv_std)[r] * (go[j] * gv[j] - m1 - h[j] * m2));
                               }
                             });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  if (x.rank() < 1) detail::shape_fail("softmax", x.shape(), "rank 0");
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    const T mx = *std::max_element(xr, xr + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(static_cast<double>(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = static_cast<T>(std::exp(static_cast<double>(xr[j] - mx)) / total);
  }
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {x}, [rows, n](detail::Node<T>& node) {
    T* g = detail::input_grad(node, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = node.value.data() + r * n;
      const T* go = node.grad.data() + r * n;
      double dotp = 0.0;
      for (std::size_t j = 0; j < n; ++j) dotp += go[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += static_cast<T>(y[j] * (go[j] - dotp));
    }
  });
}

// Row-wise L2 normalization over the last axis.
template <typename T>
BasicTensor<T> l2_normalize(const BasicTensor<T>& x, std::type_identity_t<T> eps = T(1e-12)) {
  if (x.rank() < 1) detail::shape_fail("l2_normalize", x.shape(), "rank 0");
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  auto norms = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * n;
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += static_cast<double>(xr[j]) * xr[j];
    const T norm = std::max(static_cast<T>(std::sqrt(ss)), eps);
    (*norms)[r] = norm;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] / norm;
  }
  return detail::make_result<T>("l2_normalize", x.shape(), std::move(out), {x}, [rows, n, norms](detail::Node<T>& node) {
    T* g = detail::input_grad(node, 0);
    if (!g) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = node.value.data() + r * n;
      const T* go = node.grad.data() + r * n;
      double dotp = 0.0;
      for (std::size_t j = 0; j < n; ++j) dotp += go[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += static_cast<T>((go[j] - y[j] * dotp) / (*norms)[r]);
    }
  });
}

// Mean over rows of logits[m, n] of -log softmax(row)[target].
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, const std::vector<std::size_t>& targets) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m)
    detail::shape_fail("cross_entropy", logits.shape(), "expected " + std::to_string(m) + " targets");
  auto probs = std::make_shared<std::vector<T>>(m * n);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] >= n)
      throw InvalidArgument("cross_entropy: target " + std::to_string(targets[i]) + " out of range for " +
                            shape_str(logits.shape()));
    const T* row = logits.data().data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(row[j] - mx);
    const double lse = mx + std::log(s);
    total += lse - row[targets[i]];
    for (std::size_t j = 0; j < n; ++j) (*probs)[i * n + j] = static_cast<T>(std::exp(row[j] - lse));
  }
  return detail::make_result<T>("cross_entropy", {1}, {static_cast<T>(total / m)}, {logits},
                             [m, n, probs, targets](detail::Node<T>& node) {
                               T* g = detail::input_grad(node, 0);
                               if (!g) return;
                               const T s = node.grad[0] / static_cast<T>(m);
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j)
                                   g[i * n + j] += s * ((*probs)[i * n + j] - (j == targets[i] ? T(1.0) : T(0.0)));
                             });
}

// ---------------------------------------------------------------------------
// Sequence helpers. Sequences are stored as [batch * seq_len, width]; the
// optional mask has one byte per row (non-zero = valid position).

// Multi-head scaled dot-product attention core: softmax(QK^T/sqrt(dh)) V per
// sample and head, with masked keys excluded from every softmax.
template <typename T>
BasicTensor<T> multi_head_attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v, std::size_t seq_len,
                                   std::size_t heads, const std::vector<std::uint8_t>& key_mask = {}) {
  detail::require_rank("multi_head_attention", q, 2);
  if (k.shape() != q.shape() || v.shape() != q.shape())
    detail::shape_fail("multi_head_attention", q.shape(), k.shape(), "q, k, v must share a shape");
  const std::size_t rows = q.dim(0), width = q.dim(1);
  if (seq_len == 0 || rows % seq_len != 0)
    detail::shape_fail("multi_head_attention", q.shape(), "rows not a multiple of seq_len " + std::to_string(seq_len));
  if (heads == 0 || width % heads != 0)
    detail::shape_fail("multi_head_attention", q.shape(),
                       "head count " + std::to_string(heads) + " does not divide width " + std::to_string(width));
  if (!key_mask.empty() && key_mask.size() != rows)
    detail::shape_fail("multi_head_attention", q.shape(), "mask length " + std::to_string(key_mask.size()));
  const std::size_t batch = rows / seq_len, dh = width / heads, L = seq_len;
  const T inv_scale = T(1.0) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(batch * heads * L * L);
  std::vector<T> out(rows * width, T(0.0));
  const T* qv = q.data().data();
  const T* kv = k.data().data();
  const T* vv = v.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    if (!key_mask.empty() && std::none_of(key_mask.begin() + b * L, key_mask.begin() + (b + 1) * L,
                                          [](std::uint8_t m) { return m != 0; }))
      throw ShapeError("multi_head_attention: every key of sample " + std::to_string(b) + " is masked");
    for (std::size_t h = 0; h < heads; ++h) {
      T* p = probs->data() + (b * heads + h) * L * L;
      for (std::size_t i = 0; i < L; ++i) {
        const T* qi = qv + (b * L + i) * width + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < L; ++j) {
          if (!key_mask.empty() && !key_mask[b * L + j]) {
            p[i * L + j] = -std::numeric_limits<T>::infinity();
            continue;
          }
          const T* kj = kv + (b * L + j) * width + h * dh;
          T s = T(0.0);
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * L + j] = s * inv_scale;
          mx = std::max(mx, p[i * L + j]);
        }
        if (!std::isfinite(mx))
          throw NumericalError("multi_head_attention: non-finite attention scores in sample " + std::to_string(b));
        T total = T(0.0);
        for (std::size_t j = 0; j < L; ++j) {
          const T e = std::isinf(p[i * L + j]) ? T(0.0) : std::exp(p[i * L + j] - mx);
          p[i * L + j] = e;
          total += e;
        }
        T* oi = out.data() + (b * L + i) * width + h * dh;
        for (std::size_t j = 0; j < L; ++j) {
          p[i * L + j] /= total;
          const T w = p[i * L + j];
          if (w == T(0.0)) continue;
          const T* vj = vv + (b * L + j) * width + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }
  return detail::make_result<T>(
      "multi_head_attention", q.shape(), std::move(out), {q, k, v},
      [batch, heads, L, dh, width, inv_scale, probs](detail::Node<T>& node) {
        const T* qv = node.inputs[0]->value.data();
        const T* kv = node.inputs[1]->value.data();
        const T* vv = node.inputs[2]->value.data();
        T* gq = detail::input_grad(node, 0);
        T* gk = detail::input_grad(node, 1);
        T* gv = detail::input_grad(node, 2);
        std::vector<T> dp(L * L);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const T* p = probs->data() + (b * heads + h) * L * L;
            for (std::size_t i = 0; i < L; ++i) {
              const T* go = node.grad.data() + (b * L + i) * width + h * dh;
              double rowdot = 0.0;
              for (std::size_t j = 0; j < L; ++j) {
                const T w = p[i * L + j];
                const T* vj = vv + (b * L + j) * width + h * dh;
                T d = T(0.0);
                for (std::size_t c = 0; c < dh; ++c) d += go[c] * vj[c];
                dp[i * L + j] = d;
                rowdot += static_cast<double>(d) * w;
                if (gv && w != T(0.0)) {
                  T* gvj = gv + (b * L + j) * width + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += w * go[c];
                }
              }
              for (std::size_t j = 0; j < L; ++j) {
                const T w = p[i * L + j];
                if (w == T(0.0)) continue;
                const T ds = w * static_cast<T>(dp[i * L + j] - rowdot) * inv_scale;
                const T* qi = qv + (b * L + i) * width + h * dh;
                const T* kj = kv + (b * L + j) * width + h * dh;
                if (gq) {
                  T* gqi = gq + (b * L + i) * width + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  T* gkj = gk + (b * L + j) * width + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

// Mean over the valid rows of each sequence: [batch * seq_len, w] -> [batch, w].
template <typename T>
BasicTensor<T> masked_mean_rows(const BasicTensor<T>& x, std::size_t seq_len, const std::vector<std::uint8_t>& mask = {}) {
  detail::require_rank("masked_mean_rows", x, 2);
  const std::size_t rows = x.dim(0), w = x.dim(1);
  if (seq_len == 0 || rows % seq_len != 0)
    detail::shape_fail("masked_mean_rows", x.shape(), "rows not a multiple of seq_len " + std::to_string(seq_len));
  if (!mask.empty() && mask.size() != rows)
    detail::shape_fail("masked_mean_rows", x.shape(), "mask length " + std::to_string(mask.size()));
  const std::size_t batch = rows / seq_len;
  std::vector<T> weights(rows);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < seq_len; ++i) count += mask.empty() || mask[b * seq_len + i];
    if (count == 0) throw ShapeError("masked_mean_rows: sample " + std::to_string(b) + " has no valid rows");
    for (std::size_t i = 0; i < seq_len; ++i)
      weights[b * seq_len + i] = (mask.empty() || mask[b * seq_len + i]) ? T(1.0) / static_cast<T>(count) : T(0.0);
  }
  std::vector<T> out(batch * w, T(0.0));
  for (std::size_t r = 0; r < rows; ++r) {
    if (weights[r] == T(0.0)) continue;
    T* o = out.data() + (r / seq_len) * w;
    for (std::size_t j = 0; j < w; ++j) o[j] += weights[r] * x.data()[r * w + j];
  }
  return detail::make_result<T>("masked_mean_rows", {batch, w}, std::move(out), {x},
                             [rows, w, seq_len, weights](detail::Node<T>& node) {
                               T* g = detail::input_grad(node, 0);
                               if (!g) return;
                               for (std::size_t r = 0; r < rows; ++r) {
                                 if (weights[r] == T(0.0)) continue;
                                 const T* go = node.grad.data() + (r / seq_len) * w;
                                 for (std::size_t j = 0; j < w; ++j) g[r * w + j] += weights[r] * go[j];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Spatial ops on NCHW tensors

// Stride-1 convolution with square kernels and symmetric zero padding.
// x[N,C,H,W], weight[O,C,K,K], bias[O] -> [N,O,H+2p-K+1,W+2p-K+1]
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias, std::size_t pad = 0) {
  const auto s = detail::spatial("conv2d", x);
  detail::require_rank("conv2d", weight, 4);
  detail::require_rank("conv2d", bias, 1);
  const std::size_t O = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != s.c || weight.dim(3) != K) detail::shape_fail("conv2d", x.shape(), weight.shape());
  if (bias.dim(0) != O) detail::shape_fail("conv2d", weight.shape(), bias.shape(), "bias length");
  if (s.h + 2 * pad < K || s.w + 2 * pad < K) detail::shape_fail("conv2d", x.shape(), weight.shape(), "kernel larger than input");
  const std::size_t oh = s.h + 2 * pad - K + 1, ow = s.w + 2 * pad - K + 1;
  const std::size_t ckk = s.c * K * K, hw = oh * ow;
  std::vector<T> out(s.n * O * hw);
  const T* xv = x.data().data();
  const T* wv = weight.data().data();
  const T* bv = bias.data().data();
  parallel_for(s.n, [&](std::size_t n) {
    std::vector<T> col(ckk * hw);
    detail::im2col(xv + n * s.c * s.h * s.w, s.c, s.h, s.w, K, pad, oh, ow, col.data());
    T* o = out.data() + n * O * hw;
    for (std::size_t oc = 0; oc < O; ++oc) std::fill_n(o + oc * hw, hw, bv[oc]);
    detail::gemm_nn(O, hw, ckk, wv, col.data(), o);
  });
  return detail::make_result<T>(
      "conv2d", {s.n, O, oh, ow}, std::move(out), {x, weight, bias}, [s, O, K, pad, oh, ow, ckk, hw](detail::Node<T>& node) {
        const T* xv = node.inputs[0]->value.data();
        const T* wv = node.inputs[1]->value.data();
        T* gx = detail::input_grad(node, 0);
        T* gw = detail::input_grad(node, 1);
        T* gb = detail::input_grad(node, 2);
        std::vector<T> gw_parts(gw ? s.n * O * ckk : 0, T(0.0));
        parallel_for(s.n, [&](std::size_t n) {
          const T* go = node.grad.data() + n * O * hw;
          std::vector<T> col(ckk * hw);
          if (gw) {
            detail::im2col(xv + n * s.c * s.h * s.w, s.c, s.h, s.w, K, pad, oh, ow, col.data());
            detail::gemm_nt(O, ckk, hw, go, col.data(), gw_parts.data() + n * O * ckk);
          }
          if (gx) {
            std::fill(col.begin(), col.end(), T(0.0));
            detail::gemm_tn(ckk, hw, O, wv, go, col.data());
            detail::col2im(col.data(), s.c, s.h, s.w, K, pad, oh, ow, gx + n * s.c * s.h * s.w);
          }
        });
        if (gw)
          for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < O * ckk; ++i) gw[i] += gw_parts[n * O * ckk + i];
        if (gb)
          for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t oc = 0; oc < O; ++oc) {
              const T* go = node.grad.data() + (n * O + oc) * hw;
              T acc = T(0.0);
              for (std::size_t i = 0; i < hw; ++i) acc += go[i];
              gb[oc] += acc;
            }
      });
}

// Transposed convolution. x[N,C,H,W], weight[C,O,K,K], bias[O]
// -> [N,O,(H-1)*stride+K,(W-1)*stride+K]
template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias, std::size_t stride) {
  const auto s = detail::spatial("conv_transpose2d", x);
  detail::require_rank("conv_transpose2d", weight, 4);
  detail::require_rank("conv_transpose2d", bias, 1);
  if (stride == 0) detail::shape_fail("conv_transpose2d", x.shape(), "stride 0");
  const std::size_t O = weight.dim(1), K = weight.dim(2);
  if (weight.dim(0) != s.c || weight.dim(3) != K) detail::shape_fail("conv_transpose2d", x.shape(), weight.shape());
  if (bias.dim(0) != O) detail::shape_fail("conv_transpose2d", weight.shape(), bias.shape(), "bias length");
  const std::size_t oh = (s.h - 1) * stride + K, ow = (s.w - 1) * stride + K;
  const std::size_t okk = O * K * K, hw = s.h * s.w;
  std::vector<T> out(s.n * O * oh * ow);
  const T* xv = x.data().data();
  const T* wv = weight.data().data();
  const T* bv = bias.data().data();
  // cols[(o*K+ky)*K+kx, y*W+x] = sum_c w[c,o,ky,kx] x[c,y,x]
  auto scatter = [=](const T* cols, T* o) {
    for (std::size_t oc = 0; oc < O; ++oc)
      for (std::size_t ky = 0; ky < K; ++ky)
        for (std::size_t kx = 0; kx < K; ++kx) {
          const T* src = cols + ((oc * K + ky) * K + kx) * hw;
          for (std::size_t y = 0; y < s.h; ++y)
            for (std::size_t xx = 0; xx < s.w; ++xx)
              o[(oc * oh + y * stride + ky) * ow + xx * stride + kx] += src[y * s.w + xx];
        }
  };
  parallel_for(s.n, [&](std::size_t n) {
    std::vector<T> cols(okk * hw, T(0.0));
    detail::gemm_tn(okk, hw, s.c, wv, xv + n * s.c * hw, cols.data());
    T* o = out.data() + n * O * oh * ow;
    for (std::size_t oc = 0; oc < O; ++oc) std::fill_n(o + oc * oh * ow, oh * ow, bv[oc]);
    scatter(cols.data(), o);
  });
  return detail::make_result<T>(
      "conv_transpose2d", {s.n, O, oh, ow}, std::move(out), {x, weight, bias},
      [s, O, K, stride, oh, ow, okk, hw](detail::Node<T>& node) {
        const T* xv = node.inputs[0]->value.data();
        const T* wv = node.inputs[1]->value.data();
        T* gx = detail::input_grad(node, 0);
        T* gw = detail::input_grad(node, 1);
        T* gb = detail::input_grad(node, 2);
        std::vector<T> gw_parts(gw ? s.n * s.c * okk : 0, T(0.0));
        parallel_for(s.n, [&](std::size_t n) {
          const T* go = node.grad.data() + n * O * oh * ow;
          std::vector<T> dcols(okk * hw);
          for (std::size_t oc = 0; oc < O; ++oc)
            for (std::size_t ky = 0; ky < K; ++ky)
              for (std::size_t kx = 0; kx < K; ++kx) {
                T* dst = dcols.data() + ((oc * K + ky) * K + kx) * hw;
                for (std::size_t y = 0; y < s.h; ++y)
                  for (std::size_t xx = 0; xx < s.w; ++xx)
                    dst[y * s.w + xx] = go[(oc * oh + y * stride + ky) * ow + xx * stride + kx];
              }
          if (gx) detail::gemm_nn(s.c, hw, okk, wv, dcols.data(), gx + n * s.c * hw);
          if (gw) detail::gemm_nt(s.c, okk, hw, xv + n * s.c * hw, dcols.data(), gw_parts.data() + n * s.c * okk);
        });
        if (gw)
          for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < s.c * okk; ++i) gw[i] += gw_parts[n * s.c * okk + i];
        if (gb)
          for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t oc = 0; oc < O; ++oc) {
              const T* go = node.grad.data() + (n * O + oc) * oh * ow;
              T acc = T(0.0);
              for (std::size_t i = 0; i < oh * ow; ++i) acc += go[i];
              gb[oc] += acc;
            }
      });
}

// Average pooling over window x window regions moved by stride (no padding).
template <typename T>
BasicTensor<T> avg_pool2d(const BasicTensor<T>& x, std::size_t window, std::size_t stride) {
  const auto s = detail::spatial("avg_pool2d", x);
  if (window == 0 || stride == 0 || window > s.h || window > s.w)
    detail::shape_fail("avg_pool2d", x.shape(), "window " + std::to_string(window) + " stride " + std::to_string(stride));
  const std::size_t oh = (s.h - window) / stride + 1, ow = (s.w - window) / stride + 1;
  const T share = T(1.0) / static_cast<T>(window * window);
  std::vector<T> out(s.n * s.c * oh * ow, T(0.0));
  const T* xv = x.data().data();
  for (std::size_t p = 0; p < s.n * s.c; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T acc = T(0.0);
        for (std::size_t ky = 0; ky < window; ++ky)
          for (std::size_t kx = 0; kx < window; ++kx) acc += xv[(p * s.h + oy * stride + ky) * s.w + ox * stride + kx];
        out[(p * oh + oy) * ow + ox] = acc * share;
      }
  return detail::make_result<T>("avg_pool2d", {s.n, s.c, oh, ow}, std::move(out), {x},
                             [s, window, stride, oh, ow, share](detail::Node<T>& node) {
                               T* g = detail::input_grad(node, 0);
                               if (!g) return;
                               for (std::size_t p = 0; p < s.n * s.c; ++p)
                                 for (std::size_t oy = 0; oy < oh; ++oy)
                                   for (std::size_t ox = 0; ox < ow; ++ox) {
                                     const T go = node.grad[(p * oh + oy) * ow + ox] * share;
                                     for (std::size_t ky = 0; ky < window; ++ky)
                                       for (std::size_t kx = 0; kx < window; ++kx)
                                         g[(p * s.h + oy * stride + ky) * s.w + ox * stride + kx] += go;
                                   }
                             });
}

// Multi-scale patch pooling. For every scale s the map is cut into an s x s
// grid of equal regions, each averaged into one patch feature. Patches are
// ordered by scale, then row-major within the grid.
// x[N,C,H,W] -> [N * sum(s^2), C]
template <typename T>
BasicTensor<T> mspp(const BasicTensor<T>& x, const std::vector<std::size_t>& scales) {
  const auto s = detail::spatial("mspp", x);
  if (scales.empty()) detail::shape_fail("mspp", x.shape(), "no scales");
  std::size_t patches = 0;
  for (std::size_t sc : scales) {
    if (sc == 0 || s.h % sc != 0 || s.w % sc != 0)
      detail::shape_fail("mspp", x.shape(), "spatial dims not divisible by scale " + std::to_string(sc));
    patches += sc * sc;
  }
  std::vector<T> out(s.n * patches * s.c);
  const T* xv = x.data().data();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::size_t p = 0;
    for (std::size_t sc : scales) {
      const std::size_t rh = s.h / sc, rw = s.w / sc;
      const T share = T(1.0) / static_cast<T>(rh * rw);
      for (std::size_t gy = 0; gy < sc; ++gy)
        for (std::size_t gx = 0; gx < sc; ++gx, ++p)
          for (std::size_t c = 0; c < s.c; ++c) {
            const T* plane = xv + (n * s.c + c) * s.h * s.w;
            double acc = 0.0;
            for (std::size_t y = gy * rh; y < (gy + 1) * rh; ++y)
              for (std::size_t xx = gx * rw; xx < (gx + 1) * rw; ++xx) acc += plane[y * s.w + xx];
            out[(n * patches + p) * s.c + c] = static_cast<T>(acc) * share;
          }
    }
  }
  return detail::make_result<T>("mspp", {s.n * patches, s.c}, std::move(out), {x}, [s, scales, patches](detail::Node<T>& node) {
    T* g = detail::input_grad(node, 0);
    if (!g) return;
    for (std::size_t n = 0; n < s.n; ++n) {
      std::size_t p = 0;
      for (std::size_t sc : scales) {
        const std::size_t rh = s.h / sc, rw = s.w / sc;
        const T share = T(1.0) / static_cast<T>(rh * rw);
        for (std::size_t gy = 0; gy < sc; ++gy)
          for (std::size_t gx = 0; gx < sc; ++gx, ++p)
            for (std::size_t c = 0; c < s.c; ++c) {
              const T go = node.grad[(n * patches + p) * s.c + c] * share;
              T* plane = g + (n * s.c + c) * s.h * s.w;
              for (std::size_t y = gy * rh; y < (gy + 1) * rh; ++y)
                for (std::size_t xx = gx * rw; xx < (gx + 1) * rw; ++xx) plane[y * s.w + xx] += go;
            }
      }
    }
  });
}

// Channel-last views of a feature map: one row per spatial cell.
// x[N,C,H,W] -> [N*H*W, C], rows ordered by image, then row-major cell.
template <typename T>
BasicTensor<T> nchw_to_rows(const BasicTensor<T>& x) {
  const auto s = detail::spatial("nchw_to_rows", x);
  const std::size_t hw = s.h * s.w;
  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < hw; ++p) out[(n * hw + p) * s.c + c] = x.data()[(n * s.c + c) * hw + p];
  return detail::make_result<T>("nchw_to_rows", {s.n * hw, s.c}, std::move(out), {x}, [s, hw](detail::Node<T>& node) {
    if (T* g = detail::input_grad(node, 0))
      for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c)
          for (std::size_t p = 0; p < hw; ++p) g[(n * s.c + c) * hw + p] += node.grad[(n * hw + p) * s.c + c];
  });
}

// Inverse of nchw_to_rows. x[N*H*W, C] -> [N,C,H,W]
template <typename T>
BasicTensor<T> rows_to_nchw(const BasicTensor<T>& x, std::size_t n, std::size_t h, std::size_t w) {
  detail::require_rank("rows_to_nchw", x, 2);
  const std::size_t hw = h * w, c = x.dim(1);
  if (x.dim(0) != n * hw) detail::shape_fail("rows_to_nchw", x.shape(), Shape{n, c, h, w});
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(i * c + ch) * hw + p] = x.data()[(i * hw + p) * c + ch];
  return detail::make_result<T>("rows_to_nchw", {n, c, h, w}, std::move(out), {x}, [n, c, hw](detail::Node<T>& node) {
    if (T* g = detail::input_grad(node, 0))
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t p = 0; p < hw; ++p) g[(i * hw + p) * c + ch] += node.grad[(i * c + ch) * hw + p];
  });
}

}  // namespace brivl::ops
