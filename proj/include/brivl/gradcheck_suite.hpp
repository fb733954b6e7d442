#pragma once

// Registry of finite-difference checks: every differentiable primitive
// (against each of its inputs), the self-attention block, both towers of the
// desk configuration and both contrastive losses. Outputs are reduced to a
// scalar by a fixed random projection so every output element contributes.

#include <functional>
#include <string>
#include <vector>

#include "brivl/config.hpp"
#include "brivl/contrastive.hpp"
#include "brivl/encoders.hpp"
#include "brivl/gradcheck.hpp"
#include "brivl/ops.hpp"
#include "brivl/rng.hpp"
#include "brivl/tensor.hpp"

namespace brivl {

struct GradCheckCase {
  std::string name;
  std::function<GradCheckReport(const GradCheckOptions&)> run;
};

namespace gc_detail {

inline DTensor random_tensor(Shape shape, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return DTensor::from(std::move(shape), std::move(v), true);
}

// Values bounded away from zero, for inputs of kinked functions.
inline DTensor away_from_zero(Shape shape, SplitMix64& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0f : -1.0f) * rng.uniform(0.1f, 1.0f);
  return DTensor::from(std::move(shape), std::move(v), true);
}

// sum(out * R) for a fixed pseudo-random R of the output's shape.
inline DTensor project(const DTensor& out) {
  SplitMix64 rng(0xBEEF);
  std::vector<double> r(out.numel());
  for (auto& x : r) x = rng.uniform(-1.0f, 1.0f);
  return ops::dot(out, DTensor::from(out.shape(), std::move(r)));
}

using MultiFn = std::function<DTensor(const std::vector<DTensor>&)>;

// Checks f against each listed input in turn; the report keeps the worst.
inline GradCheckReport check_inputs(const std::string& name, std::vector<DTensor> inputs, const MultiFn& f,
                                    const GradCheckOptions& opts, std::vector<std::size_t> which = {}) {
  if (which.empty())
    for (std::size_t i = 0; i < inputs.size(); ++i) which.push_back(i);
  GradCheckReport total;
  total.op = name;
  for (std::size_t i : which) {
    auto fi = [&, i](const DTensor& x) {
      std::vector<DTensor> args = inputs;
      args[i] = x;
      return project(f(args));
    };
    const auto rep = finite_difference_check<double>(name, fi, inputs[i], opts);
    total.errors.insert(total.errors.end(), rep.errors.begin(), rep.errors.end());
    total.max_rel_error = std::max(total.max_rel_error, rep.max_rel_error);
  }
  return total;
}

// Parameter tensors of a model checked one at a time (sampled per tensor).
template <typename Model>
GradCheckReport check_params(const std::string& name, Model& model, const std::function<DTensor(const Model&)>& f,
                             GradCheckOptions opts, std::size_t per_tensor) {
  GradCheckReport total;
  total.op = name;
  opts.max_elements = per_tensor;
  for (auto& [pname, p] : model.params()) {
    auto fp = [&](const DTensor&) { return project(f(model)); };
    const auto rep = finite_difference_check<double>(name + ":" + pname, fp, p, opts);
    total.errors.insert(total.errors.end(), rep.errors.begin(), rep.errors.end());
    total.max_rel_error = std::max(total.max_rel_error, rep.max_rel_error);
    opts.seed += 1;
  }
  return total;
}

inline EncoderConfig desk_encoder() { return EncoderConfig{}; }

}  // namespace gc_detail

inline std::vector<GradCheckCase> gradcheck_suite() {
  using gc_detail::away_from_zero;
  using gc_detail::check_inputs;
  using gc_detail::random_tensor;
  using V = std::vector<DTensor>;
  std::vector<GradCheckCase> cases;
  auto add = [&](std::string name, std::function<GradCheckReport(const GradCheckOptions&)> run) {
    cases.push_back({std::move(name), std::move(run)});
  };

  add("add", [](const GradCheckOptions& o) {
    SplitMix64 r(1);
    return check_inputs("add", {random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                        [](const V& a) { return ops::add(a[0], a[1]); }, o);
  });
  add("sub", [](const GradCheckOptions& o) {
    SplitMix64 r(2);
    return check_inputs("sub", {random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                        [](const V& a) { return ops::sub(a[0], a[1]); }, o);
  });
  add("mul", [](const GradCheckOptions& o) {
    SplitMix64 r(3);
    return check_inputs("mul", {random_tensor({3, 4}, r), random_tensor({3, 4}, r)},
                        [](const V& a) { return ops::mul(a[0], a[1]); }, o);
  });
  add("scale", [](const GradCheckOptions& o) {
    SplitMix64 r(4);
    return check_inputs("scale", {random_tensor({3, 4}, r)}, [](const V& a) { return ops::scale(a[0], -2.5f); }, o);
  });
  add("add_scalar", [](const GradCheckOptions& o) {
    SplitMix64 r(5);
    return check_inputs("add_scalar", {random_tensor({3, 4}, r)},
                        [](const V& a) { return ops::add_scalar(a[0], 0.75f); }, o);
  });
  add("relu", [](const GradCheckOptions& o) {
    SplitMix64 r(6);
    return check_inputs("relu", {away_from_zero({4, 5}, r)}, [](const V& a) { return ops::relu(a[0]); }, o);
  });
  add("sigmoid", [](const GradCheckOptions& o) {
    SplitMix64 r(7);
    return check_inputs("sigmoid", {random_tensor({4, 5}, r, -3.0f, 3.0f)},
                        [](const V& a) { return ops::sigmoid(a[0]); }, o);
  });
  add("sum", [](const GradCheckOptions& o) {
    SplitMix64 r(8);
    return check_inputs("sum", {random_tensor({3, 4}, r)}, [](const V& a) { return ops::sum(a[0]); }, o);
  });
  add("mean", [](const GradCheckOptions& o) {
    SplitMix64 r(9);
    return check_inputs("mean", {random_tensor({3, 4}, r)}, [](const V& a) { return ops::mean(a[0]); }, o);
  });
  add("dot", [](const GradCheckOptions& o) {
    SplitMix64 r(10);
    return check_inputs("dot", {random_tensor({6}, r), random_tensor({6}, r)},
                        [](const V& a) { return ops::dot(a[0], a[1]); }, o);
  });
  add("cosine_similarity", [](const GradCheckOptions& o) {
    SplitMix64 r(11);
    return check_inputs("cosine_similarity", {random_tensor({1, 6}, r), random_tensor({1, 6}, r)},
                        [](const V& a) { return ops::cosine_similarity(a[0], a[1]); }, o);
  });
  add("matmul", [](const GradCheckOptions& o) {
    SplitMix64 r(12);
    return check_inputs("matmul", {random_tensor({3, 5}, r), random_tensor({5, 4}, r)},
                        [](const V& a) { return ops::matmul(a[0], a[1]); }, o);
  });
  add("transpose", [](const GradCheckOptions& o) {
    SplitMix64 r(13);
    return check_inputs("transpose", {random_tensor({3, 5}, r)}, [](const V& a) { return ops::transpose(a[0]); }, o);
  });
  add("add_bias", [](const GradCheckOptions& o) {
    SplitMix64 r(14);
    return check_inputs("add_bias", {random_tensor({3, 4}, r), random_tensor({4}, r)},
                        [](const V& a) { return ops::add_bias(a[0], a[1]); }, o);
  });
  add("reshape", [](const GradCheckOptions& o) {
    SplitMix64 r(15);
    return check_inputs("reshape", {random_tensor({3, 4}, r)}, [](const V& a) { return ops::reshape(a[0], {2, 6}); }, o);
  });
  add("slice", [](const GradCheckOptions& o) {
    SplitMix64 r(16);
    return check_inputs("slice", {random_tensor({2, 5, 3}, r)}, [](const V& a) { return ops::slice(a[0], 1, 1, 4); }, o);
  });
  add("concat", [](const GradCheckOptions& o) {
    SplitMix64 r(17);
    return check_inputs("concat", {random_tensor({2, 3}, r), random_tensor({2, 2}, r)},
                        [](const V& a) { return ops::concat(V{a[0], a[1]}, 1); }, o);
  });
  add("gather_rows", [](const GradCheckOptions& o) {
    SplitMix64 r(18);
    return check_inputs("gather_rows", {random_tensor({5, 3}, r)},
                        [](const V& a) { return ops::gather_rows(a[0], {4, 0, 4, 2}); }, o);
  });
  add("layer_norm", [](const GradCheckOptions& o) {
    SplitMix64 r(19);
    return check_inputs("layer_norm", {random_tensor({3, 6}, r), random_tensor({6}, r, 0.5f, 1.5f), random_tensor({6}, r)},
                        [](const V& a) { return ops::layer_norm(a[0], a[1], a[2]); }, o);
  });
  add("softmax", [](const GradCheckOptions& o) {
    SplitMix64 r(20);
    return check_inputs("softmax", {random_tensor({3, 5}, r, -2.0f, 2.0f)}, [](const V& a) { return ops::softmax(a[0]); }, o);
  });
  add("l2_normalize", [](const GradCheckOptions& o) {
    SplitMix64 r(21);
    return check_inputs("l2_normalize", {random_tensor({3, 5}, r)}, [](const V& a) { return ops::l2_normalize(a[0]); }, o);
  });
  add("cross_entropy", [](const GradCheckOptions& o) {
    SplitMix64 r(22);
    return check_inputs("cross_entropy", {random_tensor({4, 5}, r, -2.0f, 2.0f)},
                        [](const V& a) { return ops::cross_entropy(a[0], {1, 0, 4, 2}); }, o);
  });
  add("multi_head_attention", [](const GradCheckOptions& o) {
    SplitMix64 r(23);
    const std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1, 1, 1};
    return check_inputs("multi_head_attention", {random_tensor({8, 4}, r), random_tensor({8, 4}, r), random_tensor({8, 4}, r)},
                        [mask](const V& a) { return ops::multi_head_attention(a[0], a[1], a[2], 4, 2, mask); }, o);
  });
  add("masked_mean_rows", [](const GradCheckOptions& o) {
    SplitMix64 r(24);
    const std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0};
    return check_inputs("masked_mean_rows", {random_tensor({6, 3}, r)},
                        [mask](const V& a) { return ops::masked_mean_rows(a[0], 3, mask); }, o);
  });
  add("conv2d", [](const GradCheckOptions& o) {
    SplitMix64 r(25);
    auto rep = check_inputs("conv2d", {random_tensor({2, 2, 5, 5}, r), random_tensor({3, 2, 3, 3}, r), random_tensor({3}, r)},
                            [](const V& a) { return ops::conv2d(a[0], a[1], a[2], 0); }, o);
    const auto padded =
        check_inputs("conv2d", {random_tensor({1, 2, 4, 4}, r), random_tensor({2, 2, 3, 3}, r), random_tensor({2}, r)},
                     [](const V& a) { return ops::conv2d(a[0], a[1], a[2], 1); }, o);
    rep.errors.insert(rep.errors.end(), padded.errors.begin(), padded.errors.end());
    rep.max_rel_error = std::max(rep.max_rel_error, padded.max_rel_error);
    return rep;
  });
  add("conv_transpose2d", [](const GradCheckOptions& o) {
    SplitMix64 r(26);
    return check_inputs("conv_transpose2d",
                        {random_tensor({2, 2, 3, 3}, r), random_tensor({2, 3, 2, 2}, r), random_tensor({3}, r)},
                        [](const V& a) { return ops::conv_transpose2d(a[0], a[1], a[2], 2); }, o);
  });
  add("avg_pool2d", [](const GradCheckOptions& o) {
    SplitMix64 r(27);
    return check_inputs("avg_pool2d", {random_tensor({2, 2, 5, 5}, r)},
                        [](const V& a) { return ops::avg_pool2d(a[0], 2, 1); }, o);
  });
  add("mspp", [](const GradCheckOptions& o) {
    SplitMix64 r(28);
    return check_inputs("mspp", {random_tensor({2, 3, 6, 6}, r)}, [](const V& a) { return ops::mspp(a[0], {1, 2, 3}); }, o);
  });
  add("nchw_to_rows", [](const GradCheckOptions& o) {
    SplitMix64 r(29);
    return check_inputs("nchw_to_rows", {random_tensor({2, 3, 2, 2}, r)},
                        [](const V& a) { return ops::nchw_to_rows(a[0]); }, o);
  });
  add("rows_to_nchw", [](const GradCheckOptions& o) {
    SplitMix64 r(30);
    return check_inputs("rows_to_nchw", {random_tensor({8, 3}, r)},
                        [](const V& a) { return ops::rows_to_nchw(a[0], 2, 2, 2); }, o);
  });
  add("sa_block", [](const GradCheckOptions& o) {
    SplitMix64 r(31);
    ParamSet pf;
    layers::add_sa_block(pf, "sa", 2, 8, r);
    const DParamSet p = pf.cast<double>();
    const std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 1, 0, 0};
    return check_inputs("sa_block", {random_tensor({8, 8}, r)},
                        [&p, mask](const V& a) { return layers::sa_block(a[0], p, "sa", 2, 4, 2, mask); }, o);
  });
  add("image_tower", [](const GradCheckOptions& o) {
    SplitMix64 r(32);
    const EncoderConfig cfg = gc_detail::desk_encoder();
    auto enc = ImageEncoder(cfg, r).cast<double>();
    DTensor images = random_tensor({2, 3, cfg.image_size, cfg.image_size}, r, 0.0f, 1.0f);
    GradCheckOptions oi = o;
    oi.max_elements = 96;
    auto rep = check_inputs("image_tower", {images}, [&enc](const V& a) { return enc.encode(a[0]); }, oi);
    const DTensor fixed = images.detach();
    const auto params = gc_detail::check_params<BasicImageEncoder<double>>(
        "image_tower", enc, [fixed](const BasicImageEncoder<double>& e) { return e.encode(fixed); }, o, 6);
    rep.errors.insert(rep.errors.end(), params.errors.begin(), params.errors.end());
    rep.max_rel_error = std::max(rep.max_rel_error, params.max_rel_error);
    return rep;
  });
  add("text_tower", [](const GradCheckOptions& o) {
    SplitMix64 r(33);
    const EncoderConfig cfg = gc_detail::desk_encoder();
    auto enc = TextEncoder(cfg, r).cast<double>();
    const TokenBatch tokens = TokenBatch::from_texts({"a large red circle", "small blue square and green triangle"},
                                                     cfg.max_text_len);
    return gc_detail::check_params<BasicTextEncoder<double>>(
        "text_tower", enc, [tokens](const BasicTextEncoder<double>& e) { return e.encode(tokens); }, o, 6);
  });
  add("info_nce", [](const GradCheckOptions& o) {
    SplitMix64 r(34);
    NegativeQueue q(12, 5);
    q.enqueue(ops::l2_normalize(random_tensor({8, 5}, r)).detach());
    const auto ids = q.enqueue(ops::l2_normalize(random_tensor({4, 5}, r)).detach());
    return check_inputs("info_nce", {random_tensor({4, 5}, r)},
                        [&q, ids](const V& a) { return info_nce(ops::l2_normalize(a[0]), q, ids, 0.07f); }, o);
  });
  add("in_batch_loss", [](const GradCheckOptions& o) {
    SplitMix64 r(35);
    return check_inputs("in_batch_loss", {random_tensor({4, 5}, r), random_tensor({4, 5}, r)},
                        [](const V& a) {
                          return in_batch_loss(ops::l2_normalize(a[0]), ops::l2_normalize(a[1]), 0.07f).total;
                        },
                        o);
  });
  return cases;
}

}  // namespace brivl
