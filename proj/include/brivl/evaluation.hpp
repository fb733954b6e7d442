#pragma once

// Retrieval and zero-shot protocols over embedding matrices.
// Retrieval ranks by dot product; classification and neighbor search use
// cosine similarity. Ties always go to the lower candidate index.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "brivl/errors.hpp"
#include "brivl/tensor.hpp"

namespace brivl {

inline constexpr std::array<std::size_t, 3> kRecallKs{1, 5, 10};

enum class Direction { kImageToText, kTextToImage };

struct RetrievalReport {
  Direction direction = Direction::kImageToText;
  std::array<double, 3> recall{};  // percentages at k = 1, 5, 10
};

struct RetrievalSummary {
  RetrievalReport image_to_text{Direction::kImageToText, {}};
  RetrievalReport text_to_image{Direction::kTextToImage, {}};
  double recall_sum = 0.0;
};

namespace eval_detail {

inline void check_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected [n,d], got " + shape_str(t.shape()));
}

inline double row_dot(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j) {
  const std::size_t d = a.dim(1);
  double acc = 0.0;
  for (std::size_t c = 0; c < d; ++c) acc += static_cast<double>(a.data()[i * d + c]) * b.data()[j * d + c];
  return acc;
}

inline double row_norm(const Tensor& a, std::size_t i) { return std::sqrt(row_dot(a, i, a, i)); }

// 0-based rank of candidate j in a descending ranking with index tie-break.
inline std::size_t rank_of(const std::vector<double>& scores, std::size_t j) {
  std::size_t r = 0;
  for (std::size_t k = 0; k < scores.size(); ++k)
    if (scores[k] > scores[j] || (scores[k] == scores[j] && k < j)) ++r;
  return r;
}

inline RetrievalReport recall_one_way(const Tensor& queries, const Tensor& candidates,
                                      const std::vector<std::vector<std::size_t>>& truth, Direction dir) {
  RetrievalReport rep;
  rep.direction = dir;
  std::array<std::size_t, 3> hits{};
  std::vector<double> scores(candidates.dim(0));
  for (std::size_t q = 0; q < queries.dim(0); ++q) {
    for (std::size_t c = 0; c < scores.size(); ++c) scores[c] = row_dot(queries, q, candidates, c);
    std::size_t best = scores.size();
    for (std::size_t j : truth[q]) best = std::min(best, rank_of(scores, j));
    for (std::size_t k = 0; k < kRecallKs.size(); ++k) hits[k] += best < kRecallKs[k];
  }
  for (std::size_t k = 0; k < kRecallKs.size(); ++k)
    rep.recall[k] = 100.0 * static_cast<double>(hits[k]) / static_cast<double>(queries.dim(0));
  return rep;
}

}  // namespace eval_detail

// Recall@{1,5,10} in both directions. `matches` lists ground-truth
// (image index, text index) pairs; every image and every text needs at
// least one.
inline RetrievalSummary retrieval_eval(const Tensor& image_embeddings, const Tensor& text_embeddings,
                                       const std::vector<std::pair<std::size_t, std::size_t>>& matches) {
  eval_detail::check_matrix("retrieval_eval", image_embeddings);
  eval_detail::check_matrix("retrieval_eval", text_embeddings);
  if (image_embeddings.dim(1) != text_embeddings.dim(1))
    throw ShapeError("retrieval_eval: embedding widths differ: " + shape_str(image_embeddings.shape()) + " vs " +
                     shape_str(text_embeddings.shape()));
  const std::size_t n = image_embeddings.dim(0), m = text_embeddings.dim(0);
  if (kRecallKs.back() > n || kRecallKs.back() > m)
    throw InvalidArgument("retrieval_eval: k = " + std::to_string(kRecallKs.back()) + " exceeds the candidate count");
  std::vector<std::vector<std::size_t>> i2t(n), t2i(m);
  for (const auto& [i, t] : matches) {
    if (i >= n || t >= m) throw InvalidArgument("retrieval_eval: match index out of range");
    i2t[i].push_back(t);
    t2i[t].push_back(i);
  }
  for (std::size_t i = 0; i < n; ++i)
    if (i2t[i].empty()) throw InvalidArgument("retrieval_eval: image " + std::to_string(i) + " has no ground truth");
  for (std::size_t t = 0; t < m; ++t)
    if (t2i[t].empty()) throw InvalidArgument("retrieval_eval: text " + std::to_string(t) + " has no ground truth");

  RetrievalSummary s;
  s.image_to_text = eval_detail::recall_one_way(image_embeddings, text_embeddings, i2t, Direction::kImageToText);
  s.text_to_image = eval_detail::recall_one_way(text_embeddings, image_embeddings, t2i, Direction::kTextToImage);
  for (double r : s.image_to_text.recall) s.recall_sum += r;
  for (double r : s.text_to_image.recall) s.recall_sum += r;
  return s;
}

inline std::vector<std::pair<std::size_t, std::size_t>> diagonal_matches(std::size_t n) {
  std::vector<std::pair<std::size_t, std::size_t>> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = {i, i};
  return m;
}

struct ZeroShotReport {
  std::vector<std::string> classes;
  std::vector<double> per_class_accuracy;  // percent; NaN for classes with no items
  double accuracy = 0.0;                   // percent
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> predictions;
};

// Assigns each item the class whose embedding has the highest cosine
// similarity with it.
inline ZeroShotReport zero_shot_from_embeddings(const Tensor& items, const Tensor& class_embeddings,
                                                const std::vector<std::size_t>& labels,
                                                std::vector<std::string> class_names) {
  eval_detail::check_matrix("zero_shot_classify", items);
  eval_detail::check_matrix("zero_shot_classify", class_embeddings);
  const std::size_t c = class_embeddings.dim(0);
  if (c < 2) throw InvalidArgument("zero_shot_classify: needs at least 2 classes");
  if (items.dim(1) != class_embeddings.dim(1)) throw ShapeError("zero_shot_classify: embedding widths differ");
  if (labels.size() != items.dim(0)) throw ShapeError("zero_shot_classify: one label per item required");
  if (class_names.size() != c) throw ShapeError("zero_shot_classify: one name per class required");

  ZeroShotReport rep;
  rep.classes = std::move(class_names);
  rep.confusion.assign(c, std::vector<std::size_t>(c, 0));
  std::vector<double> class_norm(c);
  for (std::size_t k = 0; k < c; ++k) class_norm[k] = eval_detail::row_norm(class_embeddings, k);
  for (std::size_t i = 0; i < items.dim(0); ++i) {
    if (labels[i] >= c) throw InvalidArgument("zero_shot_classify: label out of range");
    const double in = eval_detail::row_norm(items, i);
    std::size_t best = 0;
    double best_score = -2.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double cos = eval_detail::row_dot(items, i, class_embeddings, k) / (in * class_norm[k]);
      if (cos > best_score) {
        best_score = cos;
        best = k;
      }
    }
    rep.predictions.push_back(best);
    ++rep.confusion[labels[i]][best];
    rep.correct += best == labels[i];
  }
  rep.total = items.dim(0);
  rep.accuracy = rep.total ? 100.0 * static_cast<double>(rep.correct) / static_cast<double>(rep.total) : 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t row = 0;
    for (std::size_t v : rep.confusion[k]) row += v;
    rep.per_class_accuracy.push_back(row ? 100.0 * static_cast<double>(rep.confusion[k][k]) / row : std::nan(""));
  }
  return rep;
}

// Class names go through the text encoder once; `encode_texts` maps a list
// of strings to an [n, d] embedding matrix.
template <typename EncodeTexts>
ZeroShotReport zero_shot_classify(const Tensor& items, const std::vector<std::string>& class_names,
                                  const std::vector<std::size_t>& labels, EncodeTexts&& encode_texts) {
  if (class_names.size() < 2) throw InvalidArgument("zero_shot_classify: needs at least 2 classes");
  if (std::set<std::string>(class_names.begin(), class_names.end()).size() != class_names.size())
    throw InvalidArgument("zero_shot_classify: duplicate class names");
  const Tensor class_embeddings = encode_texts(class_names);
  return zero_shot_from_embeddings(items, class_embeddings, labels, class_names);
}

struct Neighbor {
  std::size_t index = 0;
  double score = 0.0;
};

// Top-k candidates by cosine similarity to the query row [1, d] (or [d]).
inline std::vector<Neighbor> topk_neighbors(const Tensor& query, const Tensor& candidates, std::size_t k) {
  eval_detail::check_matrix("topk_text_neighbors", candidates);
  if (candidates.dim(0) == 0) throw InvalidArgument("topk_text_neighbors: no candidates");
  if (query.numel() != candidates.dim(1)) throw ShapeError("topk_text_neighbors: query width differs");
  if (k == 0 || k > candidates.dim(0))
    throw InvalidArgument("topk_text_neighbors: k = " + std::to_string(k) + " outside [1, " +
                          std::to_string(candidates.dim(0)) + "]");
  const Tensor q = Tensor::from({1, query.numel()}, query.values());
  const double qn = eval_detail::row_norm(q, 0);
  std::vector<Neighbor> all(candidates.dim(0));
  for (std::size_t c = 0; c < all.size(); ++c)
    all[c] = {c, eval_detail::row_dot(q, 0, candidates, c) / (qn * eval_detail::row_norm(candidates, c))};
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) { return a.score > b.score; });
  all.resize(k);
  return all;
}

template <typename EncodeTexts>
std::vector<Neighbor> topk_text_neighbors(const std::string& query, const std::vector<std::string>& candidates,
                                          std::size_t k, EncodeTexts&& encode_texts) {
  if (candidates.empty()) throw InvalidArgument("topk_text_neighbors: no candidates");
  if (k == 0 || k > candidates.size())
    throw InvalidArgument("topk_text_neighbors: k = " + std::to_string(k) + " outside [1, " +
                          std::to_string(candidates.size()) + "]");
  return topk_neighbors(encode_texts(std::vector<std::string>{query}), encode_texts(candidates), k);
}

// ---------------------------------------------------------------------------
// Report rendering: aligned text for people, key=value lines for machines.

inline std::string format_retrieval_text(const RetrievalSummary& s) {
  char buf[256];
  std::string out = "direction        R@1      R@5      R@10\n";
  auto row = [&](const char* name, const RetrievalReport& r) {
    std::snprintf(buf, sizeof buf, "%-14s %7.2f  %7.2f  %7.2f\n", name, r.recall[0], r.recall[1], r.recall[2]);
    out += buf;
  };
  row("image->text", s.image_to_text);
  row("text->image", s.text_to_image);
  std::snprintf(buf, sizeof buf, "Recall@SUM     %7.2f\n", s.recall_sum);
  return out + buf;
}

inline std::string format_retrieval_kv(const RetrievalSummary& s) {
  char buf[128];
  std::string out;
  const char* dirs[] = {"i2t", "t2i"};
  const RetrievalReport* reps[] = {&s.image_to_text, &s.text_to_image};
  for (std::size_t d = 0; d < 2; ++d)
    for (std::size_t k = 0; k < kRecallKs.size(); ++k) {
      std::snprintf(buf, sizeof buf, "%s_recall_at_%zu=%.6f\n", dirs[d], kRecallKs[k], reps[d]->recall[k]);
      out += buf;
    }
  std::snprintf(buf, sizeof buf, "recall_sum=%.6f\n", s.recall_sum);
  return out + buf;
}

inline std::string format_zeroshot_text(const ZeroShotReport& r) {
  char buf[256];
  std::string out = "class          accuracy   count\n";
  for (std::size_t k = 0; k < r.classes.size(); ++k) {
    std::size_t row = 0;
    for (std::size_t v : r.confusion[k]) row += v;
    std::snprintf(buf, sizeof buf, "%-14s %7.2f  %6zu\n", r.classes[k].c_str(), r.per_class_accuracy[k], row);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "overall        %7.2f  %6zu\n", r.accuracy, r.total);
  out += buf;
  out += "confusion (rows = true, columns = predicted)\n";
  for (const auto& row : r.confusion) {
    for (std::size_t v : row) {
      std::snprintf(buf, sizeof buf, "%6zu", v);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

inline std::string format_zeroshot_kv(const ZeroShotReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "accuracy=%.6f\ncorrect=%zu\ntotal=%zu\n", r.accuracy, r.correct, r.total);
  std::string out = buf;
  for (std::size_t k = 0; k < r.classes.size(); ++k) {
    std::snprintf(buf, sizeof buf, "accuracy_%s=%.6f\n", r.classes[k].c_str(), r.per_class_accuracy[k]);
    out += buf;
    for (std::size_t j = 0; j < r.classes.size(); ++j) {
      std::snprintf(buf, sizeof buf, "confusion_%s_%s=%zu\n", r.classes[k].c_str(), r.classes[j].c_str(),
                    r.confusion[k][j]);
      out += buf;
    }
  }
  return out;
}

}  // namespace brivl
