#pragma once

// End-to-end drivers shared by the command-line tool and the acceptance
// runner: pre-training with per-epoch checkpoints, the evaluation tasks and
// the probe sets they run on.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "brivl/checkpoint.hpp"
#include "brivl/config.hpp"
#include "brivl/corpus.hpp"
#include "brivl/datagen.hpp"
#include "brivl/errors.hpp"
#include "brivl/evaluation.hpp"
#include "brivl/tensor.hpp"
#include "brivl/trainer.hpp"

namespace brivl {

// Indices of the evaluation split; datasets without a test split use all records.
inline std::vector<std::size_t> eval_indices(const PairDataset& ds) {
  auto idx = ds.indices(Split::kTest);
  if (idx.empty()) idx = ds.indices(Split::kTrain);
  if (idx.empty()) throw InvalidArgument("dataset has no records");
  return idx;
}

struct EmbeddedSet {
  Tensor images;  // [n, d]
  Tensor texts;   // [n, d]
};

inline EmbeddedSet embed_pairs(const ImageEncoder& image, const TextEncoder& text, const PairDataset& ds,
                               const std::vector<std::size_t>& indices) {
  NoGradGuard guard;
  const PairBatch b = make_batch(ds, indices, text.config().max_text_len);
  return {image.encode(b.images), text.encode(b.tokens)};
}

inline RetrievalSummary evaluate_retrieval(const ImageEncoder& image, const TextEncoder& text, const PairDataset& ds,
                                           const std::vector<std::size_t>& indices) {
  const EmbeddedSet e = embed_pairs(image, text, ds, indices);
  return retrieval_eval(e.images, e.texts, diagonal_matches(indices.size()));
}

// Single-object scenes labelled by the object's shape.
struct ShapeProbeSet {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
};

inline ShapeProbeSet single_object_records(const PairDataset& ds, const std::vector<std::size_t>& indices) {
  ShapeProbeSet s;
  for (std::size_t i : indices) {
    const SceneSpec& scene = ds.records.at(i).scene;
    if (scene.objects.size() != 1) continue;
    s.indices.push_back(i);
    s.labels.push_back(scene.objects[0].shape);
  }
  return s;
}

inline std::vector<std::string> shape_class_names() {
  return {corpus::kShapes.begin(), corpus::kShapes.end()};
}

inline ZeroShotReport evaluate_zero_shot(const ImageEncoder& image, const TextEncoder& text, const PairDataset& ds,
                                         const ShapeProbeSet& probe) {
  if (probe.indices.empty()) throw InvalidArgument("zero-shot: no single-object scenes to classify");
  NoGradGuard guard;
  const Tensor items = image.encode(images_to_tensor(ds, probe.indices));
  return zero_shot_classify(items, shape_class_names(), probe.labels,
                            [&](const std::vector<std::string>& names) { return text.encode(names); });
}

// Distinct texts of the given records, in first-seen order.
inline std::vector<std::string> distinct_texts(const PairDataset& ds, const std::vector<std::size_t>& indices) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (std::size_t i : indices)
    if (seen.insert(ds.records.at(i).text).second) out.push_back(ds.records[i].text);
  return out;
}

// ---------------------------------------------------------------------------
// Pre-training

struct PretrainResult {
  std::uint64_t epochs_run = 0;
  std::uint64_t final_epoch = 0;
  std::uint64_t final_step = 0;
};

// Runs warm-up (queue mode, fresh runs only) and the remaining epochs up to
// cfg.trainer.epochs, writing `checkpoint_path` after every epoch and one
// metrics line per step to `metrics` (header first on fresh runs).
inline PretrainResult run_pretraining(const RunConfig& cfg, const PairDataset& ds, const std::string& checkpoint_path,
                                      const std::optional<std::string>& resume_path, std::ostream* metrics,
                                      const std::function<void(const Trainer&)>& on_epoch = {}) {
  cfg.validate();
  if (ds.image_size != cfg.encoder.image_size)
    throw FormatError(FormatError::Kind::kConfigMismatch, 0,
                      "dataset images are " + std::to_string(ds.image_size) + " px, config image_size is " +
                          std::to_string(cfg.encoder.image_size));
  const auto train = ds.indices(Split::kTrain);
  if (train.size() < cfg.trainer.batch_size)
    throw InvalidArgument("pretrain: " + std::to_string(train.size()) + " training records, fewer than one batch");

  Trainer tr = resume_path ? load_trainer(*resume_path, &cfg) : Trainer(cfg);
  PretrainResult res;
  if (!resume_path) {
    if (metrics) *metrics << metrics_header() << "\n";
    tr.warmup(ds, train);
  }
  while (tr.epoch() < cfg.trainer.epochs) {
    tr.run_epoch(ds, train, [&](const StepMetrics& m) {
      if (metrics) *metrics << format_metrics(m) << "\n";
    });
    if (metrics) metrics->flush();
    save_trainer(checkpoint_path, tr);
    ++res.epochs_run;
    if (on_epoch) on_epoch(tr);
  }
  res.final_epoch = tr.epoch();
  res.final_step = tr.step();
  return res;
}

}  // namespace brivl
