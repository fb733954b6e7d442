#pragma once

// Synthetic weakly-correlated image/text pairs: 1-3 colored shapes on a
// textured background, described by a text that mentions only some of the
// scene's attributes plus filler words.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "brivl/binary_io.hpp"
#include "brivl/corpus.hpp"
#include "brivl/errors.hpp"
#include "brivl/parallel.hpp"
#include "brivl/rng.hpp"
#include "brivl/tensor.hpp"

namespace brivl {

inline constexpr std::size_t kGridCells = 4;  // scenes live on a 4x4 grid
inline constexpr double kMentionProbability = 0.6;

struct SceneObject {
  std::uint8_t shape = 0;  // index into corpus::kShapes
  std::uint8_t color = 0;  // index into corpus::kColors
  std::uint8_t size = 0;   // 0 small, 1 large
  std::uint8_t cell = 0;   // row * 4 + col

  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  std::uint8_t background = 0;

  bool operator==(const SceneSpec&) const = default;

  void validate() const {
    if (objects.empty() || objects.size() > 3)
      throw InvalidArgument("scene: needs 1-3 objects, got " + std::to_string(objects.size()));
    if (background >= corpus::kBackgrounds.size()) throw InvalidArgument("scene: unknown background");
    for (std::size_t i = 0; i < objects.size(); ++i) {
      const auto& o = objects[i];
      if (o.shape >= corpus::kShapes.size() || o.color >= corpus::kColors.size() || o.size > 1 ||
          o.cell >= kGridCells * kGridCells)
        throw InvalidArgument("scene: object " + std::to_string(i) + " has an out-of-range attribute");
      for (std::size_t j = 0; j < i; ++j)
        if (objects[j].cell == o.cell) throw InvalidArgument("scene: two objects share grid cell " + std::to_string(o.cell));
    }
  }

  // "bg=stripes;large:red:circle@1,2;small:blue:square@3,0"
  std::string descriptor() const {
    std::string s = "bg=" + std::string(corpus::kBackgrounds[background]);
    for (const auto& o : objects)
      s += ";" + std::string(corpus::kSizes[o.size]) + ":" + std::string(corpus::kColors[o.color]) + ":" +
           std::string(corpus::kShapes[o.shape]) + "@" + std::to_string(o.cell / kGridCells) + "," +
           std::to_string(o.cell % kGridCells);
    return s;
  }

  static SceneSpec parse(const std::string& text) {
    auto fail = [&] { return InvalidArgument("scene: cannot parse descriptor '" + text + "'"); };
    auto find = [&](const auto& list, const std::string& word) -> std::uint8_t {
      for (std::size_t i = 0; i < list.size(); ++i)
        if (list[i] == word) return static_cast<std::uint8_t>(i);
      throw fail();
    };
    SceneSpec spec;
    std::stringstream ss(text);
    std::string part;
    bool first = true;
    while (std::getline(ss, part, ';')) {
      if (first) {
        if (part.rfind("bg=", 0) != 0) throw fail();
        spec.background = find(corpus::kBackgrounds, part.substr(3));
        first = false;
        continue;
      }
      const auto c1 = part.find(':'), c2 = part.find(':', c1 + 1), at = part.find('@'), comma = part.find(',', at);
      if (c1 == std::string::npos || c2 == std::string::npos || at == std::string::npos || comma == std::string::npos)
        throw fail();
      SceneObject o;
      o.size = find(corpus::kSizes, part.substr(0, c1));
      o.color = find(corpus::kColors, part.substr(c1 + 1, c2 - c1 - 1));
      o.shape = find(corpus::kShapes, part.substr(c2 + 1, at - c2 - 1));
      const std::string row = part.substr(at + 1, comma - at - 1), col = part.substr(comma + 1);
      if (row.size() != 1 || col.size() != 1 || row[0] < '0' || row[0] > '3' || col[0] < '0' || col[0] > '3')
        throw fail();
      o.cell = static_cast<std::uint8_t>((row[0] - '0') * kGridCells + (col[0] - '0'));
      spec.objects.push_back(o);
    }
    if (first) throw fail();
    spec.validate();
    return spec;
  }
};

enum class Split : std::uint8_t { kTrain = 0, kTest = 1 };

struct PairRecord {
  std::vector<std::uint8_t> image;  // RGB interleaved, row-major, image_size^2 * 3 bytes
  std::string text;
  SceneSpec scene;
  Split split = Split::kTrain;

  bool operator==(const PairRecord&) const = default;
};

struct PairDataset {
  static constexpr std::uint16_t kVersion = 1;
  std::size_t image_size = 32;
  std::vector<PairRecord> records;

  bool operator==(const PairDataset&) const = default;

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == split) out.push_back(i);
    return out;
  }
};

struct GenerateOptions {
  std::size_t image_size = 32;
  std::optional<std::size_t> object_count;  // default: uniform in 1..3
};

inline SceneSpec random_scene(SplitMix64& rng, std::optional<std::size_t> object_count = std::nullopt) {
  const std::size_t count = object_count.value_or(1 + rng.below(3));
  SceneSpec spec;
  if (count == 0 || count > 3) throw InvalidArgument("scene: needs 1-3 objects, got " + std::to_string(count));
  std::array<std::uint8_t, kGridCells * kGridCells> cells{};
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<std::uint8_t>(i);
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(cells[i], cells[i + rng.below(cells.size() - i)]);
    SceneObject o;
    o.shape = static_cast<std::uint8_t>(rng.below(corpus::kShapes.size()));
    o.color = static_cast<std::uint8_t>(rng.below(corpus::kColors.size()));
    o.size = static_cast<std::uint8_t>(rng.below(2));
    o.cell = cells[i];
    spec.objects.push_back(o);
  }
  spec.background = static_cast<std::uint8_t>(rng.below(corpus::kBackgrounds.size()));
  return spec;
}

namespace datagen_detail {

// Point-in-shape test relative to the object center, in pixels.
inline bool inside(std::uint8_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:
      return dx * dx + dy * dy <= r * r;
    case 1:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    default: {
      const double t = 1.15 * r;  // apex up, base at +t/2
      return dy >= -t && dy <= 0.5 * t && std::abs(dx) <= (dy + t) * 0.5773502691896258;
    }
  }
}

inline float background_value(std::uint8_t bg, std::size_t x, std::size_t y, SplitMix64& rng) {
  switch (bg) {
    case 0:
      return 0.45f;
    case 1:
      return (y / 2) % 2 ? 0.35f : 0.55f;
    case 2:
      return ((x / 4) + (y / 4)) % 2 ? 0.35f : 0.55f;
    default:
      return 0.45f + rng.uniform(-0.1f, 0.1f);
  }
}

}  // namespace datagen_detail

// Anti-aliased rendering by 4x4 supersampling. Returns RGB bytes.
inline std::vector<std::uint8_t> render_scene(const SceneSpec& spec, std::size_t image_size, SplitMix64& rng) {
  spec.validate();
  const double cell = static_cast<double>(image_size) / kGridCells;
  std::vector<float> rgb(image_size * image_size * 3);
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x) {
      const float v = datagen_detail::background_value(spec.background, x, y, rng);
      for (std::size_t c = 0; c < 3; ++c) rgb[(y * image_size + x) * 3 + c] = v;
    }
  constexpr int kSub = 4;
  for (const auto& o : spec.objects) {
    const double cx = (o.cell % kGridCells + 0.5) * cell, cy = (o.cell / kGridCells + 0.5) * cell;
    const double r = (o.size ? 0.46 : 0.30) * cell;
    const auto& color = corpus::kColorRgb[o.color];
    const std::size_t x0 = static_cast<std::size_t>(std::max(0.0, std::floor(cx - cell / 2)));
    const std::size_t y0 = static_cast<std::size_t>(std::max(0.0, std::floor(cy - cell / 2)));
    const std::size_t x1 = std::min(image_size, static_cast<std::size_t>(std::ceil(cx + cell / 2)));
    const std::size_t y1 = std::min(image_size, static_cast<std::size_t>(std::ceil(cy + cell / 2)));
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) {
        int hits = 0;
        for (int sy = 0; sy < kSub; ++sy)
          for (int sx = 0; sx < kSub; ++sx) {
            const double px = x + (sx + 0.5) / kSub, py = y + (sy + 0.5) / kSub;
            hits += datagen_detail::inside(o.shape, px - cx, py - cy, r);
          }
        const float alpha = static_cast<float>(hits) / (kSub * kSub);
        for (std::size_t c = 0; c < 3; ++c) {
          float& p = rgb[(y * image_size + x) * 3 + c];
          p = p * (1.0f - alpha) + color[c] * alpha;
        }
      }
  }
  std::vector<std::uint8_t> out(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i)
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb[i], 0.0f, 1.0f) * 255.0f));
  return out;
}

// Which of (size, color, shape) each object's description mentions.
using MentionFlags = std::vector<std::array<bool, 3>>;

// Partial description: every attribute is mentioned independently with
// probability 0.6; at least one attribute is always mentioned, and scenes
// with >= 2 objects never get all attributes (cap ceil(0.75 * count)).
// 0-3 filler words are inserted at random positions.
inline std::string describe_scene(const SceneSpec& spec, SplitMix64& rng, MentionFlags* mentions_out = nullptr) {
  spec.validate();
  const std::size_t attrs = spec.objects.size() * 3;
  MentionFlags mentions(spec.objects.size());
  std::vector<std::size_t> on;
  for (std::size_t i = 0; i < attrs; ++i) {
    mentions[i / 3][i % 3] = rng.bernoulli(kMentionProbability);
    if (mentions[i / 3][i % 3]) on.push_back(i);
  }
  const std::size_t cap = spec.objects.size() >= 2 ? (3 * attrs + 3) / 4 : attrs;
  while (on.size() > cap) {
    const std::size_t k = rng.below(on.size());
    mentions[on[k] / 3][on[k] % 3] = false;
    on.erase(on.begin() + static_cast<std::ptrdiff_t>(k));
  }
  if (on.empty()) {
    const std::size_t k = rng.below(attrs);
    mentions[k / 3][k % 3] = true;
  }

  std::vector<std::string> words;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    const auto& m = mentions[i];
    if (!m[0] && !m[1] && !m[2]) continue;
    if (!words.empty()) words.emplace_back("and");
    if (m[0]) words.emplace_back(corpus::kSizes[o.size]);
    if (m[1]) words.emplace_back(corpus::kColors[o.color]);
    if (m[2]) words.emplace_back(corpus::kShapes[o.shape]);
  }
  if (rng.bernoulli(0.5)) words.insert(words.begin(), "a");
  const std::size_t fillers = rng.below(4);
  for (std::size_t f = 0; f < fillers; ++f) {
    const std::string filler(corpus::kFillers[rng.below(corpus::kFillers.size())]);
    words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(words.size() + 1)), filler);
  }
  std::string text;
  for (std::size_t i = 0; i < words.size(); ++i) text += (i ? " " : "") + words[i];
  if (mentions_out) *mentions_out = std::move(mentions);
  return text;
}

inline PairRecord generate_pair(SplitMix64& rng, const GenerateOptions& opts = {}) {
  PairRecord rec;
  rec.scene = random_scene(rng, opts.object_count);
  rec.image = render_scene(rec.scene, opts.image_size, rng);
  rec.text = describe_scene(rec.scene, rng);
  return rec;
}

// Record i is generated from its own stream derive_stream(seed, i); the last
// test_count records are tagged as the test split.
inline PairDataset generate_dataset(std::uint64_t seed, std::size_t size, std::size_t test_count = 0,
                                    const GenerateOptions& opts = {}) {
  if (size == 0) throw InvalidArgument("generate_dataset: size must be positive");
  if (test_count > size) throw InvalidArgument("generate_dataset: test_count exceeds size");
  PairDataset ds;
  ds.image_size = opts.image_size;
  ds.records.resize(size);
  parallel_for(size, [&](std::size_t i) {
    SplitMix64 rng = derive_stream(seed, i);
    ds.records[i] = generate_pair(rng, opts);
    ds.records[i].split = i >= size - test_count ? Split::kTest : Split::kTrain;
  });
  return ds;
}

// Bytes -> [N,3,S,S] floats in [0,1].
inline Tensor images_to_tensor(const PairDataset& ds, const std::vector<std::size_t>& indices) {
  const std::size_t s = ds.image_size, plane = s * s;
  std::vector<float> out(indices.size() * 3 * plane);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto& img = ds.records.at(indices[n]).image;
    for (std::size_t p = 0; p < plane; ++p)
      for (std::size_t c = 0; c < 3; ++c) out[(n * 3 + c) * plane + p] = img[p * 3 + c] / 255.0f;
  }
  return Tensor::from({indices.size(), 3, s, s}, std::move(out));
}

// ---------------------------------------------------------------------------
// File format (little-endian):
//   "WSCD-TOY" | u16 version | u64 record count | u16 image side
//   per record: u8 split | image bytes | u32 len + text | u32 len + scene

inline constexpr char kDatasetMagic[8] = {'W', 'S', 'C', 'D', '-', 'T', 'O', 'Y'};

inline std::vector<std::uint8_t> encode_dataset(const PairDataset& ds) {
  ByteWriter w;
  w.bytes(kDatasetMagic, sizeof kDatasetMagic);
  w.u16(PairDataset::kVersion);
  w.u64(ds.records.size());
  w.u16(static_cast<std::uint16_t>(ds.image_size));
  const std::size_t image_bytes = ds.image_size * ds.image_size * 3;
  for (const auto& r : ds.records) {
    if (r.image.size() != image_bytes) throw InvalidArgument("write_dataset: record image has the wrong size");
    w.u8(static_cast<std::uint8_t>(r.split));
    w.bytes(r.image.data(), r.image.size());
    w.str(r.text);
    w.str(r.scene.descriptor());
  }
  return std::move(w.buffer());
}

inline PairDataset decode_dataset(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[8];
  r.bytes(magic, sizeof magic, "magic");
  if (!std::equal(magic, magic + 8, kDatasetMagic))
    throw FormatError(FormatError::Kind::kBadMagic, 0, "not a WSCD-TOY dataset file");
  const std::size_t version_at = r.offset();
  const std::uint16_t version = r.u16("version");
  if (version != PairDataset::kVersion)
    throw FormatError(FormatError::Kind::kVersion, version_at,
                      "dataset version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(PairDataset::kVersion) + ")");
  const std::uint64_t count = r.u64("record count");
  const std::size_t side_at = r.offset();
  PairDataset ds;
  ds.image_size = r.u16("image size");
  if (ds.image_size == 0) throw FormatError(FormatError::Kind::kCorrupt, side_at, "image size is zero");
  const std::size_t image_bytes = ds.image_size * ds.image_size * 3;
  // Each record needs at least split + image + two length prefixes.
  r.need(std::min<std::uint64_t>(count, SIZE_MAX / (image_bytes + 9)) * (image_bytes + 9), "records");
  ds.records.resize(count);
  for (auto& rec : ds.records) {
    const std::size_t at = r.offset();
    const std::uint8_t split = r.u8("split tag");
    if (split > 1) throw FormatError(FormatError::Kind::kCorrupt, at, "invalid split tag");
    rec.split = static_cast<Split>(split);
    rec.image.resize(image_bytes);
    r.bytes(rec.image.data(), image_bytes, "image");
    rec.text = r.str("text");
    const std::size_t scene_at = r.offset();
    const std::string scene = r.str("scene descriptor");
    try {
      rec.scene = SceneSpec::parse(scene);
    } catch (const InvalidArgument& e) {
      throw FormatError(FormatError::Kind::kCorrupt, scene_at, e.what());
    }
  }
  if (r.remaining() != 0)
    throw FormatError(FormatError::Kind::kCorrupt, r.offset(), "trailing bytes after the last record");
  return ds;
}

inline void write_dataset(const PairDataset& ds, const std::string& path) { write_file_bytes(path, encode_dataset(ds)); }

inline PairDataset read_dataset(const std::string& path) { return decode_dataset(read_file_bytes(path)); }

}  // namespace brivl
