#pragma once

// Checkpoint container:
//   "BRIVLCKPT" | u16 version | u64 file length | u8 kind | str config snapshot
//   | u32 n, n x (str name, u64 value)                          counters
//   | u32 n, n x (str name, u8 rank, rank x u64 dim, f32 data)  tensors
//   | u32 CRC-32 of every preceding byte
// Little-endian throughout; strings are u32-length prefixed.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "brivl/binary_io.hpp"
#include "brivl/config.hpp"
#include "brivl/errors.hpp"
#include "brivl/generator.hpp"
#include "brivl/tensor.hpp"
#include "brivl/trainer.hpp"

namespace brivl {

inline constexpr char kCheckpointMagic[9] = {'B', 'R', 'I', 'V', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class CheckpointKind : std::uint8_t { kTraining = 1, kGenerator = 2 };

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kTraining;
  std::string config;
  std::vector<std::pair<std::string, std::uint64_t>> counters;
  std::vector<std::pair<std::string, Tensor>> tensors;

  std::uint64_t counter(const std::string& name) const {
    for (const auto& [n, v] : counters)
      if (n == name) return v;
    throw FormatError(FormatError::Kind::kCorrupt, 0, "checkpoint: missing counter " + name);
  }
  const Tensor& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw FormatError(FormatError::Kind::kCorrupt, 0, "checkpoint: missing tensor " + name);
  }
};

inline std::uint32_t crc32_of(const std::uint8_t* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u16(kCheckpointVersion);
  const std::size_t length_at = w.buffer().size();
  w.u64(0);
  w.u8(static_cast<std::uint8_t>(ck.kind));
  w.str(ck.config);
  w.u32(static_cast<std::uint32_t>(ck.counters.size()));
  for (const auto& [name, v] : ck.counters) {
    w.str(name);
    w.u64(v);
  }
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    w.str(name);
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    w.f32s(t.data().data(), t.numel());
  }
  const std::uint64_t length = w.buffer().size() + 4;
  std::memcpy(w.buffer().data() + length_at, &length, sizeof length);
  w.u32(crc32_of(w.buffer().data(), w.buffer().size()));
  return std::move(w.buffer());
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  using Kind = FormatError::Kind;
  if (bytes.size() < sizeof kCheckpointMagic || !std::equal(kCheckpointMagic, kCheckpointMagic + 9, bytes.begin()))
    throw FormatError(Kind::kBadMagic, 0, "checkpoint: bad magic");
  {
    ByteReader v(bytes);
    char magic[9];
    v.bytes(magic, 9, "magic");
    const std::uint16_t version = v.u16("version");
    if (version != kCheckpointVersion)
      throw FormatError(Kind::kVersion, 9,
                        "checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                            std::to_string(kCheckpointVersion) + ")");
    const std::uint64_t length = v.u64("file length");
    if (bytes.size() < length)
      throw FormatError(Kind::kTruncated, bytes.size(),
                        "checkpoint: truncated file: " + std::to_string(bytes.size()) + " of " +
                            std::to_string(length) + " bytes present");
    if (bytes.size() > length || length < 9 + 2 + 8 + 4)
      throw FormatError(Kind::kCorrupt, 11, "checkpoint: length field disagrees with the file size");
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (crc32_of(bytes.data(), body) != stored) throw FormatError(Kind::kChecksum, body, "checkpoint: CRC-32 mismatch");

  ByteReader r(bytes, body);
  char magic[9];
  r.bytes(magic, 9, "magic");
  r.u16("version");
  r.u64("file length");
  Checkpoint ck;
  const std::size_t kind_at = r.offset();
  const std::uint8_t kind = r.u8("kind");
  if (kind != 1 && kind != 2) throw FormatError(Kind::kCorrupt, kind_at, "checkpoint: unknown kind " + std::to_string(kind));
  ck.kind = static_cast<CheckpointKind>(kind);
  ck.config = r.str("config snapshot");
  const std::uint32_t nc = r.u32("counter count");
  for (std::uint32_t i = 0; i < nc; ++i) {
    std::string name = r.str("counter name");
    ck.counters.emplace_back(std::move(name), r.u64("counter value"));
  }
  const std::uint32_t nt = r.u32("tensor count");
  for (std::uint32_t i = 0; i < nt; ++i) {
    std::string name = r.str("tensor name");
    const std::size_t rank_at = r.offset();
    const std::uint8_t rank = r.u8("tensor rank");
    if (rank == 0 || rank > 8) throw FormatError(Kind::kCorrupt, rank_at, "checkpoint: bad rank for " + name);
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.u64("tensor dim");
      if (d != 0 && numel > r.remaining() / d) throw FormatError(Kind::kCorrupt, rank_at, "checkpoint: bad shape for " + name);
      numel *= d;
    }
    r.need(numel * sizeof(float), "tensor data");
    std::vector<float> values(numel);
    r.bytes(values.data(), numel * sizeof(float), "tensor data");
    ck.tensors.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw FormatError(Kind::kCorrupt, r.offset(), "checkpoint: trailing bytes");
  return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  write_file_bytes(path, encode_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

// ---------------------------------------------------------------------------
// Trainer state

namespace ckpt_detail {

inline void put_params(Checkpoint& ck, const std::string& prefix, const ParamSet& ps) {
  for (const auto& [n, t] : ps) ck.tensors.emplace_back(prefix + n, t.detach());
}

inline void get_params(const Checkpoint& ck, const std::string& prefix, ParamSet& ps) {
  for (auto& [n, t] : ps) {
    const Tensor& src = ck.tensor(prefix + n);
    if (src.shape() != t.shape())
      throw FormatError(FormatError::Kind::kConfigMismatch, 0,
                        "checkpoint: " + prefix + n + " has shape " + shape_str(src.shape()) + ", model expects " +
                            shape_str(t.shape()));
    std::copy(src.data().begin(), src.data().end(), t.data().begin());
  }
}

inline void put_adam(Checkpoint& ck, const std::string& prefix, const ParamSet& ps, const AdamState& st) {
  std::size_t i = 0;
  for (const auto& [n, t] : ps) {
    ck.tensors.emplace_back(prefix + "m." + n, Tensor::from(t.shape(), st.m[i]));
    ck.tensors.emplace_back(prefix + "v." + n, Tensor::from(t.shape(), st.v[i]));
    ++i;
  }
  ck.counters.emplace_back(prefix + "t", st.t);
}

inline AdamState get_adam(const Checkpoint& ck, const std::string& prefix, const ParamSet& ps) {
  AdamState st;
  for (const auto& [n, t] : ps) {
    st.m.push_back(ck.tensor(prefix + "m." + n).values());
    st.v.push_back(ck.tensor(prefix + "v." + n).values());
    if (st.m.back().size() != t.numel() || st.v.back().size() != t.numel())
      throw FormatError(FormatError::Kind::kConfigMismatch, 0, "checkpoint: optimizer state for " + n + " mismatched");
  }
  st.t = ck.counter(prefix + "t");
  return st;
}

inline void put_queue(Checkpoint& ck, const std::string& prefix, const NegativeQueue& q) {
  std::vector<float> entries;
  for (std::size_t p = 0; p < q.size(); ++p) {
    auto e = q.entry(p);
    entries.insert(entries.end(), e.begin(), e.end());
  }
  if (q.size() > 0) ck.tensors.emplace_back(prefix + "entries", Tensor::from({q.size(), q.dim()}, std::move(entries)));
  ck.counters.emplace_back(prefix + "size", q.size());
  ck.counters.emplace_back(prefix + "next_id", q.next_id());
  ck.counters.emplace_back(prefix + "capacity", q.capacity());
}

inline NegativeQueue get_queue(const Checkpoint& ck, const std::string& prefix, std::size_t dim) {
  std::vector<float> values;
  if (ck.counter(prefix + "size") > 0) {
    const Tensor& e = ck.tensor(prefix + "entries");
    if (e.rank() != 2 || e.dim(1) != dim)
      throw FormatError(FormatError::Kind::kConfigMismatch, 0, "checkpoint: queue width does not match embed_dim");
    if (e.dim(0) != ck.counter(prefix + "size"))
      throw FormatError(FormatError::Kind::kCorrupt, 0, "checkpoint: queue size disagrees with its entries");
    values = e.values();
  }
  try {
    return NegativeQueue::restore(ck.counter(prefix + "capacity"), dim, values, ck.counter(prefix + "next_id"));
  } catch (const InvalidArgument& err) {
    throw FormatError(FormatError::Kind::kCorrupt, 0, std::string("checkpoint: ") + err.what());
  }
}

}  // namespace ckpt_detail

inline Checkpoint trainer_checkpoint(const Trainer& tr) {
  Checkpoint ck;
  ck.kind = CheckpointKind::kTraining;
  ck.config = serialize_config(tr.config());
  ck.counters = {{"step", tr.step()}, {"epoch", tr.epoch()}};
  ckpt_detail::put_params(ck, "image.", tr.image_encoder().params());
  ckpt_detail::put_params(ck, "text.", tr.text_encoder().params());
  ckpt_detail::put_params(ck, "image_m.", tr.image_momentum().params());
  ckpt_detail::put_params(ck, "text_m.", tr.text_momentum().params());
  ckpt_detail::put_adam(ck, "adam.image.", tr.image_encoder().params(), tr.adam_image());
  ckpt_detail::put_adam(ck, "adam.text.", tr.text_encoder().params(), tr.adam_text());
  ckpt_detail::put_queue(ck, "queue.image.", tr.image_queue());
  ckpt_detail::put_queue(ck, "queue.text.", tr.text_queue());
  return ck;
}

// The run configuration stored in a checkpoint.
inline RunConfig checkpoint_config(const Checkpoint& ck) {
  try {
    return parse_config_text(ck.config);
  } catch (const Error& e) {
    throw FormatError(FormatError::Kind::kCorrupt, 0, std::string("checkpoint: bad config snapshot: ") + e.what());
  }
}

// Rejects a checkpoint whose architecture keys differ from `cfg`.
inline void check_architecture(const Checkpoint& ck, const RunConfig& cfg) {
  const std::string stored = serialize_config(checkpoint_config(ck), true);
  const std::string wanted = serialize_config(cfg, true);
  if (stored != wanted)
    throw FormatError(FormatError::Kind::kConfigMismatch, 0,
                      "checkpoint: architecture differs from the requested config\n stored:\n" + stored +
                          " requested:\n" + wanted);
}

// Rebuilds the full training state. With `cfg`, the architecture must match
// and the non-architecture settings of `cfg` are used; otherwise the stored
// config is used as is.
inline Trainer restore_trainer(const Checkpoint& ck, const RunConfig* cfg = nullptr) {
  if (ck.kind != CheckpointKind::kTraining)
    throw FormatError(FormatError::Kind::kConfigMismatch, 0, "checkpoint: not a training checkpoint");
  RunConfig run = checkpoint_config(ck);
  if (cfg) {
    check_architecture(ck, *cfg);
    run = *cfg;
  }
  Trainer tr(run);
  ckpt_detail::get_params(ck, "image.", tr.image_encoder().params());
  ckpt_detail::get_params(ck, "text.", tr.text_encoder().params());
  ckpt_detail::get_params(ck, "image_m.", tr.image_momentum().params());
  ckpt_detail::get_params(ck, "text_m.", tr.text_momentum().params());
  tr.adam_image() = ckpt_detail::get_adam(ck, "adam.image.", tr.image_encoder().params());
  tr.adam_text() = ckpt_detail::get_adam(ck, "adam.text.", tr.text_encoder().params());
  const std::size_t d = run.encoder.embed_dim;
  NegativeQueue iq = ckpt_detail::get_queue(ck, "queue.image.", d);
  NegativeQueue tq = ckpt_detail::get_queue(ck, "queue.text.", d);
  if (iq.capacity() != run.trainer.queue_size || tq.capacity() != run.trainer.queue_size)
    throw FormatError(FormatError::Kind::kConfigMismatch, 0, "checkpoint: queue capacity differs from queue_size");
  tr.image_queue() = std::move(iq);
  tr.text_queue() = std::move(tq);
  tr.set_step(ck.counter("step"));
  tr.set_epoch(ck.counter("epoch"));
  return tr;
}

inline void save_trainer(const std::string& path, const Trainer& tr) { write_checkpoint(path, trainer_checkpoint(tr)); }

inline Trainer load_trainer(const std::string& path, const RunConfig* cfg = nullptr) {
  return restore_trainer(read_checkpoint(path), cfg);
}

// ---------------------------------------------------------------------------
// Generator

inline Checkpoint generator_checkpoint(const ToyGenerator& g, const RunConfig& cfg) {
  Checkpoint ck;
  ck.kind = CheckpointKind::kGenerator;
  ck.config = serialize_config(cfg);
  ck.counters = {{"image_size", g.image_size()}};
  ckpt_detail::put_params(ck, "gen.", g.params());
  ck.tensors.emplace_back("codebook", g.codebook().entries().detach());
  return ck;
}

inline ToyGenerator restore_generator(const Checkpoint& ck) {
  if (ck.kind != CheckpointKind::kGenerator)
    throw FormatError(FormatError::Kind::kConfigMismatch, 0, "checkpoint: not a generator checkpoint");
  const RunConfig run = checkpoint_config(ck);
  const std::size_t side = ck.counter("image_size");
  SplitMix64 rng(0);
  ToyGenerator g(run.generator, side, rng);
  ckpt_detail::get_params(ck, "gen.", g.params());
  const Tensor& cb = ck.tensor("codebook");
  if (cb.shape() != g.codebook().entries().shape())
    throw FormatError(FormatError::Kind::kConfigMismatch, 0, "checkpoint: codebook shape mismatch");
  std::copy(cb.data().begin(), cb.data().end(), g.codebook().entries().data().begin());
  g.codebook().validate();
  return g;
}

inline void save_generator(const std::string& path, const ToyGenerator& g, const RunConfig& cfg) {
  write_checkpoint(path, generator_checkpoint(g, cfg));
}

inline ToyGenerator load_generator(const std::string& path) { return restore_generator(read_checkpoint(path)); }

}  // namespace brivl
