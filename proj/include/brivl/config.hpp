#pragma once

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "brivl/errors.hpp"
#include "brivl/tokenizer.hpp"

namespace brivl {

struct EncoderConfig {
  std::size_t embed_dim = 64;
  std::size_t image_size = 32;
  std::vector<std::size_t> mspp_scales{1, 6};
  std::size_t sa_layers = 2;
  std::size_t sa_heads = 4;
  std::size_t mlp_hidden = 128;
  std::size_t vocab_size = 32;
  std::size_t max_text_len = 16;
  std::size_t text_width = 32;
  bool use_sa = true;

  std::size_t patch_count() const {
    std::size_t n = 0;
    for (std::size_t s : mspp_scales) n += s * s;
    return n;
  }

  void validate() const {
    if (embed_dim == 0 || image_size == 0 || sa_layers == 0 || sa_heads == 0 || mlp_hidden == 0 ||
        max_text_len == 0 || text_width == 0)
      throw InvalidArgument("encoder config: sizes must be positive");
    if (mspp_scales.empty()) throw InvalidArgument("encoder config: mspp_scales is empty");
    for (std::size_t s : mspp_scales)
      if (s == 0) throw InvalidArgument("encoder config: mspp scale 0");
    if (vocab_size < Vocabulary::standard().size())
      throw InvalidArgument("encoder config: vocab_size must be at least " +
                            std::to_string(Vocabulary::standard().size()));
    if (text_width % sa_heads != 0)
      throw InvalidArgument("encoder config: sa_heads must divide text_width");
  }
};

enum class LossMode { kQueue, kInBatch };

inline std::string to_string(LossMode m) { return m == LossMode::kQueue ? "queue" : "in_batch"; }

struct TrainerConfig {
  float tau = 0.07f;
  float momentum = 0.99f;
  std::size_t batch_size = 32;
  std::size_t queue_size = 512;
  LossMode loss_mode = LossMode::kQueue;
  std::size_t epochs = 15;
  float lr = 1e-3f;
  float weight_decay = 1e-5f;
  std::uint64_t seed = 1;
  bool augment = true;

  void validate() const {
    if (!(tau > 0.0f)) throw InvalidArgument("trainer config: tau must be positive");
    if (!(momentum >= 0.0f && momentum <= 1.0f)) throw InvalidArgument("trainer config: momentum must lie in [0,1]");
    if (batch_size == 0 || queue_size == 0) throw InvalidArgument("trainer config: sizes must be positive");
    if (loss_mode == LossMode::kQueue && queue_size % batch_size != 0)
      throw InvalidArgument("trainer config: queue_size must be a multiple of batch_size");
    if (loss_mode == LossMode::kInBatch && batch_size < 2)
      throw InvalidArgument("trainer config: in-batch loss needs batch_size >= 2");
    if (!(lr >= 0.0f) || !(weight_decay >= 0.0f)) throw InvalidArgument("trainer config: lr and weight_decay must be >= 0");
  }
};

struct VisConfig {
  std::size_t iterations = 500;
  float lr = 0.05f;
  std::optional<std::size_t> neuron_channel;
  float neuron_weight = 1.0f;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr > 0.0f)) throw InvalidArgument("vis config: learning rate must be positive");
  }
};

struct GeneratorConfig {
  std::size_t grid = 4;
  std::size_t code_dim = 16;
  std::size_t codebook_size = 64;
  std::size_t train_steps = 1500;
  float train_lr = 2e-3f;
  std::size_t iterations = 300;
  float lr = 10.0f;

  void validate() const {
    if (grid == 0 || code_dim == 0) throw InvalidArgument("generator config: sizes must be positive");
    if (codebook_size < 2) throw InvalidArgument("generator config: codebook needs at least 2 entries");
  }
};

struct RunConfig {
  EncoderConfig encoder;
  TrainerConfig trainer;
  VisConfig vis;
  GeneratorConfig generator;
  std::string data_path;
  std::string out_path;

  void validate() const {
    encoder.validate();
    trainer.validate();
    vis.validate();
    generator.validate();
  }
};

namespace config_detail {

// Shortest text that parses back to the same float.
inline std::string fmt_float(float v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size() || v.front() == '-')
    throw InvalidArgument("config: key '" + key + "' expects a non-negative integer, got '" + v + "'");
  return x;
}

inline float parse_float(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  float x = 0.0f;
  try {
    x = std::stof(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size()) throw InvalidArgument("config: key '" + key + "' expects a number, got '" + v + "'");
  return x;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw InvalidArgument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

struct Key {
  std::string name;
  std::string original;  // value used in the original large-scale setup, if any
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool architecture = false;  // must match when resuming from a checkpoint
};

template <typename Field>
Key size_key(std::string name, Field field, std::string original, std::string help, bool arch = false) {
  return {name, std::move(original), std::move(help),
          [field, name](RunConfig& c, const std::string& v) { field(c) = parse_uint(name, v); },
          [field](const RunConfig& c) { return std::to_string(field(const_cast<RunConfig&>(c))); }, arch};
}

template <typename Field>
Key float_key(std::string name, Field field, std::string original, std::string help, bool arch = false) {
  return {name, std::move(original), std::move(help),
          [field, name](RunConfig& c, const std::string& v) { field(c) = parse_float(name, v); },
          [field](const RunConfig& c) { return fmt_float(field(const_cast<RunConfig&>(c))); }, arch};
}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> table = [] {
    std::vector<Key> k;
    k.push_back(size_key("embed_dim", [](RunConfig& c) -> auto& { return c.encoder.embed_dim; }, "2560",
                         "joint embedding size d", true));
    k.push_back(size_key("image_size", [](RunConfig& c) -> auto& { return c.encoder.image_size; }, "600",
                         "input image side in pixels", true));
    k.push_back({"mspp_scales", "1,6", "patch grid scales (comma separated)",
                 [](RunConfig& c, const std::string& v) {
                   std::vector<std::size_t> out;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) out.push_back(parse_uint("mspp_scales", trim(item)));
                   if (out.empty()) throw InvalidArgument("config: mspp_scales is empty");
                   c.encoder.mspp_scales = out;
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.encoder.mspp_scales.size(); ++i)
                     s += (i ? "," : "") + std::to_string(c.encoder.mspp_scales[i]);
                   return s;
                 },
                 true});
    k.push_back(size_key("sa_layers", [](RunConfig& c) -> auto& { return c.encoder.sa_layers; }, "4",
                         "transformer encoder layers per self-attention block", true));
    k.push_back(size_key("sa_heads", [](RunConfig& c) -> auto& { return c.encoder.sa_heads; }, "",
                         "attention heads", true));
    k.push_back(size_key("mlp_hidden", [](RunConfig& c) -> auto& { return c.encoder.mlp_hidden; }, "",
                         "hidden width of the projection MLP", true));
    k.push_back(size_key("vocab_size", [](RunConfig& c) -> auto& { return c.encoder.vocab_size; }, "",
                         "token embedding rows", true));
    k.push_back(size_key("max_text_len", [](RunConfig& c) -> auto& { return c.encoder.max_text_len; }, "",
                         "tokens per text (truncation length)", true));
    k.push_back(size_key("text_width", [](RunConfig& c) -> auto& { return c.encoder.text_width; }, "",
                         "model width of the text self-attention stack", true));
    k.push_back({"use_sa", "true", "self-attention blocks on (false = w/o SA ablation)",
                 [](RunConfig& c, const std::string& v) { c.encoder.use_sa = parse_bool("use_sa", v); },
                 [](const RunConfig& c) { return std::string(c.encoder.use_sa ? "true" : "false"); }, true});

    k.push_back(float_key("tau", [](RunConfig& c) -> auto& { return c.trainer.tau; }, "0.07", "InfoNCE temperature",
                          true));
    k.push_back(float_key("momentum", [](RunConfig& c) -> auto& { return c.trainer.momentum; }, "0.99",
                          "momentum encoder coefficient m", true));
    k.push_back(size_key("batch_size", [](RunConfig& c) -> auto& { return c.trainer.batch_size; }, "2688",
                         "mini-batch size N_b", true));
    k.push_back(size_key("queue_size", [](RunConfig& c) -> auto& { return c.trainer.queue_size; }, "13440",
                         "negative queue capacity N_q", true));
    k.push_back({"loss_mode", "queue", "queue (momentum queues) or in_batch (SimCLR-style ablation)",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "queue")
                     c.trainer.loss_mode = LossMode::kQueue;
                   else if (v == "in_batch")
                     c.trainer.loss_mode = LossMode::kInBatch;
                   else
                     throw InvalidArgument("config: loss_mode must be queue or in_batch, got '" + v + "'");
                 },
                 [](const RunConfig& c) { return to_string(c.trainer.loss_mode); }, true});
    k.push_back(size_key("epochs", [](RunConfig& c) -> auto& { return c.trainer.epochs; }, "", "training epochs"));
    k.push_back(float_key("lr", [](RunConfig& c) -> auto& { return c.trainer.lr; }, "1e-4", "Adam learning rate",
                          true));
    k.push_back(float_key("weight_decay", [](RunConfig& c) -> auto& { return c.trainer.weight_decay; }, "1e-5",
                          "Adam weight decay", true));
    k.push_back(size_key("seed", [](RunConfig& c) -> auto& { return c.trainer.seed; }, "",
                         "seed for initialization, shuffling and augmentation", true));
    k.push_back({"augment", "true", "random graying and color jitter on training images",
                 [](RunConfig& c, const std::string& v) { c.trainer.augment = parse_bool("augment", v); },
                 [](const RunConfig& c) { return std::string(c.trainer.augment ? "true" : "false"); }, true});

    k.push_back(size_key("vis_iters", [](RunConfig& c) -> auto& { return c.vis.iterations; }, "",
                         "visualization iterations"));
    k.push_back(float_key("vis_lr", [](RunConfig& c) -> auto& { return c.vis.lr; }, "",
                          "visualization step size on pixels"));
    k.push_back({"neuron_channel", "", "target channel of the last pre-pooling feature map (-1 = none)",
                 [](RunConfig& c, const std::string& v) {
                   if (v == "-1" || v == "none")
                     c.vis.neuron_channel.reset();
                   else
                     c.vis.neuron_channel = parse_uint("neuron_channel", v);
                 },
                 [](const RunConfig& c) {
                   return c.vis.neuron_channel ? std::to_string(*c.vis.neuron_channel) : std::string("-1");
                 }});
    k.push_back(float_key("neuron_weight", [](RunConfig& c) -> auto& { return c.vis.neuron_weight; }, "",
                          "weight of the neuron term"));
    k.push_back(size_key("vis_seed", [](RunConfig& c) -> auto& { return c.vis.seed; }, "",
                         "seed of the initial noise image / code grid"));

    k.push_back(size_key("code_grid", [](RunConfig& c) -> auto& { return c.generator.grid; }, "16",
                         "code grid side h = w"));
    k.push_back(size_key("code_dim", [](RunConfig& c) -> auto& { return c.generator.code_dim; }, "256",
                         "codebook entry dimension d_c"));
    k.push_back(size_key("codebook_size", [](RunConfig& c) -> auto& { return c.generator.codebook_size; }, "1024",
                         "codebook entries N_c"));
    k.push_back(size_key("generator_steps", [](RunConfig& c) -> auto& { return c.generator.train_steps; }, "",
                         "toy generator training steps"));
    k.push_back(float_key("generator_train_lr", [](RunConfig& c) -> auto& { return c.generator.train_lr; }, "",
                          "toy generator Adam learning rate"));
    k.push_back(size_key("gen_iters", [](RunConfig& c) -> auto& { return c.generator.iterations; }, "",
                         "text-to-image iterations"));
    k.push_back(float_key("gen_lr", [](RunConfig& c) -> auto& { return c.generator.lr; }, "",
                          "text-to-image step size on the code grid"));

    k.push_back({"data_path", "", "dataset file",
                 [](RunConfig& c, const std::string& v) { c.data_path = v; },
                 [](const RunConfig& c) { return c.data_path; }});
    k.push_back({"out_path", "", "output path",
                 [](RunConfig& c, const std::string& v) { c.out_path = v; },
                 [](const RunConfig& c) { return c.out_path; }});
    return k;
  }();
  return table;
}

}  // namespace config_detail

// Sets one key. Unknown keys are rejected.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_detail::keys())
    if (k.name == key) {
      k.set(cfg, value);
      return;
    }
  throw InvalidArgument("config: unknown key '" + key + "'");
}

// Applies "key=value" (the --set syntax).
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw InvalidArgument("config: expected key=value, got '" + assignment + "'");
  set_config_value(cfg, config_detail::trim(assignment.substr(0, eq)), config_detail::trim(assignment.substr(eq + 1)));
}

// Key-value text: one "key = value" per line, '#' starts a comment.
inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(base, line);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
  }
  return base;
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

// Canonical "key=value" lines; parse_config_text(serialize_config(c)) == c.
inline std::string serialize_config(const RunConfig& cfg, bool architecture_only = false) {
  std::string out;
  for (const auto& k : config_detail::keys())
    if (!architecture_only || k.architecture) out += k.name + "=" + k.get(cfg) + "\n";
  return out;
}

// Defaults documentation: desk value plus the large-scale value where one exists.
inline std::string describe_defaults() {
  const RunConfig defaults;
  std::string out = "# key = desk default    # description [original large-scale value]\n";
  for (const auto& k : config_detail::keys()) {
    std::string line = k.name + " = " + k.get(defaults);
    if (line.size() < 32) line.resize(32, ' ');
    line += "  # " + k.help;
    if (!k.original.empty()) line += " [original: " + k.original + "]";
    out += line + "\n";
  }
  return out;
}

}  // namespace brivl
