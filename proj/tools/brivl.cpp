// brivl: command-line driver for data generation, pre-training, evaluation,
// imagination and gradient checking.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>
#include <zlib.h>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "brivl/checkpoint.hpp"
#include "brivl/config.hpp"
#include "brivl/datagen.hpp"
#include "brivl/errors.hpp"
#include "brivl/evaluation.hpp"
#include "brivl/generator.hpp"
#include "brivl/gradcheck_suite.hpp"
#include "brivl/imagination.hpp"
#include "brivl/pipeline.hpp"

namespace {

using namespace brivl;

struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value config file");
    cmd->add_option("--set", sets, "override one key (key=value), repeatable");
  }

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig cfg = file.empty() ? base : load_config_file(file);
    for (const auto& s : sets) apply_override(cfg, s);
    cfg.validate();
    return cfg;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

// ---------------------------------------------------------------------------

struct DatagenArgs {
  std::uint64_t seed = 1;
  std::size_t size = 0;
  std::optional<std::size_t> test;
  std::size_t image_size = 32;
  std::string out;
};

int run_datagen(const DatagenArgs& a) {
  if (a.size == 0) throw InvalidArgument("datagen: --size must be positive");
  const std::size_t test = a.test.value_or(a.size / 11);
  GenerateOptions opts;
  opts.image_size = a.image_size;
  spdlog::info("generating {} pairs ({} held out), seed {}", a.size, test, a.seed);
  const PairDataset ds = generate_dataset(a.seed, a.size, test, opts);
  const auto bytes = encode_dataset(ds);
  write_file_bytes(a.out, bytes);
  std::cout << "records " << ds.records.size() << "\n";
  std::cout << "crc32 " << hex32(crc32_of(bytes.data(), bytes.size())) << "\n";
  return 0;
}

struct PretrainArgs {
  ConfigArgs config;
  std::string data;
  std::string out;
  std::string resume;
  std::string metrics;
};

int run_pretrain(const PretrainArgs& a) {
  RunConfig cfg = a.config.resolve();
  const std::string data = a.data.empty() ? cfg.data_path : a.data;
  if (data.empty()) throw InvalidArgument("pretrain: --data (or data_path) is required");
  const PairDataset ds = read_dataset(data);
  const std::string metrics_path = a.metrics.empty() ? a.out + ".metrics.csv" : a.metrics;
  std::optional<std::string> resume;
  if (!a.resume.empty()) resume = a.resume;
  std::ofstream metrics(metrics_path, resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path);

  spdlog::info("pre-training: {} mode, {} epochs, lr {}", to_string(cfg.trainer.loss_mode), cfg.trainer.epochs,
               cfg.trainer.lr);
  const PretrainResult r = run_pretraining(cfg, ds, a.out, resume, &metrics, [&](const Trainer& tr) {
    spdlog::info("epoch {} done (step {}), checkpoint {}", tr.epoch(), tr.step(), a.out);
  });
  if (r.epochs_run == 0) spdlog::info("nothing to do: checkpoint already at epoch {}", r.final_epoch);
  std::cout << "epochs_run " << r.epochs_run << "\nepoch " << r.final_epoch << "\nstep " << r.final_step << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string task;
  std::string out;
  std::string text;
  std::size_t k = 30;
};

int run_eval(const EvalArgs& a) {
  const Trainer tr = load_trainer(a.checkpoint);
  const PairDataset ds = read_dataset(a.data);
  const auto idx = eval_indices(ds);
  const ImageEncoder& image = tr.image_encoder();
  const TextEncoder& text = tr.text_encoder();
  std::string report, kv;
  if (a.task == "retrieval") {
    const auto s = evaluate_retrieval(image, text, ds, idx);
    report = format_retrieval_text(s);
    kv = format_retrieval_kv(s);
  } else if (a.task == "zeroshot") {
    const auto r = evaluate_zero_shot(image, text, ds, single_object_records(ds, idx));
    report = format_zeroshot_text(r);
    kv = format_zeroshot_kv(r);
  } else {
    if (a.text.empty()) throw InvalidArgument("eval: --task neighbors needs --text");
    const auto candidates = distinct_texts(ds, idx);
    const std::size_t k = std::min(a.k, candidates.size());
    const auto hits = topk_text_neighbors(a.text, candidates, k, [&](const std::vector<std::string>& t) {
      NoGradGuard guard;
      return text.encode(t);
    });
    char buf[64];
    for (std::size_t i = 0; i < hits.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%zu\t%.6f\t", i + 1, hits[i].score);
      report += buf + candidates[hits[i].index] + "\n";
    }
    kv = report;
  }
  std::cout << report;
  if (!a.out.empty()) write_text(a.out, kv);
  return 0;
}

struct ImagineArgs {
  ConfigArgs config;
  std::string checkpoint;
  std::string generator;
  std::string text;
  std::string mode = "visualize";
  std::optional<long> neuron;
  std::optional<std::size_t> iters;
  std::optional<float> lr;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string trace;
};

int run_imagine(const ImagineArgs& a) {
  const Trainer tr = load_trainer(a.checkpoint);
  RunConfig cfg = a.config.resolve(tr.config());
  ImagineResult res;
  if (a.mode == "visualize") {
    VisConfig v = cfg.vis;
    if (a.iters) v.iterations = *a.iters;
    if (a.lr) v.lr = *a.lr;
    if (a.seed) v.seed = *a.seed;
    if (a.neuron) {
      if (*a.neuron < 0)
        v.neuron_channel.reset();
      else
        v.neuron_channel = static_cast<std::size_t>(*a.neuron);
    }
    res = visualize_text(a.text, tr.image_encoder(), tr.text_encoder(), v);
  } else {
    if (a.generator.empty()) throw InvalidArgument("imagine: --mode generate needs --generator");
    if (a.neuron) throw InvalidArgument("imagine: --neuron applies to --mode visualize only");
    const ToyGenerator gen = load_generator(a.generator);
    GeneratorConfig g = gen.config();
    g.iterations = cfg.generator.iterations;
    g.lr = cfg.generator.lr;
    if (a.iters) g.iterations = *a.iters;
    if (a.lr) g.lr = *a.lr;
    res = generate_from_text(a.text, tr.image_encoder(), tr.text_encoder(), gen, g, a.seed.value_or(cfg.vis.seed));
  }
  write_ppm(a.out, res.image);
  const std::string trace = a.trace.empty() ? a.out + ".trace.txt" : a.trace;
  write_trace(trace, res.cosines);
  std::cout << "cosine_first " << res.cosines.front() << "\ncosine_final " << res.cosines.back() << "\n";
  spdlog::info("wrote {} and {}", a.out, trace);
  return 0;
}

struct GeneratorArgs {
  ConfigArgs config;
  std::string data;
  std::string out;
};

int run_train_generator(const GeneratorArgs& a) {
  const RunConfig cfg = a.config.resolve();
  const PairDataset ds = read_dataset(a.data.empty() ? cfg.data_path : a.data);
  SplitMix64 rng = derive_stream(cfg.trainer.seed, 0x6E0);
  ToyGenerator g(cfg.generator, ds.image_size, rng);
  const auto log = train_toy_generator(g, ds, cfg.trainer.seed, [](std::size_t step, float loss) {
    if ((step + 1) % 100 == 0) spdlog::debug("step {} loss {:.5f}", step + 1, loss);
  });
  if (log.non_decreasing_start) spdlog::warn("generator loss did not decrease over the first steps");
  save_generator(a.out, g, cfg);
  const Tensor held_out = images_to_tensor(ds, eval_indices(ds));
  std::cout << "reconstruction_mse " << reconstruction_mse(g, held_out) << "\n";
  std::cout << "codebook_usage " << codebook_usage(g, held_out) << "\n";
  std::cout << "restarts " << log.restarts << "\n";
  return 0;
}

int run_gradcheck(double tolerance) {
  bool ok = true;
  char buf[128];
  for (const auto& c : gradcheck_suite()) {
    const GradCheckReport r = c.run({});
    const bool pass = r.passed(tolerance);
    ok = ok && pass;
    std::snprintf(buf, sizeof buf, "%-22s %12.3e %6zu  %s\n", c.name.c_str(), r.max_rel_error, r.errors.size(),
                  pass ? "PASS" : "FAIL");
    std::cout << buf;
  }
  return ok ? 0 : static_cast<int>(ExitCode::kNumerical);
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_logger_st("brivl");
  logger->set_pattern("%l: %v");
  spdlog::set_default_logger(logger);

  CLI::App app{"Two-tower image-text pre-training on synthetic scenes"};
  app.require_subcommand(1);
  bool quiet = false, verbose = false;
  app.add_flag("--quiet", quiet, "warnings and errors only");
  app.add_flag("--verbose", verbose, "debug logging");

  DatagenArgs dg;
  auto* datagen = app.add_subcommand("datagen", "generate a synthetic image-text dataset file");
  datagen->add_option("--seed", dg.seed, "generator seed");
  datagen->add_option("--size", dg.size, "number of pairs")->required();
  datagen->add_option("--test", dg.test, "held-out pairs (default size/11)");
  datagen->add_option("--image-size", dg.image_size, "image side in pixels");
  datagen->add_option("--out", dg.out, "output dataset file")->required();

  PretrainArgs pt;
  auto* pretrain = app.add_subcommand("pretrain", "train both towers; checkpoint every epoch");
  pt.config.attach(pretrain);
  pretrain->add_option("--data", pt.data, "dataset file");
  pretrain->add_option("--out", pt.out, "checkpoint file")->required();
  pretrain->add_option("--resume", pt.resume, "continue from this checkpoint");
  pretrain->add_option("--metrics", pt.metrics, "per-step metrics log (default <out>.metrics.csv)");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "retrieval, zero-shot or text-neighbor evaluation");
  eval->add_option("--checkpoint", ev.checkpoint, "training checkpoint")->required();
  eval->add_option("--data", ev.data, "dataset file")->required();
  eval->add_option("--task", ev.task, "retrieval | zeroshot | neighbors")
      ->required()
      ->check(CLI::IsMember({"retrieval", "zeroshot", "neighbors"}));
  eval->add_option("--out", ev.out, "key=value report file");
  eval->add_option("--text", ev.text, "query text (neighbors)");
  eval->add_option("--k", ev.k, "neighbors to list");

  ImagineArgs im;
  auto* imagine = app.add_subcommand("imagine", "render what the image tower associates with a text");
  im.config.attach(imagine);
  imagine->add_option("--checkpoint", im.checkpoint, "training checkpoint")->required();
  imagine->add_option("--text", im.text, "prompt")->required();
  imagine->add_option("--mode", im.mode, "visualize | generate")->check(CLI::IsMember({"visualize", "generate"}));
  imagine->add_option("--generator", im.generator, "generator checkpoint (generate mode)");
  imagine->add_option("--neuron", im.neuron, "target channel of the last feature map (-1 = none)");
  imagine->add_option("--iters", im.iters, "iterations");
  imagine->add_option("--lr", im.lr, "step size");
  imagine->add_option("--seed", im.seed, "initialization seed");
  imagine->add_option("--out", im.out, "output PPM image")->required();
  imagine->add_option("--trace", im.trace, "cosine trace file (default <out>.trace.txt)");

  GeneratorArgs ga;
  auto* gen = app.add_subcommand("train-generator", "train the toy vector-quantized generator");
  ga.config.attach(gen);
  gen->add_option("--data", ga.data, "dataset file");
  gen->add_option("--out", ga.out, "generator checkpoint")->required();

  double tolerance = 1e-3;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every primitive and both towers");
  gradcheck->add_option("--tolerance", tolerance, "maximum relative error");

  bool print_defaults = false;
  ConfigArgs cf;
  auto* config = app.add_subcommand("config", "print the resolved or default configuration");
  cf.attach(config);
  config->add_flag("--print-defaults", print_defaults, "document every key with its default");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kUsage);
  }
  spdlog::set_level(quiet ? spdlog::level::warn : verbose ? spdlog::level::debug : spdlog::level::info);
  spdlog::debug("worker threads: {}", worker_count());

  try {
    if (*datagen) return run_datagen(dg);
    if (*pretrain) return run_pretrain(pt);
    if (*eval) return run_eval(ev);
    if (*imagine) return run_imagine(im);
    if (*gen) return run_train_generator(ga);
    if (*gradcheck) return run_gradcheck(tolerance);
    if (*config) {
      std::cout << (print_defaults ? describe_defaults() : serialize_config(cf.resolve()));
      return 0;
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kUsage);
}
