#include <malloc.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "nsbert/errors.hpp"
#include "nsbert/pipeline.hpp"

namespace {

// Keeps large autodiff buffers in the heap between steps instead of
// returning them to the OS after every node.
void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

struct GlobalFlags {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

nsbert::ExperimentConfig resolve_config(const GlobalFlags& flags) {
  nsbert::ExperimentConfig base;
  std::map<std::string, std::string> kv;
  if (!flags.config.empty()) kv = nsbert::read_config_file(flags.config);
  if (flags.out) kv["run.out"] = *flags.out;
  if (flags.seed) kv["run.seed"] = std::to_string(*flags.seed);
  if (flags.threads) kv["run.threads"] = std::to_string(*flags.threads);
  return nsbert::parse_config(kv, base);
}

bool parse_flag(const std::string& value) {
  if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
  if (value == "false" || value == "0" || value == "no" || value == "off") return false;
  throw nsbert::ConfigError("--freeze-encoder expects true or false, got '" + value + "'");
}

void print_metrics(const nsbert::RunReport& r) {
  if (r.test_accuracy) std::printf("test_accuracy=%.4f\n", *r.test_accuracy);
  if (r.test_macro_f1) std::printf("macro_f1=%.4f\n", *r.test_macro_f1);
}

int run_synth(std::size_t classes, std::size_t per_class, const GlobalFlags& flags) {
  const std::filesystem::path out = flags.out.value_or("synth");
  std::filesystem::create_directories(out);
  const std::uint64_t seed = flags.seed.value_or(1);
  nsbert::LabelMap labels;
  for (const auto& rec : nsbert::synth_recordings(classes, per_class, seed)) {
    nsbert::write_csv(rec, out / (rec.source_id + ".csv"));
  }
  for (std::size_t k = 0; k < classes; ++k) labels[static_cast<int>(k)] = "class" + std::to_string(k);
  nsbert::write_labels(labels, out / "labels.txt");
  std::printf("wrote %zu recordings to %s\n", classes, out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Masked-reconstruction pretraining and GRU finetuning for IMU activity recognition"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalFlags flags;
  app.add_option("--config", flags.config, "key=value experiment config")->check(CLI::ExistingFile);
  app.add_option("--out", flags.out, "output directory (run.out)");
  app.add_option("--seed", flags.seed, "master seed (run.seed)");
  app.add_option("--threads", flags.threads, "worker threads (run.threads)")->check(CLI::PositiveNumber);

  std::size_t classes = 4, per_class = 500;
  auto* synth = app.add_subcommand("synth", "write a synthetic CSV dataset");
  synth->add_option("--classes", classes, "number of activity classes")->check(CLI::Range(2, 10));
  synth->add_option("--per-class", per_class, "windows per class")->check(CLI::Range(3, 1000000));

  auto* pretrain = app.add_subcommand("pretrain", "masked-reconstruction pretraining, writes encoder.ckpt");

  std::string encoder_path, freeze;
  auto* finetune = app.add_subcommand("finetune", "train a GRU classifier on a pretrained encoder");
  finetune->add_option("--encoder", encoder_path, "encoder checkpoint")->required()->check(CLI::ExistingFile);
  finetune->add_option("--freeze-encoder", freeze, "keep encoder weights fixed (true|false)");

  std::string classifier_path;
  auto* evaluate = app.add_subcommand("evaluate", "test-split metrics of a classifier checkpoint");
  evaluate->add_option("--classifier", classifier_path, "classifier checkpoint")->required()->check(CLI::ExistingFile);

  auto* experiment = app.add_subcommand("experiment", "run every configured arm and compare them");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) return run_synth(classes, per_class, flags);
    nsbert::ExperimentConfig config = resolve_config(flags);
    if (pretrain->parsed()) {
      const auto result = nsbert::run_pretrain(config);
      std::printf("best_epoch=%zu best_val_loss=%.6f\n", result.report.best_epoch, result.report.best_val_loss);
      std::printf("wrote %s\n", (config.out / "encoder.ckpt").string().c_str());
    } else if (finetune->parsed()) {
      if (!freeze.empty()) config.finetune.freeze_encoder = parse_flag(freeze);
      const auto result = nsbert::run_finetune(config, encoder_path);
      print_metrics(result.report);
      std::printf("wrote %s\n", (config.out / "classifier.ckpt").string().c_str());
    } else if (evaluate->parsed()) {
      print_metrics(nsbert::run_evaluate(config, classifier_path));
    } else if (experiment->parsed()) {
      const auto result = nsbert::run_experiment(config);
      std::fputs(nsbert::format_comparison(result.rows).c_str(), stdout);
    }
  } catch (const nsbert::NumericError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
