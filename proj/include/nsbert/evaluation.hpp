#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nsbert/rng.hpp"

namespace nsbert {

/// counts[true_label * n + predicted]
struct ConfusionMatrix {
  std::size_t num_classes = 0;
  std::vector<std::size_t> counts;

  std::size_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * num_classes + predicted]; }
  std::size_t total() const;
  std::size_t trace() const;
  std::size_t row_sum(std::size_t truth) const;
};

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes);

double accuracy(std::span<const int> preds, std::span<const int> labels);

/// Unweighted mean of per-class F1; a class absent from both predictions and
/// labels scores 0.
double macro_f1(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes);
double macro_f1(const ConfusionMatrix& cm);

/// Loss curves and metrics of one training phase.
struct RunReport {
  std::string phase;  // "pretrain" or "finetune"
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_accuracy;  // finetune only
  double initial_train_loss = 0.0;
  double initial_val_loss = 0.0;
  double final_train_loss = 0.0;  // eval-mode loss over the training set after the last epoch
  std::size_t best_epoch = 0;     // 0 = initialization
  double best_val_loss = 0.0;
  double best_val_accuracy = 0.0;
  std::optional<double> test_accuracy;
  std::optional<double> test_macro_f1;
  ConfusionMatrix confusion;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  std::string split_hash;
};

struct NamedReport {
  std::string name;
  RunReport report;
};

/// Identity of a partition: hash over (source_id, index, label) in order.
template <class W>
std::string split_hash(std::span<const W> windows) {
  std::uint64_t h = fnv1a("split");
  for (const auto& w : windows) {
    h = fnv1a(w.source_id, h);
    h = fnv1a(std::to_string(w.index) + ":" + std::to_string(w.label), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

struct ComparisonRow {
  std::string arm;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  bool best_accuracy = false;
  bool best_f1 = false;
};

/// One row per report in input order; every row achieving a column maximum is
/// flagged. Reports must share one test split.
std::vector<ComparisonRow> compare_arms(std::span<const NamedReport> reports);

/// Aligned text table: `arm` column padded to the longest name + 2, then
/// `accuracy` and `macro_f1` as %.4f followed by '*' (best) or ' '.
std::string format_comparison(std::span<const ComparisonRow> rows);
/// `arm,accuracy,macro_f1,best_accuracy,best_macro_f1`
std::string comparison_csv(std::span<const ComparisonRow> rows);

/// `epoch,arm,split,loss` rows, losses with 9 significant digits.
std::string format_curves(std::span<const NamedReport> reports);
void export_curves(std::span<const NamedReport> reports, const std::filesystem::path& path);

/// key=value lines; doubles printed round-trip exact.
std::string format_summary(const RunReport& report, const std::string& config_hash);
std::map<std::string, std::string> read_key_values(const std::filesystem::path& path);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace nsbert
