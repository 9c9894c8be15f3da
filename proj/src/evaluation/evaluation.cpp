#include "nsbert/evaluation.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nsbert/errors.hpp"

namespace nsbert {

namespace {

void check_inputs(std::span<const int> preds, std::span<const int> labels) {
  if (preds.empty() || labels.empty()) throw Error("metrics need at least one prediction");
  if (preds.size() != labels.size()) throw Error("predictions and labels differ in length");
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

}  // namespace

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

std::size_t ConfusionMatrix::trace() const {
  std::size_t t = 0;
  for (std::size_t c = 0; c < num_classes; ++c) t += at(c, c);
  return t;
}

std::size_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::size_t s = 0;
  for (std::size_t c = 0; c < num_classes; ++c) s += at(truth, c);
  return s;
}

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes) {
  check_inputs(preds, labels);
  ConfusionMatrix cm{num_classes, std::vector<std::size_t>(num_classes * num_classes, 0)};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] < 0 || labels[i] < 0 || static_cast<std::size_t>(preds[i]) >= num_classes ||
        static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw Error("class id outside [0, " + std::to_string(num_classes) + ")");
    }
    ++cm.counts[static_cast<std::size_t>(labels[i]) * num_classes + static_cast<std::size_t>(preds[i])];
  }
  return cm;
}

double accuracy(std::span<const int> preds, std::span<const int> labels) {
  check_inputs(preds, labels);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double macro_f1(const ConfusionMatrix& cm) {
  if (cm.num_classes == 0) throw Error("macro_f1 needs at least one class");
  double total = 0.0;
  for (std::size_t c = 0; c < cm.num_classes; ++c) {
    const std::size_t tp = cm.at(c, c);
    std::size_t predicted = 0;
    for (std::size_t r = 0; r < cm.num_classes; ++r) predicted += cm.at(r, c);
    const std::size_t denom = predicted + cm.row_sum(c);  // 2tp + fp + fn
    if (denom > 0) total += 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
  return total / static_cast<double>(cm.num_classes);
}

double macro_f1(std::span<const int> preds, std::span<const int> labels, std::size_t num_classes) {
  return macro_f1(confusion_matrix(preds, labels, num_classes));
}

std::vector<ComparisonRow> compare_arms(std::span<const NamedReport> reports) {
  if (reports.size() < 2) throw Error("comparison needs at least two arms");
  const std::string& hash = reports.front().report.split_hash;
  for (const auto& r : reports) {
    if (r.report.split_hash != hash) {
      throw Error("arm '" + r.name + "' was tested on a different split (" + r.report.split_hash + " vs " + hash + ")");
    }
    if (!r.report.test_accuracy || !r.report.test_macro_f1) throw Error("arm '" + r.name + "' has no test metrics");
  }
  std::vector<ComparisonRow> rows;
  double best_acc = -1.0, best_f1 = -1.0;
  for (const auto& r : reports) {
    rows.push_back({r.name, *r.report.test_accuracy, *r.report.test_macro_f1, false, false});
    best_acc = std::max(best_acc, rows.back().accuracy);
    best_f1 = std::max(best_f1, rows.back().macro_f1);
  }
  for (auto& row : rows) {
    row.best_accuracy = row.accuracy == best_acc;
    row.best_f1 = row.macro_f1 == best_f1;
  }
  return rows;
}

std::string format_comparison(std::span<const ComparisonRow> rows) {
  std::size_t width = 3;
  for (const auto& r : rows) width = std::max(width, r.arm.size());
  width += 2;
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(w, s.size()), ' ');
    return s;
  };
  auto trim_right = [](std::string s) {
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
  };
  std::string out = trim_right(pad("arm", width) + pad("accuracy", 10) + "macro_f1") + "\n";
  for (const auto& r : rows) {
    std::string line = pad(r.arm, width) + pad(fmt("%.4f", r.accuracy) + (r.best_accuracy ? "*" : " "), 10) +
                       fmt("%.4f", r.macro_f1) + (r.best_f1 ? "*" : " ");
    out += trim_right(line) + "\n";
  }
  return out;
}

std::string comparison_csv(std::span<const ComparisonRow> rows) {
  std::string out = "arm,accuracy,macro_f1,best_accuracy,best_macro_f1\n";
  for (const auto& r : rows) {
    out += r.arm + "," + fmt("%.9g", r.accuracy) + "," + fmt("%.9g", r.macro_f1) + "," +
           (r.best_accuracy ? "1" : "0") + "," + (r.best_f1 ? "1" : "0") + "\n";
  }
  return out;
}

std::string format_curves(std::span<const NamedReport> reports) {
  std::string out = "epoch,arm,split,loss\n";
  for (const auto& r : reports) {
    for (const auto& [split, series] : {std::pair{"train", &r.report.train_loss}, std::pair{"val", &r.report.val_loss}}) {
      for (std::size_t e = 0; e < series->size(); ++e) {
        out += std::to_string(e + 1) + "," + r.name + "," + split + "," + fmt("%.9g", (*series)[e]) + "\n";
      }
    }
  }
  return out;
}

void export_curves(std::span<const NamedReport> reports, const std::filesystem::path& path) {
  write_text(path, format_curves(reports));
}

std::string format_summary(const RunReport& r, const std::string& config_hash) {
  std::ostringstream out;
  out << "phase=" << r.phase << "\n";
  if (r.test_accuracy) out << "test_accuracy=" << fmt("%.17g", *r.test_accuracy) << "\n";
  if (r.test_macro_f1) out << "macro_f1=" << fmt("%.17g", *r.test_macro_f1) << "\n";
  out << "seed=" << r.seed << "\n";
  out << "config_hash=" << config_hash << "\n";
  out << "epochs=" << r.train_loss.size() << "\n";
  out << "best_epoch=" << r.best_epoch << "\n";
  out << "initial_train_loss=" << fmt("%.17g", r.initial_train_loss) << "\n";
  out << "final_train_loss=" << fmt("%.17g", r.final_train_loss) << "\n";
  if (!r.val_loss.empty()) out << "final_val_loss=" << fmt("%.17g", r.val_loss.back()) << "\n";
  out << "initial_val_loss=" << fmt("%.17g", r.initial_val_loss) << "\n";
  out << "best_val_loss=" << fmt("%.17g", r.best_val_loss) << "\n";
  if (!r.val_accuracy.empty()) out << "best_val_accuracy=" << fmt("%.17g", r.best_val_accuracy) << "\n";
  if (!r.split_hash.empty()) out << "split_hash=" << r.split_hash << "\n";
  return out.str();
}

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + path.string());
}

}  // namespace nsbert
