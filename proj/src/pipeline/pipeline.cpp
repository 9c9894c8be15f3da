#include "nsbert/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "nsbert/errors.hpp"
#include "nsbert/rng.hpp"

namespace nsbert {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& s : items) out += (out.empty() ? "" : ",") + s;
  return out;
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw Error("cannot create output directory " + dir.string() + (ec ? ": " + ec.message() : ""));
  }
}

std::size_t count_features(const ExperimentConfig& config) { return config.fm ? kFmFeatures : kImuChannels; }

// Re-raises with a prefix while keeping the error category (and so the exit code).
[[noreturn]] void rethrow_with(const std::string& prefix) {
  try {
    throw;
  } catch (const NumericError& e) {
    throw NumericError(prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  } catch (const CheckpointError& e) {
    throw CheckpointError(prefix + e.what());
  } catch (const ShapeError& e) {
    throw ShapeError(prefix + e.what());
  } catch (const std::exception& e) {
    throw Error(prefix + e.what());
  }
}

void write_phase_outputs(const ExperimentConfig& config, const RunReport& report, const std::string& name) {
  const NamedReport named{name, report};
  export_curves(std::span<const NamedReport>(&named, 1), config.out / "curves.csv");
  write_text(config.out / "summary.txt", format_summary(report, config.hash()));
}

}  // namespace

Arm parse_arm(const std::string& name) {
  Arm arm;
  arm.name = name;
  std::string base = name;
  const auto plus = name.find('+');
  if (plus != std::string::npos) {
    if (name.substr(plus + 1) != "fm") throw ConfigError("unknown arm '" + name + "' (expected ns, ns+fm, vanilla or vanilla+fm)");
    arm.fm = true;
    base = name.substr(0, plus);
  }
  if (base == "ns") {
    arm.variant = Variant::non_stationary;
  } else if (base == "vanilla") {
    arm.variant = Variant::vanilla;
  } else {
    throw ConfigError("unknown arm '" + name + "' (expected ns, ns+fm, vanilla or vanilla+fm)");
  }
  return arm;
}

void ExperimentConfig::validate() const {
  if (data.dir.empty()) {
    if (data.synth_classes < 2) throw ConfigError("data.synth.classes must be at least 2");
    if (data.synth_per_class < 3) throw ConfigError("data.synth.per_class must be at least 3");
  }
  const auto& r = data.ratios;
  if (!(r.train > 0 && r.val > 0 && r.test > 0) || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw ConfigError("data.split ratios must be positive and sum to 1");
  }
  if (threads == 0) throw ConfigError("run.threads must be positive");
  for (const auto& a : arms) parse_arm(a);
  pretrain_config(*this).validate();
  finetune_config(*this).validate();
  ModelConfig m = model;
  m.encoder.input_features = count_features(*this);
  m.classifier.gru_hidden = finetune.gru_hidden;
  m.validate();
}

std::map<std::string, std::string> ExperimentConfig::key_values() const {
  const auto& e = model.encoder;
  return {
      {"data.dir", data.dir.string()},
      {"data.synth.classes", std::to_string(data.synth_classes)},
      {"data.synth.per_class", std::to_string(data.synth_per_class)},
      {"data.synth.seed", std::to_string(data.synth_seed)},
      {"data.split.train", fmt_double(data.ratios.train)},
      {"data.split.val", fmt_double(data.ratios.val)},
      {"data.split.test", fmt_double(data.ratios.test)},
      {"augment.fm", fm ? "true" : "false"},
      {"augment.normalize", to_string(normalize)},
      {"model.variant", to_string(e.variant)},
      {"model.hidden", std::to_string(e.hidden)},
      {"model.layers", std::to_string(e.layers)},
      {"model.heads", std::to_string(e.heads)},
      {"model.feedforward", std::to_string(e.feedforward)},
      {"model.projector_hidden", std::to_string(e.projector_hidden)},
      {"model.dropout", fmt_double(e.dropout)},
      {"pretrain.epochs", std::to_string(pretrain.epochs)},
      {"pretrain.lr", fmt_double(pretrain.learning_rate)},
      {"pretrain.batch_size", std::to_string(pretrain.batch_size)},
      {"pretrain.mask_ratio", fmt_double(pretrain.mask_ratio)},
      {"pretrain.mask_span", std::to_string(pretrain.mask_span)},
      {"pretrain.full_sequence", pretrain.full_sequence ? "true" : "false"},
      {"finetune.epochs", std::to_string(finetune.epochs)},
      {"finetune.lr", fmt_double(finetune.learning_rate)},
      {"finetune.batch_size", std::to_string(finetune.batch_size)},
      {"finetune.freeze_encoder", finetune.freeze_encoder ? "true" : "false"},
      {"finetune.gru_hidden", std::to_string(finetune.gru_hidden)},
      {"experiment.arms", join(arms)},
      {"run.seed", std::to_string(seed)},
  };
}

std::string ExperimentConfig::hash() const {
  std::string text;
  for (const auto& [k, v] : key_values()) text += k + "=" + v + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return buf;
}

ExperimentConfig ExperimentConfig::for_arm(const Arm& arm) const {
  ExperimentConfig out = *this;
  out.model.encoder.variant = arm.variant;
  out.fm = arm.fm;
  return out;
}

std::map<std::string, std::string> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::map<std::string, std::string> kv;
  std::string section;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key=value");
    std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + "empty key");
    if (!section.empty()) key = section + "." + key;
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

ExperimentConfig parse_config(const std::map<std::string, std::string>& kv, ExperimentConfig c) {
  using Setter = std::function<void(const std::string& key, const std::string& value)>;
  auto& e = c.model.encoder;
  const std::map<std::string, Setter> setters = {
      {"data.dir", [&](auto&, auto& v) { c.data.dir = v; }},
      {"data.synth.classes", [&](auto& k, auto& v) { c.data.synth_classes = parse_u64(k, v); }},
      {"data.synth.per_class", [&](auto& k, auto& v) { c.data.synth_per_class = parse_u64(k, v); }},
      {"data.synth.seed", [&](auto& k, auto& v) { c.data.synth_seed = parse_u64(k, v); }},
      {"data.split.train", [&](auto& k, auto& v) { c.data.ratios.train = parse_double(k, v); }},
      {"data.split.val", [&](auto& k, auto& v) { c.data.ratios.val = parse_double(k, v); }},
      {"data.split.test", [&](auto& k, auto& v) { c.data.ratios.test = parse_double(k, v); }},
      {"augment.fm", [&](auto& k, auto& v) { c.fm = parse_bool(k, v); }},
      {"augment.normalize", [&](auto&, auto& v) { c.normalize = parse_normalize_mode(v); }},
      {"model.variant", [&](auto&, auto& v) { e.variant = parse_variant(v); }},
      {"model.hidden", [&](auto& k, auto& v) { e.hidden = parse_u64(k, v); }},
      {"model.layers", [&](auto& k, auto& v) { e.layers = parse_u64(k, v); }},
      {"model.heads", [&](auto& k, auto& v) { e.heads = parse_u64(k, v); }},
      {"model.feedforward", [&](auto& k, auto& v) { e.feedforward = parse_u64(k, v); }},
      {"model.projector_hidden", [&](auto& k, auto& v) { e.projector_hidden = parse_u64(k, v); }},
      {"model.dropout", [&](auto& k, auto& v) { e.dropout = parse_double(k, v); }},
      {"pretrain.epochs", [&](auto& k, auto& v) { c.pretrain.epochs = parse_u64(k, v); }},
      {"pretrain.lr", [&](auto& k, auto& v) { c.pretrain.learning_rate = parse_double(k, v); }},
      {"pretrain.batch_size", [&](auto& k, auto& v) { c.pretrain.batch_size = parse_u64(k, v); }},
      {"pretrain.mask_ratio", [&](auto& k, auto& v) { c.pretrain.mask_ratio = parse_double(k, v); }},
      {"pretrain.mask_span", [&](auto& k, auto& v) { c.pretrain.mask_span = parse_u64(k, v); }},
      {"pretrain.full_sequence", [&](auto& k, auto& v) { c.pretrain.full_sequence = parse_bool(k, v); }},
      {"finetune.epochs", [&](auto& k, auto& v) { c.finetune.epochs = parse_u64(k, v); }},
      {"finetune.lr", [&](auto& k, auto& v) { c.finetune.learning_rate = parse_double(k, v); }},
      {"finetune.batch_size", [&](auto& k, auto& v) { c.finetune.batch_size = parse_u64(k, v); }},
      {"finetune.freeze_encoder", [&](auto& k, auto& v) { c.finetune.freeze_encoder = parse_bool(k, v); }},
      {"finetune.gru_hidden", [&](auto& k, auto& v) { c.finetune.gru_hidden = parse_u64(k, v); }},
      {"experiment.arms", [&](auto&, auto& v) { c.arms = split_list(v); }},
      {"run.seed", [&](auto& k, auto& v) { c.seed = parse_u64(k, v); }},
      {"run.threads", [&](auto& k, auto& v) { c.threads = parse_u64(k, v); }},
      {"run.out", [&](auto&, auto& v) { c.out = v; }},
  };
  for (const auto& [key, value] : kv) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(key, value);
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(read_config_file(path)); }

std::vector<Window> load_windows(const DataConfig& config) {
  if (config.dir.empty()) return synth_dataset(config.synth_classes, config.synth_per_class, config.synth_seed);
  std::vector<Window> out;
  for (const auto& rec : load_directory(config.dir)) {
    auto windows = make_windows(downsample(rec, kTargetRateHz));
    std::move(windows.begin(), windows.end(), std::back_inserter(out));
  }
  if (out.empty()) throw DataError("no windows could be cut from " + config.dir.string());
  return out;
}

PreparedData prepare_data(std::span<const Window> windows, const ExperimentConfig& config, const NormStats* fixed) {
  if (windows.empty()) throw DataError("no windows");
  PreparedData out;
  int max_label = 0;
  for (const auto& w : windows) {
    if (w.label < 0) throw DataError("negative label in window " + w.source_id);
    max_label = std::max(max_label, w.label);
  }
  out.num_classes = static_cast<std::size_t>(max_label) + 1;
  if (out.num_classes < 2) throw DataError("need at least 2 classes, the data has 1");

  const DataSplit parts = split(windows, config.data.ratios, derive_seed(config.seed, "split"));
  auto features = [&](const std::vector<Window>& src) {
    std::vector<FeatureWindow> dst;
    dst.reserve(src.size());
    for (const auto& w : src) dst.push_back(config.fm ? fm_augment(w) : plain_features(w));
    return dst;
  };
  out.train = features(parts.train);
  out.val = features(parts.val);
  out.test = features(parts.test);

  if (config.normalize == NormalizeMode::window) {
    for (auto* set : {&out.train, &out.val, &out.test}) {
      for (auto& w : *set) w = zscore_window(w);
    }
    return out;
  }
  out.norm = fixed && !fixed->mean.empty() ? *fixed : zscore_fit(out.train);
  for (auto* set : {&out.train, &out.val, &out.test}) {
    for (auto& w : *set) w = zscore_apply(w, out.norm);
  }
  return out;
}

PretrainConfig pretrain_config(const ExperimentConfig& config) {
  PretrainConfig p = config.pretrain;
  p.seed = derive_seed(config.seed, "pretrain");
  p.threads = config.threads;
  return p;
}

FinetuneConfig finetune_config(const ExperimentConfig& config) {
  FinetuneConfig f = config.finetune;
  f.seed = derive_seed(config.seed, "finetune");
  f.threads = config.threads;
  return f;
}

ModelConfig model_config(const ExperimentConfig& config, const PreparedData& data) {
  ModelConfig m = config.model;
  m.encoder.seq_len = data.train.front().length();
  m.encoder.input_features = data.train.front().features();
  m.classifier.gru_hidden = config.finetune.gru_hidden;
  m.classifier.num_classes = data.num_classes;
  return m;
}

PhaseResult run_pretrain(const ExperimentConfig& config) {
  ensure_dir(config.out);
  const auto windows = load_windows(config.data);
  const PreparedData data = prepare_data(windows, config);
  PhaseResult result = pretrain(data.train, data.val, pretrain_config(config), model_config(config, data));
  result.checkpoint.norm = data.norm;
  result.checkpoint.meta["config_hash"] = config.hash();
  result.checkpoint.meta["normalize"] = to_string(config.normalize);
  for (const auto& [k, v] : config.key_values()) result.report.config.insert_or_assign(k, v);
  result.report.seed = config.seed;
  save_checkpoint(result.checkpoint, config.out / "encoder.ckpt");
  write_phase_outputs(config, result.report, "pretrain");
  return result;
}

namespace {

PreparedData data_for_checkpoint(const ExperimentConfig& config, const Checkpoint& ckpt) {
  const auto windows = load_windows(config.data);
  check_compatible(ckpt, windows.front().values.dim(0), count_features(config));
  return prepare_data(windows, config, &ckpt.norm);
}

}  // namespace

PhaseResult run_finetune(const ExperimentConfig& config, const std::filesystem::path& encoder_path) {
  ensure_dir(config.out);
  const Checkpoint encoder = load_checkpoint(encoder_path);
  const PreparedData data = data_for_checkpoint(config, encoder);
  PhaseResult result = finetune(data.train, data.val, data.test, encoder, finetune_config(config), data.num_classes);
  result.checkpoint.norm = data.norm;
  result.checkpoint.meta["config_hash"] = config.hash();
  for (const auto& [k, v] : config.key_values()) result.report.config.insert_or_assign(k, v);
  result.report.seed = config.seed;
  save_checkpoint(result.checkpoint, config.out / "classifier.ckpt");
  write_phase_outputs(config, result.report, "finetune");
  return result;
}

RunReport run_evaluate(const ExperimentConfig& config, const std::filesystem::path& classifier_path) {
  ensure_dir(config.out);
  const Checkpoint classifier = load_checkpoint(classifier_path);
  const PreparedData data = data_for_checkpoint(config, classifier);
  if (data.num_classes > classifier.config.classifier.num_classes) {
    throw DataError("data has " + std::to_string(data.num_classes) + " classes but the classifier head has " +
                    std::to_string(classifier.config.classifier.num_classes));
  }
  const std::vector<int> preds = predict(classifier, data.test, config.threads);
  std::vector<int> labels;
  for (const auto& w : data.test) labels.push_back(w.label);
  RunReport report;
  report.phase = "evaluate";
  report.seed = config.seed;
  report.split_hash = split_hash(std::span<const FeatureWindow>(data.test));
  report.confusion = confusion_matrix(preds, labels, classifier.config.classifier.num_classes);
  report.test_accuracy = accuracy(preds, labels);
  report.test_macro_f1 = macro_f1(report.confusion);
  report.config = config.key_values();
  write_text(config.out / "summary.txt", format_summary(report, config.hash()));
  return report;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  if (config.arms.size() < 2) throw ConfigError("an experiment needs at least 2 arms");
  std::vector<Arm> arms;
  for (const auto& name : config.arms) arms.push_back(parse_arm(name));
  ensure_dir(config.out);
  const auto windows = load_windows(config.data);

  ExperimentResult result;
  std::vector<NamedReport> pretrain_reports, finetune_reports;
  for (const Arm& arm : arms) {
    try {
      ExperimentConfig ac = config.for_arm(arm);
      ac.out = config.out / arm.name;
      ensure_dir(ac.out);
      const PreparedData data = prepare_data(windows, ac);
      const ModelConfig model = model_config(ac, data);
      PhaseResult pre = pretrain(data.train, data.val, pretrain_config(ac), model);
      pre.checkpoint.norm = data.norm;
      pre.checkpoint.meta["arm"] = arm.name;
      save_checkpoint(pre.checkpoint, ac.out / "encoder.ckpt");
      PhaseResult fine = finetune(data.train, data.val, data.test, pre.checkpoint, finetune_config(ac), data.num_classes);
      save_checkpoint(fine.checkpoint, ac.out / "classifier.ckpt");
      for (auto* r : {&pre.report, &fine.report}) {
        for (const auto& [k, v] : ac.key_values()) r->config.insert_or_assign(k, v);
        r->seed = config.seed;
      }
      const NamedReport named[] = {{"pretrain", pre.report}, {"finetune", fine.report}};
      export_curves(named, ac.out / "curves.csv");
      write_text(ac.out / "summary.txt", format_summary(fine.report, ac.hash()));
      pretrain_reports.push_back({arm.name, pre.report});
      finetune_reports.push_back({arm.name, fine.report});
      result.arms.push_back({arm, std::move(pre.report), std::move(fine.report)});
    } catch (...) {
      rethrow_with("arm " + arm.name + ": ");
    }
  }
  result.rows = compare_arms(finetune_reports);
  write_text(config.out / "comparison.txt", format_comparison(result.rows));
  write_text(config.out / "comparison.csv", comparison_csv(result.rows));
  export_curves(pretrain_reports, config.out / "curves.csv");
  export_curves(finetune_reports, config.out / "finetune_curves.csv");
  return result;
}

}  // namespace nsbert
