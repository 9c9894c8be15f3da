#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "batching.hpp"
#include "nsbert/rng.hpp"

namespace nsbert {

void FinetuneConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("finetune learning rate must be > 0");
  if (batch_size == 0) throw ConfigError("finetune batch size must be positive");
  if (gru_hidden == 0) throw ConfigError("GRU hidden size must be positive");
  if (threads == 0) throw ConfigError("thread count must be positive");
}

namespace {

/// Inputs to the classifier: raw windows (encoder runs per batch) or cached
/// encoder outputs (frozen encoder).
struct Inputs {
  std::vector<Array<float>> arrays;
  std::vector<std::size_t> labels;
  bool hidden = false;
};

Var<float> logits_for(ParamBinder<float>& binder, const Inputs& in, std::span<const std::size_t> idx,
                      const ModelConfig& model, const ForwardOptions& options) {
  std::vector<const Array<float>*> items;
  for (std::size_t i : idx) items.push_back(&in.arrays[i]);
  Array<float> x = detail::stack(items);
  Var<float> hidden = in.hidden ? binder.tape().constant(std::move(x)) : encode(binder, x, model.encoder, options).hidden;
  return classifier_logits(binder, hidden, model);
}

Var<float> cross_entropy_sum(Var<float> logits, const Inputs& in, std::span<const std::size_t> idx) {
  std::vector<std::size_t> targets;
  for (std::size_t i : idx) targets.push_back(in.labels[i]);
  return neg(sum(gather(log_softmax(logits), std::span<const std::size_t>(targets))));
}

struct Evaluation {
  double loss = 0.0;
  std::vector<int> preds;
};

Evaluation evaluate(const ParamSet<float>& params, const ModelConfig& model, const Inputs& in, std::size_t threads) {
  const std::size_t n = in.arrays.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  Evaluation out;
  out.preds.assign(n, 0);
  const double total = detail::run_chunks(n, threads, params, [&](std::size_t c, auto& binder) {
    auto [begin, end] = detail::chunk_range(c, n);
    std::span<const std::size_t> idx(all.data() + begin, end - begin);
    Var<float> logits = logits_for(binder, in, idx, model, {});
    const Array<float>& z = logits.value();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t arg = 0;
      for (std::size_t k = 1; k < z.dim(1); ++k) {
        if (z.at(i, k) > z.at(i, arg)) arg = k;
      }
      out.preds[begin + i] = static_cast<int>(arg);
    }
    return cross_entropy_sum(logits, in, idx);
  });
  out.loss = total / static_cast<double>(n);
  return out;
}

/// Encoder outputs per window, eval mode.
std::vector<Array<float>> cache_hidden(const ParamSet<float>& params, const ModelConfig& model,
                                       const std::vector<Array<float>>& windows, std::size_t threads) {
  const std::size_t n = windows.size();
  std::vector<Array<float>> out(n);
  detail::run_chunks(n, threads, params, [&](std::size_t c, auto& binder) {
    auto [begin, end] = detail::chunk_range(c, n);
    std::vector<const Array<float>*> items;
    for (std::size_t i = begin; i < end; ++i) items.push_back(&windows[i]);
    Var<float> h = encode(binder, detail::stack(items), model.encoder, {}).hidden;
    const std::size_t s = h.dim(1), d = h.dim(2);
    for (std::size_t i = begin; i < end; ++i) {
      const float* src = h.value().ptr() + (i - begin) * s * d;
      out[i] = Array<float>({s, d}, std::vector<float>(src, src + s * d));
    }
    return sum(slice(h, 0, 0, 1));
  });
  return out;
}

Inputs prepare(std::span<const FeatureWindow> windows, const ModelConfig& model, std::size_t num_classes,
               const char* what) {
  Inputs in;
  in.arrays = detail::to_float(windows, model.encoder, what);
  for (const auto& w : windows) {
    if (w.label < 0 || static_cast<std::size_t>(w.label) >= num_classes) {
      throw DataError(std::string(what) + " label " + std::to_string(w.label) + " does not fit a classifier with " +
                      std::to_string(num_classes) + " classes");
    }
    in.labels.push_back(static_cast<std::size_t>(w.label));
  }
  return in;
}

std::vector<int> labels_of(const Inputs& in) { return {in.labels.begin(), in.labels.end()}; }

std::map<std::string, std::string> echo(const FinetuneConfig& c) {
  return {{"finetune.epochs", std::to_string(c.epochs)},
          {"finetune.learning_rate", std::to_string(c.learning_rate)},
          {"finetune.batch_size", std::to_string(c.batch_size)},
          {"finetune.freeze_encoder", c.freeze_encoder ? "true" : "false"},
          {"finetune.gru_hidden", std::to_string(c.gru_hidden)}};
}

}  // namespace

PhaseResult finetune(std::span<const FeatureWindow> train, std::span<const FeatureWindow> val,
                     std::span<const FeatureWindow> test, const Checkpoint& encoder, const FinetuneConfig& config,
                     std::size_t num_classes) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  if (num_classes < 2) throw ConfigError("a classifier needs at least 2 classes");
  if (train.empty() || val.empty() || test.empty()) throw DataError("finetuning needs non-empty train, val and test sets");
  check_compatible(encoder, train.front().length(), train.front().features());

  ModelConfig model = encoder.config;
  model.classifier = {config.gru_hidden, num_classes};
  model.validate();

  Inputs train_in = prepare(train, model, num_classes, "training");
  Inputs val_in = prepare(val, model, num_classes, "validation");
  Inputs test_in = prepare(test, model, num_classes, "test");

  ParamSet<float> params;
  for (const auto& [name, arr] : encoder.params) {
    if (is_encoder_param(name)) params.emplace(name, arr);
  }
  for (auto& [name, arr] : init_classifier_params<float>(model, derive_seed(config.seed, "classifier-init"))) {
    params.insert_or_assign(name, std::move(arr));
  }
  if (config.freeze_encoder) {
    for (Inputs* in : {&train_in, &val_in, &test_in}) {
      in->arrays = cache_hidden(params, model, in->arrays, config.threads);
      in->hidden = true;
    }
  }

  RunReport report;
  report.phase = "finetune";
  report.seed = config.seed;
  report.config = echo(config);
  report.split_hash = split_hash(test);
  const auto val_labels = labels_of(val_in);
  {
    const Evaluation t = evaluate(params, model, train_in, config.threads);
    const Evaluation v = evaluate(params, model, val_in, config.threads);
    report.initial_train_loss = t.loss;
    report.initial_val_loss = v.loss;
    report.best_val_loss = v.loss;
    report.best_val_accuracy = accuracy(v.preds, val_labels);
  }
  ParamSet<float> best = params;

  AdamState<float> adam;
  std::vector<std::size_t> order(train_in.arrays.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    try {
      Rng shuffle_rng(derive_seed(config.seed, "shuffle", epoch));
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double epoch_total = 0.0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++step) {
        const std::size_t stop = std::min(order.size(), start + config.batch_size);
        std::span<const std::size_t> idx(order.data() + start, stop - start);
        ParamSet<float> grads;
        const double total = detail::run_chunks(
            idx.size(), config.threads, params,
            [&](std::size_t c, auto& binder) {
              auto [begin, end] = detail::chunk_range(c, idx.size());
              ForwardOptions options{true, derive_seed(config.seed, "dropout", step, c)};
              return cross_entropy_sum(logits_for(binder, train_in, idx.subspan(begin, end - begin), model, options),
                                       train_in, idx.subspan(begin, end - begin));
            },
            &grads, static_cast<float>(1.0 / static_cast<double>(idx.size())));
        if (!std::isfinite(total)) throw NumericError("non-finite loss");
        adam_step(params, grads, adam, config.learning_rate);
        epoch_total += total;
      }
      report.train_loss.push_back(epoch_total / static_cast<double>(order.size()));
      const Evaluation v = evaluate(params, model, val_in, config.threads);
      const double acc = accuracy(v.preds, val_labels);
      report.val_loss.push_back(v.loss);
      report.val_accuracy.push_back(acc);
      if (acc > report.best_val_accuracy) {
        report.best_val_accuracy = acc;
        report.best_val_loss = v.loss;
        report.best_epoch = epoch;
        best = params;
      }
    } catch (const NumericError& e) {
      throw NumericError("finetuning diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
  }
  report.final_train_loss = evaluate(params, model, train_in, config.threads).loss;

  const Evaluation t = evaluate(best, model, test_in, config.threads);
  const auto test_labels = labels_of(test_in);
  report.confusion = confusion_matrix(t.preds, test_labels, num_classes);
  report.test_accuracy = accuracy(t.preds, test_labels);
  report.test_macro_f1 = macro_f1(report.confusion);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  PhaseResult result;
  result.checkpoint.config = model;
  result.checkpoint.params = std::move(best);
  result.checkpoint.norm = encoder.norm;
  result.checkpoint.meta = encoder.meta;
  result.checkpoint.meta["phase"] = "finetune";
  result.checkpoint.meta["best_epoch"] = std::to_string(report.best_epoch);
  result.report = std::move(report);
  return result;
}

std::vector<int> predict(const Checkpoint& classifier, std::span<const FeatureWindow> windows, std::size_t threads) {
  if (windows.empty()) return {};
  if (!classifier.params.count("cls.weight")) throw CheckpointError("checkpoint has no classifier head");
  check_compatible(classifier, windows.front().length(), windows.front().features());
  Inputs in;
  in.arrays = detail::to_float(windows, classifier.config.encoder, "input");
  in.labels.assign(windows.size(), 0);
  return evaluate(classifier.params, classifier.config, in, std::max<std::size_t>(1, threads)).preds;
}

}  // namespace nsbert
