#include <chrono>
#include <cmath>
#include <numeric>

#include "batching.hpp"
#include "nsbert/rng.hpp"

namespace nsbert {

void PretrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("pretrain learning rate must be >= 0");
  if (batch_size == 0) throw ConfigError("pretrain batch size must be positive");
  if (!(mask_ratio > 0.0 && mask_ratio <= 0.5)) throw ConfigError("mask ratio must lie in (0, 0.5]");
  if (mask_span == 0) throw ConfigError("mask span must be at least 1");
  if (threads == 0) throw ConfigError("thread count must be positive");
}

namespace {

struct MaskedBatch {
  Array<float> input;   // [b, S, E]
  Array<float> target;  // [b, S, E]
  Array<float> weight;  // [b, S, 1]
  double weight_sum = 0.0;
};

/// Masks windows[idx[i]] with seed_of(i) for i in [begin, end).
template <class SeedOf>
MaskedBatch make_batch(const std::vector<Array<float>>& windows, std::span<const std::size_t> idx, std::size_t begin,
                       std::size_t end, const PretrainConfig& config, SeedOf&& seed_of) {
  std::vector<const Array<float>*> raw;
  for (std::size_t i = begin; i < end; ++i) raw.push_back(&windows[idx[i]]);
  MaskedBatch batch;
  batch.target = detail::stack(raw);
  batch.input = batch.target;
  const std::size_t b = raw.size(), s = batch.target.dim(1), e = batch.target.dim(2);
  batch.weight = Array<float>({b, s, 1}, config.full_sequence ? 1.0f : 0.0f);
  if (config.full_sequence) {
    batch.weight_sum = static_cast<double>(b * s * e);
    return batch;
  }
  for (std::size_t j = 0; j < b; ++j) {
    const auto mask = choose_mask_spans(s, config.mask_ratio, config.mask_span, seed_of(begin + j));
    for (std::size_t t = 0; t < s; ++t) {
      if (!mask[t]) continue;
      batch.weight.at(j, t, 0) = 1.0f;
      batch.weight_sum += static_cast<double>(e);
      std::fill_n(batch.input.ptr() + (j * s + t) * e, e, 0.0f);
    }
  }
  return batch;
}

Var<float> batch_loss(ParamBinder<float>& binder, const MaskedBatch& batch, const EncoderConfig& encoder,
                      const ForwardOptions& options) {
  Encoded<float> enc = encode(binder, batch.input, encoder, options);
  return masked_squared_error(decode(binder, enc, encoder), batch.target, batch.weight);
}

/// Sum of masked squared errors and the masked element count.
std::pair<double, double> eval_loss(const ParamSet<float>& params, const ModelConfig& model,
                                    const std::vector<Array<float>>& windows, const PretrainConfig& config,
                                    std::uint64_t mask_seed) {
  std::vector<std::size_t> idx(windows.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> weights(detail::chunk_count(windows.size()));
  const double total = detail::run_chunks(windows.size(), config.threads, params, [&](std::size_t c, auto& binder) {
    auto [begin, end] = detail::chunk_range(c, windows.size());
    MaskedBatch batch = make_batch(windows, idx, begin, end, config,
                                   [&](std::size_t i) { return derive_seed(mask_seed, "mask", i); });
    weights[c] = batch.weight_sum;
    return batch_loss(binder, batch, model.encoder, {});
  });
  return {total, std::accumulate(weights.begin(), weights.end(), 0.0)};
}

std::map<std::string, std::string> echo(const PretrainConfig& c) {
  return {{"pretrain.epochs", std::to_string(c.epochs)},
          {"pretrain.learning_rate", std::to_string(c.learning_rate)},
          {"pretrain.batch_size", std::to_string(c.batch_size)},
          {"pretrain.mask_ratio", std::to_string(c.mask_ratio)},
          {"pretrain.mask_span", std::to_string(c.mask_span)},
          {"pretrain.full_sequence", c.full_sequence ? "true" : "false"}};
}

}  // namespace

double reconstruction_loss(const ParamSet<float>& params, const ModelConfig& model,
                           std::span<const FeatureWindow> windows, const PretrainConfig& config,
                           std::uint64_t mask_seed) {
  if (windows.empty()) throw DataError("no windows to evaluate");
  const auto data = detail::to_float(windows, model.encoder, "evaluation");
  auto [total, weight] = eval_loss(params, model, data, config, mask_seed);
  return total / weight;
}

PhaseResult pretrain(std::span<const FeatureWindow> train, std::span<const FeatureWindow> val,
                     const PretrainConfig& config, const ModelConfig& model) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  model.validate();
  if (train.empty()) throw DataError("pretraining needs at least one training window");
  if (val.empty()) throw DataError("pretraining needs at least one validation window");
  const auto train_data = detail::to_float(train, model.encoder, "training");
  const auto val_data = detail::to_float(val, model.encoder, "validation");

  const std::uint64_t seed = config.seed;
  const std::uint64_t train_eval_seed = derive_seed(seed, "eval-mask", 0);
  const std::uint64_t val_eval_seed = derive_seed(seed, "eval-mask", 1);
  auto mean_loss = [&](const ParamSet<float>& params, const std::vector<Array<float>>& data, std::uint64_t s) {
    auto [total, weight] = eval_loss(params, model, data, config, s);
    return total / weight;
  };

  ParamSet<float> params = init_encoder_params<float>(model.encoder, derive_seed(seed, "encoder-init"));
  RunReport report;
  report.phase = "pretrain";
  report.seed = seed;
  report.config = echo(config);
  report.split_hash = split_hash(val);
  report.initial_train_loss = mean_loss(params, train_data, train_eval_seed);
  report.initial_val_loss = mean_loss(params, val_data, val_eval_seed);
  report.best_val_loss = report.initial_val_loss;
  ParamSet<float> best = params;

  AdamState<float> adam;
  std::vector<std::size_t> order(train_data.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    try {
      Rng shuffle_rng(derive_seed(seed, "shuffle", epoch));
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double epoch_total = 0.0, epoch_weight = 0.0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++step) {
        const std::size_t stop = std::min(order.size(), start + config.batch_size);
        std::span<const std::size_t> idx(order.data() + start, stop - start);
        std::vector<MaskedBatch> batches(detail::chunk_count(idx.size()));
        double weight = 0.0;
        for (std::size_t c = 0; c < batches.size(); ++c) {
          auto [begin, end] = detail::chunk_range(c, idx.size());
          batches[c] = make_batch(train_data, idx, begin, end, config,
                                  [&](std::size_t i) { return derive_seed(seed, "mask", epoch, idx[i]); });
          weight += batches[c].weight_sum;
        }
        ParamSet<float> grads;
        const double total = detail::run_chunks(
            idx.size(), config.threads, params,
            [&](std::size_t c, auto& binder) {
              ForwardOptions options{true, derive_seed(seed, "dropout", step, c)};
              return batch_loss(binder, batches[c], model.encoder, options);
            },
            &grads, static_cast<float>(1.0 / weight));
        if (!std::isfinite(total)) throw NumericError("non-finite loss");
        adam_step(params, grads, adam, config.learning_rate);
        epoch_total += total;
        epoch_weight += weight;
      }
      report.train_loss.push_back(epoch_total / epoch_weight);
      const double v = mean_loss(params, val_data, val_eval_seed);
      if (!std::isfinite(v)) throw NumericError("non-finite validation loss");
      report.val_loss.push_back(v);
      if (v < report.best_val_loss) {
        report.best_val_loss = v;
        report.best_epoch = epoch;
        best = params;
      }
    } catch (const NumericError& e) {
      throw NumericError("pretraining diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
  }
  report.final_train_loss = mean_loss(params, train_data, train_eval_seed);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  PhaseResult result;
  result.checkpoint.config = model;
  result.checkpoint.params = std::move(best);
  result.checkpoint.meta["phase"] = "pretrain";
  result.checkpoint.meta["best_epoch"] = std::to_string(report.best_epoch);
  result.report = std::move(report);
  return result;
}

}  // namespace nsbert
