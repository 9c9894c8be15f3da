#include "nsbert/augment.hpp"

#include <algorithm>
#include <cmath>

namespace nsbert {

namespace {

FeatureWindow like(const Window& w, std::size_t features) {
  FeatureWindow out;
  out.values = Array<double>({w.values.dim(0), features});
  out.label = w.label;
  out.source_id = w.source_id;
  out.index = w.index;
  return out;
}

void check_window(const Window& w) {
  if (w.values.rank() != 2 || w.values.dim(1) != kImuChannels) {
    throw ShapeError("expected a [T, 6] IMU window, got " + to_string(w.values.shape()));
  }
}

FeatureWindow affine(const FeatureWindow& w, const NormStats& stats, bool forward) {
  if (w.features() != stats.features()) {
    throw ShapeError("normalization stats have " + std::to_string(stats.features()) + " channels, window has " +
                     std::to_string(w.features()));
  }
  FeatureWindow out = w;
  const std::size_t f = w.features();
  for (std::size_t t = 0; t < w.length(); ++t) {
    for (std::size_t c = 0; c < f; ++c) {
      double& v = out.values.at(t, c);
      v = forward ? (v - stats.mean[c]) / stats.stddev[c] : v * stats.stddev[c] + stats.mean[c];
    }
  }
  return out;
}

}  // namespace

FeatureWindow plain_features(const Window& w) {
  check_window(w);
  FeatureWindow out = like(w, kImuChannels);
  out.values = w.values;
  return out;
}

FeatureWindow fm_augment(const Window& w) {
  check_window(w);
  FeatureWindow out = like(w, kFmFeatures);
  for (std::size_t t = 0; t < w.values.dim(0); ++t) {
    for (std::size_t c = 0; c < kImuChannels; ++c) out.values.at(t, c) = w.values.at(t, c);
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 3; ++k) out.values.at(t, kImuChannels + 3 * j + k) = w.values.at(t, j) * w.values.at(t, 3 + k);
  }
  return out;
}

NormStats zscore_fit(std::span<const FeatureWindow> train) {
  if (train.empty()) throw DataError("cannot fit normalization on an empty training set");
  const std::size_t f = train.front().features();
  NormStats stats;
  stats.mean.assign(f, 0.0);
  stats.stddev.assign(f, 0.0);
  std::size_t count = 0;
  for (const auto& w : train) {
    if (w.features() != f) throw ShapeError("training windows disagree on feature count");
    for (std::size_t t = 0; t < w.length(); ++t)
      for (std::size_t c = 0; c < f; ++c) stats.mean[c] += w.values.at(t, c);
    count += w.length();
  }
  for (double& m : stats.mean) m /= static_cast<double>(count);
  for (const auto& w : train) {
    for (std::size_t t = 0; t < w.length(); ++t)
      for (std::size_t c = 0; c < f; ++c) {
        const double d = w.values.at(t, c) - stats.mean[c];
        stats.stddev[c] += d * d;
      }
  }
  for (double& s : stats.stddev) s = std::max(std::sqrt(s / static_cast<double>(count)), kZscoreStdFloor);
  return stats;
}

FeatureWindow zscore_apply(const FeatureWindow& w, const NormStats& stats) { return affine(w, stats, true); }

FeatureWindow zscore_invert(const FeatureWindow& w, const NormStats& stats) { return affine(w, stats, false); }

FeatureWindow zscore_window(const FeatureWindow& w) {
  const FeatureWindow one[] = {w};
  return zscore_apply(w, zscore_fit(one));
}

NormalizeMode parse_normalize_mode(const std::string& s) {
  if (s == "dataset") return NormalizeMode::dataset;
  if (s == "window") return NormalizeMode::window;
  throw ConfigError("normalization mode must be 'dataset' or 'window', got '" + s + "'");
}

std::string to_string(NormalizeMode mode) { return mode == NormalizeMode::dataset ? "dataset" : "window"; }

}  // namespace nsbert
