#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nsbert/array.hpp"
#include "nsbert/data.hpp"

namespace nsbert {

inline constexpr std::size_t kFmFeatures = 15;
inline constexpr double kZscoreStdFloor = 1e-8;

/// Model input: values [length, F] with F = 6 (raw) or 15 (FM-augmented).
/// Augmented channel order: acc_x..gyro_z, then fm_jk = acc_j * gyro_k with
/// the accelerometer axis major (fm_xx, fm_xy, fm_xz, fm_yx, ..., fm_zz).
struct FeatureWindow {
  Array<double> values;
  int label = 0;
  std::string source_id;
  std::size_t index = 0;

  std::size_t length() const { return values.dim(0); }
  std::size_t features() const { return values.dim(1); }
};

/// The 6 raw channels unchanged.
FeatureWindow plain_features(const Window& w);

/// Appends the 9 acc x gyro products per timestep.
FeatureWindow fm_augment(const Window& w);

/// Per-channel statistics pooled over every timestep of the training windows.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population, floored at kZscoreStdFloor

  std::size_t features() const { return mean.size(); }
};

NormStats zscore_fit(std::span<const FeatureWindow> train);
FeatureWindow zscore_apply(const FeatureWindow& w, const NormStats& stats);
FeatureWindow zscore_invert(const FeatureWindow& w, const NormStats& stats);

/// Alternative normalization: each window by its own per-channel stats.
FeatureWindow zscore_window(const FeatureWindow& w);

enum class NormalizeMode { dataset, window };

NormalizeMode parse_normalize_mode(const std::string& s);
std::string to_string(NormalizeMode mode);

}  // namespace nsbert
