#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nsbert/array.hpp"

namespace nsbert {

inline constexpr std::size_t kImuChannels = 6;
inline constexpr std::array<std::string_view, kImuChannels> kImuChannelNames = {"acc_x",  "acc_y",  "acc_z",
                                                                                 "gyro_x", "gyro_y", "gyro_z"};
inline constexpr double kTargetRateHz = 20.0;
inline constexpr std::size_t kWindowLength = 120;  // 6 s at 20 Hz

/// One continuous IMU capture with per-sample activity labels.
struct Recording {
  double sample_rate_hz = 0.0;
  std::vector<double> timestamps;
  std::array<std::vector<double>, kImuChannels> channels;  // acc in m/s^2, gyro in rad/s
  std::vector<int> labels;
  std::string source_id;

  std::size_t length() const { return labels.size(); }
  /// Throws DataError when channel/label lengths disagree or the rate is below 20 Hz.
  void validate() const;
};

/// A fixed-length segment, values [length, 6] in kImuChannelNames order.
struct Window {
  Array<double> values;
  int label = 0;
  std::string source_id;
  std::size_t index = 0;  // position within its recording
};

using LabelMap = std::map<int, std::string>;

struct CsvOptions {
  /// When set, labels outside the map are rejected.
  const LabelMap* labels = nullptr;
  /// Overrides the rate inferred from timestamps (required for 1-row files).
  double sample_rate_hz = 0.0;
};

/// Parses `timestamp_s,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label`.
/// Errors cite the offending line number.
Recording load_csv(const std::filesystem::path& path, const CsvOptions& options = {});
void write_csv(const Recording& rec, const std::filesystem::path& path);

/// `id<TAB>name` per line.
LabelMap load_labels(const std::filesystem::path& path);
void write_labels(const LabelMap& labels, const std::filesystem::path& path);

/// Every *.csv in a directory (sorted by name), validated against labels.txt
/// when present.
std::vector<Recording> load_directory(const std::filesystem::path& dir);

/// Block-mean decimation to target_hz; block label is the majority label
/// (ties go to the label seen first in the block). Rate must be an integer
/// multiple of target_hz.
Recording downsample(const Recording& rec, double target_hz = kTargetRateHz);

/// Non-overlapping (by default) slices of a 20 Hz recording. A window keeps the
/// majority label and is discarded when that label covers less than `purity`
/// of its samples. Too-short recordings give no windows.
std::vector<Window> make_windows(const Recording& rec, std::size_t length = kWindowLength,
                                 std::size_t stride = kWindowLength, double purity = 0.8);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DataSplit {
  std::vector<Window> train, val, test;
};

/// Stratified, seed-deterministic partition. Partition totals follow the
/// ratios (largest remainder across classes); windows keep input order
/// inside each partition. Every class needs at least 3 windows.
DataSplit split(std::span<const Window> windows, const SplitRatios& ratios, std::uint64_t seed);

/// Labeled IMU-like windows: class k oscillates at 0.5 + 0.4k Hz with
/// class-specific per-axis phases; gyro axes follow scaled first differences
/// of the accelerometer plus their own oscillation. Class-major order.
std::vector<Window> synth_dataset(std::size_t num_classes, std::size_t windows_per_class, std::uint64_t seed);

/// The same windows laid end to end, one 20 Hz recording per class.
std::vector<Recording> synth_recordings(std::size_t num_classes, std::size_t windows_per_class, std::uint64_t seed);

}  // namespace nsbert
