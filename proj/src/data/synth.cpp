#include <cmath>
#include <numbers>

#include "nsbert/data.hpp"
#include "nsbert/rng.hpp"

namespace nsbert {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kAccNoise = 0.1;
constexpr double kGyroNoise = 0.05;
constexpr double kGyroCoupling = 0.15;  // gyro per unit of d(acc)/dt

// Shape of one activity, shared by all its windows.
struct ClassProfile {
  double frequency = 0.0;
  double gyro_frequency = 0.0;
  std::array<double, 3> acc_amp{}, acc_phase{}, harmonic_phase{};
  std::array<double, 3> gyro_amp{}, gyro_phase{};
};

ClassProfile make_profile(std::size_t k, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "synth-class", k));
  std::uniform_real_distribution<double> amp(0.5, 1.5), phase(0.0, kTwoPi), gamp(0.2, 0.6);
  ClassProfile p;
  p.frequency = 0.5 + 0.4 * static_cast<double>(k);
  p.gyro_frequency = 0.3 + 0.25 * static_cast<double>(k);
  for (std::size_t j = 0; j < 3; ++j) {
    p.acc_amp[j] = amp(rng);
    p.acc_phase[j] = phase(rng);
    p.harmonic_phase[j] = phase(rng);
    p.gyro_amp[j] = gamp(rng);
    p.gyro_phase[j] = phase(rng);
  }
  return p;
}

Window make_window(const ClassProfile& p, std::size_t k, std::size_t w, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "synth-window", k, w));
  std::uniform_real_distribution<double> jitter(-0.05, 0.05), phase(0.0, kTwoPi), scale(0.7, 1.3), tilt(-1.0, 1.0);
  std::normal_distribution<double> acc_noise(0.0, kAccNoise), gyro_noise(0.0, kGyroNoise);

  const double f = p.frequency + jitter(rng);
  const double g = p.gyro_frequency + jitter(rng);
  const double theta = phase(rng);
  const double theta_gyro = phase(rng);
  const double amplitude = scale(rng);
  const std::array<double, 3> offset = {tilt(rng), tilt(rng), 9.81 + 0.5 * tilt(rng)};

  // Noise-free oscillatory part of acceleration at time t.
  auto motion = [&](std::size_t j, double t) {
    return amplitude * p.acc_amp[j] *
           (std::sin(kTwoPi * f * t + theta + p.acc_phase[j]) +
            0.3 * std::sin(2.0 * kTwoPi * f * t + 2.0 * theta + p.harmonic_phase[j]));
  };

  Window out;
  out.values = Array<double>({kWindowLength, kImuChannels});
  out.label = static_cast<int>(k);
  out.source_id = "synth-class" + std::to_string(k);
  out.index = w;
  const double dt = 1.0 / kTargetRateHz;
  for (std::size_t i = 0; i < kWindowLength; ++i) {
    const double t = static_cast<double>(i) * dt;
    for (std::size_t j = 0; j < 3; ++j) {
      const double now = motion(j, t);
      out.values.at(i, j) = offset[j] + now + acc_noise(rng);
      const double slope = (now - motion(j, t - dt)) / dt;
      out.values.at(i, 3 + j) = kGyroCoupling * slope +
                                amplitude * p.gyro_amp[j] * std::sin(kTwoPi * g * t + theta_gyro + p.gyro_phase[j]) +
                                gyro_noise(rng);
    }
  }
  return out;
}

}  // namespace

std::vector<Window> synth_dataset(std::size_t num_classes, std::size_t windows_per_class, std::uint64_t seed) {
  if (num_classes < 2 || num_classes > 10) throw DataError("synthetic data needs between 2 and 10 classes");
  if (windows_per_class == 0) throw DataError("synthetic data needs at least one window per class");
  std::vector<Window> out;
  out.reserve(num_classes * windows_per_class);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const ClassProfile profile = make_profile(k, seed);
    for (std::size_t w = 0; w < windows_per_class; ++w) out.push_back(make_window(profile, k, w, seed));
  }
  return out;
}

std::vector<Recording> synth_recordings(std::size_t num_classes, std::size_t windows_per_class, std::uint64_t seed) {
  const auto windows = synth_dataset(num_classes, windows_per_class, seed);
  std::vector<Recording> out(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    out[k].sample_rate_hz = kTargetRateHz;
    out[k].source_id = "synth-class" + std::to_string(k);
  }
  for (const Window& w : windows) {
    Recording& rec = out[static_cast<std::size_t>(w.label)];
    for (std::size_t i = 0; i < kWindowLength; ++i) {
      rec.timestamps.push_back(static_cast<double>(rec.labels.size()) / kTargetRateHz);
      for (std::size_t c = 0; c < kImuChannels; ++c) rec.channels[c].push_back(w.values.at(i, c));
      rec.labels.push_back(w.label);
    }
  }
  return out;
}

}  // namespace nsbert
