#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "nsbert/data.hpp"
#include "nsbert/rng.hpp"

namespace nsbert {

namespace {

struct Majority {
  int label = 0;
  std::size_t count = 0;
};

// Most frequent label in [begin, end); ties resolve to the label seen first.
Majority majority(const std::vector<int>& labels, std::size_t begin, std::size_t end) {
  std::map<int, std::size_t> counts;
  for (std::size_t i = begin; i < end; ++i) ++counts[labels[i]];
  Majority best;
  for (std::size_t i = begin; i < end; ++i) {
    const std::size_t c = counts[labels[i]];
    if (c > best.count) best = {labels[i], c};
  }
  return best;
}

}  // namespace

Recording downsample(const Recording& rec, double target_hz) {
  rec.validate();
  if (!(target_hz > 0.0)) throw DataError("target rate must be positive");
  const double ratio = rec.sample_rate_hz / target_hz;
  const double rounded = std::round(ratio);
  if (rounded < 1.0 || std::abs(ratio - rounded) > 1e-9 * ratio) {
    throw DataError(rec.source_id + ": " + std::to_string(rec.sample_rate_hz) + " Hz is not an integer multiple of " +
                    std::to_string(target_hz) + " Hz");
  }
  const auto factor = static_cast<std::size_t>(rounded);
  if (factor == 1) return rec;

  Recording out;
  out.sample_rate_hz = target_hz;
  out.source_id = rec.source_id;
  const std::size_t blocks = rec.length() / factor;
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t begin = b * factor, end = begin + factor;
    for (std::size_t c = 0; c < kImuChannels; ++c) {
      double acc = 0.0;
      for (std::size_t i = begin; i < end; ++i) acc += rec.channels[c][i];
      out.channels[c].push_back(acc / static_cast<double>(factor));
    }
    out.labels.push_back(majority(rec.labels, begin, end).label);
    if (!rec.timestamps.empty()) out.timestamps.push_back(rec.timestamps[begin]);
  }
  return out;
}

std::vector<Window> make_windows(const Recording& rec, std::size_t length, std::size_t stride, double purity) {
  if (length == 0 || stride == 0) throw DataError("window length and stride must be positive");
  if (std::abs(rec.sample_rate_hz - kTargetRateHz) > 1e-9) {
    throw DataError(rec.source_id + ": windowing expects a 20 Hz recording, got " +
                    std::to_string(rec.sample_rate_hz) + " Hz");
  }
  rec.validate();
  std::vector<Window> out;
  for (std::size_t i = 0; i * stride + length <= rec.length(); ++i) {
    const std::size_t begin = i * stride;
    const Majority m = majority(rec.labels, begin, begin + length);
    if (static_cast<double>(m.count) < purity * static_cast<double>(length)) continue;
    Window w;
    w.values = Array<double>({length, kImuChannels});
    for (std::size_t t = 0; t < length; ++t)
      for (std::size_t c = 0; c < kImuChannels; ++c) w.values.at(t, c) = rec.channels[c][begin + t];
    w.label = m.label;
    w.source_id = rec.source_id;
    w.index = i;
    out.push_back(std::move(w));
  }
  return out;
}

DataSplit split(std::span<const Window> windows, const SplitRatios& ratios, std::uint64_t seed) {
  const double r[3] = {ratios.train, ratios.val, ratios.test};
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9 || r[0] < 0 || r[1] < 0 || r[2] < 0) {
    throw DataError("split ratios must be non-negative and sum to 1");
  }
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < windows.size(); ++i) by_class[windows[i].label].push_back(i);
  for (const auto& [label, members] : by_class) {
    if (members.size() < 3) {
      throw DataError("class " + std::to_string(label) + " has " + std::to_string(members.size()) +
                      " windows, fewer than the 3 partitions");
    }
  }

  // Per-class counts for train and val: floors, then the partition total is
  // topped up by largest fractional remainder (ties to the lower class id).
  const std::size_t n_classes = by_class.size();
  std::vector<std::array<std::size_t, 2>> take(n_classes, {0, 0});
  for (int p = 0; p < 2; ++p) {
    const auto target = static_cast<std::size_t>(std::llround(r[p] * static_cast<double>(windows.size())));
    std::vector<std::pair<double, std::size_t>> remainder;
    std::size_t assigned = 0, c = 0;
    for (const auto& [label, members] : by_class) {
      const double quota = r[p] * static_cast<double>(members.size());
      const std::size_t room = members.size() - (p == 1 ? take[c][0] : 0);
      take[c][p] = std::min(room, static_cast<std::size_t>(std::floor(quota)));
      assigned += take[c][p];
      remainder.emplace_back(quota - std::floor(quota), c);
      ++c;
    }
    std::stable_sort(remainder.begin(), remainder.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < target && k < remainder.size(); ++k) {
      const std::size_t cls = remainder[k].second;
      const std::size_t size = std::next(by_class.begin(), static_cast<std::ptrdiff_t>(cls))->second.size();
      const std::size_t used = take[cls][0] + (p == 1 ? take[cls][1] : 0);
      if (remainder[k].first > 0.0 && used < size) {
        ++take[cls][p];
        ++assigned;
      }
    }
  }

  std::vector<int> part(windows.size(), 2);
  std::size_t c = 0;
  for (const auto& [label, members] : by_class) {
    std::vector<std::size_t> order = members;
    Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(label)));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < order.size(); ++k) {
      part[order[k]] = k < take[c][0] ? 0 : (k < take[c][0] + take[c][1] ? 1 : 2);
    }
    ++c;
  }
  DataSplit out;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    (part[i] == 0 ? out.train : part[i] == 1 ? out.val : out.test).push_back(windows[i]);
  }
  return out;
}

}  // namespace nsbert
