#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <system_error>

#include "nsbert/data.hpp"

namespace nsbert {

namespace {

constexpr std::string_view kHeader = "timestamp_s,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label";

std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_double(std::string_view token, double& out) {
  token = trim(token);
  if (token.empty()) return false;
  if (token.front() == '+') token.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), out);
  return ec == std::errc() && ptr == token.data() + token.size() && std::isfinite(out);
}

bool parse_int(std::string_view token, int& out) {
  token = trim(token);
  if (token.empty()) return false;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), out);
  return ec == std::errc() && ptr == token.data() + token.size();
}

[[noreturn]] void fail(const std::filesystem::path& path, std::size_t line, const std::string& what) {
  throw DataError(path.string() + ":" + std::to_string(line) + ": " + what);
}

double infer_rate(const std::vector<double>& ts) {
  std::vector<double> dt;
  dt.reserve(ts.size());
  for (std::size_t i = 1; i < ts.size(); ++i) dt.push_back(ts[i] - ts[i - 1]);
  std::nth_element(dt.begin(), dt.begin() + dt.size() / 2, dt.end());
  const double rate = 1.0 / dt[dt.size() / 2];
  const double rounded = std::round(rate);
  return std::abs(rate - rounded) <= 1e-6 * rate ? rounded : rate;
}

}  // namespace

void Recording::validate() const {
  for (std::size_t c = 0; c < kImuChannels; ++c) {
    if (channels[c].size() != labels.size()) {
      throw DataError(source_id + ": channel " + std::string(kImuChannelNames[c]) + " has " +
                      std::to_string(channels[c].size()) + " samples, labels have " + std::to_string(labels.size()));
    }
  }
  if (!timestamps.empty() && timestamps.size() != labels.size()) {
    throw DataError(source_id + ": timestamp count differs from sample count");
  }
  if (!(sample_rate_hz >= kTargetRateHz)) {
    throw DataError(source_id + ": sample rate " + std::to_string(sample_rate_hz) + " Hz is below 20 Hz");
  }
}

Recording load_csv(const std::filesystem::path& path, const CsvOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());

  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) fail(path, 1, "missing header");
  ++line_no;
  const auto header = split_fields(trim(line), ',');
  const auto expected = split_fields(kHeader, ',');
  // column position of each expected field
  std::vector<std::size_t> pos(expected.size());
  for (std::size_t e = 0; e < expected.size(); ++e) {
    auto it = std::find_if(header.begin(), header.end(), [&](std::string_view h) { return trim(h) == expected[e]; });
    if (it == header.end()) fail(path, line_no, "missing column '" + std::string(expected[e]) + "'");
    pos[e] = static_cast<std::size_t>(it - header.begin());
  }

  Recording rec;
  rec.source_id = path.stem().string();
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_fields(line, ',');
    if (fields.size() != header.size()) {
      fail(path, line_no, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
    }
    double ts = 0.0;
    if (!parse_double(fields[pos[0]], ts)) fail(path, line_no, "non-numeric timestamp '" + std::string(fields[pos[0]]) + "'");
    if (!rec.timestamps.empty() && !(ts > rec.timestamps.back())) {
      fail(path, line_no, "timestamps must be strictly increasing");
    }
    rec.timestamps.push_back(ts);
    for (std::size_t c = 0; c < kImuChannels; ++c) {
      double v = 0.0;
      if (!parse_double(fields[pos[c + 1]], v)) {
        fail(path, line_no, "non-numeric " + std::string(kImuChannelNames[c]) + " value '" +
                                std::string(fields[pos[c + 1]]) + "'");
      }
      rec.channels[c].push_back(v);
    }
    int label = 0;
    const std::string_view token = fields[pos[7]];
    if (!parse_int(token, label) || label < 0 || (options.labels && !options.labels->contains(label))) {
      fail(path, line_no, "unknown label token '" + std::string(trim(token)) + "'");
    }
    rec.labels.push_back(label);
  }
  if (rec.labels.empty()) throw DataError(path.string() + ": empty recording");

  if (options.sample_rate_hz > 0.0) {
    rec.sample_rate_hz = options.sample_rate_hz;
  } else if (rec.timestamps.size() >= 2) {
    rec.sample_rate_hz = infer_rate(rec.timestamps);
  } else {
    throw DataError(path.string() + ": cannot infer the sample rate from a single row");
  }
  rec.validate();
  return rec;
}

void write_csv(const Recording& rec, const std::filesystem::path& path) {
  rec.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << kHeader << '\n';
  char buf[64];
  for (std::size_t i = 0; i < rec.length(); ++i) {
    const double ts = rec.timestamps.empty() ? static_cast<double>(i) / rec.sample_rate_hz : rec.timestamps[i];
    std::snprintf(buf, sizeof buf, "%.17g", ts);
    out << buf;
    for (std::size_t c = 0; c < kImuChannels; ++c) {
      std::snprintf(buf, sizeof buf, ",%.17g", rec.channels[c][i]);
      out << buf;
    }
    out << ',' << rec.labels[i] << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

LabelMap load_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  LabelMap labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto tab = line.find('\t');
    int id = 0;
    if (tab == std::string::npos || !parse_int(std::string_view(line).substr(0, tab), id) || id < 0) {
      fail(path, line_no, "expected 'id<TAB>name'");
    }
    labels[id] = std::string(trim(std::string_view(line).substr(tab + 1)));
  }
  return labels;
}

void write_labels(const LabelMap& labels, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [id, name] : labels) out << id << '\t' << name << '\n';
}

std::vector<Recording> load_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  LabelMap labels;
  const bool has_labels = std::filesystem::exists(dir / "labels.txt");
  if (has_labels) labels = load_labels(dir / "labels.txt");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .csv recordings in " + dir.string());
  CsvOptions options;
  if (has_labels) options.labels = &labels;
  std::vector<Recording> out;
  for (const auto& f : files) out.push_back(load_csv(f, options));
  return out;
}

}  // namespace nsbert
