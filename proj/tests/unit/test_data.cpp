#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <string>

#include "doctest.h"
#include "nsbert/data.hpp"
#include "nsbert/errors.hpp"
#include "test_util.hpp"

using namespace nsbert;

namespace {

Recording constant_recording(std::size_t n, double rate, double value = 0.0, int label = 0) {
  Recording r;
  r.sample_rate_hz = rate;
  r.source_id = "rec";
  for (std::size_t i = 0; i < n; ++i) {
    r.timestamps.push_back(static_cast<double>(i) / rate);
    for (auto& c : r.channels) c.push_back(value);
    r.labels.push_back(label);
  }
  return r;
}

std::vector<Window> labeled_windows(const std::vector<std::size_t>& per_class, std::uint64_t seed = 0) {
  std::vector<Window> out;
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    for (std::size_t i = 0; i < per_class[k]; ++i) {
      Window w;
      w.values = test::random_array<double>({4, kImuChannels}, seed + out.size());
      w.label = static_cast<int>(k);
      w.source_id = "c" + std::to_string(k);
      w.index = i;
      out.push_back(std::move(w));
    }
  }
  return out;
}

using Key = std::pair<std::string, std::size_t>;

std::vector<Key> keys(const std::vector<Window>& ws) {
  std::vector<Key> out;
  for (const auto& w : ws) out.emplace_back(w.source_id, w.index);
  return out;
}

std::map<int, std::size_t> class_counts(const std::vector<Window>& ws) {
  std::map<int, std::size_t> out;
  for (const auto& w : ws) ++out[w.label];
  return out;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

const char* kHeader = "timestamp_s,acc_x,acc_y,acc_z,gyro_x,gyro_y,gyro_z,label\n";

}  // namespace

TEST_CASE("load_csv parses a three-row file") {
  const auto dir = test::scratch_dir("csv3");
  write_file(dir / "a.csv", std::string(kHeader) +
                                "0.00,1,2,3,4,5,6,0\n"
                                "0.05,1.5,2,3,4,5,6,0\n"
                                "0.10,1,2,3,4,5,-6e-1,1\n");
  const Recording r = load_csv(dir / "a.csv");
  CHECK(r.length() == 3);
  CHECK(r.sample_rate_hz == doctest::Approx(20.0));
  CHECK(r.channels[0][1] == 1.5);
  CHECK(r.channels[5][2] == -0.6);
  CHECK(r.labels == std::vector<int>{0, 0, 1});
  CHECK(r.source_id == "a");
}

TEST_CASE("load_csv rejects a header-only file") {
  const auto dir = test::scratch_dir("csv-empty");
  write_file(dir / "e.csv", kHeader);
  try {
    load_csv(dir / "e.csv");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("empty recording") != std::string::npos);
  }
}

TEST_CASE("an unmapped label token cites its line") {
  const auto dir = test::scratch_dir("csv-label");
  std::string text = kHeader;
  for (int line = 2; line <= 20; ++line) {
    const std::string label = line == 17 ? "walk" : "0";
    text += std::to_string((line - 2) * 0.05) + ",0,0,0,0,0,0," + label + "\n";
  }
  write_file(dir / "l.csv", text);
  try {
    load_csv(dir / "l.csv");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":17:") != std::string::npos);
  }

  // A numeric label missing from the label map is rejected the same way.
  text = kHeader;
  for (int line = 2; line <= 5; ++line) text += std::to_string((line - 2) * 0.05) + ",0,0,0,0,0,0," + (line == 4 ? "9" : "0") + "\n";
  write_file(dir / "m.csv", text);
  const LabelMap labels{{0, "still"}};
  CHECK_THROWS_WITH_AS(load_csv(dir / "m.csv", {.labels = &labels}), doctest::Contains(":4:"), DataError);
}

TEST_CASE("malformed rows are rejected with line numbers") {
  const auto dir = test::scratch_dir("csv-bad");
  write_file(dir / "f.csv", std::string(kHeader) + "0,1,2,3,4,5,6,0\n0.05,1,2,3,4,5,0\n");
  CHECK_THROWS_WITH_AS(load_csv(dir / "f.csv"), doctest::Contains(":3:"), DataError);
  write_file(dir / "n.csv", std::string(kHeader) + "0,1,2,x,4,5,6,0\n");
  CHECK_THROWS_WITH_AS(load_csv(dir / "n.csv"), doctest::Contains(":2:"), DataError);
  write_file(dir / "t.csv", std::string(kHeader) + "0.1,1,2,3,4,5,6,0\n0.1,1,2,3,4,5,6,0\n");
  CHECK_THROWS_AS(load_csv(dir / "t.csv"), DataError);
  write_file(dir / "h.csv", "time,a,b\n0,1,2\n");
  CHECK_THROWS_AS(load_csv(dir / "h.csv"), DataError);
  CHECK_THROWS_AS(load_csv(dir / "absent.csv"), DataError);
}

TEST_CASE("write_csv and load_csv round trip") {
  const auto dir = test::scratch_dir("csv-rt");
  Recording r = constant_recording(50, 50.0, 0.0, 2);
  for (std::size_t i = 0; i < 50; ++i) r.channels[i % 6][i] = 0.1 * static_cast<double>(i) - 1.0 / 3.0;
  write_csv(r, dir / "rt.csv");
  const Recording back = load_csv(dir / "rt.csv");
  CHECK(back.labels == r.labels);
  CHECK(back.sample_rate_hz == doctest::Approx(50.0));
  for (std::size_t c = 0; c < kImuChannels; ++c) CHECK(back.channels[c] == r.channels[c]);
}

TEST_CASE("recording validation") {
  Recording r = constant_recording(10, 20.0);
  CHECK_NOTHROW(r.validate());
  r.channels[3].pop_back();
  CHECK_THROWS_AS(r.validate(), DataError);
  CHECK_THROWS_AS(constant_recording(10, 10.0).validate(), DataError);
}

TEST_CASE("downsampling by block means") {
  const Recording r100 = constant_recording(100, 100.0, 9.81);
  const Recording r20 = downsample(r100);
  CHECK(r20.length() == 20);
  CHECK(r20.sample_rate_hz == 20.0);
  for (const auto& c : r20.channels) {
    for (double v : c) CHECK(v == doctest::Approx(9.81).epsilon(1e-15));
  }

  Recording ramp = constant_recording(10, 100.0);
  for (std::size_t i = 0; i < 10; ++i) ramp.channels[0][i] = static_cast<double>(i);
  CHECK(downsample(ramp).channels[0] == std::vector<double>{2.0, 7.0});

  Recording same = constant_recording(40, 20.0, 1.25);
  same.labels[7] = 3;
  const Recording out = downsample(same);
  CHECK(out.channels == same.channels);
  CHECK(out.labels == same.labels);

  CHECK_THROWS_AS(downsample(constant_recording(30, 30.0)), DataError);
}

TEST_CASE("downsampled block takes the majority label, ties to the first seen") {
  Recording r = constant_recording(10, 100.0);
  r.labels = {1, 2, 2, 1, 2, 3, 3, 4, 4, 5};
  CHECK(downsample(r).labels == std::vector<int>{2, 3});
}

TEST_CASE("windowing counts") {
  CHECK(make_windows(constant_recording(360, 20.0)).size() == 3);
  CHECK(make_windows(constant_recording(119, 20.0)).empty());
  const auto ws = make_windows(constant_recording(360, 20.0));
  CHECK(ws[2].index == 2);
  CHECK(ws[0].values.shape() == Shape{kWindowLength, kImuChannels});
  CHECK_THROWS_AS(make_windows(constant_recording(360, 100.0)), DataError);
  CHECK(make_windows(constant_recording(360, 20.0), 120, 60).size() == 5);
}

TEST_CASE("window label is the majority over its own slice") {
  Recording r = constant_recording(240, 20.0);
  for (std::size_t i = 130; i < 240; ++i) r.labels[i] = 1;
  const auto ws = make_windows(r);
  REQUIRE(ws.size() == 2);
  CHECK(ws[0].label == 0);
  CHECK(ws[1].label == 1);  // 110 of 120 samples

  // Exactly 96 of 120 passes the purity rule; 95 does not.
  Recording edge = constant_recording(120, 20.0);
  for (std::size_t i = 96; i < 120; ++i) edge.labels[i] = 1;
  CHECK(make_windows(edge).size() == 1);
  edge.labels[95] = 1;
  CHECK(make_windows(edge).empty());
}

TEST_CASE("downsample then window yields floor(T*20/(R*120)) windows minus impure ones") {
  for (double rate : {20.0, 40.0, 100.0}) {
    for (std::size_t t : {1u, 500u, 1199u, 2400u, 3333u}) {
      const Recording r = constant_recording(t, rate);
      const auto expected = static_cast<std::size_t>(std::floor(static_cast<double>(t) * 20.0 / (rate * 120.0)));
      CHECK(make_windows(downsample(r)).size() == expected);
    }
  }
  Recording mixed = constant_recording(1200, 100.0);
  for (std::size_t i = 300; i < 600; ++i) mixed.labels[i] = 1;  // first 20 Hz window is half label 1
  CHECK(make_windows(downsample(mixed)).size() == 1);
}

TEST_CASE("stratified split of 100 balanced windows") {
  const auto ws = labeled_windows({25, 25, 25, 25});
  const DataSplit a = split(ws, {}, 7);
  const DataSplit b = split(ws, {}, 7);
  CHECK(a.train.size() == 80);
  CHECK(a.val.size() == 10);
  CHECK(a.test.size() == 10);
  for (const auto& [label, n] : class_counts(a.train)) CHECK(n == 20);
  for (const auto& [label, n] : class_counts(a.val)) CHECK((n == 2 || n == 3));
  for (const auto& [label, n] : class_counts(a.test)) CHECK((n == 2 || n == 3));
  CHECK(keys(a.train) == keys(b.train));
  CHECK(keys(a.val) == keys(b.val));
  CHECK(keys(a.test) == keys(b.test));
}

TEST_CASE("degenerate ratios keep everything in train") {
  const auto ws = labeled_windows({5, 7});
  const DataSplit s = split(ws, {1.0, 0.0, 0.0}, 3);
  CHECK(s.train.size() == 12);
  CHECK(s.val.empty());
  CHECK(s.test.empty());
  CHECK(keys(s.train) == keys(ws));
}

TEST_CASE("different seeds permute but keep per-class counts") {
  const auto ws = labeled_windows({25, 25, 25, 25});
  const DataSplit a = split(ws, {}, 1), b = split(ws, {}, 2);
  CHECK(keys(a.train) != keys(b.train));
  CHECK(class_counts(a.train) == class_counts(b.train));
  CHECK(class_counts(a.val) == class_counts(b.val));
  CHECK(class_counts(a.test) == class_counts(b.test));
}

TEST_CASE("split partitions are disjoint and exhaustive on random window sets") {
  Rng rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<std::size_t> classes(2, 6), size(3, 40);
    std::vector<std::size_t> per_class(classes(rng));
    for (auto& n : per_class) n = size(rng);
    const auto ws = labeled_windows(per_class, static_cast<std::uint64_t>(trial));
    const std::uint64_t seed = rng();
    const DataSplit s = split(ws, {}, seed);
    std::multiset<Key> seen;
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      for (const auto& k : keys(*part)) seen.insert(k);
    }
    const auto all = keys(ws);
    CHECK(seen.size() == ws.size());
    CHECK(std::set<Key>(seen.begin(), seen.end()) == std::set<Key>(all.begin(), all.end()));
    const DataSplit again = split(ws, {}, seed);
    CHECK(keys(again.test) == keys(s.test));
    // Partitions keep input order.
    for (const auto* part : {&s.train, &s.val, &s.test}) {
      const auto ks = keys(*part);
      CHECK(std::is_sorted(ks.begin(), ks.end()));
    }
  }
}

TEST_CASE("split preconditions") {
  CHECK_THROWS_AS(split(labeled_windows({2, 10}), {}, 1), DataError);
  CHECK_THROWS_AS(split(labeled_windows({5, 5}), {0.5, 0.2, 0.2}, 1), DataError);
}

TEST_CASE("synthetic dataset counts and determinism") {
  const auto a = synth_dataset(4, 500, 1);
  CHECK(a.size() == 2000);
  std::map<int, std::size_t> counts;
  for (const auto& w : a) ++counts[w.label];
  for (const auto& [k, n] : counts) CHECK(n == 500);
  CHECK(counts.size() == 4);
  const auto b = synth_dataset(4, 500, 1);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].values == b[i].values);
  CHECK_FALSE(synth_dataset(4, 5, 2)[0].values == a[0].values);
  CHECK_THROWS_AS(synth_dataset(1, 5, 1), DataError);
}

TEST_CASE("synthetic classes peak at different acc_x frequencies") {
  // Mean DFT magnitude of mean-removed acc_x per class.
  const std::size_t n = kWindowLength;
  const auto ws = synth_dataset(4, 40, 1);
  std::map<int, std::vector<double>> spectrum;
  for (const auto& w : ws) {
    auto& mag = spectrum[w.label];
    mag.resize(n / 2 + 1, 0.0);
    double mu = 0.0;
    for (std::size_t t = 0; t < n; ++t) mu += w.values.at(t, 0) / static_cast<double>(n);
    for (std::size_t f = 1; f <= n / 2; ++f) {
      std::complex<double> acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const double angle = -2.0 * std::numbers::pi * static_cast<double>(f * t) / static_cast<double>(n);
        acc += (w.values.at(t, 0) - mu) * std::polar(1.0, angle);
      }
      mag[f] += std::abs(acc);
    }
  }
  std::set<std::size_t> peaks;
  for (const auto& [k, mag] : spectrum) {
    const auto peak = static_cast<std::size_t>(std::max_element(mag.begin(), mag.end()) - mag.begin());
    const double hz = static_cast<double>(peak) * kTargetRateHz / static_cast<double>(n);
    CHECK(std::abs(hz - (0.5 + 0.4 * k)) <= 1.0 / 6.0 + 1e-9);
    peaks.insert(peak);
  }
  CHECK(peaks.size() == 4);
}

TEST_CASE("synthetic recordings window back into the synthetic dataset") {
  const auto recs = synth_recordings(3, 7, 5);
  const auto direct = synth_dataset(3, 7, 5);
  std::vector<Window> cut;
  for (const auto& r : recs) {
    CHECK(r.sample_rate_hz == kTargetRateHz);
    for (auto& w : make_windows(r)) cut.push_back(std::move(w));
  }
  REQUIRE(cut.size() == direct.size());
  for (std::size_t i = 0; i < cut.size(); ++i) {
    CHECK(cut[i].label == direct[i].label);
    CHECK(cut[i].values == direct[i].values);
  }
}

TEST_CASE("labels file round trip and directory loading") {
  const auto dir = test::scratch_dir("dir");
  const LabelMap labels{{0, "sit"}, {1, "walk"}};
  write_labels(labels, dir / "labels.txt");
  CHECK(load_labels(dir / "labels.txt") == labels);
  for (const auto& r : synth_recordings(2, 3, 1)) write_csv(r, dir / (r.source_id + ".csv"));
  const auto recs = load_directory(dir);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].source_id == "synth-class0");
  CHECK(recs[1].length() == 3 * kWindowLength);

  write_labels({{0, "sit"}}, dir / "labels.txt");
  CHECK_THROWS_AS(load_directory(dir), DataError);
  CHECK_THROWS_WITH_AS(load_directory(dir / "nope"), doctest::Contains("nope"), DataError);
}
