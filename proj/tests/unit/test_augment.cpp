#include <cmath>
#include <vector>

#include "doctest.h"
#include "nsbert/augment.hpp"
#include "nsbert/errors.hpp"
#include "test_util.hpp"

using namespace nsbert;

namespace {

Window window_of(const Array<double>& values) {
  Window w;
  w.values = values;
  w.label = 1;
  w.source_id = "w";
  return w;
}

Window random_window(std::uint64_t seed, std::size_t length = kWindowLength) {
  return window_of(test::random_array<double>({length, kImuChannels}, seed, -20.0, 20.0));
}

FeatureWindow feature_window(std::vector<double> values, std::size_t features) {
  FeatureWindow w;
  const std::size_t n = values.size() / features;
  w.values = Array<double>({n, features}, values);
  return w;
}

}  // namespace

TEST_CASE("one timestep of FM products") {
  Array<double> v({1, kImuChannels}, std::vector<double>{1, 2, 3, 0.5, -1, 2});
  const FeatureWindow f = fm_augment(window_of(v));
  REQUIRE(f.features() == kFmFeatures);
  const std::vector<double> expected = {1, 2, 3, 0.5, -1, 2, 0.5, -1, 2, 1, -2, 4, 1.5, -3, 6};
  for (std::size_t c = 0; c < kFmFeatures; ++c) CHECK(f.values.at(0, c) == expected[c]);
}

TEST_CASE("zero and unit windows") {
  const FeatureWindow zero = fm_augment(window_of(Array<double>({kWindowLength, kImuChannels})));
  for (double v : zero.values.data()) CHECK(v == 0.0);
  CHECK(zero.features() == 15);

  const FeatureWindow ones = fm_augment(window_of(Array<double>({kWindowLength, kImuChannels}, 1.0)));
  for (std::size_t t = 0; t < kWindowLength; ++t) {
    for (std::size_t c = 6; c < kFmFeatures; ++c) CHECK(ones.values.at(t, c) == 1.0);
  }
}

TEST_CASE("FM features match a brute-force loop exactly and keep the raw channels") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Window w = random_window(seed);
    const FeatureWindow f = fm_augment(w);
    REQUIRE(f.values.shape() == Shape{kWindowLength, 15});
    CHECK(f.label == w.label);
    for (std::size_t i = 0; i < kWindowLength; ++i) {
      for (std::size_t c = 0; c < 6; ++c) CHECK(f.values.at(i, c) == w.values.at(i, c));
      for (std::size_t j = 0; j < 3; ++j) {
        for (std::size_t k = 0; k < 3; ++k) {
          CHECK(f.values.at(i, 6 + 3 * j + k) == w.values.at(i, j) * w.values.at(i, 3 + k));
        }
      }
    }
  }
}

TEST_CASE("FM channels are bilinear in acc") {
  for (double alpha : {2.0, 0.5, -4.0, 0.25}) {
    const Window w = random_window(9);
    Window scaled = w;
    for (std::size_t t = 0; t < kWindowLength; ++t) {
      for (std::size_t j = 0; j < 3; ++j) scaled.values.at(t, j) *= alpha;
    }
    const FeatureWindow a = fm_augment(w), b = fm_augment(scaled);
    for (std::size_t t = 0; t < kWindowLength; ++t) {
      for (std::size_t c = 6; c < 15; ++c) CHECK(b.values.at(t, c) == alpha * a.values.at(t, c));
    }
  }
}

TEST_CASE("plain features copy the six channels") {
  const Window w = random_window(4, 20);
  const FeatureWindow f = plain_features(w);
  CHECK(f.values == w.values);
  CHECK(f.source_id == w.source_id);
  CHECK_THROWS_AS(fm_augment(window_of(Array<double>({4, 5}))), ShapeError);
}

TEST_CASE("zscore_fit on a constant channel floors the std") {
  auto w = feature_window(std::vector<double>(12, 5.0), 3);
  const FeatureWindow train[] = {w};
  const NormStats s = zscore_fit(train);
  CHECK(s.mean == std::vector<double>(3, 5.0));
  CHECK(s.stddev == std::vector<double>(3, kZscoreStdFloor));
  const FeatureWindow z = zscore_apply(w, s);
  for (double v : z.values.data()) CHECK(v == 0.0);
}

TEST_CASE("zscore_fit pools every timestep of every window") {
  const FeatureWindow train[] = {feature_window({1, 1, 3}, 1), feature_window({3}, 1)};
  const NormStats s = zscore_fit(train);
  CHECK(s.mean[0] == 2.0);
  CHECK(s.stddev[0] == 1.0);
}

TEST_CASE("zscore apply and invert") {
  std::vector<FeatureWindow> train;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    FeatureWindow f;
    f.values = test::random_array<double>({30, 4}, seed, -3.0, 8.0);
    train.push_back(f);
  }
  const NormStats s = zscore_fit(train);

  FeatureWindow at_mean;
  at_mean.values = Array<double>({7, 4});
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t c = 0; c < 4; ++c) at_mean.values.at(t, c) = s.mean[c];
  const FeatureWindow centered = zscore_apply(at_mean, s);
  for (double v : centered.values.data()) CHECK(v == 0.0);

  for (const auto& w : train) {
    const FeatureWindow back = zscore_invert(zscore_apply(w, s), s);
    CHECK(max_abs_diff(back.values, w.values) < 1e-12);
  }

  // Pooled over the training set, every channel ends up with mean 0, std 1.
  std::vector<FeatureWindow> z;
  for (const auto& w : train) z.push_back(zscore_apply(w, s));
  const NormStats zs = zscore_fit(z);
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(std::abs(zs.mean[c]) < 1e-12);
    CHECK(zs.stddev[c] == doctest::Approx(1.0).epsilon(1e-12));
  }

  CHECK_THROWS_AS(zscore_apply(feature_window({1, 2}, 2), s), ShapeError);
}

TEST_CASE("per-window normalization") {
  FeatureWindow w;
  w.values = test::random_array<double>({50, 15}, 3, 100.0, 200.0);
  const FeatureWindow z = zscore_window(w);
  const FeatureWindow one[] = {z};
  const NormStats s = zscore_fit(one);
  for (std::size_t c = 0; c < 15; ++c) {
    CHECK(std::abs(s.mean[c]) < 1e-9);
    CHECK(s.stddev[c] == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("normalization mode names") {
  CHECK(parse_normalize_mode("dataset") == NormalizeMode::dataset);
  CHECK(parse_normalize_mode("window") == NormalizeMode::window);
  CHECK(to_string(NormalizeMode::window) == "window");
  CHECK_THROWS(parse_normalize_mode("global"));
}
