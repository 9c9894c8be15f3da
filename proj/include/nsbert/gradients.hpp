#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "nsbert/autodiff.hpp"

namespace nsbert {

/// Builds a scalar-valued graph on a fresh tape from a parameter set.
template <class T>
using LossFn = std::function<Var<T>(Tape<T>&, const ParamSet<T>&)>;

template <class T>
struct ValueAndGrad {
  T value{};
  /// One entry per parameter in the set; zeros for parameters the graph
  /// never touched.
  ParamSet<T> grads;
};

template <class T>
ValueAndGrad<T> value_and_gradients(const LossFn<T>& fn, const ParamSet<T>& params);

struct GradCheckOptions {
  double step = 1e-5;
  /// Parameters larger than this are checked on a random subsample of
  /// max(50, max_elements) entries.
  std::size_t max_elements = 64;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  std::map<std::string, double> max_relative_error;

  double worst() const;
  bool passed(double tolerance) const { return worst() < tolerance; }
};

/// |a - b| / max(|a|, |b|, 1e-8)
double relative_error(double a, double b);

/// Compares backward() against central differences for every parameter.
/// Requires step in [1e-6, 1e-3]. Throws NumericError on non-finite estimates.
GradCheckReport grad_check(const LossFn<double>& fn, const ParamSet<double>& params,
                           const GradCheckOptions& options = {});

}  // namespace nsbert
