#include "nsbert/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "nsbert/rng.hpp"

namespace nsbert {

template <class T>
ValueAndGrad<T> value_and_gradients(const LossFn<T>& fn, const ParamSet<T>& params) {
  Tape<T> tape;
  Var<T> out = fn(tape, params);
  tape.backward(out);
  ValueAndGrad<T> result;
  result.value = out.value().item();
  auto touched = tape.parameter_gradients();
  for (const auto& [name, arr] : params) {
    auto it = touched.find(name);
    result.grads.emplace(name, it != touched.end() ? std::move(it->second) : Array<T>(arr.shape()));
  }
  return result;
}

template ValueAndGrad<float> value_and_gradients(const LossFn<float>&, const ParamSet<float>&);
template ValueAndGrad<double> value_and_gradients(const LossFn<double>&, const ParamSet<double>&);

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const auto& [name, err] : max_relative_error) w = std::max(w, err);
  return w;
}

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

GradCheckReport grad_check(const LossFn<double>& fn, const ParamSet<double>& params,
                           const GradCheckOptions& options) {
  if (!(options.step >= 1e-6 && options.step <= 1e-3)) {
    throw Error("grad_check: step must lie in [1e-6, 1e-3]");
  }
  GradCheckReport report;
  if (params.empty()) return report;

  const auto analytic = value_and_gradients(fn, params).grads;
  auto evaluate = [&](const ParamSet<double>& p) {
    Tape<double> tape;
    return fn(tape, p).value().item();
  };

  ParamSet<double> probe = params;
  Rng rng(derive_seed(options.seed, "grad_check"));
  const std::size_t budget = std::max<std::size_t>(50, options.max_elements);
  for (const auto& [name, arr] : params) {
    std::vector<std::size_t> idx(arr.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > budget) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(budget);
    }
    Array<double>& slot = probe.at(name);
    double worst = 0.0;
    for (std::size_t i : idx) {
      const double original = slot[i];
      slot[i] = original + options.step;
      const double up = evaluate(probe);
      slot[i] = original - options.step;
      const double down = evaluate(probe);
      slot[i] = original;
      const double estimate = (up - down) / (2.0 * options.step);
      if (!std::isfinite(estimate)) {
        throw NumericError("grad_check: non-finite estimate for " + name + "[" + std::to_string(i) + "]");
      }
      worst = std::max(worst, relative_error(estimate, analytic.at(name)[i]));
    }
    report.max_relative_error.emplace(name, worst);
  }
  return report;
}

}  // namespace nsbert
