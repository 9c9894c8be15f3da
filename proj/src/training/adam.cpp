#include <cmath>

#include "nsbert/training.hpp"

namespace nsbert {

template <class T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state, double lr,
               const AdamOptions& options) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for " + name);
    auto it = params.find(name);
    if (it == params.end()) throw Error("gradient for unknown parameter " + name);
    if (it->second.shape() != g.shape()) {
      throw ShapeError("gradient for " + name + " has shape " + to_string(g.shape()) + ", parameter " +
                       to_string(it->second.shape()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Array<T>& p = params.at(name);
    auto [mi, m_new] = state.m.try_emplace(name, g.shape());
    auto [vi, v_new] = state.v.try_emplace(name, g.shape());
    Array<T>& m = mi->second;
    Array<T>& v = vi->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      const double mv = options.beta1 * m[i] + (1.0 - options.beta1) * gi;
      const double vv = options.beta2 * v[i] + (1.0 - options.beta2) * gi * gi;
      m[i] = static_cast<T>(mv);
      v[i] = static_cast<T>(vv);
      const double update = lr * (mv / c1) / (std::sqrt(vv / c2) + options.epsilon);
      p[i] = static_cast<T>(p[i] - update);
    }
  }
}

template void adam_step(ParamSet<float>&, const ParamSet<float>&, AdamState<float>&, double, const AdamOptions&);
template void adam_step(ParamSet<double>&, const ParamSet<double>&, AdamState<double>&, double, const AdamOptions&);

}  // namespace nsbert
