#include <cmath>

#include "nsbert/rng.hpp"
#include "nsbert/training.hpp"

namespace nsbert {

std::vector<bool> choose_mask_spans(std::size_t length, double ratio, std::size_t span, std::uint64_t seed) {
  if (span == 0) throw Error("mask span must be at least 1");
  if (!(ratio * static_cast<double>(length) >= 1.0)) throw Error("mask ratio covers less than one timestep");
  const auto target = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(length) - 1e-9));
  std::vector<bool> mask(length, false);
  Rng rng(seed);
  std::size_t masked = 0;
  std::vector<std::size_t> starts;
  while (masked < target) {
    starts.clear();
    for (std::size_t s = 0; s + span <= length; ++s) {
      bool free = true;
      for (std::size_t i = s; free && i < s + span; ++i) free = !mask[i];
      if (free) starts.push_back(s);
    }
    if (starts.empty()) throw Error("no room left for another disjoint mask span");
    std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
    const std::size_t s = starts[pick(rng)];
    for (std::size_t i = s; i < s + span; ++i) mask[i] = true;
    masked += span;
  }
  return mask;
}

template <class T>
Masked<T> mask_spans(const Array<T>& x, double ratio, std::size_t span, std::uint64_t seed) {
  if (x.rank() != 2) throw ShapeError("mask_spans expects [S, E], got " + to_string(x.shape()));
  Masked<T> out{x, choose_mask_spans(x.dim(0), ratio, span, seed)};
  for (std::size_t t = 0; t < x.dim(0); ++t) {
    if (!out.mask[t]) continue;
    for (std::size_t f = 0; f < x.dim(1); ++f) out.values.at(t, f) = T{0};
  }
  return out;
}

template <class T>
Var<T> masked_squared_error(Var<T> prediction, const Array<T>& target, const Array<T>& weight) {
  Tape<T>& tape = prediction.tape();
  Var<T> diff = sub(prediction, tape.constant(target));
  return sum(mul(square(diff), tape.constant(weight)));
}

template Masked<float> mask_spans(const Array<float>&, double, std::size_t, std::uint64_t);
template Masked<double> mask_spans(const Array<double>&, double, std::size_t, std::uint64_t);
template Var<float> masked_squared_error(Var<float>, const Array<float>&, const Array<float>&);
template Var<double> masked_squared_error(Var<double>, const Array<double>&, const Array<double>&);

}  // namespace nsbert
