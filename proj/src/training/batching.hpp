#pragma once

// Chunked, order-reduced loss and gradient evaluation shared by both phases.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nsbert/errors.hpp"
#include "nsbert/parallel.hpp"
#include "nsbert/training.hpp"

namespace nsbert::detail {

inline std::size_t chunk_count(std::size_t n) { return (n + kChunkSize - 1) / kChunkSize; }

/// Stacks [S, E] arrays into [B, S, E].
inline Array<float> stack(std::span<const Array<float>* const> items) {
  const Shape& s = items.front()->shape();
  Array<float> out({items.size(), s[0], s[1]});
  const std::size_t stride = s[0] * s[1];
  for (std::size_t i = 0; i < items.size(); ++i) {
    std::copy(items[i]->ptr(), items[i]->ptr() + stride, out.ptr() + i * stride);
  }
  return out;
}

inline std::vector<Array<float>> to_float(std::span<const FeatureWindow> windows, const EncoderConfig& config,
                                          const char* what) {
  std::vector<Array<float>> out;
  out.reserve(windows.size());
  for (const auto& w : windows) {
    if (w.values.rank() != 2 || w.length() != config.seq_len || w.features() != config.input_features) {
      throw DataError(std::string(what) + " window " + w.source_id + "#" + std::to_string(w.index) + " has shape " +
                      to_string(w.values.shape()) + ", model expects [" + std::to_string(config.seq_len) + ", " +
                      std::to_string(config.input_features) + "]");
    }
    out.push_back(w.values.cast<float>());
  }
  return out;
}

/// Runs build(chunk, binder) -> summed loss for every chunk of n items. When
/// `grads` is given, backpropagates loss * grad_scale and sums parameter
/// gradients in chunk order. Returns the total (unscaled) loss.
template <class Build>
double run_chunks(std::size_t n, std::size_t threads, const ParamSet<float>& params, Build&& build,
                  ParamSet<float>* grads = nullptr, float grad_scale = 1.0f) {
  const std::size_t chunks = chunk_count(n);
  std::vector<double> losses(chunks, 0.0);
  std::vector<ParamSet<float>> chunk_grads(grads ? chunks : 0);
  parallel_for(chunks, threads, [&](std::size_t c) {
    Tape<float> tape;
    ParamBinder<float> binder(tape, params);
    Var<float> loss = build(c, binder);
    losses[c] = loss.value().item();
    if (grads) {
      tape.backward(scale(loss, grad_scale));
      chunk_grads[c] = tape.parameter_gradients();
    }
  });
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    total += losses[c];
    if (!grads) continue;
    for (auto& [name, g] : chunk_grads[c]) {
      auto [it, inserted] = grads->try_emplace(name, std::move(g));
      if (inserted) continue;
      float* dst = it->second.ptr();
      const float* src = g.ptr();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
    }
  }
  return total;
}

inline std::pair<std::size_t, std::size_t> chunk_range(std::size_t c, std::size_t n) {
  const std::size_t begin = c * kChunkSize;
  return {begin, std::min(n, begin + kChunkSize)};
}

}  // namespace nsbert::detail
