#pragma once

// Non-stationary BERT encoder, reconstruction decoder and GRU classifier.
//
// Graph-building functions take batched inputs [B, S, E] and record onto the
// tape behind a ParamBinder. Station statistics keep the time axis as a size-1
// dimension ([B, 1, E], or [1, E] for a single window) so they broadcast
// directly against the sequence.

#include <cstddef>
#include <cstdint>
#include <string>

#include "nsbert/autodiff.hpp"

namespace nsbert {

inline constexpr double kStationSigmaFloor = 1e-5;
inline constexpr double kLayerNormEps = 1e-5;

enum class Variant {
  non_stationary,  // series stationarization + de-stationary attention
  vanilla,         // plain scaled dot-product attention, no stationarization
};

Variant parse_variant(const std::string& s);
std::string to_string(Variant v);

struct EncoderConfig {
  std::size_t seq_len = 120;
  std::size_t input_features = 15;
  std::size_t hidden = 72;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t feedforward = 144;
  std::size_t projector_hidden = 64;
  double dropout = 0.1;
  Variant variant = Variant::non_stationary;

  std::size_t head_dim() const { return hidden / heads; }
  void validate() const;
};

struct ClassifierConfig {
  std::size_t gru_hidden = 32;
  std::size_t num_classes = 2;
};

struct ModelConfig {
  EncoderConfig encoder;
  ClassifierConfig classifier;

  void validate() const;
};

template <class T>
struct StationStats {
  Array<T> mu;
  Array<T> sigma;  // > 0 elementwise
};

template <class T>
struct Stationarized {
  Array<T> values;
  StationStats<T> stats;
};

/// Per-feature mean / population std over the time axis (rank-2 axis 0,
/// rank-3 axis 1), std floored at kStationSigmaFloor. Requires S >= 2.
template <class T>
Stationarized<T> stationarize(const Array<T>& x);

/// sigma * y + mu, elementwise with stats broadcast over time.
template <class T>
Array<T> destationarize(const Array<T>& y, const StationStats<T>& stats);

// ---------------------------------------------------------------------------
// Parameters

template <class T>
ParamSet<T> init_encoder_params(const EncoderConfig& config, std::uint64_t seed);

template <class T>
ParamSet<T> init_classifier_params(const ModelConfig& config, std::uint64_t seed);

/// Encoder, projector and decoder parameters (everything the classifier
/// head does not own).
bool is_encoder_param(const std::string& name);

// ---------------------------------------------------------------------------
// Graph building

template <class T>
struct TauDelta {
  Var<T> tau;    // [B, 1, 1], positive
  Var<T> delta;  // [B, 1, S], one shift per key position
};

/// tau = exp(MLP([sigma, pooled raw])); delta[i] = MLP([mu, x_raw[i]]).
template <class T>
TauDelta<T> tau_delta_project(ParamBinder<T>& p, const StationStats<T>& stats, const Array<T>& x_raw);

/// softmax((tau * Q K^T + delta) / sqrt(d)) V for q, k, v [B, S, d].
/// delta is shared by every query row. Throws when any tau <= 0.
template <class T>
Var<T> destationary_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> tau, Var<T> delta);

/// softmax(Q K^T / sqrt(d)) V.
template <class T>
Var<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v);

struct ForwardOptions {
  bool train = false;
  std::uint64_t dropout_seed = 0;
};

template <class T>
struct Encoded {
  Var<T> hidden;               // [B, S, H]
  StationStats<T> stats;       // empty for the vanilla variant
  bool stationarized = false;
};

template <class T>
Encoded<T> encode(ParamBinder<T>& p, const Array<T>& x, const EncoderConfig& config, const ForwardOptions& options = {});

/// Linear head H -> E, then de-normalization with the encoder's stats.
template <class T>
Var<T> decode(ParamBinder<T>& p, const Encoded<T>& encoded, const EncoderConfig& config);

/// One GRU step (reset/update gates through sigmoid, candidate through tanh):
/// x [B, H_in], h [B, G] -> [B, G].
template <class T>
Var<T> gru_step(ParamBinder<T>& p, Var<T> x, Var<T> h, std::size_t gru_hidden);

/// GRU over time, final state -> class logits [B, C].
template <class T>
Var<T> classifier_logits(ParamBinder<T>& p, Var<T> hidden, const ModelConfig& config);

/// Class probabilities [B, C].
template <class T>
Var<T> classify(ParamBinder<T>& p, Var<T> hidden, const ModelConfig& config);

}  // namespace nsbert
