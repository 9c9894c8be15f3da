#pragma once

// Two-phase training: masked-reconstruction pretraining of encoder + decoder,
// then GRU classifier finetuning on top of the (normally frozen) encoder.
//
// Batches are cut into fixed chunks of kChunkSize windows. Chunks may run on
// several threads, but their losses and gradients are reduced in chunk order
// and every random stream (shuffle, mask, dropout, init) is derived from the
// master seed, so results do not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nsbert/augment.hpp"
#include "nsbert/autodiff.hpp"
#include "nsbert/evaluation.hpp"
#include "nsbert/model.hpp"

namespace nsbert {

inline constexpr std::size_t kChunkSize = 16;

struct PretrainConfig {
  std::size_t epochs = 300;
  double learning_rate = 1e-4;
  std::size_t batch_size = 128;
  double mask_ratio = 0.15;
  std::size_t mask_span = 5;
  bool full_sequence = false;  // plain autoencoding: no masking, loss on every step
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
};

struct FinetuneConfig {
  std::size_t epochs = 200;
  double learning_rate = 1e-3;
  std::size_t batch_size = 128;
  bool freeze_encoder = true;
  std::size_t gru_hidden = 32;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Masking

/// Places disjoint spans of `span` steps uniformly at random until at least
/// ceil(ratio * length) steps are covered. Requires ratio * length >= 1.
std::vector<bool> choose_mask_spans(std::size_t length, double ratio, std::size_t span, std::uint64_t seed);

template <class T>
struct Masked {
  Array<T> values;         // masked steps zeroed across every feature
  std::vector<bool> mask;  // true where masked
};

/// x: [S, E].
template <class T>
Masked<T> mask_spans(const Array<T>& x, double ratio, std::size_t span, std::uint64_t seed);

/// Sum over weight * (prediction - target)^2 with weight [B, S, 1] broadcast
/// over features; zero weights drop those steps from the loss entirely.
template <class T>
Var<T> masked_squared_error(Var<T> prediction, const Array<T>& target, const Array<T>& weight);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <class T>
struct AdamState {
  ParamSet<T> m;
  ParamSet<T> v;
  std::size_t step = 0;
};

/// Updates every parameter named in `grads`; others are left alone.
/// Throws NumericError on a non-finite gradient.
template <class T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamState<T>& state, double lr,
               const AdamOptions& options = {});

// ---------------------------------------------------------------------------
// Checkpoints

/// Binary layout, little-endian:
///   "NSIMU1", u32 version,
///   u32 n + n bytes of key=value config text,
///   u32 F + F f64 means + F f64 stds (dataset normalization),
///   u32 tensor count, then per tensor: u32 name length, name, u32 rank, u32 dims,
///   raw f32 payloads in table order,
///   u64 FNV-1a of everything before it.
struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  ModelConfig config;
  ParamSet<float> params;
  NormStats norm;
  std::map<std::string, std::string> meta;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws CheckpointError naming both shapes when windows of [seq_len, features]
/// cannot feed the checkpoint's encoder.
void check_compatible(const Checkpoint& ckpt, std::size_t seq_len, std::size_t features);

std::string config_text(const ModelConfig& config);
ModelConfig parse_model_config(const std::map<std::string, std::string>& kv);

// ---------------------------------------------------------------------------
// Phases

struct PhaseResult {
  Checkpoint checkpoint;
  RunReport report;
};

/// Masked-reconstruction pretraining with Adam. The returned checkpoint holds
/// the parameters with the best validation loss (initialization included).
PhaseResult pretrain(std::span<const FeatureWindow> train, std::span<const FeatureWindow> val,
                     const PretrainConfig& config, const ModelConfig& model);

/// Mean masked-reconstruction error over windows with fixed per-window masks
/// derived from `mask_seed`, evaluated without dropout.
double reconstruction_loss(const ParamSet<float>& params, const ModelConfig& model,
                           std::span<const FeatureWindow> windows, const PretrainConfig& config,
                           std::uint64_t mask_seed);

/// Cross-entropy finetuning of a fresh GRU head; the returned checkpoint holds
/// the parameters with the best validation accuracy and the report carries
/// test metrics for them.
PhaseResult finetune(std::span<const FeatureWindow> train, std::span<const FeatureWindow> val,
                     std::span<const FeatureWindow> test, const Checkpoint& encoder, const FinetuneConfig& config,
                     std::size_t num_classes);

/// Predicted class per window (eval mode).
std::vector<int> predict(const Checkpoint& classifier, std::span<const FeatureWindow> windows, std::size_t threads = 1);

}  // namespace nsbert
