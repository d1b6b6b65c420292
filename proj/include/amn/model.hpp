// SPDX-License-Identifier: Apache-2.0
/**
 * @file   model.hpp
 * @brief  The AMN encoder/decoder CRNN.
 *
 * Encoder: three Conv2D blocks (batch norm, same-size conv, leaky ReLU),
 * each followed by Lp down-sampling, then a bidirectional GRU and a
 * sigmoid linear head. With the default schedule the blocks run at time
 * resolutions 1, 1/2 and 1/4; the input of the 1/2 and 1/4 blocks is the
 * affinity source for that resolution and the block output can be mixed
 * with it. Decoder: optional mixing at 1/4, linear up-sampling to 1/2,
 * optional mixing at 1/2, up-sampling to full resolution, then pooling
 * to clip level.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "amn/affinity.hpp"
#include "amn/audio.hpp"
#include "amn/ops.hpp"
#include "amn/tensor.hpp"

namespace amn {

enum class Pooling { linear_softmax, max };

std::string to_string(Pooling pooling);
Pooling parse_pooling(const std::string &text);

struct ModelConfig {
  std::size_t classes = 10;
  std::vector<std::string> class_names; ///< optional; size == classes when set
  std::size_t mel_bands = audio::kNumMels;
  std::vector<std::size_t> conv_channels = {32, 64, 128};
  std::size_t kernel = 3;
  std::vector<std::size_t> time_down = {2, 2, 1};
  std::vector<std::size_t> freq_down = {4, 4, 4};
  double lp_pool_p = 4.0;
  std::size_t gru_hidden = 128;
  double leaky_slope = 0.1;
  Pooling pooling = Pooling::linear_softmax;
  am::AmConfig am;

  /// CPU-minute preset: narrower convolutions and GRU.
  static ModelConfig desk();

  void validate() const;
  std::size_t time_reduction() const;
  std::size_t freq_reduction() const;
  /// Time down-sampling factor in front of block `i`.
  std::size_t block_resolution(std::size_t i) const;
  std::string class_name(std::size_t k) const;

  /// key=value lines; doubles in round-trip precision.
  std::string serialize() const;
  static ModelConfig deserialize(const std::string &text);
};

/// Learnable tensors in a fixed order plus batch-norm running statistics.
struct ModelParams {
  std::vector<std::pair<std::string, Tensor>> entries;
  std::vector<BatchNormState> batchnorm; ///< one per conv block

  Tensor &get(std::string_view name);
  const Tensor &get(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::vector<Tensor> trainable() const;
  void zero_grad();
  /// Deep copy (fresh leaves).
  ModelParams clone() const;
  /// Rounds all values to single precision (the checkpoint format).
  void quantize();
};

/// Deterministic initialization: conv/linear/GRU-input weights uniform in
/// +-1/sqrt(fan_in), recurrent blocks orthogonal, AM projections uniform in
/// +-1/sqrt(channels) from a separate stream, biases zero.
ModelParams init_params(const ModelConfig &config, std::uint64_t seed);

struct FramePrediction {
  Tensor probs;      ///< [n x t x c], or [t x c] for single-clip input
  Tensor clip_probs; ///< [n x c], or [c]
  std::vector<std::size_t> valid_frames;
};

/// Instrumentation for one forward pass.
struct ForwardTrace {
  std::size_t half_affinity_builds = 0;
  std::size_t quarter_affinity_builds = 0;
  std::optional<am::AffinityMatrix> half;
  std::optional<am::AffinityMatrix> quarter;
};

/// features: [n x t x mel] (with optional per-item valid frame counts) or
/// [t x mel]. Inputs whose length is not a multiple of the time reduction
/// are zero-padded internally and cropped back on output.
FramePrediction forward(const ModelConfig &config, ModelParams &params, const Tensor &features,
                        Valid valid, Mode mode, ForwardTrace *trace = nullptr);

FramePrediction forward(const ModelConfig &config, ModelParams &params,
                        const audio::MelSpectrogram &features, Mode mode = Mode::eval);

/// sum_t q^2 / sum_t q over the first `valid` frames; 0 when the sum is 0.
/// q: [t x c] -> [c] or [n x t x c] -> [n x c].
Tensor pool_linear_softmax(const Tensor &q, Valid valid = {});
Tensor pool_max(const Tensor &q, Valid valid = {});
Tensor pool(Pooling kind, const Tensor &q, Valid valid = {});

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::string extra; ///< free-form key=value lines (e.g. training settings)
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// "AMN1", u32 version, u32 config length, config text, u32 extra length,
/// extra text, u32 record count, then per record: u32 name length, name,
/// u32 rank, u32 extents, f32 data. Batch-norm running statistics are
/// stored as records named blockN.bn.running_mean / blockN.bn.running_var.
void save_checkpoint(const std::filesystem::path &path, const Checkpoint &checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path &path);

} // namespace amn
