// SPDX-License-Identifier: Apache-2.0
/**
 * @file   training.hpp
 * @brief  Clip-level (weak label) training: batching with zero padding,
 *         binary cross-entropy, AdamW and a plateau learning-rate schedule.
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "amn/model.hpp"
#include "amn/tensor.hpp"

namespace amn {

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.01;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 50;
  std::size_t plateau_patience = 3;
  double plateau_factor = 0.1;
  double plateau_threshold = 1e-6;
  std::uint64_t seed = 0;
  bool shuffle = true; ///< reshuffle the training order every epoch

  /// Batch size 8 and a larger step size for short CPU runs.
  static TrainConfig desk();
  void validate() const;
  std::string serialize() const;
};

struct LabeledClip {
  std::string id;
  Tensor features;            ///< [t x mel]
  std::vector<double> labels; ///< multi-hot, one entry per class
};

struct Batch {
  Tensor features; ///< [n x t_max x mel], zero beyond each valid length
  std::vector<std::size_t> valid_lengths;
  Tensor labels; ///< [n x c]
};

/// Packs clips in the given order, zero-padding to the longest one.
Batch collate(std::span<const LabeledClip> clips);
Batch collate(std::span<const LabeledClip *const> clips);

/// Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor &probs, const Tensor &labels);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t step = 0;
};

struct AdamHyper {
  double lr = 1e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Decoupled weight decay p -= lr*wd*p, then the bias-corrected Adam step
/// using each tensor's accumulated gradient.
void adamw_step(std::span<Tensor> params, AdamState &state, const AdamHyper &hyper);

class PlateauScheduler {
public:
  PlateauScheduler(double lr, double factor, std::size_t patience, double threshold = 1e-6);

  /// Feeds one epoch's monitored loss; returns the learning rate for the
  /// next epoch.
  double update(double loss);
  double lr() const { return lr_; }
  std::size_t bad_epochs() const { return bad_; }

private:
  double lr_;
  double factor_;
  std::size_t patience_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0; ///< 1-based
  double train_loss = 0.0;
  double val_loss = 0.0; ///< NaN without a validation split
  double lr = 0.0;       ///< rate used during the epoch
};

class DivergenceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  ModelParams best; ///< lowest monitored loss (validation if present, else training)
  ModelParams last;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;
};

/// Called after every epoch with the current parameters; return false to stop.
using EpochCallback = std::function<bool(const EpochRecord &, ModelParams &)>;

/// Deterministic given (clips, configs): initialization and the shuffle
/// stream both derive from `train.seed`. Parameters are rounded to single
/// precision after every step so the checkpoint is an exact copy.
TrainResult train(std::span<const LabeledClip> train_set, std::span<const LabeledClip> val_set,
                  const ModelConfig &model, const TrainConfig &train,
                  const EpochCallback &on_epoch = {});

/// Mean loss at batch size 1 in eval mode.
double evaluate_loss(const ModelConfig &model, ModelParams &params,
                     std::span<const LabeledClip> clips);

/// Clip probabilities at batch size 1 in eval mode, one row per clip.
std::vector<std::vector<double>> predict_clip_probs(const ModelConfig &model, ModelParams &params,
                                                    std::span<const LabeledClip> clips);

void write_history_csv(const std::filesystem::path &path, std::span<const EpochRecord> history);
std::vector<EpochRecord> read_history_csv(const std::filesystem::path &path);

} // namespace amn
