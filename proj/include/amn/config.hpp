// SPDX-License-Identifier: Apache-2.0
/**
 * @file   config.hpp
 * @brief  Flat key=value run configuration shared by all commands.
 *
 * Resolution order: preset defaults, then the config file, then flags.
 * The preset itself may come from either source (flags win).
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "amn/metrics.hpp"
#include "amn/model.hpp"
#include "amn/training.hpp"

namespace amn {

struct ScoringConfig {
  double threshold = 0.5;
  std::size_t median_window = 1;
  double segment_seconds = 1.0;
  metrics::EventCollars collars;

  void validate() const;
};

struct RunConfig {
  std::string preset = "desk"; ///< desk or full
  ModelConfig model = ModelConfig::desk();
  TrainConfig train = TrainConfig::desk();
  ScoringConfig scoring;
  std::string data;  ///< manifest path or dataset directory
  std::string out;   ///< output directory
  std::string cache; ///< feature cache directory; empty disables caching
  std::size_t seeds = 5;
  std::size_t threads = 0; ///< 0 = all cores (still capped by AMN_THREADS)

  struct Key {
    std::string name;
    std::string help;
  };
  /// Every accepted key, in echo order.
  static const std::vector<Key> &keys();

  static RunConfig for_preset(const std::string &preset);

  /// Throws std::invalid_argument for unknown keys or bad values.
  void set(const std::string &key, const std::string &value);
  std::string get(const std::string &key) const;

  void validate() const;
  std::string serialize() const;

  using Pairs = std::vector<std::pair<std::string, std::string>>;
  /// Merges file and flag settings over the preset defaults.
  static RunConfig resolve(const Pairs &file, const Pairs &flags);
  static Pairs read_file(const std::filesystem::path &path);
};

} // namespace amn
