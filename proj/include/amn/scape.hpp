// SPDX-License-Identifier: Apache-2.0
/**
 * @file   scape.hpp
 * @brief  Synthetic soundscape generation and dataset manifests.
 *
 * Even class ids are harmonic stacks, odd ids narrowband noise; centre
 * frequencies grow geometrically with the id so classes land in distinct
 * mel bands. A generated dataset directory holds:
 *
 *   classes.txt          one class name per line, in id order
 *   manifest.jsonl       {"id","audio","labels","split","strong"} per clip
 *   audio/<id>.wav       PCM16 mono
 *   strong/<id>.tsv      filename, onset, offset, label
 *   strong.tsv           all strong rows concatenated
 */
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "amn/metrics.hpp"
#include "amn/training.hpp"

namespace amn::scape {

struct ScapeSpec {
  std::size_t n_clips = 100;
  double clip_seconds = 10.0;
  std::size_t classes = 10;
  std::size_t events_min = 1;
  std::size_t events_max = 5;
  double event_seconds_min = 0.5;
  double event_seconds_max = 3.0;
  double snr_db_min = 10.0; ///< event level over the background
  double snr_db_max = 20.0;
  std::size_t max_polyphony = 3;
  double sample_rate = 44100.0;
  double val_fraction = 0.2;
  std::size_t eval_clips = 0; ///< extra clips tagged "eval"
  std::uint64_t seed = 0;

  void validate() const;
};

std::string class_name(std::size_t class_id);

/// Unit-RMS class signal with 10 ms linear fades at both ends.
std::vector<double> synth_class_template(std::size_t class_id, double duration,
                                         double sample_rate, std::uint64_t seed);

struct ManifestEntry {
  std::string id;
  std::filesystem::path audio; ///< resolved against the manifest directory
  std::vector<std::string> labels;
  std::string split; ///< train, val or eval
  std::optional<std::filesystem::path> strong;
};

struct DatasetManifest {
  std::filesystem::path path;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;

  std::size_t class_index(const std::string &label) const;
  std::vector<ManifestEntry> select(const std::string &split) const;
};

/// Writes the full dataset directory; deterministic in `spec`.
DatasetManifest generate(const ScapeSpec &spec, const std::filesystem::path &out_dir);

/// Reads manifest.jsonl (or the manifest inside a directory). Class names
/// come from classes.txt next to it when present. Strong annotations are
/// checked against the weak labels.
DatasetManifest load_manifest(const std::filesystem::path &path);

struct StrongEvent {
  std::string file;
  metrics::Event event;
};

/// Strong TSV with labels resolved against `class_names`.
std::vector<StrongEvent> load_strong(const std::filesystem::path &path,
                                     const std::vector<std::string> &class_names);

/// Deterministic disjoint split; fractions must sum to 1. Each part keeps
/// the original entry order.
std::vector<std::vector<ManifestEntry>> split(const std::vector<ManifestEntry> &entries,
                                              const std::vector<double> &fractions,
                                              std::uint64_t seed);

/// Loads and featurizes entries on up to `threads` workers. With a cache
/// directory, features are read from / written to <cache>/<id>.lms.
std::vector<LabeledClip> load_clips(const DatasetManifest &manifest,
                                    const std::vector<ManifestEntry> &entries,
                                    std::size_t threads = 1,
                                    const std::optional<std::filesystem::path> &cache = {});

void write_manifest(const DatasetManifest &manifest);

} // namespace amn::scape
