// SPDX-License-Identifier: Apache-2.0
/**
 * @file   study.hpp
 * @brief  Scoring a trained model on strongly labelled clips, and ablation
 *         studies over AM placement, temperature and gradient paths.
 */
#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "amn/config.hpp"
#include "amn/metrics.hpp"
#include "amn/model.hpp"
#include "amn/scape.hpp"
#include "amn/training.hpp"

namespace amn {

struct EvalSet {
  std::vector<LabeledClip> clips;
  std::map<std::string, std::vector<metrics::Event>> truth;
  double hop_seconds = audio::kHopSeconds;
};

/// Featurizes `entries` and attaches their strong annotations (entries
/// without one contribute no events).
EvalSet load_eval_set(const scape::DatasetManifest &manifest,
                      const std::vector<scape::ManifestEntry> &entries, std::size_t threads,
                      const std::optional<std::filesystem::path> &cache = {});

struct ClipOutput {
  std::string id;
  Tensor probs;                     ///< [t x c]
  std::vector<double> clip_probs;   ///< [c]
  std::vector<metrics::Event> events;
  metrics::TagSet tags;
  double duration = 0.0;
};

/// Batch-size-1 eval-mode inference plus post-processing.
ClipOutput infer_clip(const ModelConfig &model, ModelParams &params, const LabeledClip &clip,
                      const ScoringConfig &scoring, double hop_seconds = audio::kHopSeconds);

struct Scores {
  metrics::ScoreReport tagging;
  metrics::ScoreReport segment;
  metrics::ScoreReport event;
};

Scores score_outputs(const std::vector<ClipOutput> &outputs, const EvalSet &eval,
                     std::size_t classes, const ScoringConfig &scoring);

Scores score_model(const ModelConfig &model, ModelParams &params, const EvalSet &eval,
                   const ScoringConfig &scoring);

struct Interval {
  double mean = 0.0;
  double half_width = 0.0; ///< 0 for fewer than two samples
};

/// Mean and Student-t confidence half-width.
Interval mean_ci(const std::vector<double> &xs, double level = 0.95);

struct StudyVariant {
  std::string name;
  std::function<void(ModelConfig &)> apply;
};

/// Row sets: "placement" (8 rows), "tau" (5 rows), "grad" (4 rows).
std::vector<StudyVariant> study_variants(const std::string &study);

struct RunOutcome {
  bool ok = false;
  std::string error;
  double tagging_f1 = 0.0;
  double segment_f1 = 0.0;
  double event_f1 = 0.0;
  std::size_t epochs = 0;
};

struct StudyRow {
  std::string name;
  std::vector<RunOutcome> runs; ///< one per seed
  Interval tagging, segment, event;
};

struct StudyInputs {
  std::vector<LabeledClip> train;
  std::vector<LabeledClip> val;
  EvalSet eval;
};

/// Trains every (variant, seed) pair on up to `threads` workers; a failing
/// run is recorded and the study continues. Seeds are base, base+1, ...
std::vector<StudyRow> run_study(const std::vector<StudyVariant> &variants, const RunConfig &base,
                                const StudyInputs &inputs, std::size_t threads,
                                const std::function<void(const std::string &)> &log = {});

void write_study_csv(const std::filesystem::path &path, const std::string &study,
                     const std::vector<StudyRow> &rows);

struct StudyCsvRow {
  std::string row;
  std::size_t seeds = 0;
  double tagging_mean = 0, tagging_ci = 0;
  double segment_mean = 0, segment_ci = 0;
  double event_mean = 0, event_ci = 0;
};
std::vector<StudyCsvRow> read_study_csv(const std::filesystem::path &path);

} // namespace amn
