// SPDX-License-Identifier: Apache-2.0
/**
 * @file   metrics.hpp
 * @brief  Tagging, segment and event precision/recall/F1, plus the
 *         frame-to-event decoding used before scoring.
 */
#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "amn/tensor.hpp"

namespace amn::metrics {

struct Event {
  std::size_t label = 0;
  double onset = 0.0;
  double offset = 0.0;

  auto operator<=>(const Event &) const = default;
};

struct Counts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  Counts &operator+=(const Counts &o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const Counts &) const = default;
};

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// With no positives on either side P = R = F1 = 1; otherwise an empty
/// denominator gives 0.
Prf prf(const Counts &c);

struct ScoreReport {
  std::vector<Counts> per_class;
  Counts micro_counts;
  Prf micro;
  Prf macro; ///< mean over classes present in prediction or truth

  Prf class_prf(std::size_t k) const { return prf(per_class[k]); }
};

/// Accumulates per-class counts into a report (micro and macro filled in).
ScoreReport make_report(std::vector<Counts> per_class);

/// Per-class median filter over time (edge frames replicated), then
/// probs >= threshold. Returns a [t x c] 0/1 matrix.
std::vector<std::vector<bool>> binarize(const Tensor &probs, double threshold = 0.5,
                                        std::size_t median_window = 1);

/// Maximal runs of active frames per class; onset = first * hop, offset =
/// (last + 1) * hop. Sorted by (label, onset).
std::vector<Event> decode_events(const std::vector<std::vector<bool>> &active, double hop_seconds);

using TagSet = std::set<std::size_t>;

/// Both maps must hold the same clip ids.
ScoreReport tagging_score(const std::map<std::string, TagSet> &pred,
                          const std::map<std::string, TagSet> &truth, std::size_t classes);

/// Segments [i*L, (i+1)*L) for i < ceil(clip_dur / L); a class is active in
/// a segment when one of its events overlaps it by a positive amount.
ScoreReport segment_score(const std::vector<Event> &pred, const std::vector<Event> &truth,
                          double clip_duration, std::size_t classes,
                          double segment_seconds = 1.0);

struct EventCollars {
  double onset = 0.2;
  double offset_min = 0.2;
  double offset_fraction = 0.2;
};

/// Per-class one-to-one matching between predicted and true events. A pair
/// may match when |onset diff| <= onset collar and |offset diff| <=
/// max(offset_min, offset_fraction * true duration). The matching is of
/// maximum size, built by augmenting paths over predictions in onset order.
ScoreReport event_score(const std::vector<Event> &pred, const std::vector<Event> &truth,
                        std::size_t classes, const EventCollars &collars = {});

/// Scores summed over clips: counts are added per class before P/R/F1.
struct ClipEvents {
  std::vector<Event> pred;
  std::vector<Event> truth;
  double duration = 0.0;
};

ScoreReport segment_score(const std::map<std::string, ClipEvents> &clips, std::size_t classes,
                          double segment_seconds = 1.0);
ScoreReport event_score(const std::map<std::string, ClipEvents> &clips, std::size_t classes,
                        const EventCollars &collars = {});

/// `filename<TAB>onset<TAB>offset<TAB>label` lines.
struct StrongRow {
  std::string file;
  double onset = 0.0;
  double offset = 0.0;
  std::string label;
};

std::vector<StrongRow> read_strong_tsv(const std::filesystem::path &path);
void write_strong_tsv(const std::filesystem::path &path, const std::vector<StrongRow> &rows);

/// CSV with one row per class plus micro and macro rows:
/// family,class,f1,precision,recall,tp,fp,fn
std::string report_csv(const std::string &family, const ScoreReport &report,
                       const std::vector<std::string> &class_names, bool header = true);
std::string report_text(const std::string &family, const ScoreReport &report,
                        const std::vector<std::string> &class_names);

} // namespace amn::metrics
