// SPDX-License-Identifier: Apache-2.0
// Exhaustive reference scorers and random instance generators.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "amn/metrics.hpp"
#include "amn/rng.hpp"

namespace amn::testing {

using metrics::Counts;
using metrics::Event;

/// Events on a 1 ms grid inside [0, dur_ms].
inline std::vector<Event> random_events(Rng &rng, std::size_t max_events, std::size_t classes,
                                        long dur_ms) {
  std::vector<Event> out;
  const std::size_t n = rng.below(max_events + 1);
  for (std::size_t i = 0; i < n; ++i) {
    const long on = static_cast<long>(rng.below(static_cast<std::uint64_t>(dur_ms)));
    const long off = on + 1 + static_cast<long>(rng.below(static_cast<std::uint64_t>(dur_ms - on)));
    out.push_back({rng.below(classes), on / 1000.0, off / 1000.0});
  }
  return out;
}

/// Perturbs some events by up to +-400 ms so collars are exercised.
inline std::vector<Event> jitter(Rng &rng, const std::vector<Event> &events, long dur_ms) {
  std::vector<Event> out;
  for (const Event &e : events) {
    if (rng.below(4) == 0)
      continue;
    long on = std::lround(e.onset * 1000) + static_cast<long>(rng.below(801)) - 400;
    long off = std::lround(e.offset * 1000) + static_cast<long>(rng.below(801)) - 400;
    on = std::clamp(on, 0L, dur_ms - 1);
    off = std::clamp(off, on + 1, dur_ms);
    out.push_back({e.label, on / 1000.0, off / 1000.0});
  }
  return out;
}

/// Tagging reference: per clip, per class, check membership directly.
inline std::vector<Counts> brute_tagging(const std::map<std::string, std::set<std::size_t>> &pred,
                                         const std::map<std::string, std::set<std::size_t>> &truth,
                                         std::size_t classes) {
  std::vector<Counts> c(classes);
  for (const auto &[id, t] : truth) {
    const auto &p = pred.at(id);
    for (std::size_t k = 0; k < classes; ++k) {
      c[k].tp += p.count(k) && t.count(k);
      c[k].fp += p.count(k) && !t.count(k);
      c[k].fn += !p.count(k) && t.count(k);
    }
  }
  return c;
}

/// Segment reference: rasterize to 1 ms cells; a segment is active for a
/// class when any covered cell inside it belongs to an event of that class.
inline std::vector<Counts> brute_segment(const std::vector<Event> &pred,
                                         const std::vector<Event> &truth, long dur_ms,
                                         std::size_t classes, long seg_ms) {
  auto raster = [&](const std::vector<Event> &events) {
    std::vector<std::vector<char>> cells(classes, std::vector<char>(dur_ms, 0));
    for (const Event &e : events)
      for (long i = std::lround(e.onset * 1000); i < std::lround(e.offset * 1000); ++i)
        cells[e.label][i] = 1;
    return cells;
  };
  const auto rp = raster(pred), rt = raster(truth);
  std::vector<Counts> c(classes);
  for (long s = 0; s < dur_ms; s += seg_ms)
    for (std::size_t k = 0; k < classes; ++k) {
      bool ap = false, at = false;
      for (long i = s; i < std::min(dur_ms, s + seg_ms); ++i) {
        ap = ap || rp[k][i];
        at = at || rt[k][i];
      }
      c[k].tp += ap && at;
      c[k].fp += ap && !at;
      c[k].fn += !ap && at;
    }
  return c;
}

/// Event reference: tries every one-to-one assignment of predictions to
/// references and keeps the largest number of collar-compatible pairs.
inline std::vector<Counts> brute_event(const std::vector<Event> &pred,
                                       const std::vector<Event> &truth, std::size_t classes,
                                       double onset_collar = 0.2, double offset_min = 0.2,
                                       double offset_fraction = 0.2) {
  std::vector<Counts> c(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<Event> p, t;
    for (const Event &e : pred)
      if (e.label == k)
        p.push_back(e);
    for (const Event &e : truth)
      if (e.label == k)
        t.push_back(e);
    auto ok = [&](const Event &a, const Event &b) {
      const double tol = std::max(offset_min, offset_fraction * (b.offset - b.onset));
      return std::abs(a.onset - b.onset) <= onset_collar + 1e-9 &&
             std::abs(a.offset - b.offset) <= tol + 1e-9;
    };
    std::size_t best = 0;
    std::vector<char> used(t.size(), 0);
    auto rec = [&](auto &&self, std::size_t i, std::size_t matched) -> void {
      if (i == p.size()) {
        best = std::max(best, matched);
        return;
      }
      self(self, i + 1, matched); // leave prediction i unmatched
      for (std::size_t j = 0; j < t.size(); ++j)
        if (!used[j] && ok(p[i], t[j])) {
          used[j] = 1;
          self(self, i + 1, matched + 1);
          used[j] = 0;
        }
    };
    rec(rec, 0, 0);
    c[k] = {best, p.size() - best, t.size() - best};
  }
  return c;
}

} // namespace amn::testing
