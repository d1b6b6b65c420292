// SPDX-License-Identifier: Apache-2.0
#include "amn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "text.hpp"

namespace amn::metrics {

namespace {
constexpr double kEps = 1e-9;

void check_events(const std::vector<Event> &events, std::size_t classes, const char *who) {
  for (const Event &e : events) {
    if (e.label >= classes)
      throw std::invalid_argument(std::string(who) + ": event label " + std::to_string(e.label) +
                                  " outside [0, " + std::to_string(classes) + ")");
    if (!(e.offset > e.onset) || e.onset < 0.0)
      throw std::invalid_argument(std::string(who) + ": event needs 0 <= onset < offset");
  }
}
} // namespace

Prf prf(const Counts &c) {
  if (c.tp + c.fp + c.fn == 0)
    return {1.0, 1.0, 1.0};
  Prf r;
  r.precision = c.tp + c.fp ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  r.recall = c.tp + c.fn ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0.0
             ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
             : 0.0;
  return r;
}

ScoreReport make_report(std::vector<Counts> per_class) {
  ScoreReport r;
  r.per_class = std::move(per_class);
  std::size_t active = 0;
  Prf sum{0.0, 0.0, 0.0};
  for (const Counts &c : r.per_class) {
    r.micro_counts += c;
    if (c.tp + c.fp + c.fn == 0)
      continue;
    const Prf p = prf(c);
    sum.precision += p.precision;
    sum.recall += p.recall;
    sum.f1 += p.f1;
    ++active;
  }
  r.micro = prf(r.micro_counts);
  if (active == 0) {
    r.macro = {1.0, 1.0, 1.0};
  } else {
    const double n = static_cast<double>(active);
    r.macro = {sum.precision / n, sum.recall / n, sum.f1 / n};
  }
  return r;
}

std::vector<std::vector<bool>> binarize(const Tensor &probs, double threshold,
                                        std::size_t median_window) {
  if (median_window % 2 == 0)
    throw std::invalid_argument("binarize: median window must be odd, got " +
                                std::to_string(median_window));
  if (probs.rank() != 2)
    throw std::invalid_argument("binarize: expected [t x c], got " + shape_str(probs.shape()));
  const std::size_t T = probs.dim(0), C = probs.dim(1);
  auto v = probs.values();
  std::vector<std::vector<bool>> out(T, std::vector<bool>(C, false));
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(median_window / 2);
  std::vector<double> win(median_window);
  for (std::size_t k = 0; k < C; ++k)
    for (std::size_t t = 0; t < T; ++t) {
      double x = v[t * C + k];
      if (median_window > 1) {
        for (std::ptrdiff_t d = -half; d <= half; ++d) {
          const auto s = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(t) + d, 0,
                                                    static_cast<std::ptrdiff_t>(T) - 1);
          win[static_cast<std::size_t>(d + half)] = v[static_cast<std::size_t>(s) * C + k];
        }
        std::nth_element(win.begin(), win.begin() + half, win.end());
        x = win[static_cast<std::size_t>(half)];
      }
      out[t][k] = x >= threshold;
    }
  return out;
}

std::vector<Event> decode_events(const std::vector<std::vector<bool>> &active,
                                 double hop_seconds) {
  std::vector<Event> out;
  if (active.empty())
    return out;
  const std::size_t T = active.size(), C = active[0].size();
  for (std::size_t k = 0; k < C; ++k) {
    std::size_t t = 0;
    while (t < T) {
      if (!active[t][k]) {
        ++t;
        continue;
      }
      const std::size_t start = t;
      while (t < T && active[t][k])
        ++t;
      out.push_back({k, static_cast<double>(start) * hop_seconds,
                     static_cast<double>(t) * hop_seconds});
    }
  }
  return out;
}

ScoreReport tagging_score(const std::map<std::string, TagSet> &pred,
                          const std::map<std::string, TagSet> &truth, std::size_t classes) {
  if (pred.size() != truth.size())
    throw std::invalid_argument("tagging_score: " + std::to_string(pred.size()) +
                                " predicted clips vs " + std::to_string(truth.size()) +
                                " reference clips");
  std::vector<Counts> per(classes);
  for (const auto &[id, t] : truth) {
    auto it = pred.find(id);
    if (it == pred.end())
      throw std::invalid_argument("tagging_score: no prediction for clip '" + id + "'");
    const TagSet &p = it->second;
    for (std::size_t k : p)
      if (k >= classes)
        throw std::invalid_argument("tagging_score: label out of range in '" + id + "'");
    for (std::size_t k : t)
      if (k >= classes)
        throw std::invalid_argument("tagging_score: label out of range in '" + id + "'");
    for (std::size_t k = 0; k < classes; ++k) {
      const bool in_p = p.contains(k), in_t = t.contains(k);
      if (in_p && in_t)
        ++per[k].tp;
      else if (in_p)
        ++per[k].fp;
      else if (in_t)
        ++per[k].fn;
    }
  }
  return make_report(std::move(per));
}

namespace {

std::vector<Counts> segment_counts(const std::vector<Event> &pred, const std::vector<Event> &truth,
                                   double dur, std::size_t classes, double L) {
  if (!(L > 0.0))
    throw std::invalid_argument("segment_score: segment length must be positive");
  if (!(dur > 0.0))
    throw std::invalid_argument("segment_score: clip duration must be positive");
  check_events(pred, classes, "segment_score");
  check_events(truth, classes, "segment_score");
  for (const auto *set : {&pred, &truth})
    for (const Event &e : *set)
      if (e.offset > dur + kEps)
        throw std::invalid_argument("segment_score: event (" + text::format_double(e.onset) +
                                    ", " + text::format_double(e.offset) +
                                    ") extends past the clip end " + text::format_double(dur));
  const auto n = static_cast<std::size_t>(std::ceil(dur / L - kEps));
  auto activity = [&](const std::vector<Event> &events) {
    std::vector<std::vector<bool>> act(n, std::vector<bool>(classes, false));
    for (const Event &e : events)
      for (std::size_t s = 0; s < n; ++s) {
        const double lo = static_cast<double>(s) * L, hi = lo + L;
        if (e.onset < hi - kEps && e.offset > lo + kEps)
          act[s][e.label] = true;
      }
    return act;
  };
  const auto ap = activity(pred), at = activity(truth);
  std::vector<Counts> per(classes);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < classes; ++k) {
      if (ap[s][k] && at[s][k])
        ++per[k].tp;
      else if (ap[s][k])
        ++per[k].fp;
      else if (at[s][k])
        ++per[k].fn;
    }
  return per;
}

bool collar_match(const Event &p, const Event &t, const EventCollars &c) {
  const double off_tol = std::max(c.offset_min, c.offset_fraction * (t.offset - t.onset));
  return std::abs(p.onset - t.onset) <= c.onset + kEps &&
         std::abs(p.offset - t.offset) <= off_tol + kEps;
}

std::vector<Counts> event_counts(const std::vector<Event> &pred, const std::vector<Event> &truth,
                                 std::size_t classes, const EventCollars &collars) {
  check_events(pred, classes, "event_score");
  check_events(truth, classes, "event_score");
  std::vector<Counts> per(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    std::vector<Event> p, t;
    for (const Event &e : pred)
      if (e.label == k)
        p.push_back(e);
    for (const Event &e : truth)
      if (e.label == k)
        t.push_back(e);
    std::sort(p.begin(), p.end());
    std::sort(t.begin(), t.end());
    std::vector<std::vector<std::size_t>> adj(p.size());
    for (std::size_t i = 0; i < p.size(); ++i)
      for (std::size_t j = 0; j < t.size(); ++j)
        if (collar_match(p[i], t[j], collars))
          adj[i].push_back(j);
    // Kuhn's augmenting-path matching.
    std::vector<std::ptrdiff_t> owner(t.size(), -1);
    std::vector<char> seen;
    std::function<bool(std::size_t)> augment = [&](std::size_t i) {
      for (std::size_t j : adj[i]) {
        if (seen[j])
          continue;
        seen[j] = 1;
        if (owner[j] < 0 || augment(static_cast<std::size_t>(owner[j]))) {
          owner[j] = static_cast<std::ptrdiff_t>(i);
          return true;
        }
      }
      return false;
    };
    std::size_t matched = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      seen.assign(t.size(), 0);
      if (augment(i))
        ++matched;
    }
    per[k] = {matched, p.size() - matched, t.size() - matched};
  }
  return per;
}

} // namespace

ScoreReport segment_score(const std::vector<Event> &pred, const std::vector<Event> &truth,
                          double clip_duration, std::size_t classes, double segment_seconds) {
  return make_report(segment_counts(pred, truth, clip_duration, classes, segment_seconds));
}

ScoreReport event_score(const std::vector<Event> &pred, const std::vector<Event> &truth,
                        std::size_t classes, const EventCollars &collars) {
  return make_report(event_counts(pred, truth, classes, collars));
}

ScoreReport segment_score(const std::map<std::string, ClipEvents> &clips, std::size_t classes,
                          double segment_seconds) {
  std::vector<Counts> total(classes);
  for (const auto &[id, c] : clips) {
    try {
      auto per = segment_counts(c.pred, c.truth, c.duration, classes, segment_seconds);
      for (std::size_t k = 0; k < classes; ++k)
        total[k] += per[k];
    } catch (const std::invalid_argument &e) {
      throw std::invalid_argument("clip '" + id + "': " + e.what());
    }
  }
  return make_report(std::move(total));
}

ScoreReport event_score(const std::map<std::string, ClipEvents> &clips, std::size_t classes,
                        const EventCollars &collars) {
  std::vector<Counts> total(classes);
  for (const auto &[id, c] : clips) {
    try {
      auto per = event_counts(c.pred, c.truth, classes, collars);
      for (std::size_t k = 0; k < classes; ++k)
        total[k] += per[k];
    } catch (const std::invalid_argument &e) {
      throw std::invalid_argument("clip '" + id + "': " + e.what());
    }
  }
  return make_report(std::move(total));
}

std::vector<StrongRow> read_strong_tsv(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<StrongRow> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (text::trim(line).empty())
      continue;
    const auto where = path.string() + ":" + std::to_string(n) + ": ";
    auto f = text::split(line, '\t');
    if (f.size() != 4)
      throw std::runtime_error(where + "expected 4 tab-separated fields, got " +
                               std::to_string(f.size()));
    StrongRow r;
    r.file = f[0];
    r.label = text::trim(f[3]);
    try {
      r.onset = text::parse_double("onset", text::trim(f[1]));
      r.offset = text::parse_double("offset", text::trim(f[2]));
    } catch (const std::invalid_argument &e) {
      throw std::runtime_error(where + e.what());
    }
    if (r.file.empty() || r.label.empty())
      throw std::runtime_error(where + "empty filename or label");
    if (r.onset < 0.0 || !(r.offset > r.onset))
      throw std::runtime_error(where + "offset must exceed onset (and onset >= 0)");
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_strong_tsv(const std::filesystem::path &path, const std::vector<StrongRow> &rows) {
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write '" + path.string() + "'");
  char buf[64];
  for (const auto &r : rows) {
    os << r.file << '\t';
    std::snprintf(buf, sizeof buf, "%.3f\t%.3f", r.onset, r.offset);
    os << buf << '\t' << r.label << '\n';
  }
}

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
std::string name_of(const std::vector<std::string> &names, std::size_t k) {
  return k < names.size() ? names[k] : "class" + std::to_string(k);
}
} // namespace

std::string report_csv(const std::string &family, const ScoreReport &report,
                       const std::vector<std::string> &class_names, bool header) {
  std::ostringstream os;
  if (header)
    os << "family,class,f1,precision,recall,tp,fp,fn\n";
  auto row = [&](const std::string &cls, const Prf &p, const Counts *c) {
    os << family << ',' << cls << ',' << fmt(p.f1) << ',' << fmt(p.precision) << ','
       << fmt(p.recall) << ',';
    if (c)
      os << c->tp << ',' << c->fp << ',' << c->fn;
    else
      os << ",,";
    os << '\n';
  };
  for (std::size_t k = 0; k < report.per_class.size(); ++k)
    row(name_of(class_names, k), report.class_prf(k), &report.per_class[k]);
  row("micro", report.micro, &report.micro_counts);
  row("macro", report.macro, nullptr);
  return os.str();
}

std::string report_text(const std::string &family, const ScoreReport &report,
                        const std::vector<std::string> &class_names) {
  std::ostringstream os;
  char buf[160];
  os << family << " scores\n";
  std::snprintf(buf, sizeof buf, "  %-16s %8s %10s %8s %6s %6s %6s\n", "class", "F1", "Precision",
                "Recall", "TP", "FP", "FN");
  os << buf;
  auto line = [&](const std::string &name, const Prf &p, const Counts *c) {
    if (c)
      std::snprintf(buf, sizeof buf, "  %-16s %7.2f%% %9.2f%% %7.2f%% %6zu %6zu %6zu\n",
                    name.c_str(), 100 * p.f1, 100 * p.precision, 100 * p.recall, c->tp, c->fp,
                    c->fn);
    else
      std::snprintf(buf, sizeof buf, "  %-16s %7.2f%% %9.2f%% %7.2f%%\n", name.c_str(),
                    100 * p.f1, 100 * p.precision, 100 * p.recall);
    os << buf;
  };
  for (std::size_t k = 0; k < report.per_class.size(); ++k)
    line(name_of(class_names, k), report.class_prf(k), &report.per_class[k]);
  line("micro", report.micro, &report.micro_counts);
  line("macro", report.macro, nullptr);
  return os.str();
}

} // namespace amn::metrics
