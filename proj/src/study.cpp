// SPDX-License-Identifier: Apache-2.0
#include "amn/study.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>

#include "amn/parallel.hpp"
#include "text.hpp"

namespace amn {

EvalSet load_eval_set(const scape::DatasetManifest &manifest,
                      const std::vector<scape::ManifestEntry> &entries, std::size_t threads,
                      const std::optional<std::filesystem::path> &cache) {
  EvalSet set;
  set.clips = scape::load_clips(manifest, entries, threads, cache);
  for (const auto &e : entries) {
    auto &events = set.truth[e.id];
    if (e.strong)
      for (const auto &s : scape::load_strong(*e.strong, manifest.class_names))
        events.push_back(s.event);
  }
  return set;
}

ClipOutput infer_clip(const ModelConfig &model, ModelParams &params, const LabeledClip &clip,
                      const ScoringConfig &scoring, double hop_seconds) {
  NoGradGuard guard;
  FramePrediction p = forward(model, params, clip.features, {}, Mode::eval);
  ClipOutput out;
  out.id = clip.id;
  out.probs = p.probs;
  auto cp = p.clip_probs.values();
  out.clip_probs.assign(cp.begin(), cp.end());
  for (std::size_t k = 0; k < out.clip_probs.size(); ++k)
    if (out.clip_probs[k] >= scoring.threshold)
      out.tags.insert(k);
  out.events = metrics::decode_events(
      metrics::binarize(p.probs, scoring.threshold, scoring.median_window), hop_seconds);
  out.duration = static_cast<double>(clip.features.dim(0)) * hop_seconds;
  return out;
}

Scores score_outputs(const std::vector<ClipOutput> &outputs, const EvalSet &eval,
                     std::size_t classes, const ScoringConfig &scoring) {
  std::map<std::string, metrics::TagSet> pred_tags, true_tags;
  std::map<std::string, metrics::ClipEvents> clips;
  for (const auto &o : outputs) {
    auto it = eval.truth.find(o.id);
    if (it == eval.truth.end())
      throw std::invalid_argument("no reference annotation for clip '" + o.id + "'");
    pred_tags[o.id] = o.tags;
    metrics::TagSet t;
    for (const auto &e : it->second)
      t.insert(e.label);
    true_tags[o.id] = t;
    auto &c = clips[o.id];
    c.pred = o.events;
    c.truth = it->second;
    c.duration = o.duration;
    for (const auto &e : c.truth)
      c.duration = std::max(c.duration, e.offset);
  }
  Scores s;
  s.tagging = metrics::tagging_score(pred_tags, true_tags, classes);
  s.segment = metrics::segment_score(clips, classes, scoring.segment_seconds);
  s.event = metrics::event_score(clips, classes, scoring.collars);
  return s;
}

Scores score_model(const ModelConfig &model, ModelParams &params, const EvalSet &eval,
                   const ScoringConfig &scoring) {
  std::vector<ClipOutput> outputs;
  for (const auto &clip : eval.clips)
    outputs.push_back(infer_clip(model, params, clip, scoring, eval.hop_seconds));
  return score_outputs(outputs, eval, model.classes, scoring);
}

Interval mean_ci(const std::vector<double> &xs, double level) {
  Interval r;
  if (xs.empty())
    return r;
  const double n = static_cast<double>(xs.size());
  for (double x : xs)
    r.mean += x;
  r.mean /= n;
  if (xs.size() < 2)
    return r;
  double ss = 0.0;
  for (double x : xs)
    ss += (x - r.mean) * (x - r.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  boost::math::students_t dist(n - 1.0);
  const double q = boost::math::quantile(dist, 0.5 + level / 2.0);
  r.half_width = q * sd / std::sqrt(n);
  return r;
}

std::vector<StudyVariant> study_variants(const std::string &study) {
  using am::Site;
  auto placement = [](std::string name, std::set<Site> sites) {
    return StudyVariant{std::move(name), [sites](ModelConfig &m) { m.am.placement = sites; }};
  };
  if (study == "placement")
    return {placement("none", {}),
            placement("enc@1/2", {Site::enc_half}),
            placement("enc@1/4", {Site::enc_quarter}),
            placement("enc", {Site::enc_half, Site::enc_quarter}),
            placement("dec@1/2", {Site::dec_half}),
            placement("dec@1/4", {Site::dec_quarter}),
            placement("dec", {Site::dec_half, Site::dec_quarter}),
            placement("full", {Site::enc_half, Site::enc_quarter, Site::dec_half, Site::dec_quarter})};
  if (study == "tau") {
    std::vector<StudyVariant> out;
    for (double tau : {5.0, 1.0, 0.5, 0.1, 0.05}) {
      std::ostringstream name;
      name << "tau=" << tau;
      out.push_back({name.str(), [tau](ModelConfig &m) { m.am.tau = tau; }});
    }
    return out;
  }
  if (study == "grad") {
    std::vector<StudyVariant> out;
    for (auto mode : {am::GradMode::full, am::GradMode::enc_only, am::GradMode::dec_only,
                      am::GradMode::none})
      out.push_back({"grad=" + am::to_string(mode), [mode](ModelConfig &m) { m.am.grad_mode = mode; }});
    return out;
  }
  throw std::invalid_argument("unknown study '" + study + "' (expected placement, tau, grad)");
}

std::vector<StudyRow> run_study(const std::vector<StudyVariant> &variants, const RunConfig &base,
                                const StudyInputs &inputs, std::size_t threads,
                                const std::function<void(const std::string &)> &log) {
  const std::size_t seeds = base.seeds;
  std::vector<StudyRow> rows(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v) {
    rows[v].name = variants[v].name;
    rows[v].runs.resize(seeds);
  }
  std::mutex log_mu;
  parallel_for(variants.size() * seeds, threads, [&](std::size_t job) {
    const std::size_t v = job / seeds, s = job % seeds;
    RunOutcome &out = rows[v].runs[s];
    try {
      ModelConfig model = base.model;
      variants[v].apply(model);
      TrainConfig tc = base.train;
      tc.seed = base.train.seed + s;
      TrainResult r = train(inputs.train, inputs.val, model, tc);
      Scores sc = score_model(model, r.best, inputs.eval, base.scoring);
      out.ok = true;
      out.tagging_f1 = sc.tagging.macro.f1;
      out.segment_f1 = sc.segment.macro.f1;
      out.event_f1 = sc.event.macro.f1;
      out.epochs = r.history.size();
    } catch (const std::exception &e) {
      out.ok = false;
      out.error = e.what();
    }
    if (log) {
      std::ostringstream msg;
      msg << variants[v].name << " seed " << base.train.seed + s << ": ";
      if (out.ok)
        msg << "tagging " << out.tagging_f1 << " segment " << out.segment_f1 << " event "
            << out.event_f1;
      else
        msg << "failed: " << out.error;
      std::lock_guard lock(log_mu);
      log(msg.str());
    }
  });
  for (auto &row : rows) {
    std::vector<double> t, g, e;
    for (const auto &r : row.runs)
      if (r.ok) {
        t.push_back(r.tagging_f1);
        g.push_back(r.segment_f1);
        e.push_back(r.event_f1);
      }
    row.tagging = mean_ci(t);
    row.segment = mean_ci(g);
    row.event = mean_ci(e);
  }
  return rows;
}

void write_study_csv(const std::filesystem::path &path, const std::string &study,
                     const std::vector<StudyRow> &rows) {
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write '" + path.string() + "'");
  os << "study,row,seeds,tagging_f1,tagging_f1_ci95,segment_f1,segment_f1_ci95,event_f1,"
        "event_f1_ci95\n";
  for (const auto &r : rows) {
    std::size_t ok = 0;
    for (const auto &run : r.runs)
      ok += run.ok;
    os << study << ',' << r.name << ',' << ok << ',' << text::format_double(r.tagging.mean) << ','
       << text::format_double(r.tagging.half_width) << ',' << text::format_double(r.segment.mean)
       << ',' << text::format_double(r.segment.half_width) << ','
       << text::format_double(r.event.mean) << ',' << text::format_double(r.event.half_width)
       << '\n';
  }
}

std::vector<StudyCsvRow> read_study_csv(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || text::trim(line).rfind("study,row,seeds,", 0) != 0)
    throw std::runtime_error(path.string() + ":1: not a study CSV header");
  std::vector<StudyCsvRow> out;
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (text::trim(line).empty())
      continue;
    auto f = text::split(text::trim(line), ',');
    if (f.size() != 9)
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": expected 9 fields");
    try {
      StudyCsvRow r;
      r.row = f[1];
      r.seeds = text::parse_uint("seeds", f[2]);
      r.tagging_mean = text::parse_double("tagging_f1", f[3]);
      r.tagging_ci = text::parse_double("tagging_f1_ci95", f[4]);
      r.segment_mean = text::parse_double("segment_f1", f[5]);
      r.segment_ci = text::parse_double("segment_f1_ci95", f[6]);
      r.event_mean = text::parse_double("event_f1", f[7]);
      r.event_ci = text::parse_double("event_f1_ci95", f[8]);
      out.push_back(r);
    } catch (const std::invalid_argument &e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

} // namespace amn
