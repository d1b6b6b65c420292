// SPDX-License-Identifier: Apache-2.0
// Acceptance gate: one [PASS]/[FAIL] line per criterion, exit 1 on any failure.
//
// Usage: amn_acceptance [criterion numbers...]   (default: all)

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "amn/affinity.hpp"
#include "amn/audio.hpp"
#include "amn/config.hpp"
#include "amn/metrics.hpp"
#include "amn/model.hpp"
#include "amn/parallel.hpp"
#include "amn/rng.hpp"
#include "amn/scape.hpp"
#include "amn/study.hpp"
#include "amn/training.hpp"
#include "support/grad_cases.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace amn;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char *f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("amn_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// ---------------------------------------------------------------- C1
Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = testing::run_grad_suite(20, 20240601);
  const double elapsed = seconds_since(t0);
  Outcome o{true, ""};
  double worst = 0.0;
  std::size_t probes = 0;
  std::string failed;
  for (const auto &r : results) {
    worst = std::max(worst, r.worst);
    probes += r.probes;
    if (!r.passed || r.instances < 20) {
      o.pass = false;
      failed += " " + r.name;
    }
  }
  o.pass = o.pass && elapsed < 60.0;
  o.detail = fmt("%zu operations x 20 instances (%zu probes), worst rel err %.2e (tol 1e-4), %.2f s",
                 results.size(), probes, worst, elapsed);
  if (!failed.empty())
    o.detail += "; failing:" + failed;
  return o;
}

// ---------------------------------------------------------------- C2
Outcome affinity_invariants() {
  Rng rng(11);
  double row_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(2), c = 1 + rng.below(3), t = 2 + rng.below(8),
                      f = 1 + rng.below(6);
    Tensor x = testing::random_tensor(rng, {n, c, t, f}, -3, 3);
    const auto aff = am::compute_affinity(x, rng.uniform(0.05, 5.0));
    auto a = aff.weights.values();
    for (std::size_t r = 0; r < a.size() / t; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < t; ++j)
        s += a[r * t + j];
      row_err = std::max(row_err, std::abs(s - 1.0));
    }
  }
  // identical frames
  double ident_err = 0.0;
  {
    const std::size_t t = 7, f = 5;
    std::vector<double> v(2 * t * f);
    for (std::size_t k = 0; k < 2; ++k)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < f; ++j)
          v[(k * t + i) * f + j] = 0.3 * static_cast<double>(j) - static_cast<double>(k);
    const auto aff = am::compute_affinity(Tensor({2, t, f}, v), 1.0);
    auto a = aff.weights.values();
    for (double w : a)
      ident_err = std::max(ident_err, std::abs(w - 1.0 / t));
  }
  // very large and very small temperatures on distinct frames
  double hot_err = 0.0, cold_err = 0.0;
  {
    const std::size_t t = 6, f = 4;
    Tensor x = testing::random_tensor(rng, {1, t, f}, -1, 1);
    const auto hot_a = am::compute_affinity(x, 1e9);
    auto hot = hot_a.weights.values();
    for (double w : hot)
      hot_err = std::max(hot_err, std::abs(w - 1.0 / t));
    const auto cold_a = am::compute_affinity(x, 1e-6);
    auto cold = cold_a.weights.values();
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j)
        cold_err = std::max(cold_err, std::abs(cold[i * t + j] - (i == j ? 1.0 : 0.0)));
  }
  Outcome o;
  o.pass = row_err <= 1e-6 && ident_err <= 1e-9 && hot_err <= 1e-6 && cold_err <= 1e-6;
  o.detail = fmt("row-sum err %.1e, identical-frame err %.1e, tau=1e9 err %.1e, tau=1e-6 |A-I| %.1e",
                 row_err, ident_err, hot_err, cold_err);
  return o;
}

// ---------------------------------------------------------------- C3
Outcome shape_law() {
  audio::Clip clip;
  clip.sample_rate = 44100.0;
  clip.samples.resize(441000);
  Rng rng(3);
  for (std::size_t i = 0; i < clip.samples.size(); ++i)
    clip.samples[i] = 0.1 * std::sin(2 * std::numbers::pi * 440.0 * i / 44100.0) + 0.01 * rng.normal();
  auto mel = audio::featurize(clip);
  ModelConfig cfg; // full-size network, 10 classes
  ModelParams params = init_params(cfg, 1);
  NoGradGuard g;
  FramePrediction p = forward(cfg, params, mel);
  Outcome o;
  o.pass = mel.frames.shape() == Shape{500, 64} && p.probs.shape() == Shape{500, 10} &&
           p.clip_probs.shape() == Shape{10};
  o.detail = "features " + shape_str(mel.frames.shape()) + ", probs " + shape_str(p.probs.shape()) +
             ", clip probs " + shape_str(p.clip_probs.shape());
  return o;
}

// ---------------------------------------------------------------- C4
Outcome metric_oracles() {
  Rng rng(404);
  std::size_t instances = 0, mismatches = 0;
  bool self_ok = true;
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t classes = 1 + rng.below(3);
    const long dur_ms = 1000 + static_cast<long>(rng.below(3001));
    auto truth = testing::random_events(rng, 5, classes, dur_ms);
    auto pred = rng.below(2) ? testing::jitter(rng, truth, dur_ms)
                             : testing::random_events(rng, 5, classes, dur_ms);
    const double dur = dur_ms / 1000.0;

    auto seg = metrics::segment_score(pred, truth, dur, classes, 1.0);
    auto ev = metrics::event_score(pred, truth, classes);
    auto seg_ref = testing::brute_segment(pred, truth, dur_ms, classes, 1000);
    auto ev_ref = testing::brute_event(pred, truth, classes);

    std::map<std::string, metrics::TagSet> ptags, ttags;
    for (int clip = 0; clip < 4; ++clip) {
      const std::string id = "c" + std::to_string(clip);
      ptags[id];
      ttags[id];
      for (std::size_t k = 0; k < classes; ++k) {
        if (rng.below(2))
          ptags[id].insert(k);
        if (rng.below(2))
          ttags[id].insert(k);
      }
    }
    auto tag = metrics::tagging_score(ptags, ttags, classes);
    auto tag_ref = testing::brute_tagging(ptags, ttags, classes);

    mismatches += seg.per_class != seg_ref;
    mismatches += ev.per_class != ev_ref;
    mismatches += tag.per_class != tag_ref;

    auto self_seg = metrics::segment_score(truth, truth, dur, classes);
    auto self_ev = metrics::event_score(truth, truth, classes);
    auto self_tag = metrics::tagging_score(ttags, ttags, classes);
    for (const auto *r : {&self_seg, &self_ev, &self_tag})
      self_ok = self_ok && r->micro.f1 == 1.0 && r->macro.f1 == 1.0;
    ++instances;
  }
  Outcome o;
  o.pass = mismatches == 0 && self_ok && instances >= 100;
  o.detail = fmt("%zu random instances x 3 scorers, %zu count mismatches, self-score F1 %s", instances,
                 mismatches, self_ok ? "= 1 exactly" : "!= 1");
  return o;
}

// ---------------------------------------------------------------- C5
Outcome overfit() {
  const auto t0 = Clock::now();
  scape::ScapeSpec spec;
  spec.n_clips = 32;
  spec.classes = 3;
  spec.seed = 7;
  spec.val_fraction = 0.0;
  const fs::path dir = work_dir() / "overfit";
  auto manifest = scape::generate(spec, dir);
  auto clips = scape::load_clips(manifest, manifest.entries, 1);
  const double prep = seconds_since(t0);

  ModelConfig mc = ModelConfig::desk();
  mc.classes = 3;
  TrainConfig tc = TrainConfig::desk();
  tc.max_epochs = 200;
  tc.seed = 1;
  const auto t1 = Clock::now();
  double best_f1 = 0.0;
  std::size_t reached = 0;
  auto result = train(clips, {}, mc, tc, [&](const EpochRecord &rec, ModelParams &p) {
    auto probs = predict_clip_probs(mc, p, clips);
    std::map<std::string, metrics::TagSet> pred, truth;
    for (std::size_t i = 0; i < clips.size(); ++i)
      for (std::size_t k = 0; k < 3; ++k) {
        pred[clips[i].id];
        truth[clips[i].id];
        if (probs[i][k] >= 0.5)
          pred[clips[i].id].insert(k);
        if (clips[i].labels[k] > 0.5)
          truth[clips[i].id].insert(k);
      }
    best_f1 = metrics::tagging_score(pred, truth, 3).micro.f1;
    if (best_f1 >= 0.95) {
      reached = rec.epoch;
      return false;
    }
    return true;
  });
  const double train_s = seconds_since(t1);
  Outcome o;
  o.pass = reached > 0 && reached <= 200 && train_s + prep <= 300.0;
  o.detail = fmt("train tagging-F1 %.3f at epoch %zu (limit 200), %.1f s training + %.1f s data prep "
                 "(limit 300 s)",
                 best_f1, result.history.size(), train_s, prep);
  return o;
}

// ---------------------------------------------------------------- C6-C8
struct StudyRun {
  bool done = false;
  std::vector<StudyRow> rows;
  std::string error;
  double seconds = 0.0;
};

constexpr std::size_t kStudySeeds = 5;

StudyRun &study() {
  static StudyRun run = [] {
    StudyRun s;
    const auto t0 = Clock::now();
    try {
      scape::ScapeSpec spec;
      spec.n_clips = 64;
      spec.eval_clips = 32;
      spec.classes = 3;
      spec.clip_seconds = 4.0;
      spec.events_min = 1;
      spec.events_max = 3;
      spec.event_seconds_min = 0.5;
      spec.event_seconds_max = 2.0;
      spec.val_fraction = 0.2;
      spec.seed = 2024;
      const fs::path dir = work_dir() / "study";
      auto manifest = scape::generate(spec, dir);
      StudyInputs in;
      in.train = scape::load_clips(manifest, manifest.select("train"), 1);
      in.val = scape::load_clips(manifest, manifest.select("val"), 1);
      in.eval = load_eval_set(manifest, manifest.select("eval"), 1);

      RunConfig base;
      base.model.classes = 3;
      base.train.max_epochs = 20;
      base.train.seed = 100;
      base.seeds = kStudySeeds;

      using am::GradMode;
      std::vector<StudyVariant> variants = {
          {"none", [](ModelConfig &m) { m.am.placement.clear(); }},
          {"full", [](ModelConfig &) {}},
          {"grad=none", [](ModelConfig &m) { m.am.grad_mode = GradMode::none; }},
      };
      for (double tau : {5.0, 0.5, 0.1, 0.05})
        variants.push_back({fmt("tau=%g", tau), [tau](ModelConfig &m) { m.am.tau = tau; }});
      s.rows = run_study(variants, base, in, worker_count(), [](const std::string &line) {
        std::cerr << "  study: " << line << std::endl;
      });
      write_study_csv("acceptance_study.csv", "acceptance", s.rows);
      s.done = true;
    } catch (const std::exception &e) {
      s.error = e.what();
    }
    s.seconds = seconds_since(t0);
    return s;
  }();
  return run;
}

const StudyRow *row(const StudyRun &s, const std::string &name) {
  for (const auto &r : s.rows)
    if (r.name == name)
      return &r;
  return nullptr;
}

bool all_ok(const StudyRow &r) {
  for (const auto &run : r.runs)
    if (!run.ok)
      return false;
  return r.runs.size() == kStudySeeds;
}

Outcome placement_trend() {
  const auto &s = study();
  if (!s.done)
    return {false, "study failed: " + s.error};
  const auto *none = row(s, "none");
  const auto *full = row(s, "full");
  std::vector<double> gaps;
  for (std::size_t i = 0; i < kStudySeeds; ++i)
    gaps.push_back(full->runs[i].event_f1 - none->runs[i].event_f1);
  const Interval gap = mean_ci(gaps);
  Outcome o;
  o.pass = all_ok(*none) && all_ok(*full) && full->event.mean >= none->event.mean;
  o.detail = fmt("event-F1 full %.3f +- %.3f vs none %.3f +- %.3f; paired gap %+.3f +- %.3f (95%% CI, "
                 "%zu seeds)",
                 full->event.mean, full->event.half_width, none->event.mean, none->event.half_width,
                 gap.mean, gap.half_width, kStudySeeds);
  return o;
}

Outcome gradient_stop() {
  // mechanism: no gradient reaches the projections with grad_mode=none
  scape::ScapeSpec spec;
  spec.n_clips = 4;
  spec.classes = 3;
  spec.clip_seconds = 3.0;
  spec.event_seconds_max = 1.5;
  spec.val_fraction = 0.0;
  spec.seed = 5;
  auto manifest = scape::generate(spec, work_dir() / "gradstop");
  auto clips = scape::load_clips(manifest, manifest.entries, 1);
  Batch b = collate(std::span<const LabeledClip>(clips));
  auto max_proj_grad = [&](am::GradMode mode) {
    ModelConfig mc = ModelConfig::desk();
    mc.classes = 3;
    mc.am.grad_mode = mode;
    ModelParams p = init_params(mc, 3);
    auto pred = forward(mc, p, b.features, b.valid_lengths, Mode::train);
    backward(bce_loss(pred.clip_probs, b.labels));
    double m = 0.0;
    for (const char *name : {"am.half.proj", "am.quarter.proj"})
      for (double g : p.get(name).grad())
        m = std::max(m, std::abs(g));
    return m;
  };
  const double g_none = max_proj_grad(am::GradMode::none);
  const double g_full = max_proj_grad(am::GradMode::full);

  const auto &s = study();
  if (!s.done)
    return {false, "study failed: " + s.error};
  const auto *full = row(s, "full");
  const auto *none = row(s, "grad=none");
  Outcome o;
  o.pass = g_none == 0.0 && g_full > 0.0 && all_ok(*full) && all_ok(*none) &&
           none->event.mean <= full->event.mean;
  o.detail = fmt("max |dL/dW| none %.1e (full %.1e); event-F1 grad=none %.3f +- %.3f vs full %.3f +- %.3f",
                 g_none, g_full, none->event.mean, none->event.half_width, full->event.mean,
                 full->event.half_width);
  return o;
}

Outcome tau_robustness() {
  const auto &s = study();
  if (!s.done)
    return {false, "study failed: " + s.error};
  double lo = 1e9, hi = -1e9;
  std::string parts;
  bool ok = true;
  for (const char *name : {"tau=5", "full", "tau=0.5", "tau=0.1", "tau=0.05"}) {
    const auto *r = row(s, name);
    ok = ok && all_ok(*r);
    lo = std::min(lo, r->tagging.mean);
    hi = std::max(hi, r->tagging.mean);
    parts += fmt(" %s:%.3f", std::string(name) == "full" ? "tau=1" : name, r->tagging.mean);
  }
  Outcome o;
  o.pass = ok && hi - lo <= 0.10;
  o.detail = fmt("tagging-F1 spread %.3f (limit 0.10);", hi - lo) + parts +
             fmt("; study wall time %.0f s", s.seconds);
  return o;
}

// ---------------------------------------------------------------- C9
Outcome determinism() {
  scape::ScapeSpec spec;
  spec.n_clips = 12;
  spec.classes = 3;
  spec.clip_seconds = 3.0;
  spec.event_seconds_max = 1.5;
  spec.val_fraction = 0.25;
  spec.seed = 9;
  auto manifest = scape::generate(spec, work_dir() / "determinism");
  auto train_set = scape::load_clips(manifest, manifest.select("train"), 1);
  auto val_set = scape::load_clips(manifest, manifest.select("val"), 1);
  ModelConfig mc = ModelConfig::desk();
  mc.classes = 3;
  TrainConfig tc = TrainConfig::desk();
  tc.batch_size = 4;
  tc.max_epochs = 4;
  tc.seed = 77;
  auto a = train(train_set, val_set, mc, tc);
  auto b = train(train_set, val_set, mc, tc);
  bool same_losses = a.history.size() == b.history.size();
  for (std::size_t i = 0; same_losses && i < a.history.size(); ++i)
    same_losses = std::bit_cast<std::uint64_t>(a.history[i].train_loss) ==
                      std::bit_cast<std::uint64_t>(b.history[i].train_loss) &&
                  std::bit_cast<std::uint64_t>(a.history[i].val_loss) ==
                      std::bit_cast<std::uint64_t>(b.history[i].val_loss);

  const fs::path p1 = work_dir() / "ck1.amn", p2 = work_dir() / "ck2.amn";
  save_checkpoint(p1, {mc, a.last, tc.serialize()});
  Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(p2, loaded);
  auto bytes = [](const fs::path &p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  const bool same_bytes = bytes(p1) == bytes(p2);

  std::uint64_t max_ulp = 0;
  {
    NoGradGuard g;
    const Tensor &x = val_set.front().features;
    auto ref = forward(mc, a.last, x, {}, Mode::eval);
    auto got = forward(loaded.config, loaded.params, x, {}, Mode::eval);
    auto ulp = [](double u, double v) {
      const auto a = std::bit_cast<std::int64_t>(u), b = std::bit_cast<std::int64_t>(v);
      return static_cast<std::uint64_t>(a > b ? a - b : b - a);
    };
    auto rp = ref.probs.values(), gp = got.probs.values();
    for (std::size_t i = 0; i < rp.size(); ++i)
      max_ulp = std::max(max_ulp, ulp(rp[i], gp[i]));
    auto rc = ref.clip_probs.values(), gc = got.clip_probs.values();
    for (std::size_t i = 0; i < rc.size(); ++i)
      max_ulp = std::max(max_ulp, ulp(rc[i], gc[i]));
  }
  Outcome o;
  o.pass = same_losses && same_bytes && max_ulp == 0;
  o.detail = fmt("%zu-epoch loss sequences %s; save-load-save bytes %s; reloaded inference max %llu ULP",
                 a.history.size(), same_losses ? "bit-identical" : "DIFFER",
                 same_bytes ? "identical" : "DIFFER", static_cast<unsigned long long>(max_ulp));
  return o;
}

// ---------------------------------------------------------------- C10
Outcome pooling_identities() {
  const double v = pool_linear_softmax(Tensor({2, 1}, {0.8, 0.2})).item();
  const bool derived = std::abs(v - 0.68) <= 1e-9;
  Rng rng(10);
  bool fixed = true;
  for (int i = 0; i < 100; ++i) {
    const double c = rng.uniform(0.01, 1.0);
    const std::size_t t = 1 + rng.below(20);
    const double p = pool_linear_softmax(Tensor::full({t, 1}, c)).item();
    fixed = fixed && std::abs(p - c) <= 1e-12;
  }
  std::size_t violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t t = 1 + rng.below(30);
    Tensor q = testing::random_tensor(rng, {t, 1}, 0.0, 1.0);
    if (pool_max(q).item() < pool_linear_softmax(q).item())
      ++violations;
  }
  Outcome o;
  o.pass = derived && fixed && violations == 0;
  o.detail = fmt("pool([0.8,0.2]) = %.12f, constant columns %s, max<linear-softmax in %zu/1000 columns", v,
                 fixed ? "fixed" : "NOT fixed", violations);
  return o;
}

} // namespace

int main(int argc, char **argv) {
  const std::vector<std::pair<const char *, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"affinity invariants", affinity_invariants},
      {"shape law", shape_law},
      {"metric oracle equivalence", metric_oracles},
      {"overfit check", overfit},
      {"AM placement trend", placement_trend},
      {"gradient-stop mechanism", gradient_stop},
      {"tau robustness", tau_robustness},
      {"determinism and persistence", determinism},
      {"pooling identities", pooling_identities},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i)
    selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  std::size_t failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.contains(i + 1))
      continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << "C" << i + 1 << " " << criteria[i].first << ": "
              << o.detail << fmt(" (%.1f s)", seconds_since(t0)) << std::endl;
  }
  std::error_code ec;
  fs::remove_all(work_dir(), ec);
  return failures == 0 ? 0 : 1;
}
