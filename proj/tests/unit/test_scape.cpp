// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"

#include "amn/audio.hpp"
#include "amn/scape.hpp"
#include "util.hpp"

using namespace amn;
using namespace amn::scape;
using amn::testing::slurp;
using amn::testing::spit;
using amn::testing::TempDir;

namespace {

ScapeSpec tiny(std::uint64_t seed = 3) {
  ScapeSpec s;
  s.n_clips = 6;
  s.eval_clips = 2;
  s.classes = 4;
  s.clip_seconds = 2.0;
  s.events_min = 2;
  s.events_max = 2;
  s.event_seconds_max = 1.0;
  s.val_fraction = 0.5;
  s.seed = seed;
  return s;
}

std::size_t peak_band(const std::vector<double> &samples) {
  audio::Clip c;
  c.samples = samples;
  const auto mel = audio::featurize(c);
  const std::size_t t = mel.num_frames();
  std::vector<double> energy(audio::kNumMels, 0.0);
  const auto v = mel.frames.values();
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t k = 0; k < audio::kNumMels; ++k)
      energy[k] += v[i * audio::kNumMels + k];
  return static_cast<std::size_t>(std::max_element(energy.begin(), energy.end()) - energy.begin());
}

} // namespace

TEST_SUITE("scape") {

TEST_CASE("class templates") {
  const auto a = synth_class_template(0, 0.5, 44100.0, 9);
  const auto b = synth_class_template(0, 0.5, 44100.0, 9);
  CHECK(a.size() == 22050);
  CHECK(a == b);
  CHECK(peak_band(synth_class_template(0, 1.0, 44100.0, 1)) !=
        peak_band(synth_class_template(1, 1.0, 44100.0, 1)));
  double ss = 0.0;
  for (double v : a)
    ss += v * v;
  CHECK(std::sqrt(ss / static_cast<double>(a.size())) == doctest::Approx(1.0).epsilon(0.05));
  CHECK(class_name(0) != class_name(1));
}

TEST_CASE("generate is deterministic and consistent") {
  TempDir d1("gen1"), d2("gen2");
  const auto m = generate(tiny(), d1.path());
  generate(tiny(), d2.path());
  CHECK(slurp(d1 / "manifest.jsonl") == slurp(d2 / "manifest.jsonl"));
  CHECK(slurp(d1 / "strong.tsv") == slurp(d2 / "strong.tsv"));
  for (const auto &e : m.entries)
    CHECK(slurp(e.audio) == slurp(d2.path() / "audio" / (e.id + ".wav")));

  REQUIRE(m.entries.size() == 8);
  std::map<std::string, std::size_t> splits;
  for (const auto &e : m.entries) {
    ++splits[e.split];
    REQUIRE(e.strong);
    const auto events = load_strong(*e.strong, m.class_names);
    CHECK(events.size() == 2);
    std::set<std::string> labels;
    for (const auto &s : events) {
      CHECK(s.event.onset >= 0.0);
      CHECK(s.event.offset <= 2.0 + 1e-9);
      labels.insert(m.class_names[s.event.label]);
    }
    CHECK(labels == std::set<std::string>(e.labels.begin(), e.labels.end()));
    CHECK(audio::load_wav(e.audio).samples.size() == 88200);
  }
  CHECK(splits["train"] == 3);
  CHECK(splits["val"] == 3);
  CHECK(splits["eval"] == 2);

  TempDir d3("gen3");
  generate(tiny(4), d3.path());
  CHECK(slurp(d1 / "strong.tsv") != slurp(d3 / "strong.tsv"));
}

TEST_CASE("spec validation") {
  ScapeSpec s = tiny();
  s.events_min = 3;
  s.events_max = 2;
  CHECK_THROWS(s.validate());
  s = tiny();
  s.event_seconds_max = 5.0;
  CHECK_THROWS(s.validate());
  s = tiny();
  s.val_fraction = 1.0;
  CHECK_THROWS(s.validate());
  s = tiny();
  s.classes = 0;
  CHECK_THROWS(s.validate());
}

TEST_CASE("manifest round trip and parse errors") {
  TempDir dir("manifest");
  const auto m = generate(tiny(), dir.path());
  const auto back = load_manifest(dir.path());
  CHECK(back.class_names == m.class_names);
  REQUIRE(back.entries.size() == m.entries.size());
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    CHECK(back.entries[i].id == m.entries[i].id);
    CHECK(std::filesystem::equivalent(back.entries[i].audio, m.entries[i].audio));
    CHECK(back.entries[i].labels == m.entries[i].labels);
    CHECK(back.entries[i].split == m.entries[i].split);
  }

  const std::string text = slurp(dir / "manifest.jsonl");
  const auto first_nl = text.find('\n');
  spit(dir / "manifest.jsonl", text.substr(0, first_nl + 1) + "{\"id\": \"oops\"}\n");
  try {
    load_manifest(dir.path());
    FAIL("expected parse error");
  } catch (const std::exception &e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
  spit(dir / "manifest.jsonl", text);

  spit(dir / "s1.tsv", "clip_0000.wav\t0.5\t0.4\t" + m.class_names[0] + "\n");
  CHECK_THROWS(load_strong(dir / "s1.tsv", m.class_names));
  spit(dir / "s2.tsv", "clip_0000.wav\t0.1\t0.4\tunknown_class\n");
  CHECK_THROWS(load_strong(dir / "s2.tsv", m.class_names));
}

TEST_CASE("split") {
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 10; ++i)
    entries.push_back({"c" + std::to_string(i), {}, {}, "train", {}});
  const auto parts = split(entries, {0.8, 0.2}, 5);
  REQUIRE(parts.size() == 2);
  CHECK(parts[0].size() == 8);
  CHECK(parts[1].size() == 2);
  std::set<std::string> all;
  for (const auto &p : parts)
    for (const auto &e : p)
      CHECK(all.insert(e.id).second);
  CHECK(all.size() == 10);
  const auto again = split(entries, {0.8, 0.2}, 5);
  CHECK(again[1][0].id == parts[1][0].id);
  CHECK(again[1][1].id == parts[1][1].id);
  CHECK_THROWS(split(entries, {0.5, 0.2}, 5));
  CHECK_THROWS(split(entries, {1.2, -0.2}, 5));
}

TEST_CASE("load_clips uses the feature cache") {
  TempDir dir("clips"), cache("lmscache");
  const auto m = generate(tiny(), dir.path());
  const auto a = load_clips(m, m.entries, 2, cache.path());
  CHECK(std::filesystem::exists(cache / (m.entries[0].id + ".lms")));
  const auto b = load_clips(m, m.entries, 1, cache.path());
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].labels == b[i].labels);
    CHECK(std::equal(a[i].features.values().begin(), a[i].features.values().end(),
                     b[i].features.values().begin()));
  }
  CHECK(a[0].features.shape() == Shape{100, audio::kNumMels});
}

} // TEST_SUITE
