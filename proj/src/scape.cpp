// SPDX-License-Identifier: Apache-2.0
#include "amn/scape.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "amn/audio.hpp"
#include "amn/parallel.hpp"
#include "amn/rng.hpp"
#include "text.hpp"

namespace amn::scape {

namespace fs = std::filesystem;
using json = nlohmann::json;

void ScapeSpec::validate() const {
  auto fail = [](const std::string &m) { throw std::invalid_argument("scape spec: " + m); };
  if (n_clips == 0)
    fail("n_clips must be >= 1");
  if (classes == 0)
    fail("classes must be >= 1");
  if (events_min == 0 || events_min > events_max)
    fail("events range must satisfy 1 <= min <= max");
  if (!(event_seconds_min > 0.0) || event_seconds_min > event_seconds_max)
    fail("event duration range must satisfy 0 < min <= max");
  if (!(clip_seconds >= event_seconds_max))
    fail("clip_seconds must be >= the longest event");
  if (snr_db_min > snr_db_max)
    fail("snr range must satisfy min <= max");
  if (max_polyphony == 0)
    fail("max_polyphony must be >= 1");
  if (!(sample_rate > 0.0))
    fail("sample_rate must be positive");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0))
    fail("val_fraction must lie in [0, 1)");
}

std::string class_name(std::size_t class_id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%02zu", class_id % 2 == 0 ? "harmonic" : "noiseband",
                class_id);
  return buf;
}

namespace {

constexpr double kBaseHz = 200.0;
constexpr double kRatio = 1.6;
constexpr double kFadeSeconds = 0.010;
constexpr double kBackgroundRms = 0.005;

double centre_hz(std::size_t class_id, double sample_rate) {
  // Wrap around below Nyquist for very large class counts.
  double f = kBaseHz * std::pow(kRatio, static_cast<double>(class_id));
  const double top = 0.4 * sample_rate;
  while (f > top)
    f /= 2.0 * kRatio;
  return f;
}

} // namespace

std::vector<double> synth_class_template(std::size_t class_id, double duration,
                                         double sample_rate, std::uint64_t seed) {
  if (!(duration > 0.0))
    throw std::invalid_argument("synth_class_template: duration must be positive");
  const auto n = static_cast<std::size_t>(std::llround(duration * sample_rate));
  std::vector<double> out(n, 0.0);
  Rng rng(derive_seed(seed, class_id));
  const double f0 = centre_hz(class_id, sample_rate);
  const double two_pi = 2.0 * std::numbers::pi;
  if (class_id % 2 == 0) {
    for (int h = 1; h <= 4; ++h) {
      const double f = f0 * h;
      if (f >= 0.45 * sample_rate)
        break;
      const double phase = two_pi * rng.uniform();
      for (std::size_t i = 0; i < n; ++i)
        out[i] += std::sin(two_pi * f * static_cast<double>(i) / sample_rate + phase) / h;
    }
  } else {
    for (int c = 0; c < 24; ++c) {
      const double f = f0 * rng.uniform(0.92, 1.08);
      const double phase = two_pi * rng.uniform();
      for (std::size_t i = 0; i < n; ++i)
        out[i] += std::sin(two_pi * f * static_cast<double>(i) / sample_rate + phase);
    }
  }
  double energy = 0.0;
  for (double v : out)
    energy += v * v;
  const double rms = std::sqrt(energy / static_cast<double>(std::max<std::size_t>(n, 1)));
  const auto fade = std::min(n / 2, static_cast<std::size_t>(kFadeSeconds * sample_rate));
  for (std::size_t i = 0; i < n; ++i) {
    double g = rms > 0.0 ? 1.0 / rms : 0.0;
    if (i < fade)
      g *= static_cast<double>(i) / static_cast<double>(fade);
    else if (n - 1 - i < fade)
      g *= static_cast<double>(n - 1 - i) / static_cast<double>(fade);
    out[i] *= g;
  }
  return out;
}

std::size_t DatasetManifest::class_index(const std::string &label) const {
  for (std::size_t k = 0; k < class_names.size(); ++k)
    if (class_names[k] == label)
      return k;
  throw std::invalid_argument("unknown label '" + label + "'");
}

std::vector<ManifestEntry> DatasetManifest::select(const std::string &which) const {
  std::vector<ManifestEntry> out;
  for (const auto &e : entries)
    if (e.split == which)
      out.push_back(e);
  return out;
}

namespace {

struct PlacedEvent {
  std::size_t label;
  long onset_ms;
  long offset_ms;
};

std::vector<PlacedEvent> place_events(const ScapeSpec &spec, Rng &rng) {
  const std::size_t count =
      spec.events_min + rng.below(spec.events_max - spec.events_min + 1);
  const long clip_ms = std::lround(spec.clip_seconds * 1000.0);
  const long dmin = std::lround(spec.event_seconds_min * 1000.0);
  const long dmax = std::lround(spec.event_seconds_max * 1000.0);
  std::vector<PlacedEvent> events;
  for (std::size_t e = 0; e < count; ++e) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      PlacedEvent ev;
      ev.label = rng.below(spec.classes);
      const long dur = dmin + static_cast<long>(rng.below(static_cast<std::uint64_t>(dmax - dmin + 1)));
      ev.onset_ms = static_cast<long>(rng.below(static_cast<std::uint64_t>(clip_ms - dur + 1)));
      ev.offset_ms = ev.onset_ms + dur;
      // Polyphony peaks at some event onset, so checking onsets suffices.
      std::vector<PlacedEvent> trial = events;
      trial.push_back(ev);
      bool ok = true;
      for (const auto &a : trial) {
        std::size_t active = 0;
        for (const auto &b : trial)
          active += b.onset_ms <= a.onset_ms && a.onset_ms < b.offset_ms;
        ok = ok && active <= spec.max_polyphony;
      }
      if (ok) {
        events.push_back(ev);
        placed = true;
      }
    }
    if (!placed)
      throw std::runtime_error("scape: could not place event under the polyphony limit");
  }
  std::sort(events.begin(), events.end(), [](const PlacedEvent &a, const PlacedEvent &b) {
    return std::tie(a.onset_ms, a.offset_ms, a.label) < std::tie(b.onset_ms, b.offset_ms, b.label);
  });
  return events;
}

std::string clip_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%04zu", i);
  return buf;
}

std::string ms_str(long ms) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(ms) / 1000.0);
  return buf;
}

} // namespace

void write_manifest(const DatasetManifest &manifest) {
  const fs::path dir = manifest.path.parent_path();
  std::ofstream os(manifest.path);
  if (!os)
    throw std::runtime_error("cannot write '" + manifest.path.string() + "'");
  for (const auto &e : manifest.entries) {
    json j;
    j["id"] = e.id;
    j["audio"] = fs::relative(e.audio, dir).generic_string();
    j["labels"] = e.labels;
    j["split"] = e.split;
    if (e.strong)
      j["strong"] = fs::relative(*e.strong, dir).generic_string();
    os << j.dump() << '\n';
  }
  std::ofstream cs(dir / "classes.txt");
  for (const auto &c : manifest.class_names)
    cs << c << '\n';
}

DatasetManifest generate(const ScapeSpec &spec, const fs::path &out_dir) {
  spec.validate();
  fs::create_directories(out_dir / "audio");
  fs::create_directories(out_dir / "strong");
  const std::size_t total = spec.n_clips + spec.eval_clips;
  const auto n = static_cast<std::size_t>(std::llround(spec.clip_seconds * spec.sample_rate));

  DatasetManifest manifest;
  manifest.path = out_dir / "manifest.jsonl";
  for (std::size_t k = 0; k < spec.classes; ++k)
    manifest.class_names.push_back(class_name(k));
  manifest.entries.resize(total);
  std::vector<std::string> strong_text(total);

  parallel_for(total, worker_count(), [&](std::size_t i) {
    const std::uint64_t clip_seed = derive_seed(spec.seed, i);
    Rng rng(clip_seed);
    const auto events = place_events(spec, rng);
    std::vector<double> mix(n);
    for (double &v : mix)
      v = kBackgroundRms * rng.normal();
    std::set<std::string> labels;
    const std::string id = clip_id(i);
    std::string tsv;
    for (std::size_t e = 0; e < events.size(); ++e) {
      const auto &ev = events[e];
      const double snr = rng.uniform(spec.snr_db_min, spec.snr_db_max);
      const double gain = kBackgroundRms * std::pow(10.0, snr / 20.0);
      const double dur = static_cast<double>(ev.offset_ms - ev.onset_ms) / 1000.0;
      const auto sig = synth_class_template(ev.label, dur, spec.sample_rate,
                                            derive_seed(clip_seed, 1000 + e));
      const auto start =
          static_cast<std::size_t>(std::llround(ev.onset_ms / 1000.0 * spec.sample_rate));
      for (std::size_t s = 0; s < sig.size() && start + s < n; ++s)
        mix[start + s] += gain * sig[s];
      labels.insert(class_name(ev.label));
      tsv += id + ".wav\t" + ms_str(ev.onset_ms) + "\t" + ms_str(ev.offset_ms) + "\t" +
             class_name(ev.label) + "\n";
    }
    ManifestEntry &m = manifest.entries[i];
    m.id = id;
    m.audio = out_dir / "audio" / (id + ".wav");
    m.labels.assign(labels.begin(), labels.end());
    m.split = i < spec.n_clips ? "train" : "eval";
    m.strong = out_dir / "strong" / (id + ".tsv");
    audio::write_wav_pcm16(m.audio, mix, static_cast<unsigned>(spec.sample_rate));
    std::ofstream(*m.strong) << tsv;
    strong_text[i] = std::move(tsv);
  });

  std::vector<ManifestEntry> first(manifest.entries.begin(),
                                   manifest.entries.begin() + static_cast<std::ptrdiff_t>(spec.n_clips));
  if (spec.val_fraction > 0.0) {
    const auto parts = split(first, {1.0 - spec.val_fraction, spec.val_fraction},
                             derive_seed(spec.seed, 0x5B1));
    std::set<std::string> val_ids;
    for (const auto &e : parts[1])
      val_ids.insert(e.id);
    for (auto &e : manifest.entries)
      if (val_ids.contains(e.id))
        e.split = "val";
  }
  write_manifest(manifest);
  std::ofstream all(out_dir / "strong.tsv");
  for (const auto &t : strong_text)
    all << t;
  return manifest;
}

std::vector<StrongEvent> load_strong(const fs::path &path,
                                     const std::vector<std::string> &class_names) {
  std::vector<StrongEvent> out;
  std::size_t line = 0;
  for (const auto &row : metrics::read_strong_tsv(path)) {
    ++line;
    auto it = std::find(class_names.begin(), class_names.end(), row.label);
    if (it == class_names.end())
      throw std::runtime_error(path.string() + ": unknown label '" + row.label + "' in row " +
                               std::to_string(line));
    out.push_back({row.file, {static_cast<std::size_t>(it - class_names.begin()), row.onset,
                              row.offset}});
  }
  return out;
}

DatasetManifest load_manifest(const fs::path &path_in) {
  fs::path path = fs::is_directory(path_in) ? path_in / "manifest.jsonl" : path_in;
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("cannot open manifest '" + path.string() + "'");
  const fs::path dir = path.parent_path();
  DatasetManifest m;
  m.path = path;
  const bool have_classes = fs::exists(dir / "classes.txt");
  if (have_classes) {
    std::ifstream cs(dir / "classes.txt");
    std::string c;
    while (std::getline(cs, c))
      if (!text::trim(c).empty())
        m.class_names.push_back(text::trim(c));
  }
  std::set<std::string> ids, seen_labels;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (text::trim(line).empty())
      continue;
    const std::string where = path.string() + ":" + std::to_string(n) + ": ";
    ManifestEntry e;
    try {
      const json j = json::parse(line);
      e.id = j.at("id").get<std::string>();
      e.audio = dir / j.at("audio").get<std::string>();
      e.labels = j.at("labels").get<std::vector<std::string>>();
      e.split = j.value("split", std::string("train"));
      if (j.contains("strong") && !j["strong"].is_null())
        e.strong = dir / j["strong"].get<std::string>();
    } catch (const json::exception &ex) {
      throw std::runtime_error(where + "malformed entry (" + ex.what() + ")");
    }
    if (e.id.empty())
      throw std::runtime_error(where + "empty id");
    if (!ids.insert(e.id).second)
      throw std::runtime_error(where + "duplicate id '" + e.id + "'");
    if (e.split != "train" && e.split != "val" && e.split != "eval")
      throw std::runtime_error(where + "split must be train, val or eval");
    for (const auto &l : e.labels) {
      if (have_classes &&
          std::find(m.class_names.begin(), m.class_names.end(), l) == m.class_names.end())
        throw std::runtime_error(where + "unknown label '" + l + "'");
      seen_labels.insert(l);
    }
    m.entries.push_back(std::move(e));
  }
  if (!have_classes)
    m.class_names.assign(seen_labels.begin(), seen_labels.end());
  for (const auto &e : m.entries) {
    if (!e.strong)
      continue;
    std::set<std::string> strong_labels;
    for (const auto &ev : load_strong(*e.strong, m.class_names))
      strong_labels.insert(m.class_names[ev.event.label]);
    if (strong_labels != std::set<std::string>(e.labels.begin(), e.labels.end()))
      throw std::runtime_error("manifest: weak labels of '" + e.id +
                               "' differ from its strong annotation labels");
  }
  return m;
}

std::vector<std::vector<ManifestEntry>> split(const std::vector<ManifestEntry> &entries,
                                              const std::vector<double> &fractions,
                                              std::uint64_t seed) {
  if (fractions.empty())
    throw std::invalid_argument("split: no fractions");
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0)
      throw std::invalid_argument("split: fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split: fractions sum to " + text::format_double(sum) +
                                ", expected 1");
  std::vector<std::size_t> order(entries.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<ManifestEntry>> parts(fractions.size());
  std::size_t pos = 0;
  for (std::size_t p = 0; p < fractions.size(); ++p) {
    const std::size_t take =
        p + 1 == fractions.size()
            ? entries.size() - pos
            : std::min(entries.size() - pos,
                       static_cast<std::size_t>(
                           std::llround(fractions[p] * static_cast<double>(entries.size()))));
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                 order.begin() + static_cast<std::ptrdiff_t>(pos + take));
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx)
      parts[p].push_back(entries[i]);
    pos += take;
  }
  return parts;
}

std::vector<LabeledClip> load_clips(const DatasetManifest &manifest,
                                    const std::vector<ManifestEntry> &entries,
                                    std::size_t threads,
                                    const std::optional<fs::path> &cache) {
  if (cache)
    fs::create_directories(*cache);
  std::vector<LabeledClip> out(entries.size());
  parallel_for(entries.size(), threads, [&](std::size_t i) {
    const ManifestEntry &e = entries[i];
    LabeledClip &c = out[i];
    c.id = e.id;
    c.labels.assign(manifest.class_names.size(), 0.0);
    for (const auto &l : e.labels)
      c.labels[manifest.class_index(l)] = 1.0;
    const std::optional<fs::path> cached =
        cache ? std::optional<fs::path>(*cache / (e.id + ".lms")) : std::nullopt;
    if (cached && fs::exists(*cached)) {
      c.features = audio::read_feature_cache(*cached).frames;
      return;
    }
    audio::MelSpectrogram mel = audio::featurize(audio::load_wav(e.audio));
    if (cached)
      audio::write_feature_cache(*cached, mel);
    c.features = mel.frames;
  });
  return out;
}

} // namespace amn::scape
