// SPDX-License-Identifier: Apache-2.0
// amn: data generation, training, prediction, scoring, ablations and plots.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "amn/audio.hpp"
#include "amn/config.hpp"
#include "amn/metrics.hpp"
#include "amn/model.hpp"
#include "amn/parallel.hpp"
#include "amn/plot.hpp"
#include "amn/scape.hpp"
#include "amn/study.hpp"
#include "amn/training.hpp"

namespace fs = std::filesystem;
using namespace amn;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Config file plus one optional flag per RunConfig key.
struct ConfigFlags {
  std::string file;
  std::vector<std::pair<std::string, CLI::Option *>> options;
  std::map<std::string, std::string> values;

  void attach(CLI::App &app) {
    app.add_option("--config", file, "key=value config file (flags override it)");
    for (const auto &key : RunConfig::keys())
      options.emplace_back(key.name,
                           app.add_option("--" + key.name, values[key.name], key.help));
  }

  RunConfig resolve() const {
    try {
      RunConfig::Pairs from_file, from_flags;
      if (!file.empty())
        from_file = RunConfig::read_file(file);
      for (const auto &[name, opt] : options)
        if (opt->count() > 0)
          from_flags.emplace_back(name, values.at(name));
      RunConfig c = RunConfig::resolve(from_file, from_flags);
      c.validate();
      return c;
    } catch (const std::invalid_argument &e) {
      throw UsageError(e.what());
    }
  }
};

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("cannot write '" + path.string() + "'");
  os << text;
}

fs::path require_out(const RunConfig &c) {
  if (c.out.empty())
    throw UsageError("--out is required");
  fs::create_directories(c.out);
  return c.out;
}

std::optional<fs::path> cache_dir(const RunConfig &c) {
  if (c.cache.empty())
    return std::nullopt;
  return fs::path(c.cache);
}

scape::DatasetManifest require_data(const RunConfig &c) {
  if (c.data.empty())
    throw UsageError("--data is required");
  return scape::load_manifest(c.data);
}

void with_classes(ModelConfig &m, const scape::DatasetManifest &d) {
  m.classes = d.class_names.size();
  m.class_names = d.class_names;
}

// ---------------------------------------------------------------- gendata

struct GenArgs {
  scape::ScapeSpec spec;
  std::string out;
};

void add_gendata(CLI::App &root, GenArgs &a) {
  auto *cmd = root.add_subcommand("gendata", "Synthesize a soundscape dataset");
  auto &s = a.spec;
  cmd->add_option("--out", a.out, "Output directory")->required();
  cmd->add_option("--clips", s.n_clips, "Number of train/val clips")->capture_default_str();
  cmd->add_option("--eval-clips", s.eval_clips, "Extra clips in the eval split")
      ->capture_default_str();
  cmd->add_option("--classes", s.classes, "Number of classes")->capture_default_str();
  cmd->add_option("--seed", s.seed, "Random seed")->capture_default_str();
  cmd->add_option("--clip-seconds", s.clip_seconds, "Clip length")->capture_default_str();
  cmd->add_option("--events-min", s.events_min, "Fewest events per clip")->capture_default_str();
  cmd->add_option("--events-max", s.events_max, "Most events per clip")->capture_default_str();
  cmd->add_option("--event-seconds-min", s.event_seconds_min, "Shortest event")
      ->capture_default_str();
  cmd->add_option("--event-seconds-max", s.event_seconds_max, "Longest event")
      ->capture_default_str();
  cmd->add_option("--snr-min", s.snr_db_min, "Lowest event SNR in dB")->capture_default_str();
  cmd->add_option("--snr-max", s.snr_db_max, "Highest event SNR in dB")->capture_default_str();
  cmd->add_option("--max-polyphony", s.max_polyphony, "Most overlapping events")
      ->capture_default_str();
  cmd->add_option("--sample-rate", s.sample_rate, "Sample rate in Hz")->capture_default_str();
  cmd->add_option("--val-fraction", s.val_fraction, "Share of clips held out for validation")
      ->capture_default_str();
}

std::string describe(const scape::ScapeSpec &s) {
  std::ostringstream os;
  os << "clips=" << s.n_clips << "\neval_clips=" << s.eval_clips << "\nclasses=" << s.classes
     << "\nseed=" << s.seed << "\nclip_seconds=" << s.clip_seconds
     << "\nevents_min=" << s.events_min << "\nevents_max=" << s.events_max
     << "\nevent_seconds_min=" << s.event_seconds_min
     << "\nevent_seconds_max=" << s.event_seconds_max << "\nsnr_db_min=" << s.snr_db_min
     << "\nsnr_db_max=" << s.snr_db_max << "\nmax_polyphony=" << s.max_polyphony
     << "\nsample_rate=" << s.sample_rate << "\nval_fraction=" << s.val_fraction << "\n";
  return os.str();
}

int run_gendata(const GenArgs &a) {
  try {
    a.spec.validate();
  } catch (const std::invalid_argument &e) {
    throw UsageError(e.what());
  }
  const auto manifest = scape::generate(a.spec, a.out);
  write_text(fs::path(a.out) / "config.txt", describe(a.spec));
  std::vector<std::size_t> counts(manifest.class_names.size(), 0);
  std::map<std::string, std::size_t> splits;
  for (const auto &e : manifest.entries) {
    ++splits[e.split];
    if (e.strong)
      for (const auto &s : scape::load_strong(*e.strong, manifest.class_names))
        ++counts[s.event.label];
  }
  std::cout << "manifest: " << manifest.path.string() << "\n";
  for (const auto &[split, n] : splits)
    std::cout << "split " << split << ": " << n << " clips\n";
  for (std::size_t k = 0; k < counts.size(); ++k)
    std::cout << manifest.class_names[k] << ": " << counts[k] << " events\n";
  return 0;
}

// ------------------------------------------------------------------ train

int run_train(const ConfigFlags &flags) {
  RunConfig c = flags.resolve();
  const fs::path out = require_out(c);
  const auto data = require_data(c);
  with_classes(c.model, data);
  c.model.validate();
  write_text(out / "config.txt", c.serialize());

  const std::size_t threads = worker_count(c.threads);
  const auto train_set = scape::load_clips(data, data.select("train"), threads, cache_dir(c));
  const auto val_set = scape::load_clips(data, data.select("val"), threads, cache_dir(c));
  if (train_set.empty())
    throw std::runtime_error("dataset has no clips in the train split");
  std::cout << "train clips: " << train_set.size() << ", val clips: " << val_set.size() << "\n";

  const auto result =
      train(train_set, val_set, c.model, c.train, [](const EpochRecord &r, ModelParams &) {
        std::printf("epoch %3zu  train %.6f  val %.6f  lr %.3g\n", r.epoch, r.train_loss,
                    r.val_loss, r.lr);
        std::fflush(stdout);
        return true;
      });

  save_checkpoint(out / "best.ckpt", {c.model, result.best, c.train.serialize()});
  save_checkpoint(out / "last.ckpt", {c.model, result.last, c.train.serialize()});
  write_history_csv(out / "history.csv", result.history);
  const auto &last = result.history.back();
  std::printf("best epoch: %zu\nfinal train loss: %.6f\nfinal val loss: %.6f\n",
              result.best_epoch, last.train_loss, last.val_loss);
  return 0;
}

// ---------------------------------------------------------------- predict

struct PredictArgs {
  std::string checkpoint;
  std::string input;
  std::string split;
  bool probs = false;
};

void write_probs_csv(const fs::path &path, const Tensor &probs) {
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write '" + path.string() + "'");
  const std::size_t t = probs.dim(0), c = probs.dim(1);
  const auto v = probs.values();
  char buf[32];
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      std::snprintf(buf, sizeof buf, "%.9g", v[i * c + k]);
      os << (k ? "," : "") << buf;
    }
    os << "\n";
  }
}

int run_predict(const ConfigFlags &flags, const PredictArgs &a) {
  RunConfig c = flags.resolve();
  const fs::path out = require_out(c);
  Checkpoint ckpt = load_checkpoint(a.checkpoint);
  c.model = ckpt.config;
  write_text(out / "config.txt", c.serialize() + "checkpoint=" + a.checkpoint + "\n");

  std::vector<LabeledClip> clips;
  const fs::path input = a.input;
  if (input.extension() == ".wav") {
    const auto clip = audio::load_wav(input);
    clips.push_back({input.stem().string(), audio::featurize(clip).frames, {}});
  } else {
    const auto data = scape::load_manifest(input);
    if (data.class_names != ckpt.config.class_names)
      throw std::runtime_error("dataset classes do not match the checkpoint classes");
    const auto entries = a.split.empty() ? data.entries : data.select(a.split);
    clips = scape::load_clips(data, entries, worker_count(c.threads), cache_dir(c));
  }

  fs::create_directories(out / "events");
  if (a.probs)
    fs::create_directories(out / "probs");
  std::vector<metrics::StrongRow> all;
  for (const auto &clip : clips) {
    const ClipOutput o = infer_clip(c.model, ckpt.params, clip, c.scoring);
    std::vector<metrics::StrongRow> rows;
    for (const auto &e : o.events)
      rows.push_back({o.id + ".wav", e.onset, e.offset, c.model.class_name(e.label)});
    metrics::write_strong_tsv(out / "events" / (o.id + ".tsv"), rows);
    all.insert(all.end(), rows.begin(), rows.end());
    if (a.probs)
      write_probs_csv(out / "probs" / (o.id + ".csv"), o.probs);
    std::cout << o.id << ": " << o.events.size() << " events\n";
  }
  metrics::write_strong_tsv(out / "events.tsv", all);
  std::cout << "events: " << (out / "events.tsv").string() << "\n";
  return 0;
}

// --------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string pred;
  std::string truth;
  std::string split;
  double clip_seconds = 10.0;
};

std::string clip_of(const std::string &file) { return fs::path(file).stem().string(); }

/// Prediction rows from one TSV or every *.tsv in a directory. Each file in
/// a directory names a clip even when it holds no events.
std::map<std::string, std::vector<metrics::StrongRow>> read_predictions(const fs::path &path) {
  std::map<std::string, std::vector<metrics::StrongRow>> out;
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto &e : fs::directory_iterator(path))
      if (e.path().extension() == ".tsv")
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto &f : files)
      out[f.stem().string()];
  } else {
    files.push_back(path);
  }
  for (const auto &f : files)
    for (auto &row : metrics::read_strong_tsv(f))
      out[clip_of(row.file)].push_back(std::move(row));
  return out;
}

int run_evaluate(const ConfigFlags &flags, const EvaluateArgs &a) {
  RunConfig c = flags.resolve();
  const fs::path out = require_out(c);
  write_text(out / "config.txt", c.serialize() + "pred=" + a.pred + "\ntruth=" + a.truth + "\n");

  std::vector<std::string> class_names;
  std::map<std::string, metrics::ClipEvents> clips;
  auto resolve_label = [&](const std::string &label) {
    const auto it = std::find(class_names.begin(), class_names.end(), label);
    if (it == class_names.end())
      throw std::runtime_error("unknown class label '" + label + "'");
    return static_cast<std::size_t>(it - class_names.begin());
  };

  const fs::path truth = a.truth;
  if (truth.extension() == ".tsv") {
    const auto rows = metrics::read_strong_tsv(truth);
    std::set<std::string> names;
    for (const auto &r : rows)
      names.insert(r.label);
    class_names.assign(names.begin(), names.end());
    for (const auto &r : rows) {
      auto &ce = clips[clip_of(r.file)];
      ce.duration = a.clip_seconds;
      ce.truth.push_back({resolve_label(r.label), r.onset, r.offset});
    }
  } else {
    const auto data = scape::load_manifest(truth);
    class_names = data.class_names;
    for (const auto &e : a.split.empty() ? data.entries : data.select(a.split)) {
      auto &ce = clips[e.id];
      ce.duration = audio::load_wav(e.audio).duration();
      if (e.strong)
        for (const auto &s : scape::load_strong(*e.strong, class_names))
          ce.truth.push_back(s.event);
    }
  }

  for (const auto &[id, rows] : read_predictions(a.pred)) {
    const auto it = clips.find(id);
    if (it == clips.end())
      throw std::runtime_error("predicted clip '" + id + "' has no reference");
    for (const auto &r : rows)
      it->second.pred.push_back({resolve_label(r.label), r.onset, r.offset});
  }

  std::map<std::string, metrics::TagSet> pred_tags, true_tags;
  for (auto &[id, ce] : clips) {
    auto &p = pred_tags[id];
    auto &t = true_tags[id];
    for (const auto &e : ce.pred)
      p.insert(e.label);
    for (const auto &e : ce.truth) {
      t.insert(e.label);
      ce.duration = std::max(ce.duration, e.offset);
    }
  }
  const std::size_t k = class_names.size();
  const auto tagging = metrics::tagging_score(pred_tags, true_tags, k);
  const auto segment = metrics::segment_score(clips, k, c.scoring.segment_seconds);
  const auto event = metrics::event_score(clips, k, c.scoring.collars);

  write_text(out / "report.csv", metrics::report_csv("tagging", tagging, class_names) +
                                     metrics::report_csv("segment", segment, class_names, false) +
                                     metrics::report_csv("event", event, class_names, false));
  const std::string text = metrics::report_text("tagging", tagging, class_names) + "\n" +
                           metrics::report_text("segment", segment, class_names) + "\n" +
                           metrics::report_text("event", event, class_names);
  write_text(out / "report.txt", text);
  std::cout << text;
  return 0;
}

// ----------------------------------------------------------------- ablate

int run_ablate(const ConfigFlags &flags, const std::string &study) {
  RunConfig c = flags.resolve();
  const auto variants = study_variants(study);
  const fs::path out = require_out(c);
  const auto data = require_data(c);
  with_classes(c.model, data);
  c.model.validate();
  write_text(out / "config.txt", c.serialize() + "study=" + study + "\n");

  const std::size_t threads = worker_count(c.threads);
  StudyInputs inputs;
  inputs.train = scape::load_clips(data, data.select("train"), threads, cache_dir(c));
  inputs.val = scape::load_clips(data, data.select("val"), threads, cache_dir(c));
  auto eval_entries = data.select("eval");
  if (eval_entries.empty()) {
    std::cout << "no eval split; scoring on the val split\n";
    eval_entries = data.select("val");
  }
  if (inputs.train.empty() || eval_entries.empty())
    throw std::runtime_error("dataset needs train clips and eval or val clips");
  inputs.eval = load_eval_set(data, eval_entries, threads, cache_dir(c));

  const auto rows = run_study(variants, c, inputs, threads, [](const std::string &line) {
    std::cout << line << "\n" << std::flush;
  });
  const fs::path csv = out / (study + ".csv");
  write_study_csv(csv, study, rows);
  for (const auto &r : rows)
    std::printf("%-10s tagging %.3f +- %.3f  segment %.3f +- %.3f  event %.3f +- %.3f\n",
                r.name.c_str(), r.tagging.mean, r.tagging.half_width, r.segment.mean,
                r.segment.half_width, r.event.mean, r.event.half_width);
  std::cout << "study: " << csv.string() << "\n";
  return 0;
}

// ------------------------------------------------------------------- plot

int run_plot(const std::string &input, const std::string &output, const std::string &title) {
  std::ifstream is(input);
  if (!is)
    throw std::runtime_error("cannot open '" + input + "'");
  std::string header;
  std::getline(is, header);
  is.close();
  std::string svg;
  if (header.rfind("epoch,", 0) == 0)
    svg = plot::loss_curves_svg(read_history_csv(input), title.empty() ? "Training loss" : title);
  else if (header.rfind("study,", 0) == 0)
    svg = plot::study_bars_svg(read_study_csv(input), title.empty() ? "Ablation study" : title);
  else
    throw std::runtime_error("'" + input + "' is neither a history nor a study CSV");
  const fs::path out = output;
  if (out.has_parent_path())
    fs::create_directories(out.parent_path());
  write_text(out, svg);
  std::cout << "plot: " << out.string() << "\n";
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Affinity mixup network toolkit for weakly supervised sound event detection"};
  app.require_subcommand(1);

  GenArgs gen;
  add_gendata(app, gen);

  ConfigFlags train_flags;
  auto *train_cmd = app.add_subcommand("train", "Train a model on a dataset manifest");
  train_flags.attach(*train_cmd);

  ConfigFlags predict_flags;
  PredictArgs predict;
  auto *predict_cmd = app.add_subcommand("predict", "Frame probabilities and decoded events");
  predict_flags.attach(*predict_cmd);
  predict_cmd->add_option("--checkpoint", predict.checkpoint, "Checkpoint file")->required();
  predict_cmd->add_option("--input", predict.input, "WAV file, manifest or dataset directory")
      ->required();
  predict_cmd->add_option("--split", predict.split, "Only clips of this split");
  predict_cmd->add_flag("--probs", predict.probs, "Also write t x c probability CSVs");

  ConfigFlags evaluate_flags;
  EvaluateArgs evaluate;
  auto *evaluate_cmd = app.add_subcommand("evaluate", "Score predicted events against references");
  evaluate_flags.attach(*evaluate_cmd);
  evaluate_cmd->add_option("--pred", evaluate.pred, "Event TSV or directory of per-clip TSVs")
      ->required();
  evaluate_cmd->add_option("--truth", evaluate.truth, "Strong TSV, manifest or dataset directory")
      ->required();
  evaluate_cmd->add_option("--split", evaluate.split, "Only clips of this split");
  evaluate_cmd
      ->add_option("--clip-seconds", evaluate.clip_seconds,
                   "Clip length when the reference is a bare TSV")
      ->capture_default_str();

  ConfigFlags ablate_flags;
  std::string study;
  auto *ablate_cmd = app.add_subcommand("ablate", "Run an ablation study over seeds");
  ablate_flags.attach(*ablate_cmd);
  ablate_cmd->add_option("--study", study, "Row set")
      ->required()
      ->check(CLI::IsMember({"placement", "tau", "grad"}));

  std::string plot_in, plot_out, plot_title;
  auto *plot_cmd = app.add_subcommand("plot", "Render a history or study CSV as SVG");
  plot_cmd->add_option("--input", plot_in, "History or study CSV")->required();
  plot_cmd->add_option("--out", plot_out, "SVG file")->required();
  plot_cmd->add_option("--title", plot_title, "Chart title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand("gendata"))
      return run_gendata(gen);
    if (*train_cmd)
      return run_train(train_flags);
    if (*predict_cmd)
      return run_predict(predict_flags, predict);
    if (*evaluate_cmd)
      return run_evaluate(evaluate_flags, evaluate);
    if (*ablate_cmd)
      return run_ablate(ablate_flags, study);
    if (*plot_cmd)
      return run_plot(plot_in, plot_out, plot_title);
  } catch (const UsageError &e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
