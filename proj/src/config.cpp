// SPDX-License-Identifier: Apache-2.0
#include "amn/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "text.hpp"

namespace amn {

void ScoringConfig::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw std::invalid_argument("metric.threshold must lie in (0, 1)");
  if (median_window % 2 == 0)
    throw std::invalid_argument("metric.median_window must be odd");
  if (!(segment_seconds > 0.0))
    throw std::invalid_argument("metric.segment_seconds must be positive");
  if (collars.onset < 0.0 || collars.offset_min < 0.0 || collars.offset_fraction < 0.0)
    throw std::invalid_argument("metric collars must be non-negative");
}

namespace {

struct Field {
  std::string help;
  std::function<std::string(const RunConfig &)> get;
  std::function<void(RunConfig &, const std::string &, const std::string &)> set;
};

std::string list_str(const std::vector<std::size_t> &v) { return text::join(v); }

template <typename T> std::string num(T v) {
  if constexpr (std::is_floating_point_v<T>)
    return text::format_double(v);
  else
    return std::to_string(v);
}

const std::vector<std::pair<std::string, Field>> &fields() {
  using S = const std::string &;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"preset",
       {"parameter preset: desk (small, CPU minutes) or full",
        [](const RunConfig &c) { return c.preset; },
        [](RunConfig &c, S, S v) {
          if (v != "desk" && v != "full")
            throw std::invalid_argument("preset must be desk or full, got '" + v + "'");
          c.preset = v;
        }}},
      {"seed",
       {"random seed for initialization and shuffling",
        [](const RunConfig &c) { return num(c.train.seed); },
        [](RunConfig &c, S k, S v) { c.train.seed = text::parse_uint(k, v); }}},
      {"seeds",
       {"number of seeds per ablation row",
        [](const RunConfig &c) { return num(c.seeds); },
        [](RunConfig &c, S k, S v) { c.seeds = text::parse_uint(k, v); }}},
      {"threads",
       {"worker threads (0 = all cores; AMN_THREADS caps it)",
        [](const RunConfig &c) { return num(c.threads); },
        [](RunConfig &c, S k, S v) { c.threads = text::parse_uint(k, v); }}},
      {"data",
       {"dataset manifest or directory", [](const RunConfig &c) { return c.data; },
        [](RunConfig &c, S, S v) { c.data = v; }}},
      {"out",
       {"output directory", [](const RunConfig &c) { return c.out; },
        [](RunConfig &c, S, S v) { c.out = v; }}},
      {"cache",
       {"feature cache directory (empty = none)", [](const RunConfig &c) { return c.cache; },
        [](RunConfig &c, S, S v) { c.cache = v; }}},
      {"model.conv_channels",
       {"output channels of the three conv blocks",
        [](const RunConfig &c) { return list_str(c.model.conv_channels); },
        [](RunConfig &c, S k, S v) { c.model.conv_channels = text::parse_size_list(k, v); }}},
      {"model.kernel",
       {"square conv kernel size (odd)", [](const RunConfig &c) { return num(c.model.kernel); },
        [](RunConfig &c, S k, S v) { c.model.kernel = text::parse_uint(k, v); }}},
      {"model.time_down",
       {"time down-sampling after each block",
        [](const RunConfig &c) { return list_str(c.model.time_down); },
        [](RunConfig &c, S k, S v) { c.model.time_down = text::parse_size_list(k, v); }}},
      {"model.freq_down",
       {"frequency down-sampling after each block",
        [](const RunConfig &c) { return list_str(c.model.freq_down); },
        [](RunConfig &c, S k, S v) { c.model.freq_down = text::parse_size_list(k, v); }}},
      {"model.lp_pool_p",
       {"exponent of the Lp down-sampling", [](const RunConfig &c) { return num(c.model.lp_pool_p); },
        [](RunConfig &c, S k, S v) { c.model.lp_pool_p = text::parse_double(k, v); }}},
      {"model.gru_hidden",
       {"GRU hidden units per direction",
        [](const RunConfig &c) { return num(c.model.gru_hidden); },
        [](RunConfig &c, S k, S v) { c.model.gru_hidden = text::parse_uint(k, v); }}},
      {"model.leaky_slope",
       {"negative-side slope of the leaky ReLU",
        [](const RunConfig &c) { return num(c.model.leaky_slope); },
        [](RunConfig &c, S k, S v) { c.model.leaky_slope = text::parse_double(k, v); }}},
      {"model.pooling",
       {"clip pooling: linear_softmax or max",
        [](const RunConfig &c) { return to_string(c.model.pooling); },
        [](RunConfig &c, S, S v) { c.model.pooling = parse_pooling(v); }}},
      {"am.placement",
       {"AM sites: none, full, enc, dec or a list of enc@1/2,enc@1/4,dec@1/2,dec@1/4",
        [](const RunConfig &c) { return am::placement_string(c.model.am.placement); },
        [](RunConfig &c, S, S v) { c.model.am.placement = am::parse_placement(v); }}},
      {"am.tau",
       {"affinity temperature", [](const RunConfig &c) { return num(c.model.am.tau); },
        [](RunConfig &c, S k, S v) { c.model.am.tau = text::parse_double(k, v); }}},
      {"am.grad_mode",
       {"gradient paths into the affinity: full, enc_only, dec_only, none",
        [](const RunConfig &c) { return am::to_string(c.model.am.grad_mode); },
        [](RunConfig &c, S, S v) { c.model.am.grad_mode = am::parse_grad_mode(v); }}},
      {"am.encoder_adapt",
       {"encoder affinity adaptation: mean, exp_normalized, exp_literal",
        [](const RunConfig &c) { return am::to_string(c.model.am.encoder_adapt); },
        [](RunConfig &c, S, S v) { c.model.am.encoder_adapt = am::parse_encoder_adapt(v); }}},
      {"train.lr",
       {"initial learning rate", [](const RunConfig &c) { return num(c.train.lr); },
        [](RunConfig &c, S k, S v) { c.train.lr = text::parse_double(k, v); }}},
      {"train.weight_decay",
       {"decoupled weight decay", [](const RunConfig &c) { return num(c.train.weight_decay); },
        [](RunConfig &c, S k, S v) { c.train.weight_decay = text::parse_double(k, v); }}},
      {"train.batch_size",
       {"clips per batch", [](const RunConfig &c) { return num(c.train.batch_size); },
        [](RunConfig &c, S k, S v) { c.train.batch_size = text::parse_uint(k, v); }}},
      {"train.max_epochs",
       {"epoch budget", [](const RunConfig &c) { return num(c.train.max_epochs); },
        [](RunConfig &c, S k, S v) { c.train.max_epochs = text::parse_uint(k, v); }}},
      {"train.plateau_patience",
       {"epochs without improvement before the rate drops",
        [](const RunConfig &c) { return num(c.train.plateau_patience); },
        [](RunConfig &c, S k, S v) { c.train.plateau_patience = text::parse_uint(k, v); }}},
      {"train.plateau_factor",
       {"learning-rate multiplier on a plateau",
        [](const RunConfig &c) { return num(c.train.plateau_factor); },
        [](RunConfig &c, S k, S v) { c.train.plateau_factor = text::parse_double(k, v); }}},
      {"train.plateau_threshold",
       {"minimum loss decrease that counts as improvement",
        [](const RunConfig &c) { return num(c.train.plateau_threshold); },
        [](RunConfig &c, S k, S v) { c.train.plateau_threshold = text::parse_double(k, v); }}},
      {"train.shuffle",
       {"reshuffle clips every epoch",
        [](const RunConfig &c) { return std::string(c.train.shuffle ? "true" : "false"); },
        [](RunConfig &c, S k, S v) { c.train.shuffle = text::parse_bool(k, v); }}},
      {"metric.threshold",
       {"decision threshold for tags and frames",
        [](const RunConfig &c) { return num(c.scoring.threshold); },
        [](RunConfig &c, S k, S v) { c.scoring.threshold = text::parse_double(k, v); }}},
      {"metric.median_window",
       {"median filter length in frames (odd)",
        [](const RunConfig &c) { return num(c.scoring.median_window); },
        [](RunConfig &c, S k, S v) { c.scoring.median_window = text::parse_uint(k, v); }}},
      {"metric.segment_seconds",
       {"segment length for segment scores",
        [](const RunConfig &c) { return num(c.scoring.segment_seconds); },
        [](RunConfig &c, S k, S v) { c.scoring.segment_seconds = text::parse_double(k, v); }}},
      {"metric.onset_collar",
       {"onset tolerance in seconds", [](const RunConfig &c) { return num(c.scoring.collars.onset); },
        [](RunConfig &c, S k, S v) { c.scoring.collars.onset = text::parse_double(k, v); }}},
      {"metric.offset_collar",
       {"minimum offset tolerance in seconds",
        [](const RunConfig &c) { return num(c.scoring.collars.offset_min); },
        [](RunConfig &c, S k, S v) { c.scoring.collars.offset_min = text::parse_double(k, v); }}},
      {"metric.offset_fraction",
       {"offset tolerance as a fraction of the true duration",
        [](const RunConfig &c) { return num(c.scoring.collars.offset_fraction); },
        [](RunConfig &c, S k, S v) {
          c.scoring.collars.offset_fraction = text::parse_double(k, v);
        }}},
  };
  return table;
}

const Field &field(const std::string &key) {
  for (const auto &[name, f] : fields())
    if (name == key)
      return f;
  throw std::invalid_argument("unknown config key '" + key + "'");
}

} // namespace

const std::vector<RunConfig::Key> &RunConfig::keys() {
  static const std::vector<Key> out = [] {
    std::vector<Key> k;
    for (const auto &[name, f] : fields())
      k.push_back({name, f.help});
    return k;
  }();
  return out;
}

RunConfig RunConfig::for_preset(const std::string &preset) {
  RunConfig c;
  if (preset == "full") {
    c.preset = "full";
    c.model = ModelConfig{};
    c.train = TrainConfig{};
  } else if (preset != "desk") {
    throw std::invalid_argument("preset must be desk or full, got '" + preset + "'");
  }
  return c;
}

void RunConfig::set(const std::string &key, const std::string &value) {
  field(key).set(*this, key, value);
}

std::string RunConfig::get(const std::string &key) const { return field(key).get(*this); }

void RunConfig::validate() const {
  ModelConfig m = model;
  m.class_names.clear();
  m.validate();
  train.validate();
  scoring.validate();
  if (seeds == 0)
    throw std::invalid_argument("seeds must be >= 1");
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  for (const auto &[name, f] : fields())
    os << name << '=' << f.get(*this) << '\n';
  return os.str();
}

RunConfig RunConfig::resolve(const Pairs &file, const Pairs &flags) {
  std::string preset = "desk";
  for (const auto *src : {&file, &flags})
    for (const auto &[k, v] : *src)
      if (k == "preset")
        preset = v;
  RunConfig c = for_preset(preset);
  for (const auto *src : {&file, &flags})
    for (const auto &[k, v] : *src)
      c.set(k, v);
  return c;
}

RunConfig::Pairs RunConfig::read_file(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  Pairs out;
  for (const auto &kv : text::parse_key_values(ss.str(), path.string())) {
    try {
      field(kv.key);
    } catch (const std::invalid_argument &e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(kv.line) + ": " +
                                  e.what());
    }
    out.emplace_back(kv.key, kv.value);
  }
  return out;
}

} // namespace amn
