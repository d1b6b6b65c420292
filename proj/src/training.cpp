// SPDX-License-Identifier: Apache-2.0
#include "amn/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "amn/rng.hpp"
#include "text.hpp"

namespace amn {

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.batch_size = 8;
  c.lr = 1e-3;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr))
    throw std::invalid_argument("train config: lr must be positive");
  if (weight_decay < 0.0)
    throw std::invalid_argument("train config: weight_decay must be >= 0");
  if (batch_size == 0)
    throw std::invalid_argument("train config: batch_size must be >= 1");
  if (plateau_patience == 0)
    throw std::invalid_argument("train config: plateau_patience must be >= 1");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0))
    throw std::invalid_argument("train config: plateau_factor must lie in (0, 1)");
}

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << "train.lr=" << text::format_double(lr) << '\n';
  os << "train.weight_decay=" << text::format_double(weight_decay) << '\n';
  os << "train.batch_size=" << batch_size << '\n';
  os << "train.max_epochs=" << max_epochs << '\n';
  os << "train.plateau_patience=" << plateau_patience << '\n';
  os << "train.plateau_factor=" << text::format_double(plateau_factor) << '\n';
  os << "train.plateau_threshold=" << text::format_double(plateau_threshold) << '\n';
  os << "train.seed=" << seed << '\n';
  os << "train.shuffle=" << (shuffle ? "true" : "false") << '\n';
  return os.str();
}

Batch collate(std::span<const LabeledClip *const> clips) {
  if (clips.empty())
    throw std::invalid_argument("collate: empty batch");
  const std::size_t n = clips.size();
  const std::size_t mel = clips[0]->features.dim(1);
  const std::size_t classes = clips[0]->labels.size();
  std::size_t t_max = 0;
  for (const LabeledClip *c : clips) {
    if (c->features.rank() != 2 || c->features.dim(1) != mel)
      throw std::invalid_argument("collate: clip '" + c->id + "' has features " +
                                  shape_str(c->features.shape()));
    if (c->labels.size() != classes)
      throw std::invalid_argument("collate: clip '" + c->id + "' has a different class count");
    t_max = std::max(t_max, c->features.dim(0));
  }
  Batch b;
  std::vector<double> feats(n * t_max * mel, 0.0), labels(n * classes);
  for (std::size_t i = 0; i < n; ++i) {
    auto v = clips[i]->features.values();
    std::copy(v.begin(), v.end(), feats.begin() + static_cast<std::ptrdiff_t>(i * t_max * mel));
    std::copy(clips[i]->labels.begin(), clips[i]->labels.end(),
              labels.begin() + static_cast<std::ptrdiff_t>(i * classes));
    b.valid_lengths.push_back(clips[i]->features.dim(0));
  }
  b.features = Tensor({n, t_max, mel}, std::move(feats));
  b.labels = Tensor({n, classes}, std::move(labels));
  return b;
}

Batch collate(std::span<const LabeledClip> clips) {
  std::vector<const LabeledClip *> ptrs;
  for (const auto &c : clips)
    ptrs.push_back(&c);
  return collate(std::span<const LabeledClip *const>(ptrs));
}

Tensor bce_loss(const Tensor &probs, const Tensor &labels) {
  if (probs.shape() != labels.shape())
    throw std::invalid_argument("bce_loss: shape mismatch " + shape_str(probs.shape()) + " vs " +
                                shape_str(labels.shape()));
  constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
  auto p = probs.values();
  auto y = labels.values();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(p[i], lo, hi);
    total -= y[i] * std::log(q) + (1.0 - y[i]) * std::log(1.0 - q);
  }
  return detail::record(
      "bce_loss", {}, {total / n}, {probs},
      [probs, labels, n](std::span<const double> g, std::span<const double>,
                         const detail::GradSink &in) {
        auto p = probs.values();
        auto y = labels.values();
        auto gp = in[0];
        for (std::size_t i = 0; i < p.size(); ++i) {
          if (p[i] < lo || p[i] > hi)
            continue; // clamped region is flat
          gp[i] += g[0] * (-y[i] / p[i] + (1.0 - y[i]) / (1.0 - p[i])) / n;
        }
      });
}

void adamw_step(std::span<Tensor> params, AdamState &state, const AdamHyper &h) {
  if (state.m.empty()) {
    for (const Tensor &p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adamw_step: optimizer state tracks a different parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].mutable_values();
    auto g = params[k].grad();
    auto &m = state.m[k];
    auto &v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= h.lr * h.weight_decay * w[i];
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience,
                                   double threshold)
    : lr_(lr), factor_(factor), patience_(patience), threshold_(threshold) {
  if (!(lr > 0.0) || !(factor > 0.0 && factor < 1.0) || patience == 0)
    throw std::invalid_argument("PlateauScheduler: need lr > 0, 0 < factor < 1, patience >= 1");
}

double PlateauScheduler::update(double loss) {
  if (loss < best_ - threshold_) {
    best_ = loss;
    bad_ = 0;
  } else if (++bad_ >= patience_) {
    lr_ *= factor_;
    bad_ = 0;
  }
  return lr_;
}

double evaluate_loss(const ModelConfig &model, ModelParams &params,
                     std::span<const LabeledClip> clips) {
  if (clips.empty())
    return std::numeric_limits<double>::quiet_NaN();
  NoGradGuard guard;
  double total = 0.0;
  for (const auto &c : clips) {
    FramePrediction p = forward(model, params, c.features, {}, Mode::eval);
    total += bce_loss(p.clip_probs, Tensor({c.labels.size()}, c.labels)).item();
  }
  return total / static_cast<double>(clips.size());
}

std::vector<std::vector<double>> predict_clip_probs(const ModelConfig &model, ModelParams &params,
                                                    std::span<const LabeledClip> clips) {
  NoGradGuard guard;
  std::vector<std::vector<double>> out;
  for (const auto &c : clips) {
    const FramePrediction p = forward(model, params, c.features, {}, Mode::eval);
    auto v = p.clip_probs.values();
    out.emplace_back(v.begin(), v.end());
  }
  return out;
}

TrainResult train(std::span<const LabeledClip> train_set, std::span<const LabeledClip> val_set,
                  const ModelConfig &model, const TrainConfig &cfg, const EpochCallback &on_epoch) {
  model.validate();
  cfg.validate();
  if (train_set.empty())
    throw std::invalid_argument("train: the training split is empty");
  for (const auto &c : train_set)
    if (c.labels.size() != model.classes)
      throw std::invalid_argument("train: clip '" + c.id + "' has " +
                                  std::to_string(c.labels.size()) + " labels, model has " +
                                  std::to_string(model.classes) + " classes");

  TrainResult result;
  ModelParams params = init_params(model, cfg.seed);
  params.quantize();
  std::vector<Tensor> tensors = params.trainable();
  AdamState adam;
  PlateauScheduler sched(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold);
  Rng order_rng(derive_seed(cfg.seed, 0x5EED));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double best_loss = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    if (cfg.shuffle)
      order_rng.shuffle(order);
    const double lr = sched.lr();
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      std::vector<const LabeledClip *> members;
      for (std::size_t i = start; i < stop; ++i)
        members.push_back(&train_set[order[i]]);
      Batch batch = collate(std::span<const LabeledClip *const>(members));
      params.zero_grad();
      FramePrediction pred =
          forward(model, params, batch.features, batch.valid_lengths, Mode::train);
      Tensor loss = bce_loss(pred.clip_probs, batch.labels);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw DivergenceError("training diverged: non-finite loss at epoch " +
                              std::to_string(epoch));
      backward(loss);
      adamw_step(tensors, adam, {lr, cfg.weight_decay});
      params.quantize();
      loss_sum += value * static_cast<double>(members.size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.val_loss = evaluate_loss(model, params, val_set);
    rec.lr = lr;
    if (!std::isfinite(rec.train_loss))
      throw DivergenceError("training diverged at epoch " + std::to_string(epoch));
    result.history.push_back(rec);

    const double monitored = val_set.empty() ? rec.train_loss : rec.val_loss;
    if (monitored < best_loss) {
      best_loss = monitored;
      result.best = params.clone();
      result.best_epoch = epoch;
    }
    sched.update(monitored);
    if (on_epoch && !on_epoch(rec, params))
      break;
  }
  if (result.best_epoch == 0)
    result.best = params.clone();
  result.last = params.clone();
  return result;
}

void write_history_csv(const std::filesystem::path &path, std::span<const EpochRecord> history) {
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("cannot write '" + path.string() + "'");
  os << "epoch,train_loss,val_loss,lr\n";
  for (const auto &r : history)
    os << r.epoch << ',' << text::format_double(r.train_loss) << ','
       << text::format_double(r.val_loss) << ',' << text::format_double(r.lr) << '\n';
}

std::vector<EpochRecord> read_history_csv(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is)
    throw std::runtime_error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || text::trim(line) != "epoch,train_loss,val_loss,lr")
    throw std::runtime_error(path.string() + ":1: expected header epoch,train_loss,val_loss,lr");
  std::vector<EpochRecord> out;
  std::size_t n = 1;
  while (std::getline(is, line)) {
    ++n;
    if (text::trim(line).empty())
      continue;
    auto f = text::split(text::trim(line), ',');
    if (f.size() != 4)
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": expected 4 fields");
    try {
      EpochRecord r;
      r.epoch = text::parse_uint("epoch", f[0]);
      r.train_loss = text::parse_double("train_loss", f[1]);
      r.val_loss = f[2] == "nan" || f[2] == "-nan" ? std::numeric_limits<double>::quiet_NaN()
                                                   : text::parse_double("val_loss", f[2]);
      r.lr = text::parse_double("lr", f[3]);
      out.push_back(r);
    } catch (const std::invalid_argument &e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

} // namespace amn
