// SPDX-License-Identifier: Apache-2.0
#include "amn/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "amn/rng.hpp"
#include "text.hpp"

namespace amn {

std::string to_string(Pooling pooling) {
  return pooling == Pooling::max ? "max" : "linear_softmax";
}

Pooling parse_pooling(const std::string &text) {
  if (text == "linear_softmax")
    return Pooling::linear_softmax;
  if (text == "max")
    return Pooling::max;
  throw std::invalid_argument("unknown pooling '" + text + "' (expected linear_softmax, max)");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.conv_channels = {8, 16, 32};
  c.gru_hidden = 32;
  return c;
}

std::size_t ModelConfig::time_reduction() const {
  std::size_t r = 1;
  for (std::size_t f : time_down)
    r *= f;
  return r;
}

std::size_t ModelConfig::freq_reduction() const {
  std::size_t r = 1;
  for (std::size_t f : freq_down)
    r *= f;
  return r;
}

std::size_t ModelConfig::block_resolution(std::size_t i) const {
  std::size_t r = 1;
  for (std::size_t k = 0; k < i; ++k)
    r *= time_down[k];
  return r;
}

std::string ModelConfig::class_name(std::size_t k) const {
  if (k < class_names.size())
    return class_names[k];
  return "class" + std::to_string(k);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string &msg) { throw std::invalid_argument("model config: " + msg); };
  if (classes == 0)
    fail("classes must be positive");
  if (!class_names.empty() && class_names.size() != classes)
    fail("class_names has " + std::to_string(class_names.size()) + " entries for " +
         std::to_string(classes) + " classes");
  if (conv_channels.size() != 3 || time_down.size() != 3 || freq_down.size() != 3)
    fail("conv_channels, time_down and freq_down need exactly 3 entries");
  for (std::size_t i = 0; i < 3; ++i)
    if (conv_channels[i] == 0 || time_down[i] == 0 || freq_down[i] == 0)
      fail("block extents must be positive");
  if (kernel % 2 == 0)
    fail("kernel must be odd");
  if (time_reduction() != 4)
    fail("product of time_down must be 4 (two 2x up-sampling steps), got " +
         std::to_string(time_reduction()));
  if (freq_reduction() > mel_bands || mel_bands % freq_reduction() != 0)
    fail("freq_down product must divide the " + std::to_string(mel_bands) + " mel bands");
  if (lp_pool_p < 1.0)
    fail("lp_pool_p must be >= 1");
  if (gru_hidden == 0)
    fail("gru_hidden must be positive");
  am.validate();
  for (am::Site s : am.placement) {
    const std::size_t want =
        (s == am::Site::enc_half || s == am::Site::dec_half) ? std::size_t{2} : std::size_t{4};
    bool found = false;
    for (std::size_t i = 1; i < 3; ++i)
      found = found || block_resolution(i) == want;
    if (!found)
      fail("AM site " + am::to_string(s) + " needs a conv block at time resolution 1/" +
           std::to_string(want) + " but time_down is " + text::join(time_down));
  }
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "classes=" << classes << '\n';
  os << "class_names=" << text::join(class_names) << '\n';
  os << "mel_bands=" << mel_bands << '\n';
  os << "conv_channels=" << text::join(conv_channels) << '\n';
  os << "kernel=" << kernel << '\n';
  os << "time_down=" << text::join(time_down) << '\n';
  os << "freq_down=" << text::join(freq_down) << '\n';
  os << "lp_pool_p=" << text::format_double(lp_pool_p) << '\n';
  os << "gru_hidden=" << gru_hidden << '\n';
  os << "leaky_slope=" << text::format_double(leaky_slope) << '\n';
  os << "pooling=" << to_string(pooling) << '\n';
  os << "am.tau=" << text::format_double(am.tau) << '\n';
  os << "am.placement=" << am::placement_string(am.placement) << '\n';
  os << "am.grad_mode=" << am::to_string(am.grad_mode) << '\n';
  os << "am.encoder_adapt=" << am::to_string(am.encoder_adapt) << '\n';
  return os.str();
}

ModelConfig ModelConfig::deserialize(const std::string &content) {
  ModelConfig c;
  for (const auto &kv : text::parse_key_values(content, "model config")) {
    const auto &k = kv.key;
    const auto &v = kv.value;
    if (k == "classes")
      c.classes = text::parse_uint(k, v);
    else if (k == "class_names")
      c.class_names = v.empty() ? std::vector<std::string>{} : text::split(v, ',');
    else if (k == "mel_bands")
      c.mel_bands = text::parse_uint(k, v);
    else if (k == "conv_channels")
      c.conv_channels = text::parse_size_list(k, v);
    else if (k == "kernel")
      c.kernel = text::parse_uint(k, v);
    else if (k == "time_down")
      c.time_down = text::parse_size_list(k, v);
    else if (k == "freq_down")
      c.freq_down = text::parse_size_list(k, v);
    else if (k == "lp_pool_p")
      c.lp_pool_p = text::parse_double(k, v);
    else if (k == "gru_hidden")
      c.gru_hidden = text::parse_uint(k, v);
    else if (k == "leaky_slope")
      c.leaky_slope = text::parse_double(k, v);
    else if (k == "pooling")
      c.pooling = parse_pooling(v);
    else if (k == "am.tau")
      c.am.tau = text::parse_double(k, v);
    else if (k == "am.placement")
      c.am.placement = am::parse_placement(v);
    else if (k == "am.grad_mode")
      c.am.grad_mode = am::parse_grad_mode(v);
    else if (k == "am.encoder_adapt")
      c.am.encoder_adapt = am::parse_encoder_adapt(v);
    else
      throw std::invalid_argument("model config: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

Tensor &ModelParams::get(std::string_view name) {
  for (auto &[n, t] : entries)
    if (n == name)
      return t;
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

const Tensor &ModelParams::get(std::string_view name) const {
  return const_cast<ModelParams *>(this)->get(name);
}

bool ModelParams::contains(std::string_view name) const {
  return std::any_of(entries.begin(), entries.end(),
                     [&](const auto &e) { return e.first == name; });
}

std::vector<Tensor> ModelParams::trainable() const {
  std::vector<Tensor> out;
  for (const auto &e : entries)
    out.push_back(e.second);
  return out;
}

void ModelParams::zero_grad() {
  for (auto &e : entries)
    e.second.zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.batchnorm = batchnorm;
  for (const auto &[n, t] : entries)
    out.entries.emplace_back(n, t.clone());
  return out;
}

void ModelParams::quantize() {
  for (auto &e : entries)
    for (double &v : e.second.mutable_values())
      v = static_cast<float>(v);
  for (auto &bn : batchnorm) {
    for (double &v : bn.running_mean)
      v = static_cast<float>(v);
    for (double &v : bn.running_var)
      v = static_cast<float>(v);
  }
}

namespace {

std::string block_prefix(std::size_t i) { return "block" + std::to_string(i + 1); }

Tensor uniform_tensor(Rng &rng, Shape shape, double bound) {
  std::vector<double> v(shape_numel(shape));
  for (double &x : v)
    x = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor(std::move(shape), std::move(v), true);
}

/// Modified Gram-Schmidt on a seeded Gaussian matrix, row-wise.
std::vector<double> orthogonal_block(Rng &rng, std::size_t n) {
  std::vector<double> q(n * n);
  for (double &x : q)
    x = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    double *row = &q[i * n];
    for (std::size_t j = 0; j < i; ++j) {
      const double *prev = &q[j * n];
      double dot = 0.0;
      for (std::size_t k = 0; k < n; ++k)
        dot += row[k] * prev[k];
      for (std::size_t k = 0; k < n; ++k)
        row[k] -= dot * prev[k];
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      norm += row[k] * row[k];
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < n; ++k)
      row[k] /= norm;
  }
  return q;
}

GruWeights init_gru(Rng &rng, std::size_t d_in, std::size_t h) {
  GruWeights w;
  w.w_ih = uniform_tensor(rng, {3 * h, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in)));
  std::vector<double> whh(3 * h * h);
  for (std::size_t g = 0; g < 3; ++g) {
    auto q = orthogonal_block(rng, h);
    for (std::size_t i = 0; i < h * h; ++i)
      whh[g * h * h + i] = static_cast<float>(q[i]);
  }
  w.w_hh = Tensor({3 * h, h}, std::move(whh), true);
  w.b_ih = Tensor::zeros({3 * h}, true);
  w.b_hh = Tensor::zeros({3 * h}, true);
  return w;
}

std::size_t gru_input_width(const ModelConfig &c) {
  return c.conv_channels[2] * (c.mel_bands / c.freq_reduction());
}

} // namespace

ModelParams init_params(const ModelConfig &config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  Rng rng(seed);
  std::size_t in_ch = 1;
  const std::size_t k = config.kernel;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string pre = block_prefix(i);
    const std::size_t out_ch = config.conv_channels[i];
    p.entries.emplace_back(pre + ".bn.gamma", Tensor::full({in_ch}, 1.0, true));
    p.entries.emplace_back(pre + ".bn.beta", Tensor::zeros({in_ch}, true));
    p.entries.emplace_back(pre + ".conv.weight",
                           uniform_tensor(rng, {out_ch, in_ch, k, k},
                                          std::sqrt(6.0 / static_cast<double>(in_ch * k * k))));
    p.entries.emplace_back(pre + ".conv.bias", Tensor::zeros({out_ch}, true));
    p.batchnorm.push_back(BatchNormState::fresh(in_ch));
    in_ch = out_ch;
  }
  const std::size_t d_in = gru_input_width(config);
  const std::size_t h = config.gru_hidden;
  for (const char *dir : {"fwd", "bwd"}) {
    GruWeights w = init_gru(rng, d_in, h);
    const std::string pre = std::string("gru.") + dir;
    p.entries.emplace_back(pre + ".w_ih", w.w_ih);
    p.entries.emplace_back(pre + ".w_hh", w.w_hh);
    p.entries.emplace_back(pre + ".b_ih", w.b_ih);
    p.entries.emplace_back(pre + ".b_hh", w.b_hh);
  }
  p.entries.emplace_back("head.weight", uniform_tensor(rng, {2 * h, config.classes},
                                                       1.0 / std::sqrt(static_cast<double>(2 * h))));
  p.entries.emplace_back("head.bias", Tensor::zeros({config.classes}, true));

  // Separate stream so enabling AM leaves every other initial value intact.
  Rng am_rng(derive_seed(seed, 0xA11));
  for (std::size_t i = 1; i < 3; ++i) {
    const std::size_t res = config.block_resolution(i);
    const bool used = (res == 2 && config.am.uses_half()) || (res == 4 && config.am.uses_quarter());
    const std::size_t channels = config.conv_channels[i - 1];
    Tensor w = uniform_tensor(am_rng, {config.classes, channels},
                              std::sqrt(6.0 / static_cast<double>(channels)));
    if (used)
      p.entries.emplace_back(res == 2 ? "am.half.proj" : "am.quarter.proj", w);
  }
  return p;
}

namespace {

std::vector<std::size_t> ceil_div(const std::vector<std::size_t> &v, std::size_t d) {
  std::vector<std::size_t> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = (v[i] + d - 1) / d;
  return out;
}

Tensor pad_time(const Tensor &x, std::size_t target) {
  const std::size_t nb = x.dim(0), T = x.dim(1), C = x.dim(2);
  if (target == T)
    return x;
  auto xv = x.values();
  std::vector<double> out(nb * target * C, 0.0);
  for (std::size_t b = 0; b < nb; ++b)
    std::copy_n(&xv[b * T * C], T * C, &out[b * target * C]);
  return detail::record("pad_time", {nb, target, C}, std::move(out), {x},
                        [nb, T, C, target](std::span<const double> g, std::span<const double>,
                                           const detail::GradSink &in) {
                          auto gx = in[0];
                          for (std::size_t b = 0; b < nb; ++b)
                            for (std::size_t i = 0; i < T * C; ++i)
                              gx[b * T * C + i] += g[b * target * C + i];
                        });
}

Tensor crop_time(const Tensor &x, std::size_t keep) {
  const std::size_t nb = x.dim(0), T = x.dim(1), C = x.dim(2);
  if (keep == T)
    return x;
  auto xv = x.values();
  std::vector<double> out(nb * keep * C);
  for (std::size_t b = 0; b < nb; ++b)
    std::copy_n(&xv[b * T * C], keep * C, &out[b * keep * C]);
  return detail::record("crop_time", {nb, keep, C}, std::move(out), {x},
                        [nb, T, C, keep](std::span<const double> g, std::span<const double>,
                                         const detail::GradSink &in) {
                          auto gx = in[0];
                          for (std::size_t b = 0; b < nb; ++b)
                            for (std::size_t i = 0; i < keep * C; ++i)
                              gx[b * T * C + i] += g[b * keep * C + i];
                        });
}

} // namespace

FramePrediction forward(const ModelConfig &config, ModelParams &params, const Tensor &features,
                        Valid valid, Mode mode, ForwardTrace *trace) {
  if (features.rank() == 2) {
    if (!valid.empty() && valid.size() != 1)
      throw std::invalid_argument("forward: single clip takes at most one valid length");
    FramePrediction p = forward(config, params, reshape(features, {1, features.dim(0), features.dim(1)}),
                                valid, mode, trace);
    p.probs = reshape(p.probs, {p.probs.dim(1), p.probs.dim(2)});
    p.clip_probs = reshape(p.clip_probs, {p.clip_probs.dim(1)});
    return p;
  }
  if (features.rank() != 3 || features.dim(2) != config.mel_bands)
    throw std::invalid_argument("forward: expected [n x t x " + std::to_string(config.mel_bands) +
                                "] features, got " + shape_str(features.shape()));
  if (params.batchnorm.size() != 3)
    throw std::invalid_argument("forward: parameter set has no batch-norm state for 3 blocks");

  const std::size_t nb = features.dim(0), T = features.dim(1);
  const std::size_t R = config.time_reduction();
  std::vector<std::size_t> lengths(nb, T);
  if (!valid.empty()) {
    if (valid.size() != nb)
      throw std::invalid_argument("forward: " + std::to_string(valid.size()) +
                                  " valid lengths for batch of " + std::to_string(nb));
    for (std::size_t b = 0; b < nb; ++b) {
      if (valid[b] == 0 || valid[b] > T)
        throw std::invalid_argument("forward: valid length out of range");
      lengths[b] = valid[b];
    }
  }
  const std::size_t Tp = (T + R - 1) / R * R;
  for (std::size_t len : lengths)
    if ((len + R - 1) / R < 2)
      throw std::invalid_argument("forward: clip too short, needs at least " +
                                  std::to_string(R + 1) + " frames");

  const am::AmConfig &amc = config.am;
  Tensor x = reshape(pad_time(features, Tp), {nb, 1, Tp, config.mel_bands});
  std::optional<am::PathAffinities> at_half, at_quarter;

  for (std::size_t i = 0; i < 3; ++i) {
    const std::string pre = block_prefix(i);
    const std::size_t res = config.block_resolution(i);
    const auto v_in = ceil_div(lengths, res);

    std::optional<am::PathAffinities> *slot = nullptr;
    if (i > 0 && res == 2 && amc.uses_half())
      slot = &at_half;
    else if (i > 0 && res == 4 && amc.uses_quarter())
      slot = &at_quarter;
    if (slot && !slot->has_value()) {
      const Tensor &w = params.get(res == 2 ? "am.half.proj" : "am.quarter.proj");
      am::AffinityMatrix a = am::compute_affinity(am::project_to_classes(x, w), amc.tau, v_in);
      if (trace) {
        (res == 2 ? trace->half_affinity_builds : trace->quarter_affinity_builds) += 1;
        (res == 2 ? trace->half : trace->quarter) = a;
      }
      *slot = am::apply_grad_mode(a, amc.grad_mode);
    }

    Tensor y = batchnorm2d(x, params.get(pre + ".bn.gamma"), params.get(pre + ".bn.beta"),
                           params.batchnorm[i], mode, v_in);
    y = conv2d_same(y, params.get(pre + ".conv.weight"), params.get(pre + ".conv.bias"));
    y = leaky_relu(y, config.leaky_slope);
    const bool mix_here = slot && amc.placement.contains(res == 2 ? am::Site::enc_half
                                                                  : am::Site::enc_quarter);
    if (mix_here) {
      Tensor a_tilde = am::adapt_for_encoder((*slot)->encoder, y.dim(1), amc.encoder_adapt);
      y = am::mixup_encoder(y, a_tilde);
    }
    y = mask_frames(y, 2, v_in);
    x = lp_pool(y, config.lp_pool_p, config.time_down[i], config.freq_down[i]);
  }

  const auto v_quarter = ceil_div(lengths, 4);
  const auto v_half = ceil_div(lengths, 2);
  BiGruWeights gru{{params.get("gru.fwd.w_ih"), params.get("gru.fwd.w_hh"),
                    params.get("gru.fwd.b_ih"), params.get("gru.fwd.b_hh")},
                   {params.get("gru.bwd.w_ih"), params.get("gru.bwd.w_hh"),
                    params.get("gru.bwd.b_ih"), params.get("gru.bwd.b_hh")}};
  Tensor h = bigru(to_sequence(x), gru, v_quarter);
  const std::size_t Tq = h.dim(1), C = config.classes;
  Tensor logits = add_rowvec(matmul(reshape(h, {nb * Tq, h.dim(2)}), params.get("head.weight")),
                             params.get("head.bias"));
  Tensor z = sigmoid(reshape(logits, {nb, Tq, C}));

  if (at_quarter && amc.placement.contains(am::Site::dec_quarter))
    z = am::mixup_decoder(z, at_quarter->decoder);
  z = linear_upsample_time(z, Tp / 2, v_quarter, v_half);
  if (at_half && amc.placement.contains(am::Site::dec_half))
    z = am::mixup_decoder(z, at_half->decoder);
  Tensor probs = crop_time(linear_upsample_time(z, Tp, v_half, lengths), T);

  FramePrediction out;
  out.clip_probs = pool(config.pooling, probs, lengths);
  out.probs = probs;
  out.valid_frames = lengths;
  return out;
}

FramePrediction forward(const ModelConfig &config, ModelParams &params,
                        const audio::MelSpectrogram &features, Mode mode) {
  return forward(config, params, features.frames, {}, mode);
}

namespace {

struct PoolLayout {
  std::size_t nb, T, C;
  bool single;
};

PoolLayout pool_layout(const char *op, const Tensor &q, Valid valid) {
  if (q.rank() == 2)
    return {1, q.dim(0), q.dim(1), true};
  if (q.rank() != 3)
    throw std::invalid_argument(std::string(op) + ": expected [t x c] or [n x t x c], got " +
                                shape_str(q.shape()));
  if (!valid.empty() && valid.size() != q.dim(0))
    throw std::invalid_argument(std::string(op) + ": valid count does not match batch");
  return {q.dim(0), q.dim(1), q.dim(2), false};
}

std::size_t frames_for(Valid valid, std::size_t b, std::size_t T) {
  return valid.empty() ? T : std::min(valid[b], T);
}

} // namespace

Tensor pool_linear_softmax(const Tensor &q, Valid valid) {
  const auto L = pool_layout("pool_linear_softmax", q, valid);
  auto qv = q.values();
  std::vector<double> out(L.nb * L.C, 0.0), s1(L.nb * L.C, 0.0), s2(L.nb * L.C, 0.0);
  std::vector<std::size_t> frames(L.nb);
  for (std::size_t b = 0; b < L.nb; ++b) {
    frames[b] = frames_for(valid, b, L.T);
    std::vector<double> top(L.C, 0.0);
    for (std::size_t t = 0; t < frames[b]; ++t)
      for (std::size_t k = 0; k < L.C; ++k) {
        const double v = qv[(b * L.T + t) * L.C + k];
        s1[b * L.C + k] += v;
        s2[b * L.C + k] += v * v;
        top[k] = t == 0 ? v : std::max(top[k], v);
      }
    // A q-weighted mean of the column; the clamp only removes rounding above the max.
    for (std::size_t k = 0; k < L.C; ++k)
      out[b * L.C + k] =
          s1[b * L.C + k] == 0.0 ? 0.0 : std::min(s2[b * L.C + k] / s1[b * L.C + k], top[k]);
  }
  Shape shape = L.single ? Shape{L.C} : Shape{L.nb, L.C};
  return detail::record(
      "pool_linear_softmax", std::move(shape), std::move(out), {q},
      [q, L, s1 = std::move(s1), s2 = std::move(s2), frames = std::move(frames)](
          std::span<const double> g, std::span<const double>, const detail::GradSink &in) {
        auto qv = q.values();
        auto gq = in[0];
        for (std::size_t b = 0; b < L.nb; ++b)
          for (std::size_t k = 0; k < L.C; ++k) {
            const double a = s1[b * L.C + k], s = s2[b * L.C + k];
            if (a <= 0.0)
              continue;
            const double gk = g[b * L.C + k];
            for (std::size_t t = 0; t < frames[b]; ++t) {
              const std::size_t i = (b * L.T + t) * L.C + k;
              gq[i] += gk * (2.0 * qv[i] * a - s) / (a * a);
            }
          }
      });
}

Tensor pool_max(const Tensor &q, Valid valid) {
  const auto L = pool_layout("pool_max", q, valid);
  auto qv = q.values();
  std::vector<double> out(L.nb * L.C, 0.0);
  std::vector<std::size_t> arg(L.nb * L.C, 0);
  for (std::size_t b = 0; b < L.nb; ++b) {
    const std::size_t n = frames_for(valid, b, L.T);
    for (std::size_t k = 0; k < L.C; ++k) {
      std::size_t best = 0;
      for (std::size_t t = 1; t < n; ++t)
        if (qv[(b * L.T + t) * L.C + k] > qv[(b * L.T + best) * L.C + k])
          best = t;
      arg[b * L.C + k] = (b * L.T + best) * L.C + k;
      out[b * L.C + k] = qv[arg[b * L.C + k]];
    }
  }
  Shape shape = L.single ? Shape{L.C} : Shape{L.nb, L.C};
  return detail::record("pool_max", std::move(shape), std::move(out), {q},
                        [arg = std::move(arg)](std::span<const double> g,
                                               std::span<const double>,
                                               const detail::GradSink &in) {
                          auto gq = in[0];
                          for (std::size_t i = 0; i < arg.size(); ++i)
                            gq[arg[i]] += g[i];
                        });
}

Tensor pool(Pooling kind, const Tensor &q, Valid valid) {
  return kind == Pooling::max ? pool_max(q, valid) : pool_linear_softmax(q, valid);
}

} // namespace amn
