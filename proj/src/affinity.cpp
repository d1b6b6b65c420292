// SPDX-License-Identifier: Apache-2.0
#include "amn/affinity.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace amn::am {

bool AmConfig::uses_half() const {
  return placement.contains(Site::enc_half) || placement.contains(Site::dec_half);
}

bool AmConfig::uses_quarter() const {
  return placement.contains(Site::enc_quarter) || placement.contains(Site::dec_quarter);
}

void AmConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw std::invalid_argument("am.tau must be positive, got " + std::to_string(tau));
}

Tensor project_to_classes(const Tensor &x, const Tensor &weight) {
  if (x.rank() < 3 || weight.rank() != 2)
    throw std::invalid_argument("project_to_classes: expected [.. b x t x f] and [c x b], got " +
                                shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  if (weight.dim(1) != x.dim(x.rank() - 3))
    throw std::invalid_argument("project_to_classes: channel mismatch, feature " +
                                shape_str(x.shape()) + " vs projection " +
                                shape_str(weight.shape()));
  return channel_mix(x, weight);
}

AffinityMatrix compute_affinity(const Tensor &x_tilde, double tau, Valid valid) {
  if (!(tau > 0.0))
    throw std::invalid_argument("compute_affinity: tau must be positive, got " +
                                std::to_string(tau));
  if (x_tilde.rank() < 3)
    throw std::invalid_argument("compute_affinity: expected [.. c x t x f], got " +
                                shape_str(x_tilde.shape()));
  const std::size_t r = x_tilde.rank();
  const double f = static_cast<double>(x_tilde.dim(r - 1));
  Tensor logits = scale(pairwise_sqdist(x_tilde), -1.0 / (tau * std::sqrt(f)));
  return AffinityMatrix{softmax_lastdim(logits, valid), tau, x_tilde.dim(r - 2),
                        std::vector<std::size_t>(valid.begin(), valid.end())};
}

Tensor adapt_for_encoder(const AffinityMatrix &affinity, std::size_t channels, EncoderAdapt how) {
  if (channels == 0)
    throw std::invalid_argument("adapt_for_encoder: channel count must be >= 1");
  const Tensor &a = affinity.weights;
  const std::size_t class_axis = a.rank() - 3;
  if (how == EncoderAdapt::mean)
    return repeat_axis(mean_axis(a, class_axis), class_axis, channels);
  Tensor avg = mean_axis(exp(a), class_axis);
  // exp(0) = 1 would otherwise hand weight to padded source frames.
  if (!affinity.valid.empty())
    avg = mask_frames(avg, avg.rank() - 1, affinity.valid);
  if (how == EncoderAdapt::exp_normalized)
    avg = normalize_lastdim(avg);
  return repeat_axis(avg, class_axis, channels);
}

Tensor adapt_for_encoder(const AffinityMatrix &affinity, std::size_t channels, bool normalize) {
  return adapt_for_encoder(affinity, channels,
                           normalize ? EncoderAdapt::exp_normalized : EncoderAdapt::exp_literal);
}

Tensor mixup_encoder(const Tensor &x_prime, const Tensor &a_tilde) {
  if (x_prime.rank() < 3 || a_tilde.rank() != x_prime.rank())
    throw std::invalid_argument("mixup_encoder: expected [.. b x t x f] and [.. b x t x t], got " +
                                shape_str(x_prime.shape()) + " and " +
                                shape_str(a_tilde.shape()));
  const std::size_t r = x_prime.rank();
  if (a_tilde.dim(r - 1) != x_prime.dim(r - 2) || a_tilde.dim(r - 2) != x_prime.dim(r - 2))
    throw std::invalid_argument("mixup_encoder: resolution mismatch, affinity " +
                                shape_str(a_tilde.shape()) + " vs feature " +
                                shape_str(x_prime.shape()));
  return bmm(a_tilde, x_prime);
}

Tensor mixup_decoder(const Tensor &z_prime, const AffinityMatrix &affinity) {
  const Tensor &a = affinity.weights;
  if (z_prime.rank() < 2 || a.rank() != z_prime.rank() + 1)
    throw std::invalid_argument("mixup_decoder: expected [.. t x c] and [.. c x t x t], got " +
                                shape_str(z_prime.shape()) + " and " + shape_str(a.shape()));
  const std::size_t r = z_prime.rank();
  const std::size_t T = z_prime.dim(r - 2), C = z_prime.dim(r - 1);
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != z_prime.dim(i))
      throw std::invalid_argument("mixup_decoder: batch extents differ");
  if (a.dim(r - 2) != C || a.dim(r - 1) != T || a.dim(r) != T)
    throw std::invalid_argument("mixup_decoder: resolution mismatch, affinity " +
                                shape_str(a.shape()) + " vs feature " +
                                shape_str(z_prime.shape()));
  const std::size_t batch = z_prime.numel() / (T * C);
  auto zv = z_prime.values(), av = a.values();
  std::vector<double> out(zv.size(), 0.0);
  for (std::size_t q = 0; q < batch; ++q)
    for (std::size_t k = 0; k < C; ++k) {
      const double *A = &av[(q * C + k) * T * T];
      for (std::size_t i = 0; i < T; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < T; ++j)
          s += A[i * T + j] * zv[(q * T + j) * C + k];
        out[(q * T + i) * C + k] = s;
      }
    }
  return detail::record(
      "mixup_decoder", z_prime.shape(), std::move(out), {z_prime, a},
      [z_prime, a, batch, T, C](std::span<const double> g, std::span<const double>,
                                const detail::GradSink &in) {
        auto zv = z_prime.values(), av = a.values();
        auto gz = in[0], ga = in[1];
        for (std::size_t q = 0; q < batch; ++q)
          for (std::size_t k = 0; k < C; ++k) {
            const double *A = &av[(q * C + k) * T * T];
            for (std::size_t i = 0; i < T; ++i) {
              const double gi = g[(q * T + i) * C + k];
              if (gi == 0.0)
                continue;
              for (std::size_t j = 0; j < T; ++j) {
                if (!gz.empty())
                  gz[(q * T + j) * C + k] += A[i * T + j] * gi;
                if (!ga.empty())
                  ga[(q * C + k) * T * T + i * T + j] += gi * zv[(q * T + j) * C + k];
              }
            }
          }
      });
}

PathAffinities apply_grad_mode(const AffinityMatrix &affinity, GradMode mode) {
  auto detached = [&] {
    return AffinityMatrix{detach(affinity.weights), affinity.tau, affinity.resolution,
                          affinity.valid};
  };
  switch (mode) {
  case GradMode::full:
    return {affinity, affinity};
  case GradMode::enc_only:
    return {affinity, detached()};
  case GradMode::dec_only:
    return {detached(), affinity};
  case GradMode::none:
    break;
  }
  AffinityMatrix d = detached();
  return {d, d};
}

std::string to_string(Site site) {
  switch (site) {
  case Site::enc_half:
    return "enc@1/2";
  case Site::enc_quarter:
    return "enc@1/4";
  case Site::dec_half:
    return "dec@1/2";
  case Site::dec_quarter:
    return "dec@1/4";
  }
  return "?";
}

std::string to_string(GradMode mode) {
  switch (mode) {
  case GradMode::full:
    return "full";
  case GradMode::enc_only:
    return "enc_only";
  case GradMode::dec_only:
    return "dec_only";
  case GradMode::none:
    return "none";
  }
  return "?";
}

Site parse_site(const std::string &text) {
  for (Site s : {Site::enc_half, Site::enc_quarter, Site::dec_half, Site::dec_quarter})
    if (to_string(s) == text)
      return s;
  throw std::invalid_argument("unknown AM site '" + text +
                              "' (expected enc@1/2, enc@1/4, dec@1/2, dec@1/4)");
}

std::string to_string(EncoderAdapt how) {
  switch (how) {
  case EncoderAdapt::mean:
    return "mean";
  case EncoderAdapt::exp_normalized:
    return "exp_normalized";
  case EncoderAdapt::exp_literal:
    return "exp_literal";
  }
  return "?";
}

EncoderAdapt parse_encoder_adapt(const std::string &text) {
  for (EncoderAdapt h : {EncoderAdapt::mean, EncoderAdapt::exp_normalized, EncoderAdapt::exp_literal})
    if (to_string(h) == text)
      return h;
  throw std::invalid_argument("unknown encoder adaptation '" + text +
                              "' (expected mean, exp_normalized, exp_literal)");
}

GradMode parse_grad_mode(const std::string &text) {
  for (GradMode m : {GradMode::full, GradMode::enc_only, GradMode::dec_only, GradMode::none})
    if (to_string(m) == text)
      return m;
  throw std::invalid_argument("unknown grad mode '" + text +
                              "' (expected full, enc_only, dec_only, none)");
}

std::set<Site> parse_placement(const std::string &text) {
  if (text == "none" || text.empty())
    return {};
  if (text == "full")
    return {Site::enc_half, Site::enc_quarter, Site::dec_half, Site::dec_quarter};
  if (text == "enc")
    return {Site::enc_half, Site::enc_quarter};
  if (text == "dec")
    return {Site::dec_half, Site::dec_quarter};
  std::set<Site> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    out.insert(parse_site(item));
  return out;
}

std::string placement_string(const std::set<Site> &placement) {
  if (placement.empty())
    return "none";
  std::string out;
  for (Site s : placement)
    out += (out.empty() ? "" : ",") + to_string(s);
  return out;
}

} // namespace amn::am
