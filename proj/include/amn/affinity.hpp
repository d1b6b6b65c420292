// SPDX-License-Identifier: Apache-2.0
/**
 * @file   affinity.hpp
 * @brief  Affinity mixup: class-projected features -> distance-kernel
 *         affinity -> mixing of later encoder and decoder features at the
 *         same time resolution.
 *
 * All functions accept any number of leading batch dimensions in front
 * of the documented trailing shape, so a single clip ([b x t x f]) and a
 * batch ([n x b x t x f]) use the same entry points.
 *
 * Affinity construction for one resolution:
 *
 *   X [.. b x t x f] --W [c x b]--> X~ [.. c x t x f]
 *        --squared distance over f--> D [.. c x t x t]
 *        --softmax_j(-D / (tau * sqrt(f)))--> A [.. c x t x t]
 *
 * A mixes the decoder directly (per class column) and, after averaging
 * exp(A) over classes and replicating per channel, the encoder.
 */
#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "amn/ops.hpp"
#include "amn/tensor.hpp"

namespace amn::am {

/// Where an affinity matrix is applied: encoder or decoder, at 1/2 or 1/4
/// of the input time resolution.
enum class Site { enc_half, enc_quarter, dec_half, dec_quarter };

/// Which mixing paths let gradients flow back into the affinity.
enum class GradMode { full, enc_only, dec_only, none };

/// Encoder-side adaptation of the class affinities.
///  - mean: class mean of A, reading A as exp of log-affinities
///  - exp_normalized: class mean of exp(A), rows divided by their sums
///  - exp_literal: class mean of exp(A) as is
enum class EncoderAdapt { mean, exp_normalized, exp_literal };

struct AmConfig {
  double tau = 1.0;
  std::set<Site> placement = {Site::enc_half, Site::enc_quarter, Site::dec_half,
                              Site::dec_quarter};
  GradMode grad_mode = GradMode::full;
  EncoderAdapt encoder_adapt = EncoderAdapt::mean;

  bool enabled() const { return !placement.empty(); }
  bool uses_half() const;
  bool uses_quarter() const;
  void validate() const;
};

struct AffinityMatrix {
  Tensor weights; ///< [.. c x t x t], rows sum to 1
  double tau = 1.0;
  std::size_t resolution = 0; ///< t
  std::vector<std::size_t> valid; ///< per leading item; empty when unpadded

  std::size_t classes() const { return weights.dim(weights.rank() - 3); }
};

/// X~ = W X over the channel axis.
Tensor project_to_classes(const Tensor &x, const Tensor &weight);

/// Row-stochastic affinity of projected features. With `valid`, item i of
/// the leading batch axis only attends to its first valid[i] frames.
AffinityMatrix compute_affinity(const Tensor &x_tilde, double tau, Valid valid = {});

/// Channel adaptation for encoder mixing, replicated `channels` times.
Tensor adapt_for_encoder(const AffinityMatrix &affinity, std::size_t channels, EncoderAdapt how);
/// exp variants: normalize selects exp_normalized over exp_literal.
Tensor adapt_for_encoder(const AffinityMatrix &affinity, std::size_t channels, bool normalize);

/// out[.., ch] = A~[.., ch] x X'[.., ch]  ([t x t] by [t x f'] per channel).
Tensor mixup_encoder(const Tensor &x_prime, const Tensor &a_tilde);

/// Z~[.., :, k] = A[.., k] Z'[.., :, k] for decoder features [.. t x c].
Tensor mixup_decoder(const Tensor &z_prime, const AffinityMatrix &affinity);

struct PathAffinities {
  AffinityMatrix encoder;
  AffinityMatrix decoder;
};

/// Splits one affinity into the matrices used on each path, detaching the
/// paths that `mode` excludes from the gradient.
PathAffinities apply_grad_mode(const AffinityMatrix &affinity, GradMode mode);

std::string to_string(Site site);
std::string to_string(GradMode mode);
std::string to_string(EncoderAdapt how);
Site parse_site(const std::string &text);
GradMode parse_grad_mode(const std::string &text);
EncoderAdapt parse_encoder_adapt(const std::string &text);

/// Accepts "none", "full", "enc", "dec" or a comma list of
/// enc@1/2, enc@1/4, dec@1/2, dec@1/4.
std::set<Site> parse_placement(const std::string &text);
std::string placement_string(const std::set<Site> &placement);

} // namespace amn::am
