// SPDX-License-Identifier: Apache-2.0
/**
 * @file   ops.hpp
 * @brief  Differentiable layer kernels: matmul, same-size conv, batch
 *         norm, GRU, Lp down-sampling, linear up-sampling and the small
 *         structural ops the affinity layer is built from.
 *
 * Several kernels take an optional `valid` span holding one frame count
 * per batch item. Frames at or beyond that count are treated as padding:
 * they are zeroed on output and never contribute to statistics or to
 * valid frames.
 */
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "amn/tensor.hpp"

namespace amn {

enum class Mode { train, eval };

using Valid = std::span<const std::size_t>;

/// [m x k] x [k x n] -> [m x n].
Tensor matmul(const Tensor &a, const Tensor &b);

/// Adds a length-n vector to every row of an [m x n] matrix.
Tensor add_rowvec(const Tensor &x, const Tensor &bias);

/// Batched product over matching leading dims: [... x m x k] x [... x k x n].
Tensor bmm(const Tensor &a, const Tensor &b);

/// Zero-padded "same" 2-D convolution (cross-correlation).
/// x: [b x c_in x t x f], weight: [c_out x c_in x kh x kw], bias: [c_out].
Tensor conv2d_same(const Tensor &x, const Tensor &weight, const Tensor &bias);

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  bool initialized = false;
  double momentum = 0.1;
  double eps = 1e-5;

  /// Running mean 0, running variance 1.
  static BatchNormState fresh(std::size_t channels);
};

/// Per-channel normalization over the batch, time and frequency axes of
/// [b x c x t x f]. Train mode uses (masked) batch statistics and updates
/// the running statistics; eval mode uses the running statistics.
Tensor batchnorm2d(const Tensor &x, const Tensor &gamma, const Tensor &beta,
                   BatchNormState &state, Mode mode, Valid valid = {});

Tensor leaky_relu(const Tensor &x, double slope = 0.1);

/// Softmax over the last axis with max subtraction. With `valid`, entry i
/// of dim 0 only normalizes over its first valid[i] columns; the rest are 0.
Tensor softmax_lastdim(const Tensor &x, Valid valid = {});

/// Squared Euclidean distance between rows: [... x t x f] -> [... x t x t].
Tensor pairwise_sqdist(const Tensor &x);

struct GruWeights {
  Tensor w_ih; ///< [3h x d_in], gate order reset, update, candidate
  Tensor w_hh; ///< [3h x h]
  Tensor b_ih; ///< [3h]
  Tensor b_hh; ///< [3h]
  std::size_t hidden() const { return w_hh.dim(1); }
};

struct BiGruWeights {
  GruWeights forward;
  GruWeights backward;
};

/// Bidirectional GRU with zero initial state: [n x t x d] -> [n x t x 2h],
/// forward direction in the first h features. The backward direction of
/// item i starts at its last valid frame.
Tensor bigru(const Tensor &x, const BiGruWeights &weights, Valid valid = {});

/// Single sequence convenience: [t x d] -> [t x 2h].
Tensor bigru_forward(const Tensor &x, const BiGruWeights &weights);

/// (mean |window|^p)^(1/p) over non-overlapping factor_t x factor_f
/// windows of [b x c x t x f].
Tensor lp_pool(const Tensor &x, double p, std::size_t factor_t, std::size_t factor_f);

/// Endpoint-aligned linear interpolation along time of [t' x c] or
/// [n x t' x c]. With per-item valid counts, item i maps its first
/// src_valid[i] frames onto its first dst_valid[i] output frames.
Tensor linear_upsample_time(const Tensor &x, std::size_t target_t, Valid src_valid = {},
                            Valid dst_valid = {});

/// Zeroes frames at or beyond valid[i] along `time_axis` for item i of dim 0.
Tensor mask_frames(const Tensor &x, std::size_t time_axis, Valid valid);

/// out[..., k, t, f] = sum_b weight[k, b] * x[..., b, t, f].
Tensor channel_mix(const Tensor &x, const Tensor &weight);

/// Mean over one axis (the axis is removed).
Tensor mean_axis(const Tensor &x, std::size_t axis);

/// Inserts a new axis of extent `count` at `axis` by replication.
Tensor repeat_axis(const Tensor &x, std::size_t axis, std::size_t count);

/// Divides every last-axis slice by its sum.
Tensor normalize_lastdim(const Tensor &x);

/// [n x c x t x f] -> [n x t x (c*f)], channel-major features per frame.
Tensor to_sequence(const Tensor &x);

} // namespace amn
