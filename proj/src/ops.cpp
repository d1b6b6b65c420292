// SPDX-License-Identifier: Apache-2.0
#include "amn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace amn {

using detail::GradSink;
using detail::record;

namespace {

[[noreturn]] void shape_error(const std::string &op, const std::string &what) {
  throw std::invalid_argument(op + ": " + what);
}

void require_rank(const char *op, const Tensor &x, std::size_t rank) {
  if (x.rank() != rank)
    shape_error(op, "expected rank " + std::to_string(rank) + ", got " +
                        shape_str(x.shape()));
}

std::size_t valid_at(Valid valid, std::size_t i, std::size_t full) {
  if (valid.empty())
    return full;
  return std::min(valid[i], full);
}

void check_valid(const char *op, Valid valid, std::size_t batch) {
  if (!valid.empty() && valid.size() != batch)
    shape_error(op, "valid-length count " + std::to_string(valid.size()) +
                        " does not match batch " + std::to_string(batch));
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

Tensor matmul(const Tensor &a, const Tensor &b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    shape_error("matmul", "inner extents differ: " + shape_str(a.shape()) + " x " +
                              shape_str(b.shape()));
  auto av = a.values(), bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double *brow = &bv[p * n];
      double *orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j)
        orow[j] += aip * brow[j];
    }
  return record("matmul", {m, n}, std::move(out), {a, b},
                [a, b, m, k, n](std::span<const double> g, std::span<const double>,
                                const GradSink &in) {
                  auto av = a.values(), bv = b.values();
                  if (auto ga = in[0]; !ga.empty())
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                          s += g[i * n + j] * bv[p * n + j];
                        ga[i * k + p] += s;
                      }
                  if (auto gb = in[1]; !gb.empty())
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const double aip = av[i * k + p];
                        for (std::size_t j = 0; j < n; ++j)
                          gb[p * n + j] += aip * g[i * n + j];
                      }
                });
}

Tensor add_rowvec(const Tensor &x, const Tensor &bias) {
  require_rank("add_rowvec", x, 2);
  require_rank("add_rowvec", bias, 1);
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.dim(0) != n)
    shape_error("add_rowvec", "bias " + shape_str(bias.shape()) + " vs rows of " +
                                  shape_str(x.shape()));
  auto xv = x.values(), bv = bias.values();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] += bv[j];
  return record("add_rowvec", x.shape(), std::move(out), {x, bias},
                [m, n](std::span<const double> g, std::span<const double>,
                       const GradSink &in) {
                  if (auto gx = in[0]; !gx.empty())
                    for (std::size_t i = 0; i < m * n; ++i)
                      gx[i] += g[i];
                  if (auto gb = in[1]; !gb.empty())
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j)
                        gb[j] += g[i * n + j];
                });
}

Tensor bmm(const Tensor &a, const Tensor &b) {
  if (a.rank() < 2 || a.rank() != b.rank())
    shape_error("bmm", "rank mismatch " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.dim(i) != b.dim(i))
      shape_error("bmm", "leading extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  if (b.dim(r - 2) != k)
    shape_error("bmm", "inner extents differ: " + shape_str(a.shape()) + " x " +
                           shape_str(b.shape()));
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape = a.shape();
  out_shape[r - 1] = n;
  auto av = a.values(), bv = b.values();
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t q = 0; q < batch; ++q) {
    const double *A = &av[q * m * k];
    const double *B = &bv[q * k * n];
    double *O = &out[q * m * n];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        for (std::size_t j = 0; j < n; ++j)
          O[i * n + j] += aip * B[p * n + j];
      }
  }
  return record(
      "bmm", std::move(out_shape), std::move(out), {a, b},
      [a, b, batch, m, k, n](std::span<const double> g, std::span<const double>,
                             const GradSink &in) {
        auto av = a.values(), bv = b.values();
        auto ga = in[0], gb = in[1];
        for (std::size_t q = 0; q < batch; ++q) {
          const double *A = &av[q * m * k];
          const double *B = &bv[q * k * n];
          const double *G = &g[q * m * n];
          if (!ga.empty()) {
            double *GA = &ga[q * m * k];
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                  s += G[i * n + j] * B[p * n + j];
                GA[i * k + p] += s;
              }
          }
          if (!gb.empty()) {
            double *GB = &gb[q * k * n];
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t p = 0; p < k; ++p) {
                const double aip = A[i * k + p];
                for (std::size_t j = 0; j < n; ++j)
                  GB[p * n + j] += aip * G[i * n + j];
              }
          }
        }
      });
}

Tensor conv2d_same(const Tensor &x, const Tensor &weight, const Tensor &bias) {
  require_rank("conv2d_same", x, 4);
  require_rank("conv2d_same", weight, 4);
  require_rank("conv2d_same", bias, 1);
  const std::size_t nb = x.dim(0), ci = x.dim(1), T = x.dim(2), F = x.dim(3);
  const std::size_t co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (kh % 2 == 0 || kw % 2 == 0)
    shape_error("conv2d_same", "kernel extents must be odd, got " +
                                   shape_str(weight.shape()));
  if (weight.dim(1) != ci)
    shape_error("conv2d_same", "input has " + std::to_string(ci) +
                                   " channels but weight expects " +
                                   std::to_string(weight.dim(1)));
  if (bias.dim(0) != co)
    shape_error("conv2d_same", "bias " + shape_str(bias.shape()) + " vs " +
                                   std::to_string(co) + " output channels");
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  const long Tl = static_cast<long>(T), Fl = static_cast<long>(F);

  // Visits every (output row, input row, column span) touched by kernel tap
  // (ky, kx), so forward and both backward passes share the same bounds.
  auto for_tap = [=](std::size_t ky, std::size_t kx, auto &&body) {
    const long dy = static_cast<long>(ky) - ph, dx = static_cast<long>(kx) - pw;
    const long t0 = std::max(0L, -dy), t1 = std::min(Tl, Tl - dy);
    const long f0 = std::max(0L, -dx), f1 = std::min(Fl, Fl - dx);
    if (f1 <= f0)
      return;
    for (long t = t0; t < t1; ++t)
      body(static_cast<std::size_t>(t), static_cast<std::size_t>(t + dy),
           static_cast<std::size_t>(f0), static_cast<std::size_t>(f1),
           static_cast<std::size_t>(f0 + dx));
  };

  auto xv = x.values(), wv = weight.values(), bv = bias.values();
  const std::size_t plane = T * F;
  std::vector<double> out(nb * co * plane);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t o = 0; o < co; ++o) {
      double *dst = &out[(b * co + o) * plane];
      std::fill(dst, dst + plane, bv[o]);
      for (std::size_t c = 0; c < ci; ++c) {
        const double *src = &xv[(b * ci + c) * plane];
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double w = wv[((o * ci + c) * kh + ky) * kw + kx];
            for_tap(ky, kx, [&](std::size_t to, std::size_t ti, std::size_t f0,
                                std::size_t f1, std::size_t fi) {
              double *d = dst + to * F;
              const double *s = src + ti * F + fi;
              for (std::size_t f = f0; f < f1; ++f)
                d[f] += w * s[f - f0];
            });
          }
      }
    }
  return record(
      "conv2d_same", {nb, co, T, F}, std::move(out), {x, weight, bias},
      [x, weight, nb, ci, co, kh, kw, plane, F, for_tap](
          std::span<const double> g, std::span<const double>, const GradSink &in) {
        auto xv = x.values(), wv = weight.values();
        auto gx = in[0], gw = in[1], gb = in[2];
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t o = 0; o < co; ++o) {
            const double *go = &g[(b * co + o) * plane];
            if (!gb.empty()) {
              double s = 0.0;
              for (std::size_t i = 0; i < plane; ++i)
                s += go[i];
              gb[o] += s;
            }
            for (std::size_t c = 0; c < ci; ++c) {
              const double *src = &xv[(b * ci + c) * plane];
              for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::size_t widx = ((o * ci + c) * kh + ky) * kw + kx;
                  const double w = wv[widx];
                  double acc = 0.0;
                  for_tap(ky, kx, [&](std::size_t to, std::size_t ti, std::size_t f0,
                                      std::size_t f1, std::size_t fi) {
                    const double *gr = go + to * F;
                    if (!gx.empty()) {
                      double *dx = &gx[(b * ci + c) * plane + ti * F + fi];
                      for (std::size_t f = f0; f < f1; ++f)
                        dx[f - f0] += w * gr[f];
                    }
                    const double *s = src + ti * F + fi;
                    for (std::size_t f = f0; f < f1; ++f)
                      acc += gr[f] * s[f - f0];
                  });
                  if (!gw.empty())
                    gw[widx] += acc;
                }
            }
          }
      });
}

BatchNormState BatchNormState::fresh(std::size_t channels) {
  BatchNormState s;
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  s.initialized = true;
  return s;
}

Tensor batchnorm2d(const Tensor &x, const Tensor &gamma, const Tensor &beta,
                   BatchNormState &state, Mode mode, Valid valid) {
  require_rank("batchnorm2d", x, 4);
  const std::size_t nb = x.dim(0), C = x.dim(1), T = x.dim(2), F = x.dim(3);
  if (gamma.numel() != C || beta.numel() != C)
    shape_error("batchnorm2d", std::to_string(C) + " channels but gamma/beta " +
                                   shape_str(gamma.shape()) + "/" + shape_str(beta.shape()));
  check_valid("batchnorm2d", valid, nb);
  if (!state.initialized || state.running_mean.size() != C || state.running_var.size() != C)
    throw std::logic_error("batchnorm2d: running statistics are not initialized for " +
                           std::to_string(C) + " channels");

  auto xv = x.values(), gv = gamma.values(), bv = beta.values();
  std::vector<double> mean(C), inv_std(C);
  std::size_t count = 0;
  for (std::size_t b = 0; b < nb; ++b)
    count += valid_at(valid, b, T) * F;

  if (mode == Mode::train) {
    if (count == 0)
      throw std::invalid_argument("batchnorm2d: no valid frames in batch");
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const double *p = &xv[(b * C + c) * T * F];
        const std::size_t n = valid_at(valid, b, T) * F;
        for (std::size_t i = 0; i < n; ++i)
          s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const double *p = &xv[(b * C + c) * T * F];
        const std::size_t n = valid_at(valid, b, T) * F;
        for (std::size_t i = 0; i < n; ++i)
          v += (p[i] - mu) * (p[i] - mu);
      }
      const double var = v / static_cast<double>(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      // Stored at single precision so checkpoints round-trip exactly.
      state.running_mean[c] = static_cast<float>((1.0 - state.momentum) * state.running_mean[c] +
                                                 state.momentum * mu);
      state.running_var[c] = static_cast<float>((1.0 - state.momentum) * state.running_var[c] +
                                                state.momentum * unbiased);
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  std::vector<double> xhat(xv.size(), 0.0), out(xv.size(), 0.0);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * T * F;
      const std::size_t n = valid_at(valid, b, T) * F;
      for (std::size_t i = 0; i < n; ++i) {
        xhat[base + i] = (xv[base + i] - mean[c]) * inv_std[c];
        out[base + i] = gv[c] * xhat[base + i] + bv[c];
      }
    }

  std::vector<std::size_t> lengths(nb);
  for (std::size_t b = 0; b < nb; ++b)
    lengths[b] = valid_at(valid, b, T);
  const bool training = mode == Mode::train;
  return record(
      "batchnorm2d", x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), lengths = std::move(lengths),
       gamma, nb, C, T, F, count, training](std::span<const double> g,
                                            std::span<const double>, const GradSink &in) {
        auto gv = gamma.values();
        auto gx = in[0], gg = in[1], gbeta = in[2];
        for (std::size_t c = 0; c < C; ++c) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t base = (b * C + c) * T * F;
            const std::size_t n = lengths[b] * F;
            for (std::size_t i = 0; i < n; ++i) {
              sg += g[base + i];
              sgx += g[base + i] * xhat[base + i];
            }
          }
          if (!gg.empty())
            gg[c] += sgx;
          if (!gbeta.empty())
            gbeta[c] += sg;
          if (gx.empty())
            continue;
          const double k = gv[c] * inv_std[c];
          const double inv_n = 1.0 / static_cast<double>(count);
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t base = (b * C + c) * T * F;
            const std::size_t n = lengths[b] * F;
            for (std::size_t i = 0; i < n; ++i) {
              if (training)
                gx[base + i] += k * (g[base + i] - inv_n * sg - xhat[base + i] * inv_n * sgx);
              else
                gx[base + i] += k * g[base + i];
            }
          }
        }
      });
}

Tensor leaky_relu(const Tensor &x, double slope) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xv[i] >= 0.0 ? xv[i] : slope * xv[i];
  return record("leaky_relu", x.shape(), std::move(out), {x},
                [x, slope](std::span<const double> g, std::span<const double>,
                           const GradSink &in) {
                  auto xv = x.values();
                  auto gx = in[0];
                  for (std::size_t i = 0; i < gx.size(); ++i)
                    gx[i] += xv[i] >= 0.0 ? g[i] : slope * g[i];
                });
}

Tensor softmax_lastdim(const Tensor &x, Valid valid) {
  if (x.rank() == 0)
    shape_error("softmax_lastdim", "rank-0 input");
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / n;
  const std::size_t rows_per_item = rows / x.dim(0);
  check_valid("softmax_lastdim", valid, x.dim(0));
  auto xv = x.values();
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t cols = valid.empty() ? n : std::min(n, valid[r / rows_per_item]);
    if (cols == 0)
      continue;
    const double *src = &xv[r * n];
    double *dst = &out[r * n];
    const double mx = *std::max_element(src, src + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      dst[j] = std::exp(src[j] - mx);
      s += dst[j];
    }
    for (std::size_t j = 0; j < cols; ++j)
      dst[j] /= s;
  }
  return record("softmax_lastdim", x.shape(), std::move(out), {x},
                [n, rows](std::span<const double> g, std::span<const double> y,
                          const GradSink &in) {
                  auto gx = in[0];
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double *gr = &g[r * n];
                    const double *yr = &y[r * n];
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                      dot += gr[j] * yr[j];
                    for (std::size_t j = 0; j < n; ++j)
                      gx[r * n + j] += yr[j] * (gr[j] - dot);
                  }
                });
}

Tensor pairwise_sqdist(const Tensor &x) {
  if (x.rank() < 2)
    shape_error("pairwise_sqdist", "expected [... x t x f], got " + shape_str(x.shape()));
  const std::size_t r = x.rank();
  const std::size_t T = x.dim(r - 2), F = x.dim(r - 1);
  const std::size_t batch = x.numel() / (T * F);
  Shape out_shape = x.shape();
  out_shape[r - 1] = T;
  auto xv = x.values();
  std::vector<double> out(batch * T * T, 0.0);
  for (std::size_t q = 0; q < batch; ++q) {
    const double *X = &xv[q * T * F];
    double *D = &out[q * T * T];
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = i + 1; j < T; ++j) {
        double s = 0.0;
        for (std::size_t f = 0; f < F; ++f) {
          const double d = X[i * F + f] - X[j * F + f];
          s += d * d;
        }
        D[i * T + j] = s;
        D[j * T + i] = s;
      }
  }
  return record("pairwise_sqdist", std::move(out_shape), std::move(out), {x},
                [x, batch, T, F](std::span<const double> g, std::span<const double>,
                                 const GradSink &in) {
                  auto xv = x.values();
                  auto gx = in[0];
                  for (std::size_t q = 0; q < batch; ++q) {
                    const double *X = &xv[q * T * F];
                    const double *G = &g[q * T * T];
                    double *GX = &gx[q * T * F];
                    for (std::size_t i = 0; i < T; ++i)
                      for (std::size_t j = i + 1; j < T; ++j) {
                        const double w = 2.0 * (G[i * T + j] + G[j * T + i]);
                        if (w == 0.0)
                          continue;
                        for (std::size_t f = 0; f < F; ++f) {
                          const double d = w * (X[i * F + f] - X[j * F + f]);
                          GX[i * F + f] += d;
                          GX[j * F + f] -= d;
                        }
                      }
                  }
                });
}

namespace {

void check_gru(const GruWeights &w, std::size_t d_in) {
  const std::size_t h = w.w_hh.rank() == 2 ? w.w_hh.dim(1) : 0;
  if (w.w_ih.rank() != 2 || w.w_hh.rank() != 2 || w.b_ih.rank() != 1 || w.b_hh.rank() != 1 ||
      h == 0 || w.w_ih.dim(0) != 3 * h || w.w_ih.dim(1) != d_in || w.w_hh.dim(0) != 3 * h ||
      w.b_ih.dim(0) != 3 * h || w.b_hh.dim(0) != 3 * h)
    shape_error("bigru", "inconsistent weights for input width " + std::to_string(d_in) +
                             ": w_ih " + shape_str(w.w_ih.shape()) + ", w_hh " +
                             shape_str(w.w_hh.shape()));
}

// Per-step activations needed by the backward pass, one direction.
struct GruTape {
  std::vector<double> r, z, n, ghn, hprev; // [steps x h] each
};

} // namespace

Tensor bigru(const Tensor &x, const BiGruWeights &weights, Valid valid) {
  require_rank("bigru", x, 3);
  const std::size_t nb = x.dim(0), T = x.dim(1), D = x.dim(2);
  check_gru(weights.forward, D);
  check_gru(weights.backward, D);
  const std::size_t H = weights.forward.hidden();
  if (weights.backward.hidden() != H)
    shape_error("bigru", "forward/backward hidden sizes differ");
  check_valid("bigru", valid, nb);

  auto xv = x.values();
  std::vector<double> out(nb * T * 2 * H, 0.0);
  // tapes[dir][b]
  std::vector<std::vector<GruTape>> tapes(2, std::vector<GruTape>(nb));
  std::vector<std::size_t> lengths(nb);

  for (std::size_t dir = 0; dir < 2; ++dir) {
    const GruWeights &w = dir == 0 ? weights.forward : weights.backward;
    auto wih = w.w_ih.values(), whh = w.w_hh.values();
    auto bih = w.b_ih.values(), bhh = w.b_hh.values();
    std::vector<double> h(H), gi(3 * H), gh(3 * H);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t L = valid_at(valid, b, T);
      lengths[b] = L;
      GruTape &tape = tapes[dir][b];
      for (auto *v : {&tape.r, &tape.z, &tape.n, &tape.ghn, &tape.hprev})
        v->assign(L * H, 0.0);
      std::fill(h.begin(), h.end(), 0.0);
      for (std::size_t s = 0; s < L; ++s) {
        const std::size_t t = dir == 0 ? s : L - 1 - s;
        const double *xt = &xv[(b * T + t) * D];
        for (std::size_t j = 0; j < 3 * H; ++j) {
          double a = bih[j];
          const double *row = &wih[j * D];
          for (std::size_t d = 0; d < D; ++d)
            a += row[d] * xt[d];
          gi[j] = a;
          double c = bhh[j];
          const double *hrow = &whh[j * H];
          for (std::size_t k = 0; k < H; ++k)
            c += hrow[k] * h[k];
          gh[j] = c;
        }
        for (std::size_t k = 0; k < H; ++k) {
          const double r = sigmoid_scalar(gi[k] + gh[k]);
          const double z = sigmoid_scalar(gi[H + k] + gh[H + k]);
          const double n = std::tanh(gi[2 * H + k] + r * gh[2 * H + k]);
          tape.r[s * H + k] = r;
          tape.z[s * H + k] = z;
          tape.n[s * H + k] = n;
          tape.ghn[s * H + k] = gh[2 * H + k];
          tape.hprev[s * H + k] = h[k];
        }
        for (std::size_t k = 0; k < H; ++k) {
          const double z = tape.z[s * H + k];
          h[k] = (1.0 - z) * tape.n[s * H + k] + z * h[k];
          out[(b * T + t) * 2 * H + dir * H + k] = h[k];
        }
      }
    }
  }

  std::vector<Tensor> inputs = {x,
                                weights.forward.w_ih,
                                weights.forward.w_hh,
                                weights.forward.b_ih,
                                weights.forward.b_hh,
                                weights.backward.w_ih,
                                weights.backward.w_hh,
                                weights.backward.b_ih,
                                weights.backward.b_hh};
  return record(
      "bigru", {nb, T, 2 * H}, std::move(out), inputs,
      [x, weights, tapes = std::move(tapes), lengths = std::move(lengths), nb, T, D,
       H](std::span<const double> g, std::span<const double>, const GradSink &in) {
        auto xv = x.values();
        auto gx = in[0];
        std::vector<double> dh(H), dh_prev(H), dgi(3 * H), dgh(3 * H);
        for (std::size_t dir = 0; dir < 2; ++dir) {
          const GruWeights &w = dir == 0 ? weights.forward : weights.backward;
          auto wih = w.w_ih.values(), whh = w.w_hh.values();
          auto gwih = in[1 + 4 * dir], gwhh = in[2 + 4 * dir];
          auto gbih = in[3 + 4 * dir], gbhh = in[4 + 4 * dir];
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t L = lengths[b];
            const GruTape &tape = tapes[dir][b];
            std::fill(dh.begin(), dh.end(), 0.0);
            for (std::size_t s = L; s-- > 0;) {
              const std::size_t t = dir == 0 ? s : L - 1 - s;
              const double *go = &g[(b * T + t) * 2 * H + dir * H];
              for (std::size_t k = 0; k < H; ++k) {
                const double dht = dh[k] + go[k];
                const double r = tape.r[s * H + k], z = tape.z[s * H + k];
                const double n = tape.n[s * H + k], hp = tape.hprev[s * H + k];
                const double dn = dht * (1.0 - z);
                const double dz = dht * (hp - n);
                dh_prev[k] = dht * z;
                const double dpre_n = dn * (1.0 - n * n);
                const double dr = dpre_n * tape.ghn[s * H + k];
                const double dpre_r = dr * r * (1.0 - r);
                const double dpre_z = dz * z * (1.0 - z);
                dgi[k] = dpre_r;
                dgi[H + k] = dpre_z;
                dgi[2 * H + k] = dpre_n;
                dgh[k] = dpre_r;
                dgh[H + k] = dpre_z;
                dgh[2 * H + k] = dpre_n * r;
              }
              const double *xt = &xv[(b * T + t) * D];
              const double *hp = &tape.hprev[s * H];
              for (std::size_t j = 0; j < 3 * H; ++j) {
                const double a = dgi[j], c = dgh[j];
                if (!gbih.empty())
                  gbih[j] += a;
                if (!gbhh.empty())
                  gbhh[j] += c;
                if (!gwih.empty())
                  for (std::size_t d = 0; d < D; ++d)
                    gwih[j * D + d] += a * xt[d];
                if (!gwhh.empty())
                  for (std::size_t k = 0; k < H; ++k)
                    gwhh[j * H + k] += c * hp[k];
                if (!gx.empty()) {
                  double *gxt = &gx[(b * T + t) * D];
                  const double *row = &wih[j * D];
                  for (std::size_t d = 0; d < D; ++d)
                    gxt[d] += a * row[d];
                }
                const double *hrow = &whh[j * H];
                for (std::size_t k = 0; k < H; ++k)
                  dh_prev[k] += c * hrow[k];
              }
              dh.swap(dh_prev);
            }
          }
        }
      });
}

Tensor bigru_forward(const Tensor &x, const BiGruWeights &weights) {
  require_rank("bigru_forward", x, 2);
  Tensor y = bigru(reshape(x, {1, x.dim(0), x.dim(1)}), weights);
  return reshape(y, {y.dim(1), y.dim(2)});
}

Tensor lp_pool(const Tensor &x, double p, std::size_t factor_t, std::size_t factor_f) {
  require_rank("lp_pool", x, 4);
  if (p < 1.0)
    shape_error("lp_pool", "exponent must be >= 1, got " + std::to_string(p));
  if (factor_t == 0 || factor_f == 0)
    shape_error("lp_pool", "factors must be positive");
  const std::size_t nb = x.dim(0), C = x.dim(1), T = x.dim(2), F = x.dim(3);
  if (T % factor_t != 0 || F % factor_f != 0)
    shape_error("lp_pool", "extents " + shape_str(x.shape()) + " not divisible by (" +
                               std::to_string(factor_t) + ", " + std::to_string(factor_f) +
                               ")");
  const std::size_t To = T / factor_t, Fo = F / factor_f;
  const double inv_n = 1.0 / static_cast<double>(factor_t * factor_f);
  auto xv = x.values();
  std::vector<double> out(nb * C * To * Fo);
  for (std::size_t bc = 0; bc < nb * C; ++bc) {
    const double *src = &xv[bc * T * F];
    double *dst = &out[bc * To * Fo];
    for (std::size_t to = 0; to < To; ++to)
      for (std::size_t fo = 0; fo < Fo; ++fo) {
        double s = 0.0;
        for (std::size_t dt = 0; dt < factor_t; ++dt)
          for (std::size_t df = 0; df < factor_f; ++df)
            s += std::pow(std::abs(src[(to * factor_t + dt) * F + fo * factor_f + df]), p);
        dst[to * Fo + fo] = std::pow(s * inv_n, 1.0 / p);
      }
  }
  return record(
      "lp_pool", {nb, C, To, Fo}, std::move(out), {x},
      [x, p, factor_t, factor_f, nb, C, T, F, To, Fo, inv_n](
          std::span<const double> g, std::span<const double> y, const GradSink &in) {
        auto xv = x.values();
        auto gx = in[0];
        for (std::size_t bc = 0; bc < nb * C; ++bc)
          for (std::size_t to = 0; to < To; ++to)
            for (std::size_t fo = 0; fo < Fo; ++fo) {
              const double yo = y[bc * To * Fo + to * Fo + fo];
              if (yo == 0.0)
                continue;
              const double k = g[bc * To * Fo + to * Fo + fo] * inv_n * std::pow(yo, 1.0 - p);
              for (std::size_t dt = 0; dt < factor_t; ++dt)
                for (std::size_t df = 0; df < factor_f; ++df) {
                  const std::size_t i = bc * T * F + (to * factor_t + dt) * F + fo * factor_f + df;
                  const double v = xv[i];
                  if (v == 0.0)
                    continue;
                  gx[i] += k * std::pow(std::abs(v), p - 1.0) * (v > 0.0 ? 1.0 : -1.0);
                }
            }
      });
}

Tensor linear_upsample_time(const Tensor &x, std::size_t target_t, Valid src_valid,
                            Valid dst_valid) {
  if (x.rank() == 2) {
    Tensor y = linear_upsample_time(reshape(x, {1, x.dim(0), x.dim(1)}), target_t, src_valid,
                                    dst_valid);
    return reshape(y, {target_t, x.dim(1)});
  }
  require_rank("linear_upsample_time", x, 3);
  const std::size_t nb = x.dim(0), Ts = x.dim(1), C = x.dim(2);
  check_valid("linear_upsample_time", src_valid, nb);
  check_valid("linear_upsample_time", dst_valid, nb);
  if (target_t < Ts)
    shape_error("linear_upsample_time", "target " + std::to_string(target_t) +
                                            " shorter than source " + std::to_string(Ts));

  // (source index, weight of the next source frame) per output frame.
  struct Tap {
    std::size_t j0;
    double w;
  };
  std::vector<std::vector<Tap>> taps(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t ls = valid_at(src_valid, b, Ts);
    const std::size_t ld = valid_at(dst_valid, b, target_t);
    if (ls < 2)
      shape_error("linear_upsample_time", "needs at least 2 source frames, got " +
                                              std::to_string(ls));
    if (ld < ls)
      shape_error("linear_upsample_time", "valid target shorter than valid source");
    taps[b].resize(ld);
    for (std::size_t i = 0; i < ld; ++i) {
      if (ld == 1) {
        taps[b][i] = {0, 0.0};
        continue;
      }
      const double pos = static_cast<double>(i * (ls - 1)) / static_cast<double>(ld - 1);
      std::size_t j0 = static_cast<std::size_t>(std::floor(pos));
      if (j0 >= ls - 1)
        j0 = ls - 2;
      taps[b][i] = {j0, pos - static_cast<double>(j0)};
    }
  }
  auto xv = x.values();
  std::vector<double> out(nb * target_t * C, 0.0);
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t i = 0; i < taps[b].size(); ++i) {
      const auto [j0, w] = taps[b][i];
      for (std::size_t c = 0; c < C; ++c)
        out[(b * target_t + i) * C + c] =
            (1.0 - w) * xv[(b * Ts + j0) * C + c] + w * xv[(b * Ts + j0 + 1) * C + c];
    }
  return record("linear_upsample_time", {nb, target_t, C}, std::move(out), {x},
                [taps = std::move(taps), target_t, Ts, C](std::span<const double> g,
                                                          std::span<const double>,
                                                          const GradSink &in) {
                  auto gx = in[0];
                  for (std::size_t b = 0; b < taps.size(); ++b)
                    for (std::size_t i = 0; i < taps[b].size(); ++i) {
                      const auto [j0, w] = taps[b][i];
                      for (std::size_t c = 0; c < C; ++c) {
                        const double gi = g[(b * target_t + i) * C + c];
                        gx[(b * Ts + j0) * C + c] += (1.0 - w) * gi;
                        gx[(b * Ts + j0 + 1) * C + c] += w * gi;
                      }
                    }
                });
}

Tensor mask_frames(const Tensor &x, std::size_t time_axis, Valid valid) {
  if (valid.empty())
    return x;
  if (time_axis == 0 || time_axis >= x.rank())
    shape_error("mask_frames", "time axis must be a non-leading axis of " +
                                   shape_str(x.shape()));
  check_valid("mask_frames", valid, x.dim(0));
  const Shape &s = x.shape();
  std::size_t inner = 1;
  for (std::size_t a = time_axis + 1; a < s.size(); ++a)
    inner *= s[a];
  const std::size_t T = s[time_axis];
  const std::size_t outer_per_item = x.numel() / (s[0] * T * inner);
  std::vector<double> keep(x.numel(), 0.0);
  for (std::size_t b = 0; b < s[0]; ++b) {
    const std::size_t L = std::min(valid[b], T);
    for (std::size_t o = 0; o < outer_per_item; ++o) {
      const std::size_t base = (b * outer_per_item + o) * T * inner;
      std::fill(keep.begin() + static_cast<std::ptrdiff_t>(base),
                keep.begin() + static_cast<std::ptrdiff_t>(base + L * inner), 1.0);
    }
  }
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = xv[i] * keep[i];
  return record("mask_frames", x.shape(), std::move(out), {x},
                [keep = std::move(keep)](std::span<const double> g, std::span<const double>,
                                         const GradSink &in) {
                  auto gx = in[0];
                  for (std::size_t i = 0; i < gx.size(); ++i)
                    gx[i] += g[i] * keep[i];
                });
}

Tensor channel_mix(const Tensor &x, const Tensor &weight) {
  if (x.rank() < 3)
    shape_error("channel_mix", "expected [... x b x t x f], got " + shape_str(x.shape()));
  require_rank("channel_mix", weight, 2);
  const std::size_t r = x.rank();
  const std::size_t B = x.dim(r - 3), plane = x.dim(r - 2) * x.dim(r - 1);
  const std::size_t K = weight.dim(0);
  if (weight.dim(1) != B)
    shape_error("channel_mix", "feature has " + std::to_string(B) +
                                   " channels but projection expects " +
                                   std::to_string(weight.dim(1)));
  const std::size_t batch = x.numel() / (B * plane);
  Shape out_shape = x.shape();
  out_shape[r - 3] = K;
  auto xv = x.values(), wv = weight.values();
  std::vector<double> out(batch * K * plane, 0.0);
  for (std::size_t q = 0; q < batch; ++q)
    for (std::size_t k = 0; k < K; ++k) {
      double *dst = &out[(q * K + k) * plane];
      for (std::size_t b = 0; b < B; ++b) {
        const double w = wv[k * B + b];
        const double *src = &xv[(q * B + b) * plane];
        for (std::size_t i = 0; i < plane; ++i)
          dst[i] += w * src[i];
      }
    }
  return record("channel_mix", std::move(out_shape), std::move(out), {x, weight},
                [x, weight, batch, B, K, plane](std::span<const double> g,
                                                std::span<const double>, const GradSink &in) {
                  auto xv = x.values(), wv = weight.values();
                  auto gx = in[0], gw = in[1];
                  for (std::size_t q = 0; q < batch; ++q)
                    for (std::size_t k = 0; k < K; ++k) {
                      const double *go = &g[(q * K + k) * plane];
                      for (std::size_t b = 0; b < B; ++b) {
                        const double *src = &xv[(q * B + b) * plane];
                        if (!gw.empty()) {
                          double s = 0.0;
                          for (std::size_t i = 0; i < plane; ++i)
                            s += go[i] * src[i];
                          gw[k * B + b] += s;
                        }
                        if (!gx.empty()) {
                          const double w = wv[k * B + b];
                          double *dx = &gx[(q * B + b) * plane];
                          for (std::size_t i = 0; i < plane; ++i)
                            dx[i] += w * go[i];
                        }
                      }
                    }
                });
}

Tensor mean_axis(const Tensor &x, std::size_t axis) {
  const Shape &s = x.shape();
  if (axis >= s.size() || s.size() < 2)
    shape_error("mean_axis", "axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a)
    outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a)
    inner *= s[a];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t a = 0; a < s.size(); ++a)
    if (a != axis)
      out_shape.push_back(s[a]);
  auto xv = x.values();
  std::vector<double> out(outer * inner, 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    double *dst = &out[o * inner];
    for (std::size_t k = 0; k < n; ++k) {
      const double *src = &xv[(o * n + k) * inner];
      for (std::size_t i = 0; i < inner; ++i)
        dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i)
      dst[i] *= inv;
  }
  return record("mean_axis", std::move(out_shape), std::move(out), {x},
                [outer, inner, n, inv](std::span<const double> g, std::span<const double>,
                                       const GradSink &in) {
                  auto gx = in[0];
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t k = 0; k < n; ++k)
                      for (std::size_t i = 0; i < inner; ++i)
                        gx[(o * n + k) * inner + i] += inv * g[o * inner + i];
                });
}

Tensor repeat_axis(const Tensor &x, std::size_t axis, std::size_t count) {
  const Shape &s = x.shape();
  if (axis > s.size() || count == 0)
    shape_error("repeat_axis", "cannot insert axis " + std::to_string(axis) + " x" +
                                   std::to_string(count) + " into " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a)
    outer *= s[a];
  for (std::size_t a = axis; a < s.size(); ++a)
    inner *= s[a];
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
  auto xv = x.values();
  std::vector<double> out(outer * count * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < count; ++k)
      std::copy_n(&xv[o * inner], inner, &out[(o * count + k) * inner]);
  return record("repeat_axis", std::move(out_shape), std::move(out), {x},
                [outer, inner, count](std::span<const double> g, std::span<const double>,
                                      const GradSink &in) {
                  auto gx = in[0];
                  for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t k = 0; k < count; ++k)
                      for (std::size_t i = 0; i < inner; ++i)
                        gx[o * inner + i] += g[(o * count + k) * inner + i];
                });
}

Tensor normalize_lastdim(const Tensor &x) {
  const std::size_t n = x.dim(x.rank() - 1);
  const std::size_t rows = x.numel() / n;
  auto xv = x.values();
  std::vector<double> out(xv.size()), sums(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      s += xv[r * n + j];
    if (s == 0.0)
      throw std::domain_error("normalize_lastdim: zero row sum");
    sums[r] = s;
    for (std::size_t j = 0; j < n; ++j)
      out[r * n + j] = xv[r * n + j] / s;
  }
  return record("normalize_lastdim", x.shape(), std::move(out), {x},
                [sums = std::move(sums), n, rows](std::span<const double> g,
                                                  std::span<const double> y,
                                                  const GradSink &in) {
                  auto gx = in[0];
                  for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                      dot += g[r * n + j] * y[r * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      gx[r * n + j] += (g[r * n + j] - dot) / sums[r];
                  }
                });
}

Tensor to_sequence(const Tensor &x) {
  require_rank("to_sequence", x, 4);
  const std::size_t nb = x.dim(0), C = x.dim(1), T = x.dim(2), F = x.dim(3);
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t f = 0; f < F; ++f)
          out[(b * T + t) * C * F + c * F + f] = xv[((b * C + c) * T + t) * F + f];
  return record("to_sequence", {nb, T, C * F}, std::move(out), {x},
                [nb, C, T, F](std::span<const double> g, std::span<const double>,
                              const GradSink &in) {
                  auto gx = in[0];
                  for (std::size_t b = 0; b < nb; ++b)
                    for (std::size_t c = 0; c < C; ++c)
                      for (std::size_t t = 0; t < T; ++t)
                        for (std::size_t f = 0; f < F; ++f)
                          gx[((b * C + c) * T + t) * F + f] +=
                              g[(b * T + t) * C * F + c * F + f];
                });
}

} // namespace amn
