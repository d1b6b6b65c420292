// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <vector>

#include "doctest.h"

#include "amn/gradcheck.hpp"
#include "amn/ops.hpp"
#include "amn/rng.hpp"
#include "amn/tensor.hpp"

using namespace amn;

namespace {

std::vector<double> vals(const Tensor &t) { return {t.values().begin(), t.values().end()}; }

void check_close(const Tensor &t, const std::vector<double> &expect, double tol) {
  const auto v = t.values();
  REQUIRE(v.size() == expect.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    CHECK(std::abs(v[i] - expect[i]) <= tol);
}

/// Elementwise natural log, only needed for the cross-entropy control.
Tensor log_ref(const Tensor &x) {
  std::vector<double> xv(x.values().begin(), x.values().end());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i)
    out[i] = std::log(xv[i]);
  return detail::record("log_ref", x.shape(), std::move(out), {x},
                        [xv](std::span<const double> g, std::span<const double>,
                             const detail::GradSink &in) {
                          auto gx = in[0];
                          for (std::size_t i = 0; i < gx.size(); ++i)
                            gx[i] += g[i] / xv[i];
                        });
}

} // namespace

TEST_SUITE("tensor") {

TEST_CASE("matmul hand cases and shape errors") {
  const Tensor eye({2, 2}, {1, 0, 0, 1});
  const Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(vals(matmul(eye, m)) == std::vector<double>{1, 2, 3, 4});
  CHECK(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item() == 11.0);
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL("expected shape error");
  } catch (const std::invalid_argument &e) {
    const std::string msg = e.what();
    CHECK(msg.find("2x3") != std::string::npos);
  }
}

TEST_CASE("conv2d_same identity kernel and bias broadcast") {
  Rng rng(1);
  std::vector<double> xv(1 * 1 * 4 * 5);
  for (double &v : xv)
    v = rng.normal();
  const Tensor x({1, 1, 4, 5}, xv);
  const Tensor y = conv2d_same(x, Tensor({1, 1, 1, 1}, {1.0}), Tensor({1}, {0.0}));
  CHECK(vals(y) == xv);
  const Tensor z = conv2d_same(Tensor::zeros({2, 1, 3, 3}), Tensor::full({2, 1, 3, 3}, 0.7),
                               Tensor({2}, {0.25, -1.5}));
  const auto zv = z.values();
  for (std::size_t i = 0; i < zv.size(); ++i)
    CHECK(zv[i] == ((i / 9) % 2 == 0 ? 0.25 : -1.5));
  CHECK_THROWS(conv2d_same(x, Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1})));
  CHECK_THROWS(conv2d_same(x, Tensor::zeros({1, 2, 3, 3}), Tensor::zeros({1})));
}

TEST_CASE("batchnorm2d constant input and zero gamma") {
  auto state = BatchNormState::fresh(2);
  const Tensor x = Tensor::full({2, 2, 3, 3}, 4.0);
  const Tensor y = batchnorm2d(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), state, Mode::train);
  for (double v : y.values())
    CHECK(std::abs(v) < 1e-12);
  Rng rng(3);
  std::vector<double> xv(2 * 2 * 3 * 3);
  for (double &v : xv)
    v = rng.normal();
  auto s2 = BatchNormState::fresh(2);
  const Tensor z = batchnorm2d(Tensor({2, 2, 3, 3}, xv), Tensor::zeros({2}),
                               Tensor({2}, {0.5, -2.0}), s2, Mode::train);
  const auto zv = z.values();
  for (std::size_t i = 0; i < zv.size(); ++i)
    CHECK(zv[i] == doctest::Approx(((i / 9) % 2 == 0) ? 0.5 : -2.0));
  BatchNormState blank;
  blank.running_mean.assign(2, 0.0);
  blank.running_var.assign(2, 1.0);
  CHECK_THROWS(batchnorm2d(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), blank, Mode::eval));
}

TEST_CASE("leaky_relu and softmax examples") {
  check_close(leaky_relu(Tensor({2}, {2.0, -2.0})), {2.0, -0.2}, 1e-15);
  check_close(softmax_lastdim(Tensor({1, 2}, {0, 0})), {0.5, 0.5}, 1e-15);
  check_close(softmax_lastdim(Tensor({1, 2}, {0, -1})), {0.73106, 0.26894}, 1e-5);
  const Tensor s = softmax_lastdim(Tensor({1, 2}, {1000, 0}));
  CHECK(s.values()[0] == doctest::Approx(1.0));
  CHECK(std::isfinite(s.values()[1]));
  CHECK(s.values()[1] < 1e-300);
}

TEST_CASE("pairwise_sqdist examples") {
  const Tensor d = pairwise_sqdist(Tensor::full({1, 3, 2}, 1.5));
  for (double v : d.values())
    CHECK(v == 0.0);
  CHECK(vals(pairwise_sqdist(Tensor({1, 2, 1}, {0, 1}))) == std::vector<double>{0, 1, 1, 0});
}

TEST_CASE("bigru with zero weights outputs zeros") {
  GruWeights g{Tensor::zeros({6, 3}), Tensor::zeros({6, 2}), Tensor::zeros({6}),
               Tensor::zeros({6})};
  const BiGruWeights w{g, g};
  Rng rng(5);
  std::vector<double> xv(4 * 3);
  for (double &v : xv)
    v = rng.normal();
  const Tensor y = bigru_forward(Tensor({4, 3}, xv), w);
  CHECK(y.shape() == Shape{4, 4});
  for (double v : y.values())
    CHECK(v == 0.0);
  CHECK_THROWS(bigru_forward(Tensor::zeros({4, 5}), w));
}

TEST_CASE("lp_pool examples") {
  for (double p : {1.0, 2.0, 4.0, 9.0}) {
    const Tensor y = lp_pool(Tensor::full({1, 1, 4, 4}, 0.75), p, 2, 2);
    for (double v : y.values())
      CHECK(v == doctest::Approx(0.75));
  }
  CHECK(lp_pool(Tensor({1, 1, 2, 1}, {3, 4}), 2.0, 2, 1).item() ==
        doctest::Approx(3.53553).epsilon(1e-5));
  CHECK_THROWS(lp_pool(Tensor::zeros({1, 1, 3, 4}), 2.0, 2, 2));
}

TEST_CASE("linear_upsample_time examples") {
  const Tensor x({3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(vals(linear_upsample_time(x, 3)) == vals(x));
  check_close(linear_upsample_time(Tensor({2, 1}, {0, 1}), 3), {0, 0.5, 1}, 1e-15);
  const Tensor c = linear_upsample_time(Tensor::full({3, 2}, -0.4), 11);
  for (double v : c.values())
    CHECK(v == doctest::Approx(-0.4));
  CHECK_THROWS(linear_upsample_time(Tensor::zeros({1, 2}), 4));
}

TEST_CASE("backward examples and errors") {
  const Tensor x({3}, {1, -2, 5}, true);
  backward(sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

  const Tensor y({2}, {1, 2}, true);
  backward(sum(mul(y, y)));
  CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{2, 4});

  const Tensor z({2}, {1, 2}, true);
  CHECK_THROWS(backward(mul(z, z)));
  const Tensor loss = sum(mul(z, z));
  backward(loss);
  CHECK_THROWS(backward(loss));
}

TEST_CASE("detach blocks the gradient") {
  const Tensor x({3}, {1, 2, 3}, true);
  const Tensor y({3}, {4, 5, 6}, true);
  backward(sum(mul(detach(x), y)));
  for (double g : x.grad())
    CHECK(g == 0.0);
  CHECK(std::vector<double>(y.grad().begin(), y.grad().end()) == std::vector<double>{1, 2, 3});
}

TEST_CASE("no-grad guard records nothing") {
  const Tensor x({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(mul(x, x).requires_grad());
  }
  CHECK(grad_enabled());
}

TEST_CASE("finite_diff_check controls") {
  const Tensor x({4}, {0.3, -1.2, 2.0, 0.1});
  const auto linear = [](const Tensor &v) {
    return sum(mul(v, Tensor({4}, {1.5, -2.0, 0.25, 3.0})));
  };
  const auto lin = finite_diff_check(linear, x);
  CHECK(lin.passed);
  CHECK(lin.max_rel_error < 1e-8);

  // Softmax cross-entropy on random logits.
  Rng rng(11);
  std::vector<double> lv(2 * 5);
  for (double &v : lv)
    v = rng.normal() * 2.0;
  const Tensor logits({2, 5}, lv);
  const Tensor target({2, 5}, {0, 0, 1, 0, 0, 1, 0, 0, 0, 0});
  const auto xent = [&](const Tensor &z) {
    return scale(sum(mul(target, log_ref(softmax_lastdim(z)))), -1.0);
  };
  const auto ce = finite_diff_check(xent, logits);
  CHECK(ce.passed);
  CHECK(ce.max_rel_error <= 1e-4);

  const auto broken =
      finite_diff_check(linear, x, 1e-5, 1e-4, [](std::span<double> g) { g[2] += 0.5; });
  CHECK_FALSE(broken.passed);
}

} // TEST_SUITE
