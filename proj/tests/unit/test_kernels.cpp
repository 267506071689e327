#include "doctest.h"

#include <cmath>

#include "promptmed/core/kernels.hpp"
#include "promptmed/core/random.hpp"

using namespace promptmed;

namespace {

FeatureMap random_map(int c, int h, int w, Rng& rng) {
  FeatureMap f(c, h, w);
  for (auto& v : f.values()) v = rng.normal();
  return f;
}

ConvWeights random_conv(int out, int in, int stride, Rng& rng) {
  ConvWeights w(out, in, 3, stride, 1);
  for (auto& v : w.weight) v = rng.normal();
  for (auto& v : w.bias) v = rng.normal();
  return w;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double inner(const FeatureMap& a, const FeatureMap& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.values()[i] * b.values()[i];
  return s;
}

}  // namespace

TEST_CASE("parallel conv kernels agree with the serial reference") {
  Rng rng(1);
  for (int stride : {1, 2}) {
    for (auto [h, w] : {std::pair{1, 1}, std::pair{5, 7}, std::pair{16, 16}}) {
      const auto in = random_map(3, h, w, rng);
      const auto cw = random_conv(4, 3, stride, rng);
      const auto out = kernels::conv2d(in, cw);
      CHECK(max_abs_diff(out.values(), kernels::serial::conv2d(in, cw).values()) < 1e-12);

      const auto dout = random_map(4, out.height(), out.width(), rng);
      CHECK(max_abs_diff(kernels::conv2d_backward_input(dout, cw, h, w).values(),
                         kernels::serial::conv2d_backward_input(dout, cw, h, w).values()) < 1e-12);

      ConvWeights a(4, 3, 3, stride, 1), b(4, 3, 3, stride, 1);
      kernels::conv2d_backward_weights(dout, in, a);
      kernels::serial::conv2d_backward_weights(dout, in, b);
      CHECK(max_abs_diff(a.weight, b.weight) < 1e-12);
      CHECK(max_abs_diff(a.bias, b.bias) < 1e-12);
    }
  }
}

TEST_CASE("conv backward is the adjoint of the forward map") {
  Rng rng(2);
  auto cw = random_conv(3, 2, 2, rng);
  std::fill(cw.bias.begin(), cw.bias.end(), 0.0);
  const auto x = random_map(2, 9, 6, rng);
  const auto y = kernels::conv2d(x, cw);
  const auto dy = random_map(3, y.height(), y.width(), rng);
  const auto dx = kernels::conv2d_backward_input(dy, cw, 9, 6);
  CHECK(inner(y, dy) == doctest::Approx(inner(x, dx)).epsilon(1e-10));

  // weight gradient: d<y,dy>/dw
  ConvWeights gw(3, 2, 3, 2, 1);
  kernels::conv2d_backward_weights(dy, x, gw);
  for (std::size_t i = 0; i < cw.weight.size(); i += 7) {
    const double keep = cw.weight[i];
    cw.weight[i] = keep + 1e-4;
    const double up = inner(kernels::conv2d(x, cw), dy);
    cw.weight[i] = keep - 1e-4;
    const double dn = inner(kernels::conv2d(x, cw), dy);
    cw.weight[i] = keep;
    CHECK(gw.weight[i] == doctest::Approx((up - dn) / 2e-4).epsilon(1e-7));
  }
}

TEST_CASE("bilinear upsampling and its adjoint") {
  Rng rng(3);
  const auto x = random_map(2, 4, 5, rng);
  const auto up = kernels::upsample_bilinear(x, 16, 20);
  CHECK(max_abs_diff(up.values(), kernels::serial::upsample_bilinear(x, 16, 20).values()) < 1e-12);
  const auto g = random_map(2, 16, 20, rng);
  const auto adj = kernels::upsample_bilinear_adjoint(g, 4, 5);
  CHECK(max_abs_diff(adj.values(), kernels::serial::upsample_bilinear_adjoint(g, 4, 5).values()) < 1e-12);
  CHECK(inner(up, g) == doctest::Approx(inner(x, adj)).epsilon(1e-10));

  // constant field stays constant; identity size is a copy
  FeatureMap c(1, 3, 3, 2.5);
  const auto cu = kernels::upsample_bilinear(c, 12, 7);
  for (double v : cu.values()) CHECK(v == doctest::Approx(2.5));
  CHECK(max_abs_diff(kernels::upsample_bilinear(x, 4, 5).values(), x.values()) < 1e-15);
}
