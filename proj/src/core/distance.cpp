#include "promptmed/core/distance.hpp"

#include <cmath>
#include <limits>
#include <algorithm>
#include <vector>

namespace promptmed {

namespace {

// Unreached pixels. Large enough to dominate any squared in-image distance,
// small enough that f + q*q stays exact in double precision.
constexpr double kFar = 1e12;
constexpr double kInf = std::numeric_limits<double>::infinity();

// Squared distance lower envelope of parabolas (Felzenszwalb & Huttenlocher).
void edt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  int k = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * (q - v[k]));
    while (s <= z[k]) {
      --k;
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * (q - v[k]));
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double diff = q - v[k];
    d[q] = diff * diff + f[v[k]];
  }
}

}  // namespace

Grid2<double> distance_transform(const LabelMask& mask) {
  // Pad by one background pixel on each side so the image border acts as background.
  const int h = mask.height() + 2, w = mask.width() + 2;
  std::vector<double> g(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      g[static_cast<std::size_t>(y + 1) * w + x + 1] = mask.pixels(y, x) ? kFar : 0.0;

  std::vector<int> v;
  std::vector<double> z, f(std::max(h, w)), d(std::max(h, w));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) f[y] = g[static_cast<std::size_t>(y) * w + x];
    edt_1d(f.data(), h, d.data(), v, z);
    for (int y = 0; y < h; ++y) g[static_cast<std::size_t>(y) * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    double* row = g.data() + static_cast<std::size_t>(y) * w;
    std::copy(row, row + w, f.begin());
    edt_1d(f.data(), w, d.data(), v, z);
    std::copy(d.begin(), d.begin() + w, row);
  }

  Grid2<double> out(mask.height(), mask.width(), 0.0);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      out(y, x) = mask.pixels(y, x) ? std::sqrt(g[static_cast<std::size_t>(y + 1) * w + x + 1]) : 0.0;
  return out;
}

bool interior_most_pixel(const LabelMask& mask, int& y, int& x) {
  const auto dt = distance_transform(mask);
  double best = -1.0;
  for (int yy = 0; yy < mask.height(); ++yy)
    for (int xx = 0; xx < mask.width(); ++xx)
      if (mask.pixels(yy, xx) && dt(yy, xx) > best) {
        best = dt(yy, xx);
        y = yy;
        x = xx;
      }
  return best >= 0.0;
}

}  // namespace promptmed
