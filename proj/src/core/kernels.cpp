#include "promptmed/core/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace promptmed::kernels {

namespace {

void check_conv(const FeatureMap& in, const ConvWeights& w) {
  if (in.channels() != w.in_channels) throw std::invalid_argument("conv2d: channel mismatch");
  if (w.weight.size() != static_cast<std::size_t>(w.out_channels) * w.in_channels * w.kernel * w.kernel)
    throw std::invalid_argument("conv2d: weight size mismatch");
}

inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

// Output columns ox for which 0 <= ox*s - p + kx < n_in, as [lo, hi).
inline void valid_range(int n_in, int n_out, int s, int p, int kx, int& lo, int& hi) {
  lo = std::max(0, -floor_div(kx - p, s));
  hi = std::min(n_out, floor_div(n_in - 1 + p - kx, s) + 1);
}

inline std::size_t widx(const ConvWeights& w, int oc, int ic, int ky, int kx) {
  return ((static_cast<std::size_t>(oc) * w.in_channels + ic) * w.kernel + ky) * w.kernel + kx;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

ResizeTaps resize_taps(int n_in, int n_out) {
  ResizeTaps t;
  t.i0.resize(n_out);
  t.i1.resize(n_out);
  t.w0.resize(n_out);
  t.w1.resize(n_out);
  const double scale = static_cast<double>(n_in) / n_out;
  for (int o = 0; o < n_out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > n_in - 1) i0 = n_in - 1;
    const int i1 = std::min(i0 + 1, n_in - 1);
    const double f = src - i0;
    t.i0[o] = i0;
    t.i1[o] = i1;
    t.w1[o] = i1 == i0 ? 0.0 : f;
    t.w0[o] = 1.0 - t.w1[o];
  }
  return t;
}

FeatureMap conv2d(const FeatureMap& in, const ConvWeights& w) {
  check_conv(in, w);
  const int oh = w.out_size(in.height()), ow = w.out_size(in.width());
  const int ih = in.height(), iw = in.width(), k = w.kernel, s = w.stride, p = w.pad;
  FeatureMap out(w.out_channels, oh, ow);
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < w.out_channels; ++oc) {
    double* o = out.channel(oc);
    std::fill(o, o + out.plane(), w.bias[oc]);
    for (int ic = 0; ic < w.in_channels; ++ic) {
      const double* src = in.channel(ic);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w.weight[widx(w, oc, ic, ky, kx)];
                    int ox_lo, ox_hi;
          valid_range(iw, ow, s, p, kx, ox_lo, ox_hi);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * s - p + ky;
            if (iy < 0 || iy >= ih) continue;
            const double* row = src + static_cast<std::size_t>(iy) * iw;
            double* orow = o + static_cast<std::size_t>(oy) * ow;
            for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * row[ox * s - p + kx];
          }
        }
    }
  }
  return out;
}

FeatureMap conv2d_backward_input(const FeatureMap& dout, const ConvWeights& w, int in_h, int in_w) {
  if (dout.channels() != w.out_channels) throw std::invalid_argument("conv2d_backward_input: channel mismatch");
  const int oh = dout.height(), ow = dout.width(), k = w.kernel, s = w.stride, p = w.pad;
  FeatureMap din(w.in_channels, in_h, in_w);
#pragma omp parallel for schedule(static)
  for (int ic = 0; ic < w.in_channels; ++ic) {
    double* d = din.channel(ic);
    for (int oc = 0; oc < w.out_channels; ++oc) {
      const double* g = dout.channel(oc);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const double wv = w.weight[widx(w, oc, ic, ky, kx)];
          int ox_lo, ox_hi;
          valid_range(in_w, ow, s, p, kx, ox_lo, ox_hi);
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * s - p + ky;
            if (iy < 0 || iy >= in_h) continue;
            double* drow = d + static_cast<std::size_t>(iy) * in_w;
            const double* grow = g + static_cast<std::size_t>(oy) * ow;
            for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox * s - p + kx] += wv * grow[ox];
          }
        }
    }
  }
  return din;
}

void conv2d_backward_weights(const FeatureMap& dout, const FeatureMap& in, ConvWeights& dw) {
  check_conv(in, dw);
  const int oh = dout.height(), ow = dout.width(), ih = in.height(), iw = in.width();
  const int k = dw.kernel, s = dw.stride, p = dw.pad;
#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < dw.out_channels; ++oc) {
    const double* g = dout.channel(oc);
    double bsum = 0.0;
    for (std::size_t i = 0; i < dout.plane(); ++i) bsum += g[i];
    dw.bias[oc] += bsum;
    for (int ic = 0; ic < dw.in_channels; ++ic) {
      const double* src = in.channel(ic);
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          int ox_lo, ox_hi;
          valid_range(iw, ow, s, p, kx, ox_lo, ox_hi);
          double acc = 0.0;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * s - p + ky;
            if (iy < 0 || iy >= ih) continue;
            const double* row = src + static_cast<std::size_t>(iy) * iw;
            const double* grow = g + static_cast<std::size_t>(oy) * ow;
            for (int ox = ox_lo; ox < ox_hi; ++ox) acc += grow[ox] * row[ox * s - p + kx];
          }
          dw.weight[widx(dw, oc, ic, ky, kx)] += acc;
        }
    }
  }
}

FeatureMap upsample_bilinear(const FeatureMap& in, int out_h, int out_w) {
  const auto ty = resize_taps(in.height(), out_h);
  const auto tx = resize_taps(in.width(), out_w);
  FeatureMap out(in.channels(), out_h, out_w);
  const int iw = in.width();
#pragma omp parallel for collapse(2) schedule(static)
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < out_h; ++y) {
      const double* r0 = in.channel(c) + static_cast<std::size_t>(ty.i0[y]) * iw;
      const double* r1 = in.channel(c) + static_cast<std::size_t>(ty.i1[y]) * iw;
      const double a0 = ty.w0[y], a1 = ty.w1[y];
      double* o = out.channel(c) + static_cast<std::size_t>(y) * out_w;
      for (int x = 0; x < out_w; ++x) {
        const int x0 = tx.i0[x], x1 = tx.i1[x];
        const double top = tx.w0[x] * r0[x0] + tx.w1[x] * r0[x1];
        const double bot = tx.w0[x] * r1[x0] + tx.w1[x] * r1[x1];
        o[x] = a0 * top + a1 * bot;
      }
    }
  return out;
}

FeatureMap upsample_bilinear_adjoint(const FeatureMap& dout, int in_h, int in_w) {
  const int oh = dout.height(), ow = dout.width();
  const auto ty = resize_taps(in_h, oh);
  const auto tx = resize_taps(in_w, ow);
  FeatureMap din(dout.channels(), in_h, in_w);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < dout.channels(); ++c) {
    std::vector<double> tmp(in_w);
    double* d = din.channel(c);
    for (int y = 0; y < oh; ++y) {
      std::fill(tmp.begin(), tmp.end(), 0.0);
      const double* g = dout.channel(c) + static_cast<std::size_t>(y) * ow;
      for (int x = 0; x < ow; ++x) {
        tmp[tx.i0[x]] += tx.w0[x] * g[x];
        tmp[tx.i1[x]] += tx.w1[x] * g[x];
      }
      double* r0 = d + static_cast<std::size_t>(ty.i0[y]) * in_w;
      double* r1 = d + static_cast<std::size_t>(ty.i1[y]) * in_w;
      for (int x = 0; x < in_w; ++x) {
        r0[x] += ty.w0[y] * tmp[x];
        r1[x] += ty.w1[y] * tmp[x];
      }
    }
  }
  return din;
}

void tanh_inplace(FeatureMap& x) {
  auto& v = x.values();
  const auto n = static_cast<std::ptrdiff_t>(v.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) v[i] = std::tanh(v[i]);
}

namespace serial {

FeatureMap conv2d(const FeatureMap& in, const ConvWeights& w) {
  check_conv(in, w);
  const int oh = w.out_size(in.height()), ow = w.out_size(in.width());
  FeatureMap out(w.out_channels, oh, ow);
  for (int oc = 0; oc < w.out_channels; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = w.bias[oc];
        for (int ic = 0; ic < w.in_channels; ++ic)
          for (int ky = 0; ky < w.kernel; ++ky)
            for (int kx = 0; kx < w.kernel; ++kx) {
              const int iy = oy * w.stride - w.pad + ky, ix = ox * w.stride - w.pad + kx;
              if (iy < 0 || ix < 0 || iy >= in.height() || ix >= in.width()) continue;
              acc += w.weight[widx(w, oc, ic, ky, kx)] * in(ic, iy, ix);
            }
        out(oc, oy, ox) = acc;
      }
  return out;
}

FeatureMap conv2d_backward_input(const FeatureMap& dout, const ConvWeights& w, int in_h, int in_w) {
  FeatureMap din(w.in_channels, in_h, in_w);
  for (int ic = 0; ic < w.in_channels; ++ic)
    for (int iy = 0; iy < in_h; ++iy)
      for (int ix = 0; ix < in_w; ++ix) {
        double acc = 0.0;
        for (int oc = 0; oc < w.out_channels; ++oc)
          for (int ky = 0; ky < w.kernel; ++ky)
            for (int kx = 0; kx < w.kernel; ++kx) {
              const int ny = iy + w.pad - ky, nx = ix + w.pad - kx;
              if (ny < 0 || nx < 0 || ny % w.stride || nx % w.stride) continue;
              const int oy = ny / w.stride, ox = nx / w.stride;
              if (oy >= dout.height() || ox >= dout.width()) continue;
              acc += w.weight[widx(w, oc, ic, ky, kx)] * dout(oc, oy, ox);
            }
        din(ic, iy, ix) = acc;
      }
  return din;
}

void conv2d_backward_weights(const FeatureMap& dout, const FeatureMap& in, ConvWeights& dw) {
  check_conv(in, dw);
  for (int oc = 0; oc < dw.out_channels; ++oc) {
    for (int oy = 0; oy < dout.height(); ++oy)
      for (int ox = 0; ox < dout.width(); ++ox) dw.bias[oc] += dout(oc, oy, ox);
    for (int ic = 0; ic < dw.in_channels; ++ic)
      for (int ky = 0; ky < dw.kernel; ++ky)
        for (int kx = 0; kx < dw.kernel; ++kx) {
          double acc = 0.0;
          for (int oy = 0; oy < dout.height(); ++oy)
            for (int ox = 0; ox < dout.width(); ++ox) {
              const int iy = oy * dw.stride - dw.pad + ky, ix = ox * dw.stride - dw.pad + kx;
              if (iy < 0 || ix < 0 || iy >= in.height() || ix >= in.width()) continue;
              acc += dout(oc, oy, ox) * in(ic, iy, ix);
            }
          dw.weight[widx(dw, oc, ic, ky, kx)] += acc;
        }
  }
}

namespace {
void taps_at(int n_in, int n_out, int o, int& i0, int& i1, double& w0, double& w1) {
  double src = (o + 0.5) * static_cast<double>(n_in) / n_out - 0.5;
  src = std::max(src, 0.0);
  i0 = std::min(static_cast<int>(std::floor(src)), n_in - 1);
  i1 = std::min(i0 + 1, n_in - 1);
  w1 = i1 == i0 ? 0.0 : src - i0;
  w0 = 1.0 - w1;
}
}  // namespace

FeatureMap upsample_bilinear(const FeatureMap& in, int out_h, int out_w) {
  FeatureMap out(in.channels(), out_h, out_w);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        int y0, y1, x0, x1;
        double a0, a1, b0, b1;
        taps_at(in.height(), out_h, y, y0, y1, a0, a1);
        taps_at(in.width(), out_w, x, x0, x1, b0, b1);
        out(c, y, x) = a0 * b0 * in(c, y0, x0) + a0 * b1 * in(c, y0, x1) + a1 * b0 * in(c, y1, x0) +
                       a1 * b1 * in(c, y1, x1);
      }
  return out;
}

FeatureMap upsample_bilinear_adjoint(const FeatureMap& dout, int in_h, int in_w) {
  FeatureMap din(dout.channels(), in_h, in_w);
  for (int c = 0; c < dout.channels(); ++c)
    for (int y = 0; y < dout.height(); ++y)
      for (int x = 0; x < dout.width(); ++x) {
        int y0, y1, x0, x1;
        double a0, a1, b0, b1;
        taps_at(in_h, dout.height(), y, y0, y1, a0, a1);
        taps_at(in_w, dout.width(), x, x0, x1, b0, b1);
        const double g = dout(c, y, x);
        din(c, y0, x0) += a0 * b0 * g;
        din(c, y0, x1) += a0 * b1 * g;
        din(c, y1, x0) += a1 * b0 * g;
        din(c, y1, x1) += a1 * b1 * g;
      }
  return din;
}

}  // namespace serial
}  // namespace promptmed::kernels
