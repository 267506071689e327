#include "promptmed/sapnet/sapnet.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "promptmed/core/hashing.hpp"
#include "promptmed/core/kernels.hpp"

namespace promptmed {

PositionEncoder PositionEncoder::sample(int d, double sigma, Rng& rng) {
  if (d < 1 || !(sigma > 0)) throw std::invalid_argument("position encoder: need d >= 1 and sigma > 0");
  PositionEncoder p;
  p.d = d;
  p.sigma = sigma;
  p.B.resize(2 * static_cast<std::size_t>(d));
  for (auto& b : p.B) b = rng.normal(0.0, sigma);
  return p;
}

std::vector<double> PositionEncoder::encode(double x, double y) const {
  std::vector<double> out(2 * static_cast<std::size_t>(d));
  for (int k = 0; k < d; ++k) {
    const double t = 2.0 * std::numbers::pi * (B[k] * x + B[d + k] * y);
    out[k] = std::cos(t);
    out[d + k] = std::sin(t);
  }
  return out;
}

FeatureMap PositionEncoder::grid(int height, int width) const {
  FeatureMap g(2 * d, height, width);
  for (int i = 0; i < height; ++i)
    for (int j = 0; j < width; ++j) {
      const double x = width > 1 ? static_cast<double>(j) / (width - 1) : 0.0;
      const double y = height > 1 ? static_cast<double>(i) / (height - 1) : 0.0;
      const auto e = encode(x, y);
      for (int c = 0; c < 2 * d; ++c) g(c, i, j) = e[c];
    }
  return g;
}

Tuner Tuner::init(int in_channels, int hidden, int out_channels, Rng& rng) {
  Tuner t;
  t.conv1 = ConvWeights(hidden, in_channels, 3, 1, 1);
  t.conv2 = ConvWeights(out_channels, hidden, 3, 1, 1);
  for (auto& w : t.conv1.weight) w = rng.normal(0.0, std::sqrt(1.0 / (9.0 * in_channels)));
  for (auto& w : t.conv2.weight) w = rng.normal(0.0, std::sqrt(1.0 / (9.0 * hidden)));
  return t;
}

std::size_t Tuner::size() const noexcept {
  return conv1.weight.size() + conv1.bias.size() + conv2.weight.size() + conv2.bias.size();
}

std::vector<double> Tuner::flatten() const {
  std::vector<double> f;
  f.reserve(size());
  for (const auto* v : {&conv1.weight, &conv1.bias, &conv2.weight, &conv2.bias}) f.insert(f.end(), v->begin(), v->end());
  return f;
}

void Tuner::unflatten(const std::vector<double>& flat) {
  if (flat.size() != size()) throw std::invalid_argument("tuner: flat size mismatch");
  auto it = flat.begin();
  for (auto* v : {&conv1.weight, &conv1.bias, &conv2.weight, &conv2.bias}) {
    std::copy(it, it + static_cast<std::ptrdiff_t>(v->size()), v->begin());
    it += static_cast<std::ptrdiff_t>(v->size());
  }
}

Tuner Tuner::zeros_like() const {
  Tuner z = *this;
  for (auto* v : {&z.conv1.weight, &z.conv1.bias, &z.conv2.weight, &z.conv2.bias}) std::fill(v->begin(), v->end(), 0.0);
  return z;
}

std::uint64_t Tuner::hash() const {
  return Fnv1a().update(flatten()).digest();
}

void FeatureExtractor::validate_for_dataset(bool is_2d) const {
  if (!encoder) throw std::invalid_argument("feature extractor: no encoder");
  if (is_2d && pos) throw std::invalid_argument("feature extractor: position encoding must be disabled for 2-D datasets");
}

FeatureExtractor make_feature_extractor(const Backbone& encoder, bool use_pe, int d, double sigma, std::uint64_t seed,
                                        int hidden, int out_channels) {
  Rng rng(seed);
  FeatureExtractor fx;
  fx.encoder = &encoder;
  fx.tuner = Tuner::init(encoder.descriptor().embed_dim, hidden, out_channels, rng);
  if (use_pe) fx.pos = PositionEncoder::sample(d, sigma, rng);
  return fx;
}

FeatureMap extract_features(const ImageEmbedding& emb, const FeatureExtractor& fx) {
  FeatureMap h = kernels::conv2d(emb.features, fx.tuner.conv1);
  kernels::tanh_inplace(h);
  FeatureMap t = kernels::conv2d(h, fx.tuner.conv2);
  if (!fx.pos) return t;
  const FeatureMap g = fx.pos->grid(t.height(), t.width());
  FeatureMap out(fx.channels(), t.height(), t.width());
  std::copy(t.values().begin(), t.values().end(), out.values().begin());
  std::copy(g.values().begin(), g.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(t.size()));
  return out;
}

FeatureMap extract_features(const SliceImage& image, const FeatureExtractor& fx) {
  if (!fx.encoder) throw std::invalid_argument("feature extractor: no encoder");
  image.validate();
  return extract_features(fx.encoder->encode_image(image), fx);
}

double cosine_distance(const double* a, const double* b, int n, bool* zero_flag) {
  double ab = 0, aa = 0, bb = 0;
  for (int i = 0; i < n; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa <= 0.0 || bb <= 0.0) {
    if (zero_flag) *zero_flag = true;
    return 1.0;
  }
  return 1.0 - ab / std::sqrt(aa * bb);
}

PrototypeSet compute_prototypes(const std::vector<FeatureMap>& features, const std::vector<Grid2<double>>& w,
                                double alpha) {
  if (features.empty() || features.size() != w.size())
    throw std::invalid_argument("prototypes: need one weight map per support feature map");
  if (!(alpha > 0)) throw std::invalid_argument("prototypes: alpha must be > 0");
  const int D = features.front().channels();
  PrototypeSet p;
  p.alpha = alpha;
  p.fg.assign(D, 0.0);
  p.bg.assign(D, 0.0);
  double wf = 0, wb = 0;
  for (std::size_t k = 0; k < features.size(); ++k) {
    const auto& f = features[k];
    if (f.channels() != D || f.height() != w[k].height() || f.width() != w[k].width())
      throw std::invalid_argument("prototypes: feature/mask shape mismatch");
    const std::size_t n = f.plane();
    for (std::size_t i = 0; i < n; ++i) {
      wf += w[k][i];
      wb += 1.0 - w[k][i];
    }
    for (int c = 0; c < D; ++c) {
      const double* fc = f.channel(c);
      double sf = 0, sb = 0;
      for (std::size_t i = 0; i < n; ++i) {
        sf += w[k][i] * fc[i];
        sb += (1.0 - w[k][i]) * fc[i];
      }
      p.fg[c] += sf;
      p.bg[c] += sb;
    }
  }
  if (wf <= 1e-12) throw std::invalid_argument("prototypes: foreground class has no support pixels");
  if (wb <= 1e-12) throw std::invalid_argument("prototypes: background class has no support pixels");
  for (int c = 0; c < D; ++c) {
    p.fg[c] /= wf;
    p.bg[c] /= wb;
  }
  return p;
}

PrototypeSet compute_prototypes(const std::vector<FeatureMap>& features, const std::vector<LabelMask>& masks,
                                double alpha) {
  std::vector<Grid2<double>> w;
  for (const auto& m : masks) {
    Grid2<double> g(m.height(), m.width());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = m.pixels[i] ? 1.0 : 0.0;
    w.push_back(std::move(g));
  }
  return compute_prototypes(features, w, alpha);
}

QueryPrediction predict_query(const FeatureMap& f, const PrototypeSet& protos) {
  const int D = f.channels();
  if (static_cast<int>(protos.fg.size()) != D || static_cast<int>(protos.bg.size()) != D)
    throw std::invalid_argument("predict_query: feature dim does not match prototypes");
  const int h = f.height(), w = f.width();
  QueryPrediction q{Grid2<double>(h, w), Grid2<double>(h, w), Grid2<double>(h, w), LabelMask(h, w), false};
  std::vector<double> v(D);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < D; ++c) v[c] = f(c, y, x);
      const double dfg = cosine_distance(v.data(), protos.fg.data(), D, &q.zero_feature);
      const double dbg = cosine_distance(v.data(), protos.bg.data(), D, &q.zero_feature);
      // two-way softmax of -alpha * dist, written as a logistic for stability
      const double z = protos.alpha * (dbg - dfg);
      const double sfg = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      q.fg(y, x) = sfg;
      q.bg(y, x) = 1.0 - sfg;
      q.logit(y, x) = z;
      q.hard.pixels(y, x) = z > 0;
    }
  return q;
}

Grid2<double> pool_to_grid(const LabelMask& m, int he, int we) {
  Grid2<double> out(he, we, 0.0);
  const int H = m.height(), W = m.width();
  for (int i = 0; i < he; ++i) {
    const int y0 = i * H / he, y1 = std::max(y0 + 1, (i + 1) * H / he);
    for (int j = 0; j < we; ++j) {
      const int x0 = j * W / we, x1 = std::max(x0 + 1, (j + 1) * W / we);
      int s = 0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) s += m.pixels(y, x);
      out(i, j) = static_cast<double>(s) / ((y1 - y0) * (x1 - x0));
    }
  }
  return out;
}

}  // namespace promptmed
