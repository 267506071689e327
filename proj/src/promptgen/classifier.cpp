#include "promptmed/promptgen/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "promptmed/core/kernels.hpp"
#include "promptmed/core/metrics.hpp"
#include "promptmed/core/random.hpp"

namespace promptmed {

double PointClassifier::probability(const std::vector<double>& f) const {
  if (constant) return 0.5;
  if (static_cast<int>(f.size()) != feature_dim) throw std::invalid_argument("classifier: feature size mismatch");
  double z = bias;
  for (int i = 0; i < feature_dim; ++i) z += weights[i] * (f[i] - feature_mean[i]) / feature_scale[i];
  return sigmoid(z);
}

PointClassifier fit_logistic(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                             const ClassifierTrainConfig& cfg) {
  if (x.empty() || x.size() != y.size()) throw std::invalid_argument("classifier: need matching non-empty samples");
  const bool has0 = std::count(y.begin(), y.end(), 0) > 0, has1 = std::count(y.begin(), y.end(), 1) > 0;
  if (!has0 || !has1) throw std::invalid_argument("classifier: training data must contain both classes");
  const int d = static_cast<int>(x.front().size());
  const double n = static_cast<double>(x.size());
  PointClassifier c;
  c.feature_dim = d;
  c.feature_mean.assign(d, 0.0);
  c.feature_scale.assign(d, 0.0);
  for (const auto& r : x) {
    if (static_cast<int>(r.size()) != d) throw std::invalid_argument("classifier: ragged feature rows");
    for (int i = 0; i < d; ++i) c.feature_mean[i] += r[i] / n;
  }
  for (const auto& r : x)
    for (int i = 0; i < d; ++i) c.feature_scale[i] += (r[i] - c.feature_mean[i]) * (r[i] - c.feature_mean[i]) / n;
  for (auto& s : c.feature_scale) s = s > 1e-24 ? std::sqrt(s) : 1.0;

  std::vector<std::vector<double>> z(x.size(), std::vector<double>(d));
  for (std::size_t k = 0; k < x.size(); ++k)
    for (int i = 0; i < d; ++i) z[k][i] = (x[k][i] - c.feature_mean[i]) / c.feature_scale[i];

  c.weights.assign(d, 0.0);
  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
      double s = c.bias;
      for (int i = 0; i < d; ++i) s += c.weights[i] * z[k][i];
      const double r = sigmoid(s) - y[k];
      for (int i = 0; i < d; ++i) gw[i] += r * z[k][i] / n;
      gb += r / n;
    }
    for (int i = 0; i < d; ++i) c.weights[i] -= cfg.lr * (gw[i] + cfg.l2 * c.weights[i]);
    c.bias -= cfg.lr * gb;
  }
  std::size_t correct = 0;
  for (std::size_t k = 0; k < x.size(); ++k) correct += (c.probability(x[k]) > 0.5) == (y[k] == 1);
  c.training_accuracy = static_cast<double>(correct) / n;
  if (c.training_accuracy < 0.5) {
    // Worse than chance on balanced data: use the constant predictor instead.
    c.constant = true;
    std::size_t ones = std::count(y.begin(), y.end(), 1);
    c.training_accuracy = static_cast<double>(std::max(ones, y.size() - ones)) / n;
  }
  return c;
}

std::vector<double> pixel_feature(const ImageEmbedding& emb, int y, int x) {
  const auto& f = emb.features;
  // half-pixel mapping of a source pixel centre onto the embedding grid
  const double gy = std::clamp((y + 0.5) * f.height() / emb.source_height - 0.5, 0.0, f.height() - 1.0);
  const double gx = std::clamp((x + 0.5) * f.width() / emb.source_width - 0.5, 0.0, f.width() - 1.0);
  const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
  const int y1 = std::min(y0 + 1, f.height() - 1), x1 = std::min(x0 + 1, f.width() - 1);
  const double wy = gy - y0, wx = gx - x0;
  std::vector<double> out(f.channels());
  for (int c = 0; c < f.channels(); ++c)
    out[c] = (1 - wy) * ((1 - wx) * f(c, y0, x0) + wx * f(c, y0, x1)) + wy * ((1 - wx) * f(c, y1, x0) + wx * f(c, y1, x1));
  return out;
}

PointClassifier train_point_classifier(const std::vector<TrainPair>& pairs, const Backbone& backbone,
                                       const ClassifierTrainConfig& cfg, const std::string& case_id) {
  if (pairs.empty()) throw std::invalid_argument("classifier: no training pairs");
  Rng rng(cfg.seed);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const auto& p : pairs) {
    const auto emb = backbone.encode_image(p.image);
    std::vector<std::size_t> fg, bg;
    for (std::size_t i = 0; i < p.label.pixels.size(); ++i) (p.label.pixels[i] ? fg : bg).push_back(i);
    if (fg.empty() || bg.empty()) continue;
    const std::size_t k = std::min<std::size_t>({fg.size(), bg.size(), static_cast<std::size_t>(cfg.samples_per_class)});
    const int w = p.image.width();
    for (auto* cls : {&fg, &bg})
      for (auto idx : rng.sample_without_replacement(cls->size(), k)) {
        const auto flat = (*cls)[idx];
        x.push_back(pixel_feature(emb, static_cast<int>(flat / w), static_cast<int>(flat % w)));
        y.push_back(cls == &fg ? 1 : 0);
      }
  }
  if (x.empty()) throw std::invalid_argument("classifier: no training pair has both foreground and background");
  auto c = fit_logistic(x, y, cfg);
  c.trained_on = case_id;
  return c;
}

std::vector<ScoredPoint> score_candidate_points(const SliceImage& image, const PointClassifier& clf,
                                                const Backbone& backbone, int grid_stride, int n_per_class) {
  if (grid_stride < 1) throw std::invalid_argument("classifier: grid_stride must be >= 1");
  const auto emb = backbone.encode_image(image);
  std::vector<ScoredPoint> fg, bg;
  for (int y = grid_stride / 2; y < image.height(); y += grid_stride)
    for (int x = grid_stride / 2; x < image.width(); x += grid_stride) {
      const double p = clf.probability(pixel_feature(emb, y, x));
      if (p > 0.5) fg.push_back({{double(x), double(y), PointLabel::Foreground}, p});
      else bg.push_back({{double(x), double(y), PointLabel::Background}, 1 - p});
    }
  auto by_conf = [](const ScoredPoint& a, const ScoredPoint& b) { return a.confidence > b.confidence; };
  std::stable_sort(fg.begin(), fg.end(), by_conf);
  std::stable_sort(bg.begin(), bg.end(), by_conf);
  if (static_cast<int>(fg.size()) > n_per_class) fg.resize(n_per_class);
  if (static_cast<int>(bg.size()) > n_per_class) bg.resize(n_per_class);
  std::vector<ScoredPoint> out = fg;
  out.insert(out.end(), bg.begin(), bg.end());
  std::stable_sort(out.begin(), out.end(), by_conf);
  return out;
}

PromptSet classify_candidate_points(const SliceImage& image, const PointClassifier& clf, const Backbone& backbone,
                                    int grid_stride, int n_per_class) {
  PromptSet ps;
  for (const auto& s : score_candidate_points(image, clf, backbone, grid_stride, n_per_class)) ps.add(s.point);
  return ps;
}

LabelMask segment_classified(const AssistModel& model, const SliceImage& image, const PromptSet& prompts) {
  const auto pts = prompts.points();
  const bool any_fg = std::any_of(pts.begin(), pts.end(), [](const PointPrompt& p) { return p.label == PointLabel::Foreground; });
  if (!any_fg) return LabelMask(image.height(), image.width());
  return model.segment(image, prompts);
}

}  // namespace promptmed
