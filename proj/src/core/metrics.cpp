#include "promptmed/core/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace promptmed {

void LossConfig::validate() const {
  if (!(beta >= 0.0)) throw std::invalid_argument("LossConfig: beta must be >= 0");
  if (!(smooth >= 0.0)) throw std::invalid_argument("LossConfig: smooth must be >= 0");
}

double sigmoid(double x) noexcept {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double dice_from_counts(const ConfusionCounts& c) {
  const auto denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt) {
  require_same_shape(pred, gt, "confusion");
  ConfusionCounts c;
  const auto& p = pred.pixels.values();
  const auto& g = gt.pixels.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] != 0, b = g[i] != 0;
    if (a && b) ++c.tp;
    else if (a) ++c.fp;
    else if (b) ++c.fn;
    else ++c.tn;
  }
  return c;
}

ConfusionCounts confusion(const Mask3D& pred, const Mask3D& gt) {
  if (pred.depth() != gt.depth() || pred.height() != gt.height() || pred.width() != gt.width())
    throw std::invalid_argument("confusion: volume shapes differ");
  ConfusionCounts c;
  const auto& p = pred.values();
  const auto& g = gt.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] != 0, b = g[i] != 0;
    if (a && b) ++c.tp;
    else if (a) ++c.fp;
    else if (b) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double dice(const LabelMask& a, const LabelMask& b) { return dice_from_counts(confusion(a, b)); }
double dice(const Mask3D& a, const Mask3D& b) { return dice_from_counts(confusion(a, b)); }

SoftCounts soft_counts(const Grid2<double>& pred, const LabelMask& gt) {
  if (!pred.same_shape(gt.pixels)) throw std::invalid_argument("soft_counts: shapes differ");
  SoftCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i];
    if (gt.pixels[i]) {
      c.tp += p;
      c.fn += 1.0 - p;
    } else {
      c.fp += p;
    }
  }
  return c;
}

double biased_dice_loss(const SoftCounts& c, const LossConfig& cfg) {
  cfg.validate();
  const double num = 2.0 * c.tp + cfg.smooth;
  const double den = 2.0 * c.tp + cfg.beta * c.fp + c.fn + cfg.smooth;
  if (den == 0.0) return 0.0;  // 0/0 only when every count and smooth are zero
  return 1.0 - num / den;
}

double biased_dice_loss(const Grid2<double>& pred, const LabelMask& gt, const LossConfig& cfg) {
  return biased_dice_loss(soft_counts(pred, gt), cfg);
}

double biased_dice_loss_grad(const Grid2<double>& pred, const LabelMask& gt, const LossConfig& cfg,
                             Grid2<double>& grad) {
  const SoftCounts c = soft_counts(pred, gt);
  cfg.validate();
  const double num = 2.0 * c.tp + cfg.smooth;
  const double den = 2.0 * c.tp + cfg.beta * c.fp + c.fn + cfg.smooth;
  grad = Grid2<double>(pred.height(), pred.width(), 0.0);
  if (den == 0.0) return 0.0;
  const double inv_den2 = 1.0 / (den * den);
  // d(num)/dp = 2g ; d(den)/dp = g + beta (1 - g)
  const double fg = -(2.0 * den - num * 1.0) * inv_den2;
  const double bg = -(0.0 - num * cfg.beta) * inv_den2;
  for (std::size_t i = 0; i < pred.size(); ++i) grad[i] = gt.pixels[i] ? fg : bg;
  return 1.0 - num / den;
}

double bce_with_logits_grad(const Grid2<double>& logits, const LabelMask& gt, Grid2<double>* grad) {
  if (!logits.same_shape(gt.pixels)) throw std::invalid_argument("bce: shapes differ");
  const double n = static_cast<double>(logits.size());
  if (grad) *grad = Grid2<double>(logits.height(), logits.width(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double l = logits[i];
    const double g = gt.pixels[i] ? 1.0 : 0.0;
    // softplus(l) - g*l, computed stably
    total += std::max(l, 0.0) + std::log1p(std::exp(-std::abs(l))) - g * l;
    if (grad) (*grad)[i] = (sigmoid(l) - g) / n;
  }
  return total / n;
}

}  // namespace promptmed
