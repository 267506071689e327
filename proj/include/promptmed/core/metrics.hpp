#pragma once

#include <cstdint>

#include "promptmed/core/raster.hpp"

namespace promptmed {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;
  std::int64_t total() const noexcept { return tp + fp + fn + tn; }
  bool operator==(const ConfusionCounts&) const = default;
};

struct LossConfig {
  double beta = 1.0;     // weight of the false-positive term
  double smooth = 1e-6;  // added to numerator and denominator
  void validate() const;
};

/// Soft counts: TP = sum p*g, FP = sum p*(1-g), FN = sum (1-p)*g.
struct SoftCounts {
  double tp = 0.0;
  double fp = 0.0;
  double fn = 0.0;
};

/// 2|a and b| / (|a| + |b|). Both empty counts as perfect agreement (1.0).
double dice(const LabelMask& a, const LabelMask& b);
double dice(const Mask3D& a, const Mask3D& b);
double dice_from_counts(const ConfusionCounts& c);

ConfusionCounts confusion(const LabelMask& pred, const LabelMask& gt);
ConfusionCounts confusion(const Mask3D& pred, const Mask3D& gt);

SoftCounts soft_counts(const Grid2<double>& pred, const LabelMask& gt);

/// 1 - (2TP + s) / (2TP + beta*FP + FN + s) on soft counts.
double biased_dice_loss(const Grid2<double>& pred, const LabelMask& gt, const LossConfig& cfg);
double biased_dice_loss(const SoftCounts& c, const LossConfig& cfg);

/// Loss value and its gradient w.r.t. each entry of `pred`.
double biased_dice_loss_grad(const Grid2<double>& pred, const LabelMask& gt, const LossConfig& cfg,
                             Grid2<double>& grad);

/// Mean binary cross-entropy evaluated on logits, with gradient w.r.t. logits.
double bce_with_logits_grad(const Grid2<double>& logits, const LabelMask& gt, Grid2<double>* grad);

double sigmoid(double x) noexcept;

}  // namespace promptmed
