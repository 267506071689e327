#pragma once

#include <vector>

#include "promptmed/core/random.hpp"
#include "promptmed/core/raster.hpp"

namespace promptmed {

enum class SpreadRule {
  IndexStddev,  // s = stddev of the foreground slice indices
  RangeQuarter, // s = (max - min + 1) / 4
};

struct SliceSelectionPolicy {
  int n_slices = 5;
  int background_count = 0;
  SpreadRule spread = SpreadRule::IndexStddev;
};

struct SliceSelection {
  std::vector<int> foreground;
  std::vector<int> background;
  double m = 0.0;  // centre of the draw distribution
  double s = 0.0;  // its spread
};

/// Indices of slices with any foreground, ascending.
std::vector<int> foreground_slices(const Mask3D& labels);

/// Normal(m, s^2) draws rounded to a slice index. m is the median foreground
/// index. A draw is rejected when it lands outside [min, max] of the
/// foreground range or on a slice without foreground; after 10 rejections the
/// draw is clamped into the range and snapped to the nearest foreground slice.
/// Duplicates are redrawn; when fewer distinct foreground slices exist than
/// requested, all of them are returned.
SliceSelection select_training_slices(const Mask3D& labels, const SliceSelectionPolicy& policy, Rng& rng);

/// One draw of the rejection-clamped Normal rule (exposed for statistics tests).
int draw_foreground_slice(const std::vector<int>& fg, double m, double s, Rng& rng);

}  // namespace promptmed
