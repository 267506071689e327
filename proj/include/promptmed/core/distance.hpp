#pragma once

#include "promptmed/core/raster.hpp"

namespace promptmed {

/// Exact Euclidean distance from every foreground pixel to the nearest
/// background pixel (pixels outside the image count as background).
/// Background pixels get 0. Separable two-pass lower-envelope algorithm.
Grid2<double> distance_transform(const LabelMask& mask);

/// Foreground pixel with the largest distance value; ties go to the lowest
/// scan-order pixel. Returns false for an empty mask.
bool interior_most_pixel(const LabelMask& mask, int& y, int& x);

}  // namespace promptmed
