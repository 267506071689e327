#pragma once

#include <cstdint>
#include <vector>

#include "promptmed/core/raster.hpp"

namespace promptmed {

enum class Connectivity2D { Four = 4, Eight = 8 };
enum class Connectivity3D { Six = 6, TwentySix = 26 };

struct Component {
  int label = 0;                // 1-based label in the label image
  std::size_t size = 0;         // pixel / voxel count
  std::size_t seed = 0;         // first pixel in scan order (flat index)
};

/// Labels connected foreground regions. Labels are assigned in scan order of
/// each component's first pixel, so label 1 owns the lowest seed.
struct Labeling2D {
  Grid2<std::int32_t> labels;
  std::vector<Component> components;
};
struct Labeling3D {
  std::vector<std::int32_t> labels;  // same layout as Mask3D
  std::vector<Component> components;
};

Labeling2D label_components(const LabelMask& mask, Connectivity2D conn = Connectivity2D::Eight);
Labeling3D label_components(const Mask3D& mask, Connectivity3D conn = Connectivity3D::TwentySix);

/// Components ordered by size descending, ties broken by lower seed.
std::vector<Component> ranked(std::vector<Component> comps);

/// Keep the k largest components. k < 1 throws.
LabelMask top_k_components(const LabelMask& mask, int k, Connectivity2D conn = Connectivity2D::Eight);
Mask3D top_k_components(const Mask3D& mask, int k, Connectivity3D conn = Connectivity3D::TwentySix);

/// One binary mask per component, largest first.
std::vector<LabelMask> split_instances(const LabelMask& mask, Connectivity2D conn = Connectivity2D::Eight);

struct PixelBox {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;  // half-open: [x1, x2) x [y1, y2)
  bool operator==(const PixelBox&) const = default;
};
/// Tight half-open bounding box. Throws NoForegroundError on an empty mask.
PixelBox bounding_box(const LabelMask& mask);

}  // namespace promptmed
