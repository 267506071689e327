#pragma once

#include <vector>

#include "promptmed/backbone/prompt.hpp"
#include "promptmed/core/random.hpp"
#include "promptmed/core/raster.hpp"

namespace promptmed {

enum class PointScheme { Uniform, Center, Boundary };
enum class Region { Foreground, Background };

struct PointSamplingConfig {
  PointScheme scheme = PointScheme::Uniform;
  int n_min = 1;
  int n_max = 11;        // exclusive
  int boundary_band = 2; // px, for the boundary scheme
  void validate() const;
};

struct BoxJitterConfig {
  int d_in = 2;   // max inward displacement per edge
  int d_out = 4;  // max outward displacement per edge
  void validate() const;
};

struct PointSample {
  std::vector<PointPrompt> points;
  bool warning = false;  // set when the requested region was empty
};

/// Draws n ~ UniformInt[n_min, n_max) points from the region.
PointSample sample_points(const LabelMask& label, const PointSamplingConfig& cfg, Region region, Rng& rng);
/// Same, with an explicit count.
PointSample sample_points_n(const LabelMask& label, PointScheme scheme, int band, Region region, int n, Rng& rng);

/// Pixels the scheme may pick from; empty when the region is.
std::vector<std::size_t> candidate_pixels(const LabelMask& label, PointScheme scheme, int band, Region region);

/// Tight box with every edge moved by UniformInt[-d_in, d_out] (outward positive),
/// clamped to the image. Throws NoForegroundError on an empty label.
BoxPrompt jitter_box(const LabelMask& label, const BoxJitterConfig& cfg, Rng& rng);

const char* to_string(PointScheme s);
PointScheme point_scheme_from(const std::string& s);

}  // namespace promptmed
