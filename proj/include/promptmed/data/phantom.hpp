#pragma once

#include <array>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmed/core/raster.hpp"

namespace promptmed {

enum class Geometry { Ellipsoid, Cylinder, TwoLobe };

/// Coordinates are voxel indices (z, y, x); a voxel is inside when its index
/// satisfies the body's inequality.
struct PhantomBody {
  Geometry geometry = Geometry::Ellipsoid;
  std::array<double, 3> center{0, 0, 0};
  std::array<double, 3> radii{1, 1, 1};  // cylinder: rz is the half-length along z
  double intensity = 1.0;
  bool labeled = true;      // unlabeled bodies are distractors: painted but not in the mask
  double lobe_offset = 0;   // two-lobe: x offset of each lobe centre; 0 means 0.6 * rx
};

struct PhantomConfig {
  int depth = 64, height = 128, width = 128;
  std::vector<PhantomBody> bodies;
  double background = 0.0;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  void validate() const;
};

struct Phantom {
  Volume volume;
  Mask3D mask;
};

bool inside(const PhantomBody& b, double z, double y, double x);
Phantom make_phantom(const PhantomConfig& cfg);

PhantomConfig phantom_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PhantomConfig& cfg);

/// Ready-made phantoms used by the tests, CLI defaults and acceptance suite.
namespace phantoms {
/// Two labeled bodies of different intensity in a 64x128x128 volume.
PhantomConfig two_body(std::uint64_t seed = 7, double noise = 0.05);
/// Two kidney-like lobes plus unlabeled distractors of similar intensity.
PhantomConfig kidneys_with_distractors(std::uint64_t seed = 11, double noise = 0.05);
/// Uniform cylinder along z, fg 1 / bg 0, no noise.
PhantomConfig cylinder(int depth = 32, int size = 96, double radius = 30.0);
}  // namespace phantoms

}  // namespace promptmed
