#include "promptmed/data/phantom.hpp"

#include <cmath>
#include <stdexcept>

#include "promptmed/core/random.hpp"

namespace promptmed {

namespace {

double sq(double v) { return v * v; }

// Axis-aligned half extents of the body around its centre.
std::array<double, 3> extent(const PhantomBody& b) {
  auto e = b.radii;
  if (b.geometry == Geometry::TwoLobe) e[2] += b.lobe_offset > 0 ? b.lobe_offset : 0.6 * b.radii[2];
  return e;
}

const char* geometry_name(Geometry g) {
  switch (g) {
    case Geometry::Ellipsoid: return "ellipsoid";
    case Geometry::Cylinder: return "cylinder";
    case Geometry::TwoLobe: return "two-lobe";
  }
  return "?";
}

Geometry geometry_from(const std::string& s) {
  if (s == "ellipsoid") return Geometry::Ellipsoid;
  if (s == "cylinder") return Geometry::Cylinder;
  if (s == "two-lobe") return Geometry::TwoLobe;
  throw std::invalid_argument("unknown phantom geometry '" + s + "'");
}

}  // namespace

void PhantomConfig::validate() const {
  if (depth < 1 || height < 1 || width < 1) throw std::invalid_argument("phantom: shape must be positive");
  if (!(noise_sigma >= 0)) throw std::invalid_argument("phantom: noise_sigma must be >= 0");
  const std::array<int, 3> dims{depth, height, width};
  for (std::size_t i = 0; i < bodies.size(); ++i) {
    const auto& b = bodies[i];
    const auto e = extent(b);
    for (int a = 0; a < 3; ++a) {
      if (!(b.radii[a] > 0)) throw std::invalid_argument("phantom: body " + std::to_string(i) + " has a non-positive radius");
      if (b.center[a] - e[a] < -0.5 || b.center[a] + e[a] > dims[a] - 0.5)
        throw std::invalid_argument("phantom: body " + std::to_string(i) + " leaves the volume");
    }
  }
}

bool inside(const PhantomBody& b, double z, double y, double x) {
  const double dz = z - b.center[0], dy = y - b.center[1], dx = x - b.center[2];
  const auto& r = b.radii;
  switch (b.geometry) {
    case Geometry::Ellipsoid: return sq(dz / r[0]) + sq(dy / r[1]) + sq(dx / r[2]) <= 1.0;
    case Geometry::Cylinder: return std::abs(dz) <= r[0] && sq(dy / r[1]) + sq(dx / r[2]) <= 1.0;
    case Geometry::TwoLobe: {
      const double off = b.lobe_offset > 0 ? b.lobe_offset : 0.6 * r[2];
      const double base = sq(dz / r[0]) + sq(dy / r[1]);
      return base + sq((dx - off) / r[2]) <= 1.0 || base + sq((dx + off) / r[2]) <= 1.0;
    }
  }
  return false;
}

Phantom make_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  const int D = cfg.depth, H = cfg.height, W = cfg.width;
  std::vector<double> vox(static_cast<std::size_t>(D) * H * W, cfg.background);
  Phantom ph;
  ph.mask = Mask3D(D, H, W);
  for (const auto& b : cfg.bodies) {
    const auto e = extent(b);
    const int z0 = std::max(0, int(std::floor(b.center[0] - e[0]))), z1 = std::min(D - 1, int(std::ceil(b.center[0] + e[0])));
    const int y0 = std::max(0, int(std::floor(b.center[1] - e[1]))), y1 = std::min(H - 1, int(std::ceil(b.center[1] + e[1])));
    const int x0 = std::max(0, int(std::floor(b.center[2] - e[2]))), x1 = std::min(W - 1, int(std::ceil(b.center[2] + e[2])));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          if (!inside(b, z, y, x)) continue;
          vox[(static_cast<std::size_t>(z) * H + y) * W + x] = b.intensity;
          ph.mask(z, y, x) = b.labeled ? 1 : 0;
        }
  }
  if (cfg.noise_sigma > 0) {
    Rng rng(cfg.seed);
    for (auto& v : vox) v += rng.normal(0.0, cfg.noise_sigma);
  }
  ph.volume = Volume::from_dense(D, H, W, vox, cfg.spacing);
  return ph;
}

nlohmann::json to_json(const PhantomConfig& cfg) {
  nlohmann::json bodies = nlohmann::json::array();
  for (const auto& b : cfg.bodies)
    bodies.push_back({{"geometry", geometry_name(b.geometry)},
                      {"center", b.center},
                      {"radii", b.radii},
                      {"intensity", b.intensity},
                      {"labeled", b.labeled},
                      {"lobe_offset", b.lobe_offset}});
  return {{"shape", {cfg.depth, cfg.height, cfg.width}},
          {"bodies", bodies},
          {"background", cfg.background},
          {"noise_sigma", cfg.noise_sigma},
          {"seed", cfg.seed},
          {"spacing", cfg.spacing}};
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
  PhantomConfig c;
  const auto shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 3) throw std::invalid_argument("phantom: shape must have three entries (D, H, W)");
  c.depth = shape[0];
  c.height = shape[1];
  c.width = shape[2];
  c.background = j.value("background", 0.0);
  c.noise_sigma = j.value("noise_sigma", 0.0);
  c.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("spacing")) c.spacing = j.at("spacing").get<std::array<double, 3>>();
  for (const auto& bj : j.at("bodies")) {
    PhantomBody b;
    b.geometry = geometry_from(bj.value("geometry", std::string("ellipsoid")));
    b.center = bj.at("center").get<std::array<double, 3>>();
    b.radii = bj.at("radii").get<std::array<double, 3>>();
    b.intensity = bj.value("intensity", 1.0);
    b.labeled = bj.value("labeled", true);
    b.lobe_offset = bj.value("lobe_offset", 0.0);
    c.bodies.push_back(b);
  }
  c.validate();
  return c;
}

namespace phantoms {

PhantomConfig two_body(std::uint64_t seed, double noise) {
  PhantomConfig c;
  c.depth = 64;
  c.height = 128;
  c.width = 128;
  c.background = 0.1;
  c.noise_sigma = noise;
  c.seed = seed;
  c.bodies.push_back({Geometry::Ellipsoid, {32, 44, 40}, {22, 20, 18}, 0.8, true, 0});
  c.bodies.push_back({Geometry::Ellipsoid, {30, 86, 90}, {18, 16, 22}, 0.5, true, 0});
  return c;
}

PhantomConfig kidneys_with_distractors(std::uint64_t seed, double noise) {
  PhantomConfig c;
  c.depth = 48;
  c.height = 96;
  c.width = 96;
  c.background = 0.1;
  c.noise_sigma = noise;
  c.seed = seed;
  // left and right kidney
  c.bodies.push_back({Geometry::Ellipsoid, {24, 52, 26}, {14, 14, 9}, 0.7, true, 0});
  c.bodies.push_back({Geometry::Ellipsoid, {24, 52, 70}, {14, 14, 9}, 0.7, true, 0});
  // unlabeled kidney-like bodies above and below: same intensity, similar size,
  // so only position separates them from the targets
  c.bodies.push_back({Geometry::Ellipsoid, {24, 18, 48}, {14, 9, 9}, 0.7, false, 0});
  c.bodies.push_back({Geometry::Ellipsoid, {24, 84, 48}, {14, 8, 9}, 0.7, false, 0});
  return c;
}

PhantomConfig cylinder(int depth, int size, double radius) {
  PhantomConfig c;
  c.depth = depth;
  c.height = size;
  c.width = size;
  c.background = 0.0;
  c.noise_sigma = 0.0;
  const double mid = (size - 1) / 2.0;
  c.bodies.push_back({Geometry::Cylinder, {(depth - 1) / 2.0, mid, mid}, {(depth - 1) / 2.0, radius, radius}, 1.0, true, 0});
  return c;
}

}  // namespace phantoms

}  // namespace promptmed
