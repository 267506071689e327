#include "doctest.h"

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "promptmed/core/errors.hpp"
#include "promptmed/data/io.hpp"
#include "promptmed/data/phantom.hpp"
#include "promptmed/data/slices.hpp"

using namespace promptmed;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("promptmed_data_" + std::to_string(std::rand()) + "_" +
                                         std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("noiseless phantom has exact intensities") {
  auto cfg = phantoms::cylinder(8, 32, 10);
  const auto ph = make_phantom(cfg);
  double sum = 0;
  std::size_t n = 0;
  for (int z = 0; z < 8; ++z)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        if (ph.mask(z, y, x)) {
          sum += ph.volume.slices[z].pixels(y, x);
          ++n;
        } else {
          CHECK(ph.volume.slices[z].pixels(y, x) == 0.0);
        }
  REQUIRE(n > 0);
  CHECK(sum / n == 1.0);
}

TEST_CASE("phantom determinism and bounds") {
  const auto a = make_phantom(phantoms::two_body(3));
  const auto b = make_phantom(phantoms::two_body(3));
  CHECK(a.volume.dense() == b.volume.dense());
  CHECK(a.mask == b.mask);
  CHECK(make_phantom(phantoms::two_body(4)).volume.dense() != a.volume.dense());

  PhantomConfig bad;
  bad.depth = bad.height = bad.width = 10;
  bad.bodies.push_back({Geometry::Ellipsoid, {5, 5, 5}, {3, 3, 7}, 1.0, true, 0});
  CHECK_THROWS_AS(make_phantom(bad), std::invalid_argument);
}

TEST_CASE("ellipsoid voxel count matches a direct inequality test") {
  PhantomConfig c;
  c.depth = 20;
  c.height = 24;
  c.width = 28;
  const PhantomBody body{Geometry::Ellipsoid, {9.5, 11.2, 13.7}, {6.3, 8.1, 9.9}, 1.0, true, 0};
  c.bodies.push_back(body);
  const auto ph = make_phantom(c);
  std::size_t expect = 0;
  for (int z = 0; z < c.depth; ++z)
    for (int y = 0; y < c.height; ++y)
      for (int x = 0; x < c.width; ++x) {
        const double q = std::pow((z - 9.5) / 6.3, 2) + std::pow((y - 11.2) / 8.1, 2) + std::pow((x - 13.7) / 9.9, 2);
        expect += q <= 1.0;
      }
  CHECK(ph.mask.count() == expect);
}

TEST_CASE("distractors are painted but not labeled") {
  const auto cfg = phantoms::kidneys_with_distractors();
  const auto ph = make_phantom(cfg);
  const auto& d = cfg.bodies[2];
  const int z = int(d.center[0]), y = int(d.center[1]), x = int(d.center[2]);
  CHECK(ph.mask(z, y, x) == 0);
  CHECK(ph.volume.slices[z].pixels(y, x) > 0.4);
}

TEST_CASE("phantom generation at 64x128x128 is fast") {
  const auto t0 = std::chrono::steady_clock::now();
  (void)make_phantom(phantoms::two_body());
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 1.0);
}

TEST_CASE("phantom config json round trip") {
  const auto cfg = phantoms::kidneys_with_distractors();
  const auto back = phantom_config_from_json(to_json(cfg));
  CHECK(make_phantom(back).volume.dense() == make_phantom(cfg).volume.dense());
}

TEST_CASE("slice selection: statistics over 10k draws") {
  Mask3D m(200, 4, 4);
  for (int z = 50; z < 150; ++z) m(z, 1, 1) = 1;
  const auto fg = foreground_slices(m);
  Rng rng(1);
  SliceSelectionPolicy pol;
  pol.n_slices = 1;
  const auto sel = select_training_slices(m, pol, rng);
  double sum = 0;
  int outside = 0;
  for (int i = 0; i < 10000; ++i) {
    const int z = draw_foreground_slice(fg, sel.m, sel.s, rng);
    sum += z;
    outside += z < 50 || z > 149;
  }
  CHECK(outside == 0);
  CHECK(std::abs(sum / 10000 - sel.m) <= 0.5 * sel.s);
}

TEST_CASE("slice selection: contracts") {
  Mask3D one(10, 3, 3);
  one(6, 1, 1) = 1;
  Rng rng(2);
  SliceSelectionPolicy pol;
  pol.n_slices = 3;
  pol.background_count = 4;
  for (int t = 0; t < 20; ++t) {
    const auto sel = select_training_slices(one, pol, rng);
    CHECK(sel.foreground == std::vector<int>{6});
    CHECK(sel.background.size() == 4);
    for (int z : sel.background) CHECK(!one.slice_any(z));
  }
  const auto ph = make_phantom(phantoms::two_body());
  pol.n_slices = 5;
  pol.background_count = 3;
  const auto sel = select_training_slices(ph.mask, pol, rng);
  CHECK(sel.foreground.size() == 5);
  for (int z : sel.foreground) CHECK(ph.mask.slice_any(z));
  for (int z : sel.background) CHECK(!ph.mask.slice_any(z));
  CHECK_THROWS_AS(select_training_slices(Mask3D(4, 2, 2), pol, rng), std::invalid_argument);

  // gaps in the foreground range: draws landing in the gap are rejected
  Mask3D gap(30, 2, 2);
  for (int z : {5, 6, 7, 20, 21, 22}) gap(z, 0, 0) = 1;
  pol.n_slices = 4;
  pol.background_count = 0;
  for (int t = 0; t < 20; ++t)
    for (int z : select_training_slices(gap, pol, rng).foreground) CHECK(gap.slice_any(z));
}

TEST_CASE("nifti round trip, plain and gzip") {
  TempDir tmp;
  const auto ph = make_phantom(phantoms::two_body(1, 0.1));
  for (const char* name : {"v.nii", "v.nii.gz"}) {
    const auto p = tmp.path / name;
    write_volume_nifti(p, ph.volume);
    const auto g = read_nifti(p);
    CHECK(g.depth == 64);
    CHECK(g.height == 128);
    CHECK(g.values == ph.volume.dense());
    const auto g2 = read_nifti(p);
    CHECK(g2.values == g.values);
  }
  write_mask_nifti(tmp.path / "m.nii.gz", ph.mask, ph.volume.spacing);
  CHECK(binarize(read_nifti(tmp.path / "m.nii.gz"), {}) == ph.mask);
}

TEST_CASE("nifti axis flip from a negative sform direction") {
  TempDir tmp;
  VoxelGrid g{2, 2, 3, {1, 1, 1}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
  const auto p = tmp.path / "f.nii";
  write_nifti(p, g, NiftiType::Float32);
  {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    const float neg = -1.0f;
    f.seekp(280);
    f.write(reinterpret_cast<const char*>(&neg), 4);
  }
  const auto r = read_nifti(p);
  CHECK(r.values == std::vector<double>{2, 1, 0, 5, 4, 3, 8, 7, 6, 11, 10, 9});
}

TEST_CASE("io errors name the path") {
  try {
    read_nifti("/nonexistent/case.nii.gz");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(e.path() == "/nonexistent/case.nii.gz");
    CHECK(std::string(e.what()).find("/nonexistent/case.nii.gz") != std::string::npos);
  }
  TempDir tmp;
  const auto p = tmp.path / "junk.nii";
  std::ofstream(p) << "not a nifti file at all";
  CHECK_THROWS_AS(read_nifti(p), IoError);
}

TEST_CASE("multi-label filter") {
  VoxelGrid g{1, 2, 3, {1, 1, 1}, {0, 1, 2, 1, 3, 0}};
  const auto m = binarize(g, {1});
  CHECK(m.values() == std::vector<std::uint8_t>{0, 1, 0, 1, 0, 0});
  CHECK(binarize(g, {}).count() == 4);
}

TEST_CASE("png and tiff round trip") {
  TempDir tmp;
  Grid2<double> img(5, 7);
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = double((i * 37) % 256);
  write_png_gray(tmp.path / "a.png", img, 8);
  CHECK(read_image2d(tmp.path / "a.png") == img);
  Grid2<double> wide(4, 4);
  for (std::size_t i = 0; i < wide.size(); ++i) wide[i] = double(i * 4000);
  write_png_gray(tmp.path / "b.png", wide, 16);
  CHECK(read_image2d(tmp.path / "b.png") == wide);
  Grid2<double> f(3, 5);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = 0.1 * double(i) - 0.7;
  write_tiff_float(tmp.path / "c.tif", f);
  CHECK(read_image2d(tmp.path / "c.tif") == f);
  CHECK_THROWS_AS(read_image2d(tmp.path / "missing.png"), IoError);
  std::ofstream(tmp.path / "bad.png") << "garbage";
  CHECK_THROWS_AS(read_image2d(tmp.path / "bad.png"), IoError);
}

TEST_CASE("manifest and load_case for 3-D and 2-D cases") {
  TempDir tmp;
  const auto ph = make_phantom(phantoms::cylinder(6, 24, 6));
  write_volume_nifti(tmp.path / "img.nii.gz", ph.volume);
  write_mask_nifti(tmp.path / "seg.nii.gz", ph.mask, ph.volume.spacing);
  Grid2<double> s0(8, 8, 10.0), s1(8, 8, 20.0), m0(8, 8, 0.0), m1(8, 8, 0.0);
  m1(2, 2) = 255;
  write_png_gray(tmp.path / "s0.png", s0, 8);
  write_png_gray(tmp.path / "s1.png", s1, 8);
  write_png_gray(tmp.path / "m0.png", m0, 8);
  write_png_gray(tmp.path / "m1.png", m1, 8);
  nlohmann::json j = {{"schema", kManifestSchema},
                      {"cases",
                       {{{"id", "cyl"}, {"modality", "CT"}, {"image", "img.nii.gz"}, {"mask", "seg.nii.gz"}},
                        {{"id", "xr"}, {"dims", "2d"}, {"image", {"s0.png", "s1.png"}}, {"mask", {"m0.png", "m1.png"}}}}}};
  std::ofstream(tmp.path / "manifest.json") << j.dump(2);
  const auto m = read_manifest(tmp.path / "manifest.json");
  REQUIRE(m.cases.size() == 2);
  const auto c3 = load_case(m.at("cyl"), m.base_dir);
  CHECK(c3.volume.dense() == ph.volume.dense());
  CHECK(*c3.mask == ph.mask);
  const auto c2 = load_case(m.at("xr"), m.base_dir);
  CHECK(c2.is_2d);
  CHECK(c2.volume.depth() == 2);
  CHECK(c2.mask->count() == 1);
  CHECK(manifest_from_json(to_json(m), m.base_dir).cases.size() == 2);

  nlohmann::json wrong = j;
  wrong["schema"] = "other/1";
  CHECK_THROWS_AS(manifest_from_json(wrong, tmp.path), std::invalid_argument);
  nlohmann::json missing = {{"schema", kManifestSchema}, {"cases", {{{"id", "x"}, {"image", "nope.nii"}}}}};
  CHECK_THROWS_AS(load_case(manifest_from_json(missing, tmp.path).cases[0], tmp.path), IoError);
}
