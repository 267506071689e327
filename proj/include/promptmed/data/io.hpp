#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmed/core/raster.hpp"

namespace promptmed {

/// Raw voxel grid as stored on disk, already in canonical (z, y, x) order.
struct VoxelGrid {
  int depth = 0, height = 0, width = 0;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (dz, dy, dx)
  std::vector<double> values;
};

/// NIfTI-1 single-file volumes, optionally gzip-compressed (by .gz suffix).
/// Reading flips axes whose sform/qform direction is negative so that index
/// order always runs along +x, +y, +z. Oblique orientations are rejected.
VoxelGrid read_nifti(const std::filesystem::path& path);
enum class NiftiType { Uint8, Float32, Float64 };
void write_nifti(const std::filesystem::path& path, const VoxelGrid& grid, NiftiType type);

void write_volume_nifti(const std::filesystem::path& path, const Volume& v);
void write_mask_nifti(const std::filesystem::path& path, const Mask3D& m, const std::array<double, 3>& spacing);

/// 2-D images: 8/16-bit grayscale PNG, 8/16-bit or float grayscale TIFF.
Grid2<double> read_image2d(const std::filesystem::path& path);
void write_png_gray(const std::filesystem::path& path, const Grid2<double>& values, int bit_depth);
void write_tiff_float(const std::filesystem::path& path, const Grid2<double>& values);

inline constexpr const char* kManifestSchema = "promptmed-manifest/1";

struct ManifestEntry {
  std::string id;
  std::string modality;
  bool is_2d = false;
  // 3-D: one image (and optional mask) path. 2-D: one path per slice.
  std::vector<std::filesystem::path> images;
  std::vector<std::filesystem::path> masks;
  std::set<int> label_ids;  // empty: any nonzero value is foreground
  bool has_ground_truth() const noexcept { return !masks.empty(); }
};

struct DatasetManifest {
  std::vector<ManifestEntry> cases;
  std::filesystem::path base_dir;
  const ManifestEntry& at(const std::string& id) const;
};

DatasetManifest read_manifest(const std::filesystem::path& path);
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json to_json(const DatasetManifest& m);

struct LoadedCase {
  std::string id;
  std::string modality;
  bool is_2d = false;
  Volume volume;
  std::optional<Mask3D> mask;
};

LoadedCase load_case(const ManifestEntry& entry, const std::filesystem::path& base_dir = {});

Mask3D binarize(const VoxelGrid& g, const std::set<int>& label_ids);

}  // namespace promptmed
