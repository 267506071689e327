#include "promptmed/core/raster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace promptmed {

SliceImage::SliceImage(Grid2<double> px, std::optional<int> index) : pixels(std::move(px)), slice_index(index) {}

void SliceImage::validate() const {
  if (pixels.height() < 1 || pixels.width() < 1) throw std::invalid_argument("SliceImage: empty image");
  for (double v : pixels.values())
    if (!std::isfinite(v)) throw std::invalid_argument("SliceImage: non-finite pixel");
}

LabelMask::LabelMask(Grid2<std::uint8_t> px) : pixels(std::move(px)) {
  for (auto& v : pixels.values())
    if (v > 1) throw std::invalid_argument("LabelMask: values must be 0 or 1");
}

std::size_t LabelMask::count() const noexcept {
  return static_cast<std::size_t>(std::count(pixels.values().begin(), pixels.values().end(), std::uint8_t{1}));
}

bool LabelMask::any() const noexcept {
  return std::any_of(pixels.values().begin(), pixels.values().end(), [](std::uint8_t v) { return v != 0; });
}

LabelMask Mask3D::slice(int z) const {
  LabelMask m(h_, w_);
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(z * slice_size()), slice_size(), m.pixels.data());
  return m;
}

void Mask3D::set_slice(int z, const LabelMask& m) {
  if (m.height() != h_ || m.width() != w_) throw std::invalid_argument("Mask3D::set_slice: shape mismatch");
  std::copy_n(m.pixels.data(), slice_size(), data_.begin() + static_cast<std::ptrdiff_t>(z * slice_size()));
}

bool Mask3D::slice_any(int z) const noexcept {
  auto b = data_.begin() + static_cast<std::ptrdiff_t>(z * slice_size());
  return std::any_of(b, b + static_cast<std::ptrdiff_t>(slice_size()), [](std::uint8_t v) { return v != 0; });
}

std::size_t Mask3D::count() const noexcept {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), std::uint8_t{1}));
}

void Volume::validate() const {
  if (slices.empty()) throw std::invalid_argument("Volume: no slices");
  const int h = height(), w = width();
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const auto& s = slices[i];
    if (s.height() != h || s.width() != w) throw std::invalid_argument("Volume: slice shapes differ");
    if (s.slice_index && *s.slice_index != static_cast<int>(i))
      throw std::invalid_argument("Volume: slice indices must be contiguous from 0");
    s.validate();
  }
}

Volume Volume::from_dense(int depth, int height, int width, const std::vector<double>& voxels,
                          std::array<double, 3> spacing) {
  if (voxels.size() != static_cast<std::size_t>(depth) * height * width)
    throw std::invalid_argument("Volume::from_dense: size mismatch");
  Volume v;
  v.spacing = spacing;
  v.slices.reserve(depth);
  const std::size_t n = static_cast<std::size_t>(height) * width;
  for (int z = 0; z < depth; ++z) {
    std::vector<double> px(voxels.begin() + static_cast<std::ptrdiff_t>(z * n),
                           voxels.begin() + static_cast<std::ptrdiff_t>((z + 1) * n));
    v.slices.emplace_back(Grid2<double>(height, width, std::move(px)), z);
  }
  return v;
}

std::vector<double> Volume::dense() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(depth()) * height() * width());
  for (const auto& s : slices) out.insert(out.end(), s.pixels.values().begin(), s.pixels.values().end());
  return out;
}

LabelMask threshold_mask(const Grid2<double>& values, double threshold) {
  LabelMask m(values.height(), values.width());
  for (std::size_t i = 0; i < values.size(); ++i) m.pixels[i] = values[i] > threshold ? 1 : 0;
  return m;
}

void require_same_shape(const LabelMask& a, const LabelMask& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width())
    throw std::invalid_argument(std::string(what) + ": mask shapes differ");
}

}  // namespace promptmed
