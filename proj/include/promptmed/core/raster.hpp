#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace promptmed {

/// Row-major 2-D grid. Index (y, x) with y the row.
template <class T>
class Grid2 {
 public:
  Grid2() = default;
  Grid2(int height, int width, T fill = T{})
      : h_(height), w_(width), data_(checked_size(height, width), fill) {}
  Grid2(int height, int width, std::vector<T> data) : h_(height), w_(width), data_(std::move(data)) {
    if (data_.size() != checked_size(height, width))
      throw std::invalid_argument("Grid2: data size does not match shape");
  }

  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  template <class U>
  bool same_shape(const Grid2<U>& o) const noexcept { return h_ == o.height() && w_ == o.width(); }
  bool in_bounds(int y, int x) const noexcept { return y >= 0 && x >= 0 && y < h_ && x < w_; }

  T& operator()(int y, int x) noexcept { return data_[static_cast<std::size_t>(y) * w_ + x]; }
  const T& operator()(int y, int x) const noexcept { return data_[static_cast<std::size_t>(y) * w_ + x]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  bool operator==(const Grid2&) const = default;

 private:
  static std::size_t checked_size(int h, int w) {
    if (h < 0 || w < 0) throw std::invalid_argument("Grid2: negative dimension");
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  }
  int h_ = 0;
  int w_ = 0;
  std::vector<T> data_;
};

/// One image slice in arbitrary intensity units.
struct SliceImage {
  Grid2<double> pixels;
  std::optional<int> slice_index;

  SliceImage() = default;
  explicit SliceImage(Grid2<double> px, std::optional<int> index = std::nullopt);

  int height() const noexcept { return pixels.height(); }
  int width() const noexcept { return pixels.width(); }
  /// Throws if the image violates its invariants (empty or non-finite).
  void validate() const;
};

/// Binary mask over {0, 1}.
struct LabelMask {
  Grid2<std::uint8_t> pixels;

  LabelMask() = default;
  LabelMask(int height, int width) : pixels(height, width, 0) {}
  explicit LabelMask(Grid2<std::uint8_t> px);

  int height() const noexcept { return pixels.height(); }
  int width() const noexcept { return pixels.width(); }
  std::size_t count() const noexcept;
  bool any() const noexcept;
  bool operator==(const LabelMask&) const = default;
};

/// Dense 3-D binary mask, slice-major (z, y, x).
class Mask3D {
 public:
  Mask3D() = default;
  Mask3D(int depth, int height, int width)
      : d_(depth), h_(height), w_(width), data_(static_cast<std::size_t>(depth) * height * width, 0) {}

  int depth() const noexcept { return d_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t slice_size() const noexcept { return static_cast<std::size_t>(h_) * w_; }

  std::uint8_t& operator()(int z, int y, int x) noexcept { return data_[(static_cast<std::size_t>(z) * h_ + y) * w_ + x]; }
  std::uint8_t operator()(int z, int y, int x) const noexcept { return data_[(static_cast<std::size_t>(z) * h_ + y) * w_ + x]; }
  std::uint8_t* data() noexcept { return data_.data(); }
  const std::uint8_t* data() const noexcept { return data_.data(); }
  std::vector<std::uint8_t>& values() noexcept { return data_; }
  const std::vector<std::uint8_t>& values() const noexcept { return data_; }

  LabelMask slice(int z) const;
  void set_slice(int z, const LabelMask& m);
  bool slice_any(int z) const noexcept;
  std::size_t count() const noexcept;
  bool operator==(const Mask3D&) const = default;

 private:
  int d_ = 0, h_ = 0, w_ = 0;
  std::vector<std::uint8_t> data_;
};

/// Ordered stack of slices with a shared in-plane shape.
struct Volume {
  std::vector<SliceImage> slices;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // (dz, dy, dx) in mm

  int depth() const noexcept { return static_cast<int>(slices.size()); }
  int height() const noexcept { return slices.empty() ? 0 : slices.front().height(); }
  int width() const noexcept { return slices.empty() ? 0 : slices.front().width(); }
  /// Throws unless there is at least one slice, shapes agree and indices run 0,1,2,...
  void validate() const;
  static Volume from_dense(int depth, int height, int width, const std::vector<double>& voxels,
                           std::array<double, 3> spacing = {1.0, 1.0, 1.0});
  std::vector<double> dense() const;
};

/// Binarized view: 1 where src!=0.
LabelMask threshold_mask(const Grid2<double>& values, double threshold);
void require_same_shape(const LabelMask& a, const LabelMask& b, const char* what);

}  // namespace promptmed
