#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

namespace promptmed {

/// Channel-major 3-D array (C x H x W) used for feature maps.
class FeatureMap {
 public:
  FeatureMap() = default;
  FeatureMap(int channels, int height, int width, double fill = 0.0)
      : c_(channels), h_(height), w_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    if (channels < 0 || height < 0 || width < 0) throw std::invalid_argument("FeatureMap: negative dimension");
  }

  int channels() const noexcept { return c_; }
  int height() const noexcept { return h_; }
  int width() const noexcept { return w_; }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h_) * w_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool same_shape(const FeatureMap& o) const noexcept { return c_ == o.c_ && h_ == o.h_ && w_ == o.w_; }

  double& operator()(int c, int y, int x) noexcept { return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x]; }
  double operator()(int c, int y, int x) const noexcept { return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x]; }
  double* channel(int c) noexcept { return data_.data() + static_cast<std::size_t>(c) * plane(); }
  const double* channel(int c) const noexcept { return data_.data() + static_cast<std::size_t>(c) * plane(); }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  bool operator==(const FeatureMap&) const = default;

 private:
  int c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

/// Weights of a square-kernel convolution, layout [out][in][k][k].
struct ConvWeights {
  int out_channels = 0;
  int in_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  std::vector<double> weight;
  std::vector<double> bias;

  ConvWeights() = default;
  ConvWeights(int out, int in, int k, int stride_, int pad_)
      : out_channels(out), in_channels(in), kernel(k), stride(stride_), pad(pad_),
        weight(static_cast<std::size_t>(out) * in * k * k, 0.0), bias(out, 0.0) {}
  int out_size(int n) const noexcept { return (n + 2 * pad - kernel) / stride + 1; }
};

}  // namespace promptmed
