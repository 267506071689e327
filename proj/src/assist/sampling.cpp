#include "promptmed/assist/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "promptmed/core/components.hpp"
#include "promptmed/core/distance.hpp"

namespace promptmed {

void PointSamplingConfig::validate() const {
  if (n_min < 1 || n_max <= n_min) throw std::invalid_argument("point sampling: need 1 <= n_min < n_max");
  if (boundary_band < 1) throw std::invalid_argument("point sampling: boundary_band must be >= 1");
}

void BoxJitterConfig::validate() const {
  if (d_in < 0 || d_out < 0) throw std::invalid_argument("box jitter: d_in and d_out must be >= 0");
}

const char* to_string(PointScheme s) {
  switch (s) {
    case PointScheme::Uniform: return "uniform";
    case PointScheme::Center: return "center";
    case PointScheme::Boundary: return "boundary";
  }
  return "?";
}

PointScheme point_scheme_from(const std::string& s) {
  if (s == "uniform") return PointScheme::Uniform;
  if (s == "center") return PointScheme::Center;
  if (s == "boundary") return PointScheme::Boundary;
  throw std::invalid_argument("unknown point scheme '" + s + "'");
}

std::vector<std::size_t> candidate_pixels(const LabelMask& label, PointScheme scheme, int band, Region region) {
  LabelMask reg(label.height(), label.width());
  const std::uint8_t want = region == Region::Foreground ? 1 : 0;
  for (std::size_t i = 0; i < reg.pixels.size(); ++i) reg.pixels[i] = (label.pixels[i] != 0) == (want != 0);

  std::vector<std::size_t> out;
  if (scheme == PointScheme::Uniform) {
    for (std::size_t i = 0; i < reg.pixels.size(); ++i)
      if (reg.pixels[i]) out.push_back(i);
    return out;
  }
  const auto dt = distance_transform(reg);
  std::vector<double> vals;
  for (std::size_t i = 0; i < reg.pixels.size(); ++i)
    if (reg.pixels[i]) vals.push_back(dt[i]);
  if (vals.empty()) return out;

  if (scheme == PointScheme::Center) {
    // Top decile of the distance values. On small or flat regions the
    // nearest-rank 90th percentile can sit far below the peak, so the cut is
    // also held within 10% of the value range below the maximum.
    std::sort(vals.begin(), vals.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(vals.size()))) - 1;
    const double lo = vals.front(), hi = vals.back();
    const double cut = std::max(vals[rank], hi - 0.1 * (hi - lo));
    for (std::size_t i = 0; i < reg.pixels.size(); ++i)
      if (reg.pixels[i] && dt[i] >= cut) out.push_back(i);
  } else {
    for (std::size_t i = 0; i < reg.pixels.size(); ++i)
      if (reg.pixels[i] && dt[i] <= band) out.push_back(i);
  }
  return out;
}

PointSample sample_points_n(const LabelMask& label, PointScheme scheme, int band, Region region, int n, Rng& rng) {
  PointSample res;
  if (n <= 0) return res;
  const auto cand = candidate_pixels(label, scheme, band, region);
  if (cand.empty()) {
    res.warning = true;
    return res;
  }
  const PointLabel lab = region == Region::Foreground ? PointLabel::Foreground : PointLabel::Background;
  const int w = label.width();
  auto emit = [&](std::size_t flat) {
    res.points.push_back(PointPrompt{static_cast<double>(flat % w), static_cast<double>(flat / w), lab});
  };
  if (cand.size() >= static_cast<std::size_t>(n)) {
    for (auto k : rng.sample_without_replacement(cand.size(), n)) emit(cand[k]);
  } else {
    for (int k = 0; k < n; ++k) emit(cand[rng.uniform_int(0, static_cast<std::int64_t>(cand.size()) - 1)]);
  }
  return res;
}

PointSample sample_points(const LabelMask& label, const PointSamplingConfig& cfg, Region region, Rng& rng) {
  cfg.validate();
  const int n = static_cast<int>(rng.uniform_int(cfg.n_min, cfg.n_max - 1));
  return sample_points_n(label, cfg.scheme, cfg.boundary_band, region, n, rng);
}

BoxPrompt jitter_box(const LabelMask& label, const BoxJitterConfig& cfg, Rng& rng) {
  cfg.validate();
  const PixelBox t = bounding_box(label);
  const int w = label.width(), h = label.height();
  for (int attempt = 0; attempt < 100; ++attempt) {
    auto d = [&] { return static_cast<int>(rng.uniform_int(-cfg.d_in, cfg.d_out)); };
    const int x1 = std::clamp(t.x1 - d(), 0, w);
    const int y1 = std::clamp(t.y1 - d(), 0, h);
    const int x2 = std::clamp(t.x2 + d(), 0, w);
    const int y2 = std::clamp(t.y2 + d(), 0, h);
    if (x1 < x2 && y1 < y2) return BoxPrompt{double(x1), double(y1), double(x2), double(y2)};
  }
  return BoxPrompt{double(t.x1), double(t.y1), double(t.x2), double(t.y2)};
}

}  // namespace promptmed
