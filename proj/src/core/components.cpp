#include "promptmed/core/components.hpp"

#include <algorithm>
#include <stdexcept>

#include "promptmed/core/errors.hpp"

namespace promptmed {

Labeling2D label_components(const LabelMask& mask, Connectivity2D conn) {
  const int h = mask.height(), w = mask.width();
  Labeling2D out{Grid2<std::int32_t>(h, w, 0), {}};
  std::vector<int> stack;
  const bool eight = conn == Connectivity2D::Eight;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask.pixels(y, x) || out.labels(y, x)) continue;
      const int label = static_cast<int>(out.components.size()) + 1;
      Component comp{label, 0, static_cast<std::size_t>(y) * w + x};
      out.labels(y, x) = label;
      stack.assign(1, y * w + x);
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        ++comp.size;
        const int py = p / w, px = p % w;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (!dy && !dx) continue;
            if (!eight && dy && dx) continue;
            const int ny = py + dy, nx = px + dx;
            if (ny < 0 || nx < 0 || ny >= h || nx >= w) continue;
            if (!mask.pixels(ny, nx) || out.labels(ny, nx)) continue;
            out.labels(ny, nx) = label;
            stack.push_back(ny * w + nx);
          }
        }
      }
      out.components.push_back(comp);
    }
  }
  return out;
}

Labeling3D label_components(const Mask3D& mask, Connectivity3D conn) {
  const int d = mask.depth(), h = mask.height(), w = mask.width();
  Labeling3D out{std::vector<std::int32_t>(mask.size(), 0), {}};
  const bool full = conn == Connectivity3D::TwentySix;
  const auto idx = [&](int z, int y, int x) { return (static_cast<std::size_t>(z) * h + y) * w + x; };
  std::vector<std::size_t> stack;
  for (int z = 0; z < d; ++z) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t i = idx(z, y, x);
        if (!mask.values()[i] || out.labels[i]) continue;
        const int label = static_cast<int>(out.components.size()) + 1;
        Component comp{label, 0, i};
        out.labels[i] = label;
        stack.assign(1, i);
        while (!stack.empty()) {
          const std::size_t p = stack.back();
          stack.pop_back();
          ++comp.size;
          const int pz = static_cast<int>(p / (static_cast<std::size_t>(h) * w));
          const int py = static_cast<int>((p / w) % h);
          const int px = static_cast<int>(p % w);
          for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                const int nnz = (dz != 0) + (dy != 0) + (dx != 0);
                if (nnz == 0 || (!full && nnz > 1)) continue;
                const int nz = pz + dz, ny = py + dy, nx = px + dx;
                if (nz < 0 || ny < 0 || nx < 0 || nz >= d || ny >= h || nx >= w) continue;
                const std::size_t j = idx(nz, ny, nx);
                if (!mask.values()[j] || out.labels[j]) continue;
                out.labels[j] = label;
                stack.push_back(j);
              }
        }
        out.components.push_back(comp);
      }
    }
  }
  return out;
}

std::vector<Component> ranked(std::vector<Component> comps) {
  std::sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
    if (a.size != b.size) return a.size > b.size;
    return a.seed < b.seed;
  });
  return comps;
}

namespace {
std::vector<char> keep_table(const std::vector<Component>& comps, int k) {
  std::vector<char> keep(comps.size() + 1, 0);
  auto r = ranked(comps);
  for (int i = 0; i < k && i < static_cast<int>(r.size()); ++i) keep[r[i].label] = 1;
  return keep;
}
}  // namespace

LabelMask top_k_components(const LabelMask& mask, int k, Connectivity2D conn) {
  if (k < 1) throw std::invalid_argument("top_k_components: k must be >= 1");
  auto lab = label_components(mask, conn);
  if (static_cast<int>(lab.components.size()) <= k) return mask;
  const auto keep = keep_table(lab.components, k);
  LabelMask out(mask.height(), mask.width());
  for (std::size_t i = 0; i < out.pixels.size(); ++i) out.pixels[i] = keep[lab.labels[i]] ? 1 : 0;
  return out;
}

Mask3D top_k_components(const Mask3D& mask, int k, Connectivity3D conn) {
  if (k < 1) throw std::invalid_argument("top_k_components: k must be >= 1");
  auto lab = label_components(mask, conn);
  if (static_cast<int>(lab.components.size()) <= k) return mask;
  const auto keep = keep_table(lab.components, k);
  Mask3D out(mask.depth(), mask.height(), mask.width());
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] = keep[lab.labels[i]] ? 1 : 0;
  return out;
}

std::vector<LabelMask> split_instances(const LabelMask& mask, Connectivity2D conn) {
  auto lab = label_components(mask, conn);
  std::vector<LabelMask> out;
  for (const auto& c : ranked(lab.components)) {
    LabelMask m(mask.height(), mask.width());
    for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = lab.labels[i] == c.label ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

PixelBox bounding_box(const LabelMask& mask) {
  PixelBox b{mask.width(), mask.height(), -1, -1};
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask.pixels(y, x)) {
        b.x1 = std::min(b.x1, x);
        b.y1 = std::min(b.y1, y);
        b.x2 = std::max(b.x2, x + 1);
        b.y2 = std::max(b.y2, y + 1);
      }
  if (b.x2 < 0) throw NoForegroundError("bounding_box: mask has no foreground");
  return b;
}

}  // namespace promptmed
