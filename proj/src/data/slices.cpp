#include "promptmed/data/slices.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace promptmed {

std::vector<int> foreground_slices(const Mask3D& labels) {
  std::vector<int> out;
  for (int z = 0; z < labels.depth(); ++z)
    if (labels.slice_any(z)) out.push_back(z);
  return out;
}

int draw_foreground_slice(const std::vector<int>& fg, double m, double s, Rng& rng) {
  const int lo = fg.front(), hi = fg.back();
  auto is_fg = [&](int z) { return std::binary_search(fg.begin(), fg.end(), z); };
  for (int attempt = 0; attempt < 10; ++attempt) {
    const int z = static_cast<int>(std::lround(rng.normal(m, s)));
    if (z >= lo && z <= hi && is_fg(z)) return z;
  }
  const int z = std::clamp(static_cast<int>(std::lround(rng.normal(m, s))), lo, hi);
  // nearest foreground slice, lower index on ties
  const auto it = std::lower_bound(fg.begin(), fg.end(), z);
  if (it == fg.end()) return fg.back();
  if (*it == z || it == fg.begin()) return *it;
  const int above = *it, below = *(it - 1);
  return (z - below) <= (above - z) ? below : above;
}

SliceSelection select_training_slices(const Mask3D& labels, const SliceSelectionPolicy& policy, Rng& rng) {
  if (policy.n_slices < 1) throw std::invalid_argument("slice selection: n_slices must be >= 1");
  if (policy.background_count < 0) throw std::invalid_argument("slice selection: background_count must be >= 0");
  const auto fg = foreground_slices(labels);
  if (fg.empty()) throw std::invalid_argument("slice selection: volume has no foreground");

  SliceSelection sel;
  // median: lower middle element for even counts
  sel.m = fg.size() % 2 ? fg[fg.size() / 2] : 0.5 * (fg[fg.size() / 2 - 1] + fg[fg.size() / 2]);
  if (policy.spread == SpreadRule::RangeQuarter) {
    sel.s = (fg.back() - fg.front() + 1) / 4.0;
  } else {
    double mean = 0;
    for (int z : fg) mean += z;
    mean /= static_cast<double>(fg.size());
    double var = 0;
    for (int z : fg) var += (z - mean) * (z - mean);
    sel.s = std::sqrt(var / static_cast<double>(fg.size()));
  }
  if (sel.s <= 0) sel.s = 0.5;  // a single slice: every draw lands on it

  const std::size_t want = std::min<std::size_t>(policy.n_slices, fg.size());
  std::set<int> chosen;
  // Bounded redraws; if dedup keeps colliding, fill from slices nearest to m.
  for (int guard = 0; chosen.size() < want && guard < 1000 * policy.n_slices; ++guard)
    chosen.insert(draw_foreground_slice(fg, sel.m, sel.s, rng));
  if (chosen.size() < want) {
    auto rest = fg;
    std::stable_sort(rest.begin(), rest.end(), [&](int a, int b) { return std::abs(a - sel.m) < std::abs(b - sel.m); });
    for (int z : rest) {
      if (chosen.size() >= want) break;
      chosen.insert(z);
    }
  }
  sel.foreground.assign(chosen.begin(), chosen.end());

  std::vector<int> bg;
  for (int z = 0; z < labels.depth(); ++z)
    if (!labels.slice_any(z)) bg.push_back(z);
  if (policy.background_count > 0 && !bg.empty()) {
    for (auto k : rng.sample_without_replacement(bg.size(), policy.background_count)) sel.background.push_back(bg[k]);
    std::sort(sel.background.begin(), sel.background.end());
  }
  return sel;
}

}  // namespace promptmed
