#pragma once

#include <variant>
#include <vector>

#include "promptmed/core/raster.hpp"

namespace promptmed {

enum class PointLabel { Background = 0, Foreground = 1 };

/// Pixel coordinates: x is the column, y the row. Sampled points sit on pixel indices.
struct PointPrompt {
  double x = 0.0;
  double y = 0.0;
  PointLabel label = PointLabel::Foreground;
  bool operator==(const PointPrompt&) const = default;
};

/// Half-open box in pixel-edge coordinates: covers columns [x1, x2) and rows [y1, y2).
struct BoxPrompt {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
  bool valid() const noexcept { return x1 < x2 && y1 < y2; }
  bool operator==(const BoxPrompt&) const = default;
};

struct MaskPrompt {
  LabelMask mask;
  bool operator==(const MaskPrompt&) const = default;
};

using Prompt = std::variant<PointPrompt, BoxPrompt, MaskPrompt>;

enum class PromptKind { Point, Box, Mask };

struct PromptSet {
  std::vector<Prompt> prompts;
  int instance_id = 0;

  bool empty() const noexcept { return prompts.empty(); }
  std::size_t size() const noexcept { return prompts.size(); }
  void add(Prompt p) { prompts.push_back(std::move(p)); }
  std::vector<PointPrompt> points() const;
  std::vector<BoxPrompt> boxes() const;
  std::size_t count(PromptKind k) const;
  bool operator==(const PromptSet&) const = default;
};

/// Throws std::invalid_argument when any prompt leaves an image of the given size.
void validate_prompts(const PromptSet& prompts, int height, int width);

}  // namespace promptmed
