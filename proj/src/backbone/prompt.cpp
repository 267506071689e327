#include "promptmed/backbone/prompt.hpp"

#include <stdexcept>
#include <string>

namespace promptmed {

std::vector<PointPrompt> PromptSet::points() const {
  std::vector<PointPrompt> out;
  for (const auto& p : prompts)
    if (auto* pt = std::get_if<PointPrompt>(&p)) out.push_back(*pt);
  return out;
}

std::vector<BoxPrompt> PromptSet::boxes() const {
  std::vector<BoxPrompt> out;
  for (const auto& p : prompts)
    if (auto* b = std::get_if<BoxPrompt>(&p)) out.push_back(*b);
  return out;
}

std::size_t PromptSet::count(PromptKind k) const {
  std::size_t n = 0;
  for (const auto& p : prompts) n += static_cast<std::size_t>(p.index()) == static_cast<std::size_t>(k);
  return n;
}

void validate_prompts(const PromptSet& prompts, int height, int width) {
  for (std::size_t i = 0; i < prompts.prompts.size(); ++i) {
    const auto& p = prompts.prompts[i];
    const std::string where = "prompt " + std::to_string(i) + ": ";
    if (auto* pt = std::get_if<PointPrompt>(&p)) {
      if (!(pt->x >= 0 && pt->y >= 0 && pt->x < width && pt->y < height))
        throw std::invalid_argument(where + "point outside image");
    } else if (auto* b = std::get_if<BoxPrompt>(&p)) {
      if (!b->valid()) throw std::invalid_argument(where + "box must satisfy x1<x2 and y1<y2");
      if (b->x1 < 0 || b->y1 < 0 || b->x2 > width || b->y2 > height)
        throw std::invalid_argument(where + "box outside image");
    } else {
      const auto& m = std::get<MaskPrompt>(p).mask;
      if (m.height() != height || m.width() != width) throw std::invalid_argument(where + "mask shape mismatch");
    }
  }
}

}  // namespace promptmed
