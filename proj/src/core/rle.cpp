#include "promptmed/core/rle.hpp"

#include <stdexcept>

namespace promptmed {

nlohmann::json rle_encode(const LabelMask& m) {
  std::vector<std::int64_t> counts;
  std::uint8_t cur = 0;
  std::int64_t run = 0;
  for (std::size_t i = 0; i < m.pixels.size(); ++i) {
    const std::uint8_t v = m.pixels[i] ? 1 : 0;
    if (v != cur) {
      counts.push_back(run);
      run = 0;
      cur = v;
    }
    ++run;
  }
  counts.push_back(run);
  return {{"size", {m.height(), m.width()}}, {"counts", counts}};
}

LabelMask rle_decode(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("size") || !j.contains("counts"))
    throw std::invalid_argument("rle: expected {size, counts}");
  const auto& sz = j["size"];
  const auto& counts = j["counts"];
  if (!sz.is_array() || sz.size() != 2 || !sz[0].is_number_integer() || !sz[1].is_number_integer() ||
      !counts.is_array())
    throw std::invalid_argument("rle: size must be [h, w] and counts an array");
  const std::int64_t h = sz[0], w = sz[1];
  if (h < 1 || w < 1 || h > 1 << 15 || w > 1 << 15) throw std::invalid_argument("rle: bad size");
  LabelMask m(static_cast<int>(h), static_cast<int>(w));
  std::int64_t pos = 0;
  std::uint8_t v = 0;
  for (const auto& c : counts) {
    if (!c.is_number_integer() || c.get<std::int64_t>() < 0) throw std::invalid_argument("rle: counts must be >= 0");
    const std::int64_t n = c;
    if (pos + n > h * w) throw std::invalid_argument("rle: counts exceed h*w");
    if (v)
      for (std::int64_t k = 0; k < n; ++k) m.pixels[static_cast<std::size_t>(pos + k)] = 1;
    pos += n;
    v ^= 1;
  }
  if (pos != h * w) throw std::invalid_argument("rle: counts do not sum to h*w");
  return m;
}

}  // namespace promptmed
