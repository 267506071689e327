#pragma once

#include "json.hpp"
#include "promptmed/core/raster.hpp"

namespace promptmed {

/// Row-major run lengths, starting with a (possibly zero) run of 0s:
/// {"size": [h, w], "counts": [...]}.
nlohmann::json rle_encode(const LabelMask& mask);
/// Throws std::invalid_argument on malformed payloads or counts not summing to h*w.
LabelMask rle_decode(const nlohmann::json& j);

}  // namespace promptmed
