#pragma once

#include "json.hpp"
#include "promptmed/backbone/prompt.hpp"

namespace promptmed {

// {"type": "point", "x", "y", "label": "fg"|"bg"}, {"type": "box", "x1", "y1", "x2", "y2"},
// {"type": "mask", "mask": <rle>}
nlohmann::json to_json(const Prompt& p);
nlohmann::json to_json(const PromptSet& ps);
/// Accepts an array of prompts or {"prompts": [...], "instance_id"}. Throws std::invalid_argument.
PromptSet prompt_set_from_json(const nlohmann::json& j);

}  // namespace promptmed
