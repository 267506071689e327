#include "promptmed/backbone/prompt_json.hpp"

#include <stdexcept>

#include "promptmed/core/rle.hpp"

namespace promptmed {

namespace {

double num(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number()) throw std::invalid_argument(std::string("prompt: missing number ") + key);
  return j[key].get<double>();
}

Prompt prompt_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
    throw std::invalid_argument("prompt: expected an object with a type");
  const auto t = j["type"].get<std::string>();
  if (t == "point") {
    const auto lab = j.value("label", std::string("fg"));
    if (lab != "fg" && lab != "bg") throw std::invalid_argument("prompt: point label must be fg or bg");
    return PointPrompt{num(j, "x"), num(j, "y"), lab == "fg" ? PointLabel::Foreground : PointLabel::Background};
  }
  if (t == "box") return BoxPrompt{num(j, "x1"), num(j, "y1"), num(j, "x2"), num(j, "y2")};
  if (t == "mask") {
    if (!j.contains("mask")) throw std::invalid_argument("prompt: mask prompt needs a mask");
    return MaskPrompt{rle_decode(j["mask"])};
  }
  throw std::invalid_argument("prompt: unknown type " + t);
}

}  // namespace

nlohmann::json to_json(const Prompt& p) {
  if (auto* pt = std::get_if<PointPrompt>(&p))
    return {{"type", "point"}, {"x", pt->x}, {"y", pt->y}, {"label", pt->label == PointLabel::Foreground ? "fg" : "bg"}};
  if (auto* b = std::get_if<BoxPrompt>(&p))
    return {{"type", "box"}, {"x1", b->x1}, {"y1", b->y1}, {"x2", b->x2}, {"y2", b->y2}};
  return {{"type", "mask"}, {"mask", rle_encode(std::get<MaskPrompt>(p).mask)}};
}

nlohmann::json to_json(const PromptSet& ps) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : ps.prompts) arr.push_back(to_json(p));
  return {{"instance_id", ps.instance_id}, {"prompts", arr}};
}

PromptSet prompt_set_from_json(const nlohmann::json& j) {
  PromptSet ps;
  const nlohmann::json* arr = &j;
  if (j.is_object()) {
    if (!j.contains("prompts")) throw std::invalid_argument("prompt set: missing prompts");
    arr = &j["prompts"];
    if (j.contains("instance_id")) {
      if (!j["instance_id"].is_number_integer()) throw std::invalid_argument("prompt set: instance_id must be an integer");
      ps.instance_id = j["instance_id"];
    }
  }
  if (!arr->is_array()) throw std::invalid_argument("prompt set: prompts must be an array");
  for (const auto& p : *arr) ps.add(prompt_from_json(p));
  return ps;
}

}  // namespace promptmed
