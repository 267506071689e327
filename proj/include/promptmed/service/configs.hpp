#pragma once

#include <stdexcept>
#include <string>

#include "json.hpp"
#include "promptmed/assist/trainer.hpp"
#include "promptmed/promptgen/classifier.hpp"
#include "promptmed/promptgen/propagation.hpp"
#include "promptmed/sapnet/auto.hpp"
#include "promptmed/sapnet/sapnet.hpp"

namespace promptmed {

/// Bad user configuration: unknown keys, wrong types, values out of range.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Each parser starts from the defaults, overrides the keys present and
// rejects unknown ones. Values are validated before returning.
AssistTrainConfig assist_config_from_json(const nlohmann::json& j);
SapTrainConfig sapnet_config_from_json(const nlohmann::json& j);
PropagationConfig propagation_config_from_json(const nlohmann::json& j);
PostProcessConfig post_config_from_json(const nlohmann::json& j);
ClassifierTrainConfig classifier_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const AssistTrainConfig& c);
nlohmann::json to_json(const SapTrainConfig& c);
nlohmann::json to_json(const PropagationConfig& c);
nlohmann::json to_json(const PostProcessConfig& c);

}  // namespace promptmed
