#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmed/backbone/backbone.hpp"

namespace promptmed {

inline constexpr const char* kCheckpointFormat = "promptmed-ckpt/1";

/// Named-array container shared by prompt-encoder and SAP-Net checkpoints.
///
/// Layout: 8-byte magic "PMEDCKPT", little-endian uint64 header length, a JSON
/// header, then every array as contiguous little-endian float64 in header order.
struct Checkpoint {
  BackboneDescriptor descriptor;
  std::string created;               // ISO-8601 UTC
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, std::vector<NamedArray>> sections;
  std::map<std::string, nlohmann::json> scalars;  // per-section scalar settings

  std::vector<std::uint8_t> to_bytes() const;
  static Checkpoint from_bytes(const std::vector<std::uint8_t>& bytes, const std::string& origin = "<memory>");
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

inline constexpr const char* kPromptEncoderSection = "prompt_encoder";

Checkpoint make_checkpoint(const Backbone& backbone, const PromptEncoderState& state);
/// Extracts theta and checks it against the backbone's parameter layout.
PromptEncoderState prompt_state_from(const Checkpoint& ckpt, const Backbone& backbone);

std::string utc_timestamp();

}  // namespace promptmed
