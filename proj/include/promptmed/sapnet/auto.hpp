#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "promptmed/assist/model.hpp"
#include "promptmed/sapnet/sapnet.hpp"

namespace promptmed {

enum class CoarsePromptType { Points, Boxes };

struct PostProcessConfig {
  int k_components = 2;  // < 1 keeps every component (post-processing off)
  int n_points = 3;      // per retained component, points mode only
  CoarsePromptType prompt_type = CoarsePromptType::Boxes;
  void validate() const;
};

/// One prompt set per retained component, largest first; empty coarse -> none.
std::vector<PromptSet> instance_prompts_from_coarse(const LabelMask& coarse, const PostProcessConfig& post, Rng& rng);
/// All instance prompts merged into one set.
PromptSet generate_prompts_from_coarse(const LabelMask& coarse, const PostProcessConfig& post, Rng& rng);

struct AutoConfig {
  PostProcessConfig post;
  std::uint64_t seed = 0;
};

struct AutoSliceResult {
  int slice = 0;
  LabelMask coarse;
  LabelMask mask;                  // union of the per-instance assist masks
  std::vector<PromptSet> prompts;  // one per instance
  nlohmann::json provenance;
};

/// Stage fingerprints so ablation runs can show which stage a toggle touched.
struct StageHashes {
  std::uint64_t coarse = 0, post = 0, assist = 0;
};
StageHashes stage_hashes(const SapNet& net, const PostProcessConfig& post, const AssistModel& assist);

/// Coarse-segments each image with SAP-Net, turns the coarse mask into prompts
/// and segments with the assist model. Images carry their slice_index when known.
std::vector<AutoSliceResult> auto_segment(const std::vector<SliceImage>& images, const SapNet& net,
                                          const AssistModel& assist, const AutoConfig& cfg);

const char* to_string(CoarsePromptType t);
CoarsePromptType coarse_prompt_type_from(const std::string& s);

}  // namespace promptmed
