#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmed/assist/sampling.hpp"
#include "promptmed/backbone/backbone.hpp"

namespace promptmed {

/// One annotated slice to evaluate on. Every connected component of the label
/// is scored as its own instance.
struct EvalCase {
  std::string id;
  SliceImage image;
  LabelMask label;
};

struct CaseDice {
  std::string case_id;  // "<case>/inst-<k>"
  int n_points = 0;
  double dice = 0.0;
};

struct EvalStats {
  std::vector<CaseDice> records;
  double mean = 0.0;
  double stddev = 0.0;
  void finalize();
};

/// n fg points from each instance plus n bg points from the slice, uniform.
EvalStats eval_points(const Backbone& backbone, const PromptEncoderState& state, const std::vector<EvalCase>& cases,
                      int n_points, std::uint64_t seed, PointScheme scheme = PointScheme::Uniform);

/// One jittered box per instance.
EvalStats eval_boxes(const Backbone& backbone, const PromptEncoderState& state, const std::vector<EvalCase>& cases,
                     const BoxJitterConfig& jitter, std::uint64_t seed);

struct ActiveStep {
  PointPrompt point;
  bool in_target_region = false;  // fg point in FN / bg point in FP at placement time
  std::int64_t fn_area = 0;       // before placement
  std::int64_t fp_area = 0;
  double dice_after = 0.0;
};

struct ActiveRecord {
  std::string case_id;
  BoxPrompt box;
  double box_dice = 0.0;
  std::vector<ActiveStep> steps;
  double best_dice = 0.0;
  int boxes_used = 1;
  int points_used() const noexcept { return static_cast<int>(steps.size()); }
};

struct ActiveStats {
  std::vector<ActiveRecord> records;
  double mean_best = 0.0;
  double stddev_best = 0.0;
};

/// Box first, then corrective clicks at the interior-most pixel of the largest
/// FN component (when FN area >= FP area) or of the largest FP component.
ActiveStats eval_composite_active(const Backbone& backbone, const PromptEncoderState& state,
                                  const std::vector<EvalCase>& cases, const BoxJitterConfig& jitter,
                                  std::uint64_t seed, int max_points = 5);

void write_dice_csv(const std::filesystem::path& path, const std::vector<CaseDice>& rows);
inline constexpr const char* kDiceCsvHeader = "case_id,n_points,dice";

nlohmann::json stats_json(const EvalStats& s);
nlohmann::json active_json(const ActiveStats& s);

}  // namespace promptmed
