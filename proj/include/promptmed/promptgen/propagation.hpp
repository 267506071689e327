#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <vector>

#include "promptmed/assist/model.hpp"
#include "promptmed/core/raster.hpp"

namespace promptmed {

enum class Direction { Up, Down, Both };  // Up = increasing slice index

struct PropagationConfig {
  double lambda = 1.0;
  int n_points = 10;
  Direction direction = Direction::Both;
  int max_slices = 1000;           // steps per direction
  bool resample = true;            // refill from the predicted mask when survivors < n/2
  std::uint64_t seed = 0;
  void validate() const;
};

struct PropagationStep {
  int slice = 0;
  int from_slice = 0;
  int candidates = 0;
  int survivors = 0;
  bool resampled = false;
  double x_tilde = 0.0;
  std::size_t mask_pixels = 0;
  std::optional<double> dice;  // filled by callers that have ground truth
};

struct SliceOutcome {
  PromptSet prompts;
  LabelMask mask;
};

struct PropagationResult {
  std::map<int, SliceOutcome> slices;  // includes the seed slice (its label)
  std::vector<PropagationStep> trace;
  Mask3D to_mask(int depth, int height, int width) const;
};

/// Carries foreground points from the seed slice to its neighbours while
/// |X_{t+1}(p) - X_t(p)| < lambda * stddev(X_t under L_t). A point also
/// survives when the intensity is unchanged (covers lambda * X~ = 0).
/// Each reached slice is segmented once with its surviving points.
PropagationResult propagate_prompts(const Volume& volume, int seed_slice, const LabelMask& seed_label,
                                    const PropagationConfig& cfg, const AssistModel& model);

struct PropagationSeed {
  int slice = 0;
  LabelMask label;
};

/// Per-seed runs combined per voxel: foreground when at least half the seeds
/// vote for it (ties join the union).
Mask3D propagate_ensemble(const Volume& volume, const std::vector<PropagationSeed>& seeds,
                          const PropagationConfig& cfg, const AssistModel& model,
                          std::vector<PropagationResult>* runs = nullptr);

/// Fills dice on each trace step against a reference volume mask.
void score_trace(PropagationResult& r, const Mask3D& truth);
/// JSON lines: slice, survivors, resampled, dice_if_gt_available (null when absent).
void write_trace_jsonl(std::ostream& os, const PropagationResult& r);

Direction direction_from(const std::string& s);

}  // namespace promptmed
