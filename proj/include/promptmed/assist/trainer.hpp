#pragma once

#include <atomic>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmed/assist/sampling.hpp"
#include "promptmed/backbone/backbone.hpp"

namespace promptmed {

struct TrainPair {
  SliceImage image;
  LabelMask label;
};

enum class PromptMode { Points, Boxes, Composite };
enum class AssistLoss { Dice, CrossEntropy, DicePlusCe };
/// How many bg points accompany the n fg points of a training prompt set.
enum class BackgroundPoints {
  Matched,      // n, as in the validation protocol
  Independent,  // UniformInt[0, n_max): includes fg-only sets, needed by propagation
  None,
};

struct AssistTrainConfig {
  PromptMode prompt_mode = PromptMode::Points;
  int epochs = 200;
  double lr = 1e-2;
  AssistLoss loss = AssistLoss::DicePlusCe;
  std::uint64_t seed = 0;
  PointSamplingConfig point_cfg;
  BoxJitterConfig box_cfg;
  BackgroundPoints bg_points = BackgroundPoints::Matched;
  void validate() const;
};

struct TrainLogEntry {
  int epoch = 0;
  double loss = 0.0;     // mean over the epoch's iterations
  double seconds = 0.0;  // wall clock since training started
};

struct AssistTrainResult {
  PromptEncoderState state;
  std::vector<TrainLogEntry> log;
  double seconds = 0.0;
  int iterations = 0;
};

/// Hooks for job runners. progress gets a fraction in [0, 1]; cancel is polled
/// between iterations and raises Cancelled.
struct TrainControl {
  std::function<void(double)> progress;
  const std::atomic<bool>* cancel = nullptr;
};

/// Training loss on logits with its gradient (grad may be null).
double assist_loss(const Grid2<double>& logits, const LabelMask& gt, AssistLoss kind, Grid2<double>* grad);

/// Prompts synthesized for one training iteration on one instance.
/// bg points come from the whole slice label.
PromptSet make_training_prompts(const LabelMask& instance, const LabelMask& slice_label, PromptMode mode,
                                const PointSamplingConfig& pcfg, const BoxJitterConfig& bcfg, Rng& rng,
                                BackgroundPoints bg = BackgroundPoints::Matched);

/// Optimizes theta only (the backbone is const). Starts from `initial` when
/// given, else the backbone's initial state.
AssistTrainResult train_prompt_encoder(const std::vector<TrainPair>& pairs, const Backbone& backbone,
                                       const AssistTrainConfig& cfg, const PromptEncoderState* initial = nullptr,
                                       const TrainControl& control = {});

nlohmann::json training_log_json(const AssistTrainResult& r);

const char* to_string(PromptMode m);
PromptMode prompt_mode_from(const std::string& s);
const char* to_string(AssistLoss l);
AssistLoss assist_loss_from(const std::string& s);
const char* to_string(BackgroundPoints b);
BackgroundPoints background_points_from(const std::string& s);

}  // namespace promptmed
