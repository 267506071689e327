#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmed/assist/evaluate.hpp"
#include "promptmed/assist/trainer.hpp"
#include "promptmed/backbone/backbone.hpp"
#include "promptmed/data/phantom.hpp"
#include "promptmed/sapnet/auto.hpp"

namespace promptmed {

/// A labelled volume the batch commands run on.
struct SuiteCase {
  std::string id;
  Volume volume;
  Mask3D mask;
  bool is_2d = false;
};

/// Presets: two_body, kidneys, cylinder. seed 0 keeps each preset's own seed.
PhantomConfig preset_config(const std::string& preset, std::uint64_t seed = 0);
SuiteCase phantom_case(const std::string& preset, std::uint64_t seed = 0);
/// Every case of a manifest that carries ground truth.
std::vector<SuiteCase> manifest_cases(const std::filesystem::path& manifest);

/// Annotated-slice choice shared by all experiments (Normal draw around the
/// median foreground slice). 2-D cases draw from their foreground images.
std::vector<int> annotated_slices(const SuiteCase& c, int n, std::uint64_t seed);
std::vector<TrainPair> pairs_for(const SuiteCase& c, const std::vector<int>& slices);
/// Foreground slices not in `exclude`, one EvalCase each.
std::vector<EvalCase> held_out_cases(const SuiteCase& c, const std::vector<int>& exclude);

// ---------------------------------------------------------------- assist

struct AssistExperiment {
  PromptMode mode = PromptMode::Points;
  int slices = 5;
  int max_points = 10;  // points: curve 1..max_points; composite: click budget
  std::uint64_t seed = 0;
  AssistTrainConfig train;  // prompt_mode is overwritten with `mode`
};

struct AssistCaseResult {
  std::string case_id;
  std::vector<int> train_slices;
  double train_seconds = 0.0;
  int iterations = 0;
  double final_loss = 0.0;
  std::vector<CaseDice> untrained;  // points: n_points 1..P; boxes: 0; composite: clicks used
  std::vector<CaseDice> trained;
  PromptEncoderState theta;
};

AssistCaseResult run_assist_case(const SuiteCase& c, const Backbone& bb, const AssistExperiment& e,
                                 const PromptEncoderState* preset_theta = nullptr);

struct CurvePoint {
  std::string theta;  // trained | untrained
  int n_points = 0;
  double mean = 0.0, stddev = 0.0;
  int count = 0;
};
/// mean and population stddev of the instance Dice per (theta, n_points)
std::vector<CurvePoint> dice_curve(const std::vector<CaseDice>& untrained, const std::vector<CaseDice>& trained);

// ---------------------------------------------------------------- auto

enum class AutoStrategy { Propagate, Classify, Sapnet };
AutoStrategy auto_strategy_from(const std::string& s);
const char* to_string(AutoStrategy s);

struct AblationSettings {
  AutoStrategy strategy = AutoStrategy::Sapnet;
  std::vector<std::string> toggles;  // applied cumulatively, in order; sapnet: pe, biasdice, post
  int slices = 5;
  std::uint64_t seed = 0;
  int sapnet_epochs = 100;
  int assist_epochs = 200;
  double beta_on = 3.0;
  int k_components = 2;
  void validate() const;
};

struct AblationRow {
  std::string name;  // "baseline", "+pe", ...
  bool pe = false, biasdice = false, post = false;
  double dice_mean = 0.0, dice_std = 0.0;  // over held-out foreground slices
  std::int64_t fp = 0;                     // over all held-out slices
  int evaluated = 0;
  StageHashes hashes;  // sapnet only
  double seconds = 0.0;
};

std::vector<AblationRow> run_ablation(const SuiteCase& c, const Backbone& bb, const AblationSettings& s);

inline constexpr const char* kAblationCsvHeader =
    "case,strategy,row,pe,biasdice,post,dice_mean,dice_std,fp,evaluated,coarse_hash,post_hash,assist_hash";
void append_ablation_csv(std::ostream& os, const std::string& case_id, AutoStrategy s, const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------- report

struct ReportResult {
  std::string markdown;
  std::vector<std::string> absent;  // runs or files that were expected but missing
};
/// Aggregates every run directory below `runs` (each has a run.json). Output
/// depends only on file contents, so reruns are byte-identical.
ReportResult build_report(const std::filesystem::path& runs, const std::vector<std::string>& expected = {});

/// mean and population stddev
std::pair<double, double> mean_std(const std::vector<double>& v);

}  // namespace promptmed
