#pragma once

#include <string>
#include <vector>

#include "promptmed/assist/model.hpp"
#include "promptmed/assist/trainer.hpp"
#include "promptmed/backbone/backbone.hpp"

namespace promptmed {

struct ClassifierTrainConfig {
  int samples_per_class = 400;  // per training pair
  int epochs = 300;             // full-batch gradient steps
  double lr = 0.05;
  double l2 = 1e-3;
  std::uint64_t seed = 0;
};

/// Linear logistic head over standardized per-pixel encoder features.
struct PointClassifier {
  std::vector<double> weights;  // feature_dim
  double bias = 0.0;
  std::vector<double> feature_mean, feature_scale;
  int feature_dim = 0;
  std::string trained_on;
  double training_accuracy = 0.0;
  bool constant = false;  // fell back to the balanced-majority predictor

  double probability(const std::vector<double>& feature) const;
};

/// Trains on raw feature vectors (labels 0/1). Class balance is the caller's job.
PointClassifier fit_logistic(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                             const ClassifierTrainConfig& cfg);

/// Bilinearly upsampled encoder feature at pixel (y, x).
std::vector<double> pixel_feature(const ImageEmbedding& emb, int y, int x);

PointClassifier train_point_classifier(const std::vector<TrainPair>& pairs, const Backbone& backbone,
                                       const ClassifierTrainConfig& cfg = {}, const std::string& case_id = "");

struct ScoredPoint {
  PointPrompt point;
  double confidence = 0.0;  // probability of the assigned class
};

/// Candidate grid at k*stride + stride/2 in both axes. Keeps the n_per_class
/// most confident candidates of each class, all sorted by confidence.
std::vector<ScoredPoint> score_candidate_points(const SliceImage& image, const PointClassifier& clf,
                                                const Backbone& backbone, int grid_stride, int n_per_class = 5);
PromptSet classify_candidate_points(const SliceImage& image, const PointClassifier& clf, const Backbone& backbone,
                                    int grid_stride, int n_per_class = 5);

/// Segments with classified prompts. No foreground point means no target on
/// the slice: the mask is empty (bg-only prompts would otherwise flood it).
LabelMask segment_classified(const AssistModel& model, const SliceImage& image, const PromptSet& prompts);

}  // namespace promptmed
