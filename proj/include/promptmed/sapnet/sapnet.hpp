#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptmed/assist/trainer.hpp"
#include "promptmed/backbone/backbone.hpp"
#include "promptmed/backbone/checkpoint.hpp"
#include "promptmed/core/random.hpp"
#include "promptmed/core/tensor.hpp"

namespace promptmed {

/// Random Fourier position features: [cos(2 pi B^T v), sin(2 pi B^T v)] with
/// v = (x, y) normalized to [0, 1]^2.
struct PositionEncoder {
  int d = 64;
  double sigma = 1.0;
  std::vector<double> B;  // 2 x d row-major: row 0 multiplies x, row 1 multiplies y

  static PositionEncoder sample(int d, double sigma, Rng& rng);
  std::vector<double> encode(double x, double y) const;
  /// 2d x h x w; cell (i, j) sits at x = j/(w-1), y = i/(h-1) (0 on a unit axis).
  FeatureMap grid(int height, int width) const;
  bool operator==(const PositionEncoder&) const = default;
};

/// Trainable head T: conv3x3 -> tanh -> conv3x3.
struct Tuner {
  ConvWeights conv1, conv2;

  static Tuner init(int in_channels, int hidden, int out_channels, Rng& rng);
  int out_channels() const noexcept { return conv2.out_channels; }
  std::size_t size() const noexcept;
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
  Tuner zeros_like() const;
  std::uint64_t hash() const;
};

struct FeatureExtractor {
  const Backbone* encoder = nullptr;
  Tuner tuner;
  std::optional<PositionEncoder> pos;  // disabled for 2-D datasets

  int channels() const noexcept { return tuner.out_channels() + (pos ? 2 * pos->d : 0); }
  /// 2-D datasets mix slices of different cases, where position carries no signal.
  void validate_for_dataset(bool is_2d) const;
};

FeatureExtractor make_feature_extractor(const Backbone& encoder, bool use_pe, int d = 64, double sigma = 1.0,
                                        std::uint64_t seed = 0, int hidden = 32, int out_channels = 64);

/// concat(T(E(image)), gamma) on the embedding grid; position channels last.
FeatureMap extract_features(const SliceImage& image, const FeatureExtractor& fx);
FeatureMap extract_features(const ImageEmbedding& emb, const FeatureExtractor& fx);

struct PrototypeSet {
  std::vector<double> fg, bg;
  double alpha = 20.0;
};

/// Masked average pooling over all support maps jointly. Weights are per-cell
/// foreground fractions in [0, 1]; background uses 1 - w.
PrototypeSet compute_prototypes(const std::vector<FeatureMap>& features, const std::vector<Grid2<double>>& fg_weights,
                                double alpha = 20.0);
PrototypeSet compute_prototypes(const std::vector<FeatureMap>& features, const std::vector<LabelMask>& masks,
                                double alpha = 20.0);

/// 1 - cosine similarity; 1 when either vector is zero (flag set).
double cosine_distance(const double* a, const double* b, int n, bool* zero_flag = nullptr);

struct QueryPrediction {
  Grid2<double> fg, bg;    // soft maps, fg + bg = 1
  Grid2<double> logit;     // log(fg / bg) = alpha * (cos_fg - cos_bg)
  LabelMask hard;          // argmax, ties to bg
  bool zero_feature = false;
};
QueryPrediction predict_query(const FeatureMap& features, const PrototypeSet& protos);

/// Fraction of source pixels of `mask` falling in each cell of an h x w grid.
Grid2<double> pool_to_grid(const LabelMask& mask, int height, int width);

struct SapTrainConfig {
  int epochs = 100;
  double lr = 1e-3;
  double beta = 3.0;
  double alpha = 20.0;
  double sigma = 1.0;
  int d = 64;
  std::uint64_t seed = 0;
  double w_seg = 1.0;
  double w_align = 1.0;
  double align_beta = 1.0;  // plain Dice on the reverse episode
  double smooth = 1.0;
  bool use_pe = true;
  void validate() const;
};

struct EpisodeSplit {
  std::vector<TrainPair> support, query;
  void validate() const;
};

/// Support gets N - max(1, N/2) pairs; needs N >= 2.
EpisodeSplit random_split(const std::vector<TrainPair>& pairs, Rng& rng);

struct EpisodeLoss {
  double total = 0.0, seg = 0.0, align = 0.0;
};

/// w_seg * L_seg + w_align * L_align for one episode; accumulates dL/dtuner into `grad` if given.
EpisodeLoss episode_loss(const EpisodeSplit& split, const FeatureExtractor& fx, const SapTrainConfig& cfg,
                         Tuner* grad = nullptr);

struct SapLogEntry {
  int epoch = 0;
  double loss = 0.0, seg = 0.0, align = 0.0;
};

struct SapNet {
  FeatureExtractor fx;
  PrototypeSet protos;  // from every annotated pair
  double beta = 3.0;
  std::vector<SapLogEntry> log;
  double seconds = 0.0;
};

/// Re-splits the pairs into support/query every epoch; only the tuner moves.
SapNet train_sapnet(const std::vector<TrainPair>& pairs, const Backbone& encoder, const SapTrainConfig& cfg,
                    const TrainControl& control = {});
/// Same, starting from a given extractor.
SapNet train_sapnet(const std::vector<TrainPair>& pairs, FeatureExtractor fx, const SapTrainConfig& cfg,
                    const TrainControl& control = {});

/// Coarse mask at source resolution: the prototype logit upsampled, then > 0.
LabelMask coarse_segment(const SliceImage& image, const SapNet& net);

nlohmann::json sap_log_json(const SapNet& net);

inline constexpr const char* kSapnetSection = "sapnet/1";
/// Tuner weights, B, prototypes and alpha/sigma/d/beta into section sapnet/1.
void store_sapnet(Checkpoint& ck, const SapNet& net);
SapNet load_sapnet(const Checkpoint& ck, const Backbone& encoder);
bool has_sapnet(const Checkpoint& ck);

}  // namespace promptmed
