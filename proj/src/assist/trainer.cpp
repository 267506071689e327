#include "promptmed/assist/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "promptmed/assist/optim.hpp"
#include "promptmed/core/components.hpp"
#include "promptmed/core/errors.hpp"
#include "promptmed/core/metrics.hpp"

namespace promptmed {

void AssistTrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("assist training: epochs must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("assist training: lr must be > 0");
  point_cfg.validate();
  box_cfg.validate();
}

const char* to_string(PromptMode m) {
  switch (m) {
    case PromptMode::Points: return "points";
    case PromptMode::Boxes: return "boxes";
    case PromptMode::Composite: return "composite";
  }
  return "?";
}

PromptMode prompt_mode_from(const std::string& s) {
  if (s == "points") return PromptMode::Points;
  if (s == "boxes") return PromptMode::Boxes;
  if (s == "composite") return PromptMode::Composite;
  throw std::invalid_argument("unknown prompt mode '" + s + "'");
}

const char* to_string(AssistLoss l) {
  switch (l) {
    case AssistLoss::Dice: return "dice";
    case AssistLoss::CrossEntropy: return "cross_entropy";
    case AssistLoss::DicePlusCe: return "dice_plus_ce";
  }
  return "?";
}

AssistLoss assist_loss_from(const std::string& s) {
  if (s == "dice") return AssistLoss::Dice;
  if (s == "cross_entropy") return AssistLoss::CrossEntropy;
  if (s == "dice_plus_ce") return AssistLoss::DicePlusCe;
  throw std::invalid_argument("unknown loss '" + s + "'");
}

const char* to_string(BackgroundPoints b) {
  switch (b) {
    case BackgroundPoints::Matched: return "matched";
    case BackgroundPoints::Independent: return "independent";
    case BackgroundPoints::None: return "none";
  }
  return "?";
}

BackgroundPoints background_points_from(const std::string& s) {
  if (s == "matched") return BackgroundPoints::Matched;
  if (s == "independent") return BackgroundPoints::Independent;
  if (s == "none") return BackgroundPoints::None;
  throw std::invalid_argument("unknown background point policy '" + s + "'");
}

double assist_loss(const Grid2<double>& logits, const LabelMask& gt, AssistLoss kind, Grid2<double>* grad) {
  if (!logits.same_shape(gt.pixels)) throw std::invalid_argument("assist_loss: shape mismatch");
  double total = 0.0;
  if (grad) *grad = Grid2<double>(logits.height(), logits.width(), 0.0);
  if (kind != AssistLoss::CrossEntropy) {
    Grid2<double> prob(logits.height(), logits.width());
    for (std::size_t i = 0; i < prob.size(); ++i) prob[i] = sigmoid(logits[i]);
    const LossConfig lc{1.0, 1.0};
    if (grad) {
      Grid2<double> dp(prob.height(), prob.width());
      total += biased_dice_loss_grad(prob, gt, lc, dp);
      for (std::size_t i = 0; i < prob.size(); ++i) (*grad)[i] += dp[i] * prob[i] * (1.0 - prob[i]);
    } else {
      total += biased_dice_loss(prob, gt, lc);
    }
  }
  if (kind != AssistLoss::Dice) {
    if (grad) {
      Grid2<double> dl(logits.height(), logits.width());
      total += bce_with_logits_grad(logits, gt, &dl);
      for (std::size_t i = 0; i < dl.size(); ++i) (*grad)[i] += dl[i];
    } else {
      total += bce_with_logits_grad(logits, gt, nullptr);
    }
  }
  return total;
}

PromptSet make_training_prompts(const LabelMask& instance, const LabelMask& slice_label, PromptMode mode,
                                const PointSamplingConfig& pcfg, const BoxJitterConfig& bcfg, Rng& rng,
                                BackgroundPoints bg) {
  PromptSet ps;
  if (mode != PromptMode::Points) ps.add(jitter_box(instance, bcfg, rng));
  if (mode != PromptMode::Boxes) {
    const int n = static_cast<int>(rng.uniform_int(pcfg.n_min, pcfg.n_max - 1));
    for (auto& p : sample_points_n(instance, pcfg.scheme, pcfg.boundary_band, Region::Foreground, n, rng).points)
      ps.add(p);
    const int n_bg = bg == BackgroundPoints::Matched       ? n
                     : bg == BackgroundPoints::Independent ? static_cast<int>(rng.uniform_int(0, pcfg.n_max - 1))
                                                           : 0;
    for (auto& p : sample_points_n(slice_label, pcfg.scheme, pcfg.boundary_band, Region::Background, n_bg, rng).points)
      ps.add(p);
  }
  return ps;
}

namespace {

std::string describe(const PromptSet& ps) {
  std::ostringstream os;
  os << ps.count(PromptKind::Point) << " points, " << ps.count(PromptKind::Box) << " boxes";
  return os.str();
}

}  // namespace

AssistTrainResult train_prompt_encoder(const std::vector<TrainPair>& pairs, const Backbone& backbone,
                                       const AssistTrainConfig& cfg, const PromptEncoderState* initial,
                                       const TrainControl& control) {
  cfg.validate();
  if (pairs.empty()) throw std::invalid_argument("assist training: no training pairs");

  struct Item {
    std::size_t pair;
    LabelMask instance;
  };
  std::vector<ImageEmbedding> embeddings;
  std::vector<Item> items;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    p.image.validate();
    if (!p.image.pixels.same_shape(p.label.pixels)) throw std::invalid_argument("assist training: image/label shape mismatch");
    embeddings.push_back(backbone.encode_image(p.image));
    for (auto& inst : split_instances(p.label)) items.push_back({i, std::move(inst)});
  }
  if (items.empty()) throw std::invalid_argument("assist training: no foreground in any training pair");

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };

  AssistTrainResult res;
  res.state = initial ? *initial : backbone.initial_state();
  res.state.validate();
  std::vector<double> flat = res.state.flatten();
  Adam opt(flat.size(), cfg.lr);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  const long total_iters = static_cast<long>(cfg.epochs) * static_cast<long>(items.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (control.cancel && control.cancel->load()) throw Cancelled();
      const Item& it = items[order[k]];
      const auto& pair = pairs[it.pair];
      const PromptSet ps =
          make_training_prompts(it.instance, pair.label, cfg.prompt_mode, cfg.point_cfg, cfg.box_cfg, rng, cfg.bg_points);
      const auto pred = backbone.predict(embeddings[it.pair], ps, res.state);
      Grid2<double> dlogits;
      const double loss = assist_loss(pred.logits, it.instance, cfg.loss, &dlogits);
      if (!std::isfinite(loss)) {
        std::ostringstream os;
        os << "assist training diverged: non-finite loss at epoch " << epoch << ", pair " << it.pair << " ("
           << describe(ps) << "), lr " << cfg.lr;
        throw TrainingDiverged(os.str());
      }
      auto grad = res.state.zeros_like();
      backbone.backward(embeddings[it.pair], ps, res.state, dlogits, grad);
      opt.step(flat, grad.flatten());
      res.state.unflatten(flat);
      epoch_loss += loss;
      ++res.iterations;
      if (control.progress) control.progress(static_cast<double>(res.iterations) / static_cast<double>(total_iters));
    }
    res.log.push_back({epoch, epoch_loss / static_cast<double>(order.size()), elapsed()});
  }
  res.seconds = elapsed();
  return res;
}

nlohmann::json training_log_json(const AssistTrainResult& r) {
  nlohmann::json j;
  j["seconds"] = r.seconds;
  j["iterations"] = r.iterations;
  j["epochs"] = nlohmann::json::array();
  for (const auto& e : r.log) j["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"seconds", e.seconds}});
  return j;
}

}  // namespace promptmed
