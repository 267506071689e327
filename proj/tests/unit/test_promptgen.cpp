#include "doctest.h"

#include <cmath>
#include <set>
#include <sstream>

#include "json.hpp"

#include "promptmed/assist/trainer.hpp"
#include "promptmed/backbone/toy_backbone.hpp"
#include "promptmed/core/metrics.hpp"
#include "promptmed/data/phantom.hpp"
#include "promptmed/promptgen/classifier.hpp"
#include "promptmed/promptgen/propagation.hpp"

using namespace promptmed;

namespace {

// Segments pixels brighter than `cut` whenever at least one prompt is given.
// Keeps propagation tests independent of any learned model.
class ThresholdBackbone final : public Backbone {
 public:
  explicit ThresholdBackbone(double cut) : cut_(cut) {}
  const BackboneDescriptor& descriptor() const override { return desc_; }
  PromptEncoderState initial_state() const override { return {}; }
  ImageEmbedding encode_image(const SliceImage& i) const override {
    ImageEmbedding e;
    e.features = FeatureMap(1, i.height(), i.width());
    std::copy(i.pixels.values().begin(), i.pixels.values().end(), e.features.values().begin());
    e.source_height = i.height();
    e.source_width = i.width();
    return e;
  }
  PromptEmbedding encode_prompts(const PromptSet& p, const PromptEncoderState&, int, int) const override {
    PromptEmbedding pe;
    pe.sparse.assign(p.size(), std::vector<double>{1.0});
    return pe;
  }
  MaskPrediction decode_mask(const ImageEmbedding& e, const PromptEmbedding& p) const override {
    MaskPrediction m{Grid2<double>(e.source_height, e.source_width, -1.0), 1.0};
    if (!p.sparse.empty())
      for (std::size_t i = 0; i < m.logits.size(); ++i) m.logits[i] = e.features.values()[i] - cut_;
    return m;
  }
  void backward(const ImageEmbedding&, const PromptSet&, const PromptEncoderState&, const Grid2<double>&,
                PromptEncoderState&) const override {}
  std::uint64_t image_encoder_hash() const override { return 1; }
  std::uint64_t mask_decoder_hash() const override { return 2; }

 private:
  double cut_;
  BackboneDescriptor desc_{"threshold", 1, 32, 32};
};

Volume constant_volume(int d, int h, int w, double v) {
  return Volume::from_dense(d, h, w, std::vector<double>(static_cast<std::size_t>(d) * h * w, v));
}

LabelMask disc(int h, int w, double cy, double cx, double r) {
  LabelMask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.pixels(y, x) = (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r;
  return m;
}

// Textured disc (fg 0.5 +- 0.05) whose fg intensity jumps by +1 from slice z0 on.
Volume step_volume(int d, int h, int w, int z0) {
  const auto m = disc(h, w, h / 2.0, w / 2.0, h / 4.0);
  std::vector<double> v(static_cast<std::size_t>(d) * h * w, 0.0);
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (m.pixels(y, x)) v[(static_cast<std::size_t>(z) * h + y) * w + x] = 0.5 + 0.05 * ((x + y) % 2 ? 1 : -1) + (z >= z0);
  return Volume::from_dense(d, h, w, v);
}

}  // namespace

TEST_CASE("constant volume propagates to max_slices in both directions") {
  ThresholdBackbone bb(-1.0);
  AssistModel model{bb, bb.initial_state()};
  const auto vol = constant_volume(20, 16, 16, 0.3);
  PropagationConfig cfg;
  cfg.max_slices = 3;
  cfg.n_points = 4;
  const auto r = propagate_prompts(vol, 10, disc(16, 16, 8, 8, 4), cfg, model);
  std::set<int> got;
  for (const auto& [z, _] : r.slices) got.insert(z);
  CHECK(got == std::set<int>{7, 8, 9, 10, 11, 12, 13});
  for (const auto& s : r.trace) CHECK(s.survivors == s.candidates);
}

TEST_CASE("direction limits the visited side") {
  ThresholdBackbone bb(-1.0);
  AssistModel model{bb, bb.initial_state()};
  const auto vol = constant_volume(10, 8, 8, 0.3);
  PropagationConfig cfg;
  cfg.n_points = 3;
  cfg.direction = Direction::Up;
  const auto r = propagate_prompts(vol, 4, disc(8, 8, 4, 4, 2), cfg, model);
  CHECK(r.slices.begin()->first == 4);
  CHECK(r.slices.rbegin()->first == 9);
  cfg.direction = Direction::Down;
  const auto d = propagate_prompts(vol, 4, disc(8, 8, 4, 4, 2), cfg, model);
  CHECK(d.slices.begin()->first == 0);
  CHECK(d.slices.rbegin()->first == 4);
}

TEST_CASE("offset neighbour kills every point immediately") {
  ThresholdBackbone bb(0.25);
  AssistModel model{bb, bb.initial_state()};
  const auto vol = step_volume(12, 32, 32, 6);
  const auto seed = threshold_mask(vol.slices[5].pixels, 0.25);
  PropagationConfig cfg;
  cfg.direction = Direction::Up;
  const auto r = propagate_prompts(vol, 5, seed, cfg, model);
  CHECK(r.slices.size() == 1);
  REQUIRE(r.trace.size() == 1);
  CHECK(r.trace[0].slice == 6);
  CHECK(r.trace[0].survivors == 0);
  CHECK(r.trace[0].x_tilde == doctest::Approx(0.05).epsilon(1e-3));
}

TEST_CASE("step phantom: propagation stops at the step") {
  ThresholdBackbone bb(0.25);
  AssistModel model{bb, bb.initial_state()};
  const int z0 = 9;
  const auto vol = step_volume(16, 32, 32, z0);
  const auto seed = threshold_mask(vol.slices[3].pixels, 0.25);
  PropagationConfig cfg;
  const auto r = propagate_prompts(vol, 3, seed, cfg, model);
  for (const auto& [z, _] : r.slices) CHECK(z < z0);
  CHECK(r.slices.count(z0 - 1) == 1);
  CHECK(r.slices.count(0) == 1);
  for (const auto& s : r.trace)
    if (s.slice >= z0) CHECK(s.survivors == 0);
}

TEST_CASE("survivors are a subset of the previous points unless resampled") {
  ThresholdBackbone bb(0.25);
  AssistModel model{bb, bb.initial_state()};
  // ramped intensity so that some points die each step
  const int d = 8, h = 24, w = 24;
  std::vector<double> v(static_cast<std::size_t>(d) * h * w, 0.0);
  const auto m = disc(h, w, 12, 12, 8);
  for (int z = 0; z < d; ++z)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (m.pixels(y, x)) v[(static_cast<std::size_t>(z) * h + y) * w + x] = 0.5 + 0.02 * x * (1 + z);
  const auto vol = Volume::from_dense(d, h, w, v);
  PropagationConfig cfg;
  cfg.direction = Direction::Up;
  cfg.resample = false;
  cfg.lambda = 0.6;
  const auto r = propagate_prompts(vol, 0, m, cfg, model);
  int prev = cfg.n_points;
  for (const auto& s : r.trace) {
    CHECK(s.candidates == prev);
    CHECK(s.survivors <= s.candidates);
    CHECK_FALSE(s.resampled);
    prev = s.survivors;
  }
  for (auto it = std::next(r.slices.begin()); it != r.slices.end(); ++it) {
    const auto& before = std::prev(it)->second.prompts.points();
    for (const auto& p : it->second.prompts.points()) {
      bool found = false;
      for (const auto& q : before) found |= q.x == p.x && q.y == p.y;
      CHECK(found);
    }
  }
}

TEST_CASE("propagation errors") {
  ThresholdBackbone bb(0.25);
  AssistModel model{bb, bb.initial_state()};
  const auto vol = constant_volume(4, 8, 8, 0.3);
  PropagationConfig cfg;
  CHECK_THROWS_AS(propagate_prompts(vol, 1, LabelMask(8, 8), cfg, model), std::invalid_argument);
  CHECK_THROWS_AS(propagate_prompts(vol, 7, disc(8, 8, 4, 4, 2), cfg, model), std::invalid_argument);
  cfg.lambda = 0;
  CHECK_THROWS_AS(propagate_prompts(vol, 1, disc(8, 8, 4, 4, 2), cfg, model), std::invalid_argument);
}

TEST_CASE("ensemble of one and of duplicates equals a single run") {
  ThresholdBackbone bb(0.25);
  AssistModel model{bb, bb.initial_state()};
  const auto vol = step_volume(12, 24, 24, 20);
  const auto seed = threshold_mask(vol.slices[4].pixels, 0.25);
  PropagationConfig cfg;
  cfg.seed = 5;
  const auto single = propagate_prompts(vol, 4, seed, cfg, model).to_mask(12, 24, 24);
  CHECK(propagate_ensemble(vol, {{4, seed}}, cfg, model) == single);
  CHECK(propagate_ensemble(vol, {{4, seed}, {4, seed}}, cfg, model) == single);
  CHECK_THROWS_AS(propagate_ensemble(vol, {}, cfg, model), std::invalid_argument);
}

TEST_CASE("ensemble lies between intersection and union of its members") {
  ThresholdBackbone bb(0.25);
  AssistModel model{bb, bb.initial_state()};
  const auto vol = step_volume(12, 24, 24, 7);
  PropagationConfig cfg;
  std::vector<PropagationResult> runs;
  const std::vector<PropagationSeed> seeds{{2, threshold_mask(vol.slices[2].pixels, 0.25)},
                                           {9, threshold_mask(vol.slices[9].pixels, 0.25)},
                                           {5, threshold_mask(vol.slices[5].pixels, 0.25)}};
  const auto ens = propagate_ensemble(vol, seeds, cfg, model, &runs);
  REQUIRE(runs.size() == 3);
  std::vector<Mask3D> members;
  for (const auto& r : runs) members.push_back(r.to_mask(12, 24, 24));
  for (std::size_t i = 0; i < ens.size(); ++i) {
    bool all = true, any = false;
    int votes = 0;
    for (const auto& m : members) {
      all &= m.values()[i] != 0;
      any |= m.values()[i] != 0;
      votes += m.values()[i] != 0;
    }
    if (all) CHECK(ens.values()[i] == 1);
    if (!any) CHECK(ens.values()[i] == 0);
    CHECK((ens.values()[i] == 1) == (2 * votes >= 3));
  }
}

TEST_CASE("noiseless cylinder is fully covered with a perfect segmenter") {
  ThresholdBackbone bb(0.5);
  AssistModel model{bb, bb.initial_state()};
  const auto [vol, truth] = make_phantom(phantoms::cylinder(16, 48, 14));
  PropagationConfig cfg;
  const auto ens = propagate_ensemble(vol, {{8, truth.slice(8)}}, cfg, model);
  CHECK(dice(ens, truth) == doctest::Approx(1.0));
}

TEST_CASE("trace JSONL has one record per step") {
  ThresholdBackbone bb(0.25);
  AssistModel model{bb, bb.initial_state()};
  const auto vol = step_volume(8, 16, 16, 5);
  auto r = propagate_prompts(vol, 2, threshold_mask(vol.slices[2].pixels, 0.25), PropagationConfig{}, model);
  std::ostringstream os;
  write_trace_jsonl(os, r);
  std::istringstream is(os.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("slice"));
    CHECK(j.contains("survivors"));
    CHECK(j.contains("resampled"));
    CHECK(j["dice_if_gt_available"].is_null());
    ++n;
  }
  CHECK(n == r.trace.size());
  Mask3D truth(8, 16, 16);
  for (int z = 0; z < 8; ++z) truth.set_slice(z, threshold_mask(vol.slices[z].pixels, 0.25));
  score_trace(r, truth);
  for (const auto& s : r.trace)
    if (s.mask_pixels > 0) CHECK(s.dice.value() == doctest::Approx(1.0));
}

TEST_CASE("fit_logistic separates separable data") {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double a = rng.normal(), b = rng.normal();
    const int cls = a + 0.5 * b > 0 ? 1 : 0;
    // margin keeps the problem strictly separable
    x.push_back({a + (cls ? 0.5 : -0.5), b, rng.normal()});
    y.push_back(cls);
  }
  const auto c = fit_logistic(x, y, {});
  CHECK(c.training_accuracy == 1.0);
  CHECK_FALSE(c.constant);
  for (double w : c.weights) CHECK(std::isfinite(w));
}

TEST_CASE("fit_logistic rejects single-class data and never goes below chance") {
  std::vector<std::vector<double>> x{{0.0}, {1.0}};
  CHECK_THROWS_AS(fit_logistic(x, {1, 1}, {}), std::invalid_argument);
  // XOR-like: no linear separator, accuracy still >= 0.5
  std::vector<std::vector<double>> xo{{0, 0}, {1, 1}, {0, 1}, {1, 0}};
  const auto c = fit_logistic(xo, {0, 0, 1, 1}, {});
  CHECK(c.training_accuracy >= 0.5);
}

TEST_CASE("point classifier on a phantom slice") {
  ToyBackbone bb;
  const auto [vol, truth] = make_phantom(phantoms::two_body());
  std::vector<TrainPair> pairs;
  for (int z : {26, 34}) pairs.push_back({vol.slices[z], truth.slice(z)});
  const auto clf = train_point_classifier(pairs, bb, {}, "two_body");
  CHECK(clf.training_accuracy >= 0.5);
  CHECK(clf.trained_on == "two_body");
  CHECK(clf.feature_dim == bb.descriptor().embed_dim);

  const auto q = vol.slices[30];
  const auto scored = score_candidate_points(q, clf, bb, 8, 5);
  for (std::size_t i = 1; i < scored.size(); ++i) CHECK(scored[i - 1].confidence >= scored[i].confidence);
  const auto ps = classify_candidate_points(q, clf, bb, 8, 5);
  CHECK(ps == classify_candidate_points(q, clf, bb, 8, 5));
  const auto gt = truth.slice(30);
  int fg = 0, inside = 0;
  for (const auto& p : ps.points()) {
    CHECK((p.label == PointLabel::Foreground || p.label == PointLabel::Background));
    if (p.label != PointLabel::Foreground) continue;
    ++fg;
    inside += gt.pixels(static_cast<int>(p.y), static_cast<int>(p.x));
  }
  REQUIRE(fg > 0);
  CHECK(inside >= 0.8 * fg);
}

TEST_CASE("classifier grid geometry") {
  ToyBackbone bb;
  const auto [vol, truth] = make_phantom(phantoms::two_body());
  const auto clf = train_point_classifier({{vol.slices[30], truth.slice(30)}}, bb);
  CHECK(score_candidate_points(vol.slices[30], clf, bb, 128, 5).size() <= 1);
  CHECK(score_candidate_points(vol.slices[30], clf, bb, 500, 5).size() <= 1);
  CHECK_THROWS_AS(train_point_classifier({{vol.slices[0], LabelMask(128, 128)}}, bb), std::invalid_argument);
}
