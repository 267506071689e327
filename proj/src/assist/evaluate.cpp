#include "promptmed/assist/evaluate.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "promptmed/core/components.hpp"
#include "promptmed/core/distance.hpp"
#include "promptmed/core/errors.hpp"
#include "promptmed/core/metrics.hpp"

namespace promptmed {

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size()));
}

std::string instance_id(const EvalCase& c, std::size_t k) { return c.id + "/inst-" + std::to_string(k + 1); }

// Per-case work is independent; results land in per-case slots and are
// concatenated in case order, so the output does not depend on scheduling.
template <class Fn>
std::vector<std::vector<typename std::invoke_result_t<Fn, const EvalCase&, Rng&>::value_type>> per_case(
    const std::vector<EvalCase>& cases, std::uint64_t seed, Fn fn) {
  using Row = typename std::invoke_result_t<Fn, const EvalCase&, Rng&>::value_type;
  std::vector<std::vector<Row>> out(cases.size());
  Rng base(seed);
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < cases.size(); ++i) rngs.push_back(base.fork(i));
  for (std::size_t i = 0; i < cases.size(); ++i) out[i] = fn(cases[i], rngs[i]);
  return out;
}

}  // namespace

void EvalStats::finalize() {
  std::vector<double> d;
  for (const auto& r : records) d.push_back(r.dice);
  mean_std(d, mean, stddev);
}

EvalStats eval_points(const Backbone& backbone, const PromptEncoderState& state, const std::vector<EvalCase>& cases,
                      int n_points, std::uint64_t seed, PointScheme scheme) {
  if (n_points < 0) throw std::invalid_argument("eval_points: n_points must be >= 0");
  auto rows = per_case(cases, seed, [&](const EvalCase& c, Rng& rng) {
    std::vector<CaseDice> out;
    const auto emb = backbone.encode_image(c.image);
    const auto instances = split_instances(c.label);
    for (std::size_t k = 0; k < instances.size(); ++k) {
      PromptSet ps;
      for (auto& p : sample_points_n(instances[k], scheme, 2, Region::Foreground, n_points, rng).points) ps.add(p);
      for (auto& p : sample_points_n(c.label, scheme, 2, Region::Background, n_points, rng).points) ps.add(p);
      out.push_back({instance_id(c, k), n_points, dice(backbone.segment(emb, ps, state), instances[k])});
    }
    return out;
  });
  EvalStats s;
  for (auto& r : rows) s.records.insert(s.records.end(), r.begin(), r.end());
  s.finalize();
  return s;
}

EvalStats eval_boxes(const Backbone& backbone, const PromptEncoderState& state, const std::vector<EvalCase>& cases,
                     const BoxJitterConfig& jitter, std::uint64_t seed) {
  auto rows = per_case(cases, seed, [&](const EvalCase& c, Rng& rng) {
    std::vector<CaseDice> out;
    const auto emb = backbone.encode_image(c.image);
    const auto instances = split_instances(c.label);
    for (std::size_t k = 0; k < instances.size(); ++k) {
      PromptSet ps;
      ps.add(jitter_box(instances[k], jitter, rng));
      out.push_back({instance_id(c, k), 0, dice(backbone.segment(emb, ps, state), instances[k])});
    }
    return out;
  });
  EvalStats s;
  for (auto& r : rows) s.records.insert(s.records.end(), r.begin(), r.end());
  s.finalize();
  return s;
}

ActiveStats eval_composite_active(const Backbone& backbone, const PromptEncoderState& state,
                                  const std::vector<EvalCase>& cases, const BoxJitterConfig& jitter,
                                  std::uint64_t seed, int max_points) {
  if (max_points < 0) throw std::invalid_argument("eval_composite_active: max_points must be >= 0");
  auto rows = per_case(cases, seed, [&](const EvalCase& c, Rng& rng) {
    std::vector<ActiveRecord> out;
    const auto emb = backbone.encode_image(c.image);
    const auto instances = split_instances(c.label);
    for (std::size_t k = 0; k < instances.size(); ++k) {
      const LabelMask& gt = instances[k];
      ActiveRecord rec;
      rec.case_id = instance_id(c, k);
      rec.box = jitter_box(gt, jitter, rng);
      PromptSet ps;
      ps.add(rec.box);
      LabelMask pred = backbone.segment(emb, ps, state);
      rec.box_dice = rec.best_dice = dice(pred, gt);
      for (int step = 0; step < max_points; ++step) {
        LabelMask fn(gt.height(), gt.width()), fp(gt.height(), gt.width());
        for (std::size_t i = 0; i < gt.pixels.size(); ++i) {
          fn.pixels[i] = gt.pixels[i] && !pred.pixels[i];
          fp.pixels[i] = pred.pixels[i] && !gt.pixels[i];
        }
        const auto fn_area = static_cast<std::int64_t>(fn.count()), fp_area = static_cast<std::int64_t>(fp.count());
        if (fn_area == 0 && fp_area == 0) break;
        const bool add_fg = fn_area >= fp_area;
        const LabelMask target = top_k_components(add_fg ? fn : fp, 1);
        int y = 0, x = 0;
        interior_most_pixel(target, y, x);
        ActiveStep st;
        st.point = PointPrompt{double(x), double(y), add_fg ? PointLabel::Foreground : PointLabel::Background};
        st.in_target_region = add_fg ? fn.pixels(y, x) == 1 : fp.pixels(y, x) == 1;
        st.fn_area = fn_area;
        st.fp_area = fp_area;
        ps.add(st.point);
        pred = backbone.segment(emb, ps, state);
        st.dice_after = dice(pred, gt);
        rec.best_dice = std::max(rec.best_dice, st.dice_after);
        rec.steps.push_back(st);
      }
      out.push_back(std::move(rec));
    }
    return out;
  });
  ActiveStats s;
  for (auto& r : rows) s.records.insert(s.records.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
  std::vector<double> best;
  for (const auto& r : s.records) best.push_back(r.best_dice);
  mean_std(best, s.mean_best, s.stddev_best);
  return s;
}

void write_dice_csv(const std::filesystem::path& path, const std::vector<CaseDice>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError(path.string(), "cannot open for writing");
  f << kDiceCsvHeader << '\n' << std::setprecision(6) << std::fixed;
  for (const auto& r : rows) f << r.case_id << ',' << r.n_points << ',' << r.dice << '\n';
  if (!f) throw IoError(path.string(), "write failed");
}

nlohmann::json stats_json(const EvalStats& s) {
  return {{"mean", s.mean}, {"std", s.stddev}, {"n", s.records.size()}};
}

nlohmann::json active_json(const ActiveStats& s) {
  nlohmann::json j{{"mean_best", s.mean_best}, {"std_best", s.stddev_best}, {"cases", nlohmann::json::array()}};
  for (const auto& r : s.records) {
    nlohmann::json steps = nlohmann::json::array();
    for (const auto& st : r.steps)
      steps.push_back({{"x", st.point.x},
                       {"y", st.point.y},
                       {"label", st.point.label == PointLabel::Foreground ? "fg" : "bg"},
                       {"in_target_region", st.in_target_region},
                       {"dice", st.dice_after}});
    j["cases"].push_back({{"case_id", r.case_id},
                          {"box", {r.box.x1, r.box.y1, r.box.x2, r.box.y2}},
                          {"box_dice", r.box_dice},
                          {"best_dice", r.best_dice},
                          {"steps", steps}});
  }
  return j;
}

}  // namespace promptmed
