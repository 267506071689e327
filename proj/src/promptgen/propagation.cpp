#include "promptmed/promptgen/propagation.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "promptmed/assist/sampling.hpp"
#include "promptmed/core/metrics.hpp"
#include "promptmed/core/random.hpp"

namespace promptmed {

void PropagationConfig::validate() const {
  if (!(lambda > 0)) throw std::invalid_argument("propagation: lambda must be > 0");
  if (n_points < 1) throw std::invalid_argument("propagation: n_points must be >= 1");
  if (max_slices < 1) throw std::invalid_argument("propagation: max_slices must be >= 1");
}

Direction direction_from(const std::string& s) {
  if (s == "up") return Direction::Up;
  if (s == "down") return Direction::Down;
  if (s == "both") return Direction::Both;
  throw std::invalid_argument("unknown direction '" + s + "'");
}

Mask3D PropagationResult::to_mask(int depth, int height, int width) const {
  Mask3D m(depth, height, width);
  for (const auto& [z, o] : slices) m.set_slice(z, o.mask);
  return m;
}

namespace {

double masked_stddev(const SliceImage& img, const LabelMask& m) {
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.pixels.size(); ++i)
    if (m.pixels[i]) {
      sum += img.pixels[i];
      ++n;
    }
  if (n == 0) return 0.0;
  const double mean = sum / n;
  for (std::size_t i = 0; i < m.pixels.size(); ++i)
    if (m.pixels[i]) sq += (img.pixels[i] - mean) * (img.pixels[i] - mean);
  return std::sqrt(sq / n);
}

std::vector<PointPrompt> draw(const LabelMask& m, int n, Rng& rng) {
  return sample_points_n(m, PointScheme::Uniform, 1, Region::Foreground, n, rng).points;
}

}  // namespace

PropagationResult propagate_prompts(const Volume& volume, int seed_slice, const LabelMask& seed_label,
                                    const PropagationConfig& cfg, const AssistModel& model) {
  cfg.validate();
  volume.validate();
  if (seed_slice < 0 || seed_slice >= volume.depth()) throw std::invalid_argument("propagation: seed slice out of range");
  if (!seed_label.pixels.same_shape(volume.slices[seed_slice].pixels))
    throw std::invalid_argument("propagation: seed label shape does not match the volume");
  if (!seed_label.any()) throw std::invalid_argument("propagation: seed label is empty");

  PropagationResult res;
  Rng rng(cfg.seed);
  const auto seed_points = draw(seed_label, cfg.n_points, rng);
  {
    SliceOutcome o;
    for (auto& p : seed_points) o.prompts.add(p);
    o.mask = seed_label;
    res.slices[seed_slice] = std::move(o);
  }

  std::vector<int> dirs;
  if (cfg.direction != Direction::Down) dirs.push_back(+1);
  if (cfg.direction != Direction::Up) dirs.push_back(-1);
  for (int dir : dirs) {
    std::vector<PointPrompt> points = seed_points;
    LabelMask mask = seed_label;
    int t = seed_slice;
    for (int step = 0; step < cfg.max_slices; ++step) {
      const int next = t + dir;
      if (next < 0 || next >= volume.depth()) break;
      const auto& xt = volume.slices[t];
      const auto& xn = volume.slices[next];
      PropagationStep rec;
      rec.slice = next;
      rec.from_slice = t;
      rec.candidates = static_cast<int>(points.size());
      rec.x_tilde = masked_stddev(xt, mask);
      const double thr = cfg.lambda * rec.x_tilde;
      std::vector<PointPrompt> kept;
      for (const auto& p : points) {
        const int x = static_cast<int>(p.x), y = static_cast<int>(p.y);
        const double d = std::abs(xn.pixels(y, x) - xt.pixels(y, x));
        if (d < thr || d == 0.0) kept.push_back(p);
      }
      rec.survivors = static_cast<int>(kept.size());
      if (kept.empty()) {
        res.trace.push_back(rec);
        break;
      }
      PromptSet ps;
      for (auto& p : kept) ps.add(p);
      LabelMask pred;
      try {
        pred = model.segment(xn, ps);
      } catch (const std::exception& e) {
        throw std::runtime_error("propagation: assist model failed on slice " + std::to_string(next) + ": " + e.what());
      }
      rec.mask_pixels = pred.count();
      if (rec.mask_pixels == 0) {
        res.trace.push_back(rec);
        break;
      }
      if (cfg.resample && 2 * rec.survivors < cfg.n_points) {
        kept = draw(pred, cfg.n_points, rng);
        rec.resampled = true;
      }
      res.trace.push_back(rec);
      res.slices[next] = SliceOutcome{std::move(ps), pred};
      points = std::move(kept);
      mask = std::move(pred);
      t = next;
    }
  }
  return res;
}

Mask3D propagate_ensemble(const Volume& volume, const std::vector<PropagationSeed>& seeds,
                          const PropagationConfig& cfg, const AssistModel& model,
                          std::vector<PropagationResult>* runs) {
  if (seeds.empty()) throw std::invalid_argument("propagate_ensemble: need at least one seed");
  const int D = volume.depth(), H = volume.height(), W = volume.width();
  std::vector<int> votes(static_cast<std::size_t>(D) * H * W, 0);
  for (std::size_t k = 0; k < seeds.size(); ++k) {
    auto r = propagate_prompts(volume, seeds[k].slice, seeds[k].label, cfg, model);
    const auto m = r.to_mask(D, H, W);
    for (std::size_t i = 0; i < votes.size(); ++i) votes[i] += m.values()[i];
    if (runs) runs->push_back(std::move(r));
  }
  Mask3D out(D, H, W);
  const int M = static_cast<int>(seeds.size());
  for (std::size_t i = 0; i < votes.size(); ++i) out.values()[i] = votes[i] > 0 && 2 * votes[i] >= M;
  return out;
}

void score_trace(PropagationResult& r, const Mask3D& truth) {
  for (auto& s : r.trace) {
    const auto it = r.slices.find(s.slice);
    const LabelMask pred = it != r.slices.end() ? it->second.mask : LabelMask(truth.height(), truth.width());
    s.dice = dice(pred, truth.slice(s.slice));
  }
}

void write_trace_jsonl(std::ostream& os, const PropagationResult& r) {
  for (const auto& s : r.trace) {
    nlohmann::json j{{"slice", s.slice},
                     {"from", s.from_slice},
                     {"survivors", s.survivors},
                     {"candidates", s.candidates},
                     {"resampled", s.resampled},
                     {"x_tilde", s.x_tilde},
                     {"dice_if_gt_available", s.dice ? nlohmann::json(*s.dice) : nlohmann::json(nullptr)}};
    os << j.dump() << '\n';
  }
}

}  // namespace promptmed
