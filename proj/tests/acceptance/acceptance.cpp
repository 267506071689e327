// Acceptance suite: one PASS/FAIL line per criterion. Optional args pick a
// subset, e.g. `acceptance P1 P4`.
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "promptmed/assist/evaluate.hpp"
#include "promptmed/assist/trainer.hpp"
#include "promptmed/backbone/checkpoint.hpp"
#include "promptmed/backbone/prompt_json.hpp"
#include "promptmed/backbone/toy_backbone.hpp"
#include "promptmed/core/components.hpp"
#include "promptmed/core/hashing.hpp"
#include "promptmed/core/metrics.hpp"
#include "promptmed/core/rle.hpp"
#include "promptmed/data/io.hpp"
#include "promptmed/data/phantom.hpp"
#include "promptmed/data/slices.hpp"
#include "promptmed/promptgen/propagation.hpp"
#include "promptmed/sapnet/sapnet.hpp"
#include "promptmed/service/service.hpp"

using namespace promptmed;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Collects failed checks; the first few are echoed in the summary line.
struct Check {
  std::vector<std::string> failures;
  std::ostringstream info;
  void operator()(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
};

std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

LabelMask random_mask(int h, int w, double p, Rng& rng) {
  LabelMask m(h, w);
  for (auto& v : m.pixels.values()) v = rng.uniform() < p ? 1 : 0;
  return m;
}

FeatureMap random_features(int c, int h, int w, Rng& rng) {
  FeatureMap f(c, h, w);
  for (auto& v : f.values()) v = rng.normal();
  return f;
}

SliceImage random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Grid2<double> px(h, w);
  for (auto& v : px.values()) v = rng.uniform();
  return SliceImage(std::move(px));
}

std::vector<TrainPair> pairs_of(const Phantom& ph, const std::vector<int>& slices) {
  std::vector<TrainPair> out;
  for (int z : slices) out.push_back({ph.volume.slices[z], ph.mask.slice(z)});
  return out;
}

std::vector<int> draw_slices(const Mask3D& m, int n, std::uint64_t seed) {
  Rng rng(seed);
  SliceSelectionPolicy pol;
  pol.n_slices = n;
  auto s = select_training_slices(m, pol, rng).foreground;
  std::sort(s.begin(), s.end());
  return s;
}

std::vector<EvalCase> held_out(const Phantom& ph, const std::set<int>& exclude) {
  std::vector<EvalCase> out;
  for (int z : foreground_slices(ph.mask))
    if (!exclude.count(z)) out.push_back({"slice-" + std::to_string(z), ph.volume.slices[z], ph.mask.slice(z)});
  return out;
}

// ------------------------------------------------------------------ P1

void p1(Check& ck) {
  Rng rng(101);
  double worst = 0;
  int pairs = 0;
  while (pairs < 100) {
    const int h = 4 + static_cast<int>(rng.uniform_int(0, 12)), w = 4 + static_cast<int>(rng.uniform_int(0, 12));
    const auto a = random_mask(h, w, rng.uniform(), rng), g = random_mask(h, w, rng.uniform(), rng);
    if (a.count() == 0 && g.count() == 0) continue;
    Grid2<double> p(h, w);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = a.pixels[i];
    worst = std::max(worst, std::abs(biased_dice_loss(p, g, LossConfig{1.0, 0.0}) - (1.0 - dice(a, g))));
    ++pairs;
  }
  ck(worst <= 1e-9, "beta=1 loss differs from 1-Dice by " + std::to_string(worst));
  int monotone_fail = 0, with_fp = 0;
  for (int t = 0; t < 100; ++t) {
    const auto g = random_mask(8, 8, 0.5, rng);
    Grid2<double> p(8, 8);
    for (auto& v : p.values()) v = rng.uniform();
    const auto sc = soft_counts(p, g);
    if (sc.fp <= 0) continue;
    ++with_fp;
    double prev = -1;
    for (double beta : {0.0, 0.5, 1.0, 2.0, 3.0, 10.0}) {
      const double l = biased_dice_loss(sc, LossConfig{beta, 0.0});
      if (l < prev) ++monotone_fail;
      prev = l;
    }
  }
  ck(with_fp > 0 && monotone_fail == 0, std::to_string(monotone_fail) + " beta-monotonicity violations");
  ck.info << "max |L - (1-Dice)| " << worst << " over " << pairs << " pairs";
}

// ------------------------------------------------------------------ P2

void p2(Check& ck) {
  Rng rng(202);
  double worst = 0;
  int n = 0, singletons = 0;
  for (int t = 0; n < 50; ++t) {
    const int k = 1 + t % 3, c = 1 + static_cast<int>(rng.uniform_int(0, 6));
    const int h = 3 + t % 4, w = 3 + (t / 2) % 4;
    std::vector<FeatureMap> f;
    std::vector<LabelMask> m;
    for (int i = 0; i < k; ++i) {
      f.push_back(random_features(c, h, w, rng));
      m.push_back(random_mask(h, w, t % 4 == 0 ? 0.0 : 0.4, rng));
    }
    if (t % 4 == 0) {
      m[0].pixels[rng.uniform_int(0, h * w - 1)] = 1;
      ++singletons;
    }
    std::size_t nf = 0;
    for (const auto& x : m) nf += x.count();
    if (nf == 0 || nf == static_cast<std::size_t>(k * h * w)) continue;
    const auto p = compute_prototypes(f, m);
    for (int ch = 0; ch < c; ++ch) {
      double sf = 0, sb = 0;
      int cf = 0, cb = 0;
      for (int i = 0; i < k; ++i)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            if (m[i].pixels(y, x)) sf += f[i](ch, y, x), ++cf;
            else sb += f[i](ch, y, x), ++cb;
      worst = std::max({worst, std::abs(p.fg[ch] - sf / cf), std::abs(p.bg[ch] - sb / cb)});
    }
    ++n;
  }
  ck(worst <= 1e-6, "prototype error " + std::to_string(worst));
  ck(singletons > 0, "no singleton instance drawn");
  ck.info << "max error " << worst << " over " << n << " instances (" << singletons << " singleton)";
}

// ------------------------------------------------------------------ P3

void p3(Check& ck) {
  Rng rng(303);
  double worst = 0, worst_sum = 0;
  int argmax_fail = 0;
  for (int t = 0; t < 50; ++t) {
    const int c = 2 + t % 6, h = 2 + t % 3, w = 3;
    const auto f = random_features(c, h, w, rng);
    PrototypeSet p{{}, {}, t % 2 ? 20.0 : 5.0};
    for (int i = 0; i < c; ++i) {
      p.fg.push_back(rng.normal());
      p.bg.push_back(rng.normal());
    }
    const auto q = predict_query(f, p);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double df = 0, db = 0, nn = 0, nf = 0, nb = 0;
        for (int i = 0; i < c; ++i) {
          df += f(i, y, x) * p.fg[i];
          db += f(i, y, x) * p.bg[i];
          nn += f(i, y, x) * f(i, y, x);
          nf += p.fg[i] * p.fg[i];
          nb += p.bg[i] * p.bg[i];
        }
        const double ef = std::exp(-p.alpha * (1 - df / std::sqrt(nn * nf)));
        const double eb = std::exp(-p.alpha * (1 - db / std::sqrt(nn * nb)));
        worst = std::max({worst, std::abs(q.fg(y, x) - ef / (ef + eb)), std::abs(q.bg(y, x) - eb / (ef + eb))});
        worst_sum = std::max(worst_sum, std::abs(q.fg(y, x) + q.bg(y, x) - 1.0));
      }
    for (double s : {0.01, 0.5, 3.0, 1e3}) {
      auto g = f;
      for (auto& v : g.values()) v *= s;
      if (predict_query(g, p).hard != q.hard) ++argmax_fail;
    }
  }
  ck(worst <= 1e-9, "soft map error " + std::to_string(worst));
  ck(worst_sum <= 1e-9, "fg + bg deviates from 1 by " + std::to_string(worst_sum));
  ck(argmax_fail == 0, std::to_string(argmax_fail) + " argmax changes under scaling");
  ck.info << "max error " << worst << ", max |fg+bg-1| " << worst_sum;
}

// ------------------------------------------------------------------ P4

void p4(Check& ck) {
  Rng rng(404);
  double worst = 0;
  for (int d : {1, 8, 64}) {
    const auto pe = PositionEncoder::sample(d, 1.0 + d / 16.0, rng);
    for (int t = 0; t < 100; ++t) {
      const double x = rng.uniform(), y = rng.uniform();
      const auto e = pe.encode(x, y);
      if (static_cast<int>(e.size()) != 2 * d) {
        ck(false, "encoding length");
        return;
      }
      for (int k = 0; k < d; ++k) {
        const double arg = 2 * std::numbers::pi * (pe.B[k] * x + pe.B[d + k] * y);
        worst = std::max({worst, std::abs(e[k] - std::cos(arg)), std::abs(e[d + k] - std::sin(arg))});
      }
    }
    const auto z = pe.encode(0, 0);
    bool ok = true;
    for (int k = 0; k < d; ++k) ok = ok && z[k] == 1.0 && z[d + k] == 0.0;
    ck(ok, "gamma(0,0) != [1..1, 0..0] for d=" + std::to_string(d));
    // the grid uses the same map at normalized cell coordinates
    const auto g = pe.grid(5, 7);
    for (int i = 0; i < 5; ++i)
      for (int j = 0; j < 7; ++j) {
        const auto v = pe.encode(j / 6.0, i / 4.0);
        for (int c = 0; c < 2 * d; ++c) worst = std::max(worst, std::abs(g(c, i, j) - v[c]));
      }
  }
  ck(worst <= 1e-12, "encoding error " + std::to_string(worst));
  ck.info << "max error " << worst;
}

// ------------------------------------------------------------------ P5

// Norm-wise relative error ||a - b|| / (||a|| + ||b||).
double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(na) + std::sqrt(nb);
  return den == 0 ? 0.0 : std::sqrt(num) / den;
}

// Gradient of the assist Dice loss w.r.t. theta, through the frozen backbone.
// Error per parameter tensor, entries i = 0, stride, 2*stride, ...
double theta_grad_check(int size, std::uint64_t seed, std::size_t stride, int& checked) {
  ToyBackbone bb;
  auto theta = bb.initial_state();
  const auto img = random_image(size, size, seed);
  const auto emb = bb.encode_image(img);
  LabelMask gt(size, size);
  for (int y = size / 4; y < 3 * size / 4; ++y)
    for (int x = size / 4; x < 3 * size / 4 + 1; ++x) gt.pixels(y, x) = 1;
  PromptSet ps;
  ps.add(PointPrompt{size / 2.0, size / 2.0, PointLabel::Foreground});
  ps.add(PointPrompt{1.0, size - 2.0, PointLabel::Background});
  ps.add(BoxPrompt{size / 4.0 - 1, size / 4.0, 3 * size / 4.0, 3 * size / 4.0 + 1});
  auto loss = [&](const PromptEncoderState& s) {
    return assist_loss(bb.predict(emb, ps, s).logits, gt, AssistLoss::Dice, nullptr);
  };
  Grid2<double> dl;
  assist_loss(bb.predict(emb, ps, theta).logits, gt, AssistLoss::Dice, &dl);
  auto grad = theta.zeros_like();
  bb.backward(emb, ps, theta, dl, grad);
  double worst = 0;
  const double h = 1e-5;
  for (std::size_t k = 0; k < theta.parameters.size(); ++k) {
    auto& arr = theta.parameters[k];
    std::vector<double> fd, an;
    for (std::size_t i = 0; i < arr.values.size(); i += stride) {
      const double keep = arr.values[i];
      arr.values[i] = keep + h;
      const double up = loss(theta);
      arr.values[i] = keep - h;
      const double dn = loss(theta);
      arr.values[i] = keep;
      fd.push_back((up - dn) / (2 * h));
      an.push_back(grad.parameters[k].values[i]);
      ++checked;
    }
    worst = std::max(worst, rel_err(fd, an));
  }
  return worst;
}

std::vector<TrainPair> disc_pairs(int n, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainPair> pairs;
  const double c = size / 2.0, r2 = size * size / 16.0;
  for (int k = 0; k < n; ++k) {
    LabelMask m(size, size);
    Grid2<double> px(size, size);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const bool in = (y - c - k + 1) * (y - c - k + 1) + (x - c) * (x - c) < r2;
        m.pixels(y, x) = in;
        px(y, x) = (in ? 0.8 : 0.2) + 0.05 * rng.normal();
      }
    pairs.push_back({SliceImage(px), m});
  }
  return pairs;
}

double tuner_grad_check(int image_size, bool pe, int stride, int& checked) {
  ToyBackbone bb;
  const auto pairs = disc_pairs(4, image_size, 5);
  const EpisodeSplit split{{pairs[0], pairs[1]}, {pairs[2], pairs[3]}};
  const auto fx = make_feature_extractor(bb, pe, 8, 1.0, 3, 8, 8);
  SapTrainConfig cfg;
  cfg.beta = 3.0;
  Tuner g = fx.tuner.zeros_like();
  episode_loss(split, fx, cfg, &g);
  const auto flat = fx.tuner.flatten(), gf = g.flatten();
  std::vector<double> fds, ans;
  const double h = 1e-5;
  for (std::size_t i = 0; i < flat.size(); i += stride) {
    auto p = flat;
    FeatureExtractor a = fx;
    p[i] += h;
    a.tuner.unflatten(p);
    const double lp = episode_loss(split, a, cfg).total;
    p[i] -= 2 * h;
    a.tuner.unflatten(p);
    const double lm = episode_loss(split, a, cfg).total;
    fds.push_back((lp - lm) / (2 * h));
    ans.push_back(gf[i]);
    ++checked;
  }
  return rel_err(fds, ans);
}

void p5(Check& ck) {
  int nt = 0, ns = 0;
  double wt = 0, ws = 0;
  // 8x8 and 16x16 embedding grids
  wt = std::max(wt, theta_grad_check(32, 39, 1, nt));
  wt = std::max(wt, theta_grad_check(64, 71, 5, nt));
  ck(wt < 1e-4, "theta rel. err " + std::to_string(wt));
  for (bool pe : {true, false}) {
    ws = std::max(ws, tuner_grad_check(32, pe, 1, ns));
    ws = std::max(ws, tuner_grad_check(64, pe, 5, ns));
  }
  ck(ws < 1e-4, "tuner rel. err " + std::to_string(ws));
  ck.info << "theta max rel err " << wt << " (" << nt << " params), tuner " << ws << " (" << ns << " params)";
}

// ------------------------------------------------------------------ P6

void p6(Check& ck) {
  ToyBackbone bb;
  const auto ph = make_phantom(phantoms::two_body());
  const auto s2 = draw_slices(ph.mask, 2, 1), s5 = draw_slices(ph.mask, 5, 1);
  std::set<int> used(s2.begin(), s2.end());
  used.insert(s5.begin(), s5.end());
  const auto cases = held_out(ph, used);
  AssistTrainConfig cfg;  // Matched bg points, 200 epochs, lr 1e-2
  cfg.seed = 1;
  const auto t2 = train_prompt_encoder(pairs_of(ph, s2), bb, cfg);
  const auto t5 = train_prompt_encoder(pairs_of(ph, s5), bb, cfg);
  const double u1 = eval_points(bb, bb.initial_state(), cases, 1, 5).mean;
  std::vector<double> c2, c5;
  for (int n = 1; n <= 10; ++n) {
    c2.push_back(eval_points(bb, t2.state, cases, n, 5).mean);
    c5.push_back(eval_points(bb, t5.state, cases, n, 5).mean);
  }
  ck(c2[0] - u1 >= 0.10, "2-slice gain " + fmt(c2[0] - u1));
  ck(c5[0] >= c2[0] - 0.02, "5 slices " + fmt(c5[0]) + " < 2 slices " + fmt(c2[0]) + " - 0.02");
  for (const auto* c : {&c2, &c5}) {
    double peak = (*c)[0];
    for (int n = 1; n < 10; ++n) {
      ck((*c)[n] >= peak - 0.02, "curve drops at n=" + std::to_string(n + 1));
      peak = std::max(peak, (*c)[n]);
    }
  }
  ck.info << "1pt untrained " << fmt(u1) << ", 2 slices " << fmt(c2[0]) << ", 5 slices " << fmt(c5[0])
          << "; 5-slice curve";
  for (double v : c5) ck.info << ' ' << fmt(v, 2);
  ck.info << "; train " << fmt(t2.seconds, 1) << "s/" << fmt(t5.seconds, 1) << "s on " << cases.size()
          << " held-out slices";
}

// ------------------------------------------------------------------ P7

void p7(Check& ck) {
  ToyBackbone bb;
  const auto ph = make_phantom(phantoms::cylinder(32, 128, 40.0));
  AssistTrainConfig cfg;
  cfg.seed = 1;
  cfg.epochs = 400;
  cfg.bg_points = BackgroundPoints::Independent;
  const auto t = train_prompt_encoder(pairs_of(ph, {10, 21}), bb, cfg);
  const AssistModel model{bb, t.state};
  PropagationConfig pc;
  const auto ens = propagate_ensemble(ph.volume, {{10, ph.mask.slice(10)}}, pc, model);
  const double d3 = dice(ens, ph.mask);
  int covered = 0;
  const auto fg = foreground_slices(ph.mask);
  for (int z : fg) covered += ens.slice_any(z);
  ck(covered == static_cast<int>(fg.size()), "covered " + std::to_string(covered) + "/" + std::to_string(fg.size()));
  ck(d3 >= 0.95, "3-D Dice " + fmt(d3, 4));

  // same geometry, textured, with a +1 intensity step on the body from z0 on
  auto step_cfg = phantoms::cylinder(32, 128, 40.0);
  step_cfg.noise_sigma = 0.02;
  step_cfg.seed = 3;
  const auto sp = make_phantom(step_cfg);
  const int z0 = 20, d = 32, hw = 128 * 128;
  auto dense = sp.volume.dense();
  const auto& mv = sp.mask.values();
  for (int z = z0; z < d; ++z)
    for (int i = 0; i < hw; ++i)
      if (mv[static_cast<std::size_t>(z) * hw + i]) dense[static_cast<std::size_t>(z) * hw + i] += 1.0;
  const auto vol = Volume::from_dense(d, 128, 128, dense);
  const auto r = propagate_prompts(vol, 12, sp.mask.slice(12), pc, model);
  int beyond = 0, survivors_beyond = 0;
  bool reached = false;
  for (const auto& [z, _] : r.slices) beyond += z >= z0;
  for (const auto& s : r.trace) {
    if (s.slice == z0) reached = true;
    if (s.slice >= z0) survivors_beyond += s.survivors;
  }
  ck(reached, "propagation never reached the step slice");
  ck(r.slices.count(z0 - 1) == 1, "slice before the step not reached");
  ck(beyond == 0 && survivors_beyond == 0,
     std::to_string(beyond) + " slices / " + std::to_string(survivors_beyond) + " survivors beyond the step");
  ck.info << "cylinder Dice " << fmt(d3, 4) << ", " << covered << "/" << fg.size() << " slices; step at z0=" << z0
          << ": last slice " << r.slices.rbegin()->first << ", 0 survivors beyond (train " << fmt(t.seconds, 1) << "s)";
}

// ------------------------------------------------------------------ P8

void p8(Check& ck) {
  ToyBackbone bb;
  const auto ph = make_phantom(phantoms::two_body());
  const auto train = draw_slices(ph.mask, 2, 2);
  AssistTrainConfig cfg;
  cfg.prompt_mode = PromptMode::Composite;
  cfg.epochs = 60;
  cfg.seed = 2;
  const auto t = train_prompt_encoder(pairs_of(ph, train), bb, cfg);
  const auto cases = held_out(ph, {train.begin(), train.end()});
  int records = 0, points = 0, violations = 0;
  const auto untrained = bb.initial_state();
  for (const auto* theta : {&untrained, &t.state}) {
    const auto act = eval_composite_active(bb, *theta, cases, BoxJitterConfig{}, 8);
    std::map<std::string, const EvalCase*> by_id;
    for (const auto& c : cases) by_id[c.id] = &c;
    for (const auto& rec : act.records) {
      ++records;
      const auto slash = rec.case_id.rfind("/inst-");
      const EvalCase& c = *by_id.at(rec.case_id.substr(0, slash));
      const auto inst = split_instances(c.label);
      const LabelMask& gt = inst.at(std::stoul(rec.case_id.substr(slash + 6)) - 1);
      // budget
      if (rec.boxes_used != 1 || rec.points_used() > 5) ++violations;
      // replay the clicks and check each against the prediction it corrected
      PromptSet ps;
      ps.add(rec.box);
      auto pred = bb.segment(c.image, ps, *theta);
      if (dice(pred, gt) != rec.box_dice) ++violations;
      double best = rec.box_dice;
      for (const auto& st : rec.steps) {
        const int x = static_cast<int>(st.point.x), y = static_cast<int>(st.point.y);
        const bool in_gt = gt.pixels(y, x), in_pred = pred.pixels(y, x);
        const bool ok = st.point.label == PointLabel::Foreground ? (in_gt && !in_pred) : (in_pred && !in_gt);
        if (!ok) ++violations;
        ps.add(st.point);
        pred = bb.segment(c.image, ps, *theta);
        best = std::max(best, dice(pred, gt));
        ++points;
      }
      if (best != rec.best_dice || rec.best_dice < rec.box_dice) ++violations;
    }
  }
  ck(records > 0, "no instances evaluated");
  ck(points > 0, "no corrective clicks placed");
  ck(violations == 0, std::to_string(violations) + " protocol violations");
  ck.info << records << " instances, " << points << " clicks replayed, " << violations << " violations";
}

// ------------------------------------------------------------------ P9

void p9(Check& ck) {
  ToyBackbone bb;
  const auto ph = make_phantom(phantoms::kidneys_with_distractors());
  int pe_wins = 0;
  std::vector<double> fp_reduction;
  int spurious_cfgs = 0, post_fail = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto train = draw_slices(ph.mask, 5, seed);
    const auto pairs = pairs_of(ph, train);
    struct Score {
      double dice = 0;
      std::int64_t fp = 0, fp_post = 0;
      int spurious = 0, spurious_post = 0;
    };
    auto run = [&](bool pe, double beta) {
      SapTrainConfig cfg;
      cfg.seed = seed;
      cfg.use_pe = pe;
      cfg.beta = beta;
      const auto net = train_sapnet(pairs, bb, cfg);
      Score s;
      int n = 0;
      for (int z = 0; z < ph.volume.depth(); ++z) {
        if (std::count(train.begin(), train.end(), z)) continue;
        const auto gt = ph.mask.slice(z);
        const auto c = coarse_segment(ph.volume.slices[z], net);
        const auto post = c.any() ? top_k_components(c, 2) : c;
        if (gt.any()) s.dice += dice(c, gt), ++n;
        s.fp += confusion(c, gt).fp;
        s.fp_post += confusion(post, gt).fp;
        for (const auto* m : {&c, &post}) {
          const auto lab = label_components(*m);
          int spur = 0;
          for (const auto& comp : lab.components) {
            bool hits = false;
            for (std::size_t i = 0; i < gt.pixels.size() && !hits; ++i)
              hits = lab.labels[i] == comp.label && gt.pixels[i];
            spur += !hits;
          }
          (m == &c ? s.spurious : s.spurious_post) += spur;
        }
      }
      s.dice /= n;
      return s;
    };
    const auto on = run(true, 3.0), off = run(false, 3.0), b1 = run(true, 1.0);
    pe_wins += on.dice >= off.dice;
    fp_reduction.push_back(b1.fp > 0 ? 1.0 - static_cast<double>(on.fp) / static_cast<double>(b1.fp) : 0.0);
    for (const auto* s : {&on, &off, &b1})
      if (s->spurious > 0) {
        ++spurious_cfgs;
        if (!(s->fp_post < s->fp && s->spurious_post < s->spurious)) ++post_fail;
      }
    ck.info << "seed " << seed << ": dice pe " << fmt(on.dice) << "/" << fmt(off.dice) << " fp b3/b1 " << on.fp << "/"
            << b1.fp << "; ";
  }
  std::sort(fp_reduction.begin(), fp_reduction.end());
  const double median = fp_reduction[2];
  ck(pe_wins >= 3, "PE on wins on " + std::to_string(pe_wins) + "/5 seeds");
  ck(median >= 0.20, "median FP reduction " + fmt(median));
  ck(spurious_cfgs > 0, "no spurious components to remove");
  ck(post_fail == 0, "top-K left FP unchanged in " + std::to_string(post_fail) + " runs");
  ck.info << "PE wins " << pe_wins << "/5, median FP reduction " << fmt(100 * median, 1) << "%, top-K removed FP in "
          << spurious_cfgs - post_fail << "/" << spurious_cfgs;
}

// ------------------------------------------------------------------ P10

void p10(Check& ck) {
  int cases = 0;
  for (auto [lo, hi, depth] : {std::tuple{50, 150, 200}, std::tuple{3, 17, 20}, std::tuple{0, 63, 64}}) {
    Mask3D m(depth, 4, 4);
    // a gap keeps the snap-to-foreground rule honest
    for (int z = lo; z < hi; ++z)
      if (z != (lo + hi) / 2 + 1) m(z, 1, 2) = 1;
    const auto fg = foreground_slices(m);
    const std::set<int> fgs(fg.begin(), fg.end());
    for (auto rule : {SpreadRule::IndexStddev, SpreadRule::RangeQuarter}) {
      Rng rng(1000 + cases);
      SliceSelectionPolicy pol;
      pol.n_slices = 1;
      pol.spread = rule;
      const auto sel = select_training_slices(m, pol, rng);
      double sum = 0;
      int outside = 0;
      for (int i = 0; i < 10000; ++i) {
        const int z = draw_foreground_slice(fg, sel.m, sel.s, rng);
        sum += z;
        outside += !fgs.count(z);
      }
      const double mean = sum / 10000;
      ck(std::abs(mean - sel.m) <= 0.5 * sel.s, "mean " + fmt(mean) + " vs m " + fmt(sel.m) + " s " + fmt(sel.s));
      ck(outside == 0, std::to_string(outside) + " draws outside the foreground");
      if (cases == 0) ck.info << "range [" << lo << "," << hi - 1 << "]: mean " << fmt(mean, 2) << " m " << sel.m
                              << " s " << fmt(sel.s, 2) << "; ";
      ++cases;
    }
  }
  ck.info << cases << " configurations, 10k draws each";
}

// ------------------------------------------------------------------ service helpers

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("pm-accept-" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::vector<std::uint8_t> nifti_bytes(const Volume& v, const fs::path& dir) {
  const auto p = dir / "upload.nii.gz";
  write_volume_nifti(p, v);
  std::ifstream in(p, std::ios::binary);
  std::vector<std::uint8_t> b{std::istreambuf_iterator<char>(in), {}};
  fs::remove(p);
  return b;
}

ServiceConfig service_config(const fs::path& dir) {
  ServiceConfig c;
  c.data_dir = dir;
  c.port = 0;
  return c;
}

json snapshot(AnnotationService& svc, const std::string& id, int depth) {
  json out = json::object();
  for (int z = 0; z < depth; ++z) {
    try {
      out[std::to_string(z)] = svc.committed(id, z);
    } catch (const ServiceError&) {
    }
  }
  return out;
}

// ------------------------------------------------------------------ P11

void p11(Check& ck) {
  TempDir tmp;
  const auto ph = make_phantom(phantoms::two_body());
  AnnotationService svc(service_config(tmp.path), std::shared_ptr<const Backbone>(make_backbone("toy")));
  const std::string id = svc.create_session(nifti_bytes(ph.volume, tmp.path), "case.nii.gz")["session_id"];
  const auto slices = draw_slices(ph.mask, 5, 0);
  for (int z : slices) svc.commit(id, z, rle_encode(ph.mask.slice(z)));
  const auto t0 = std::chrono::steady_clock::now();
  const auto cpu0 = std::clock();
  const auto done = svc.wait_job(svc.start_assist_training(id, json::object()).id);
  const double cpu = static_cast<double>(std::clock() - cpu0) / CLOCKS_PER_SEC;
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ck(done.state == JobState::Done, "job ended " + std::string(to_string(done.state)) + " " + done.error);
  ck(done.seconds > 0.0, "ticket has no seconds");
  ck(done.seconds < 60.0, "ticket seconds " + fmt(done.seconds, 1));
  ck(cpu < 60.0, "process CPU " + fmt(cpu, 1) + "s");
  ck.info << "ticket seconds " << fmt(done.seconds, 2) << " (wall " << fmt(wall, 2) << ", CPU " << fmt(cpu, 2)
          << ") for " << slices.size() << " slices of 128x128, " << done.result.value("epochs", 0) << " epochs";
}

// ------------------------------------------------------------------ P12

void p12(Check& ck) {
  TempDir tmp;
  const auto ph = make_phantom(phantoms::cylinder(8, 64, 18.0));
  const auto bb = std::shared_ptr<const Backbone>(make_backbone("toy"));
  AnnotationService svc(service_config(tmp.path / "data"), bb);
  const auto bytes = nifti_bytes(ph.volume, tmp.path);
  const std::string id = svc.create_session(bytes, "v.nii.gz")["session_id"];
  svc.commit(id, 2, rle_encode(ph.mask.slice(2)));
  svc.commit(id, 5, rle_encode(ph.mask.slice(5)));
  const auto before = snapshot(svc, id, 8);

  // atomic theta swap under concurrent predict
  const json prompts = {{"prompts", {{{"type", "point"}, {"x", 30}, {"y", 34}, {"label", "fg"}}}}};
  std::atomic<bool> stop{false};
  std::mutex m;
  std::vector<json> results;
  auto count = [&] {
    std::lock_guard lock(m);
    return results.size();
  };
  svc.before_theta_swap = [&] {
    const auto n0 = count();
    while (count() < n0 + 20) std::this_thread::yield();
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < 3; ++i)
    pool.emplace_back([&] {
      while (!stop) {
        auto r = svc.predict(id, 2, prompts);
        std::lock_guard lock(m);
        results.push_back(std::move(r));
      }
    });
  const auto train = svc.wait_job(svc.start_assist_training(id, json{{"epochs", 150}, {"bg_points", "independent"}}).id);
  const auto n1 = count();
  while (count() < n1 + 20) std::this_thread::yield();
  stop = true;
  for (auto& th : pool) th.join();
  svc.before_theta_swap = nullptr;
  ck(train.state == JobState::Done, "assist job " + std::string(to_string(train.state)));
  const auto old_state = bb->initial_state();
  const auto new_state = prompt_state_from(Checkpoint::load(tmp.path / "data" / "sessions" / id / "assist.ckpt"), *bb);
  const auto ps = prompt_set_from_json(prompts);
  const auto old_mask = rle_encode(bb->segment(ph.volume.slices[2], ps, old_state));
  const auto new_mask = rle_encode(bb->segment(ph.volume.slices[2], ps, new_state));
  ck(old_mask != new_mask, "old and new theta predict the same mask");
  int n_old = 0, n_new = 0, torn = 0;
  for (const auto& r : results) {
    const auto h = r["theta"]["hash"].get<std::string>();
    if (h == hex64(old_state.hash()) && r["mask"] == old_mask) ++n_old;
    else if (h == hex64(new_state.hash()) && r["mask"] == new_mask) ++n_new;
    else ++torn;
  }
  ck(torn == 0, std::to_string(torn) + " torn predictions");
  ck(n_old >= 20 && n_new >= 20, "too few predictions around the swap");

  // jobs only ever write proposals
  int jobs_ok = 0;
  for (const std::string strategy : {"propagate", "classify"}) {
    const auto t = svc.wait_job(svc.start_auto(id, strategy, json::object()).id);
    jobs_ok += t.state == JobState::Done;
    ck(snapshot(svc, id, 8) == before, strategy + " changed a committed mask");
    for (const auto& p : svc.proposals(id)) ck(p["slice"] != 2 && p["slice"] != 5, "proposal on a committed slice");
  }
  const auto ts = svc.wait_job(svc.start_sapnet_training(id, json{{"epochs", 10}}).id);
  const auto ta = svc.wait_job(svc.start_auto(id, "sapnet", json::object()).id);
  jobs_ok += (ts.state == JobState::Done) + (ta.state == JobState::Done);
  ck(jobs_ok == 4, std::to_string(jobs_ok) + "/4 jobs done");
  ck(snapshot(svc, id, 8) == before, "sapnet jobs changed a committed mask");
  const auto cancel = svc.start_assist_training(id, json{{"epochs", 1000000}});
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  svc.cancel_job(cancel.id);
  ck(svc.wait_job(cancel.id).state == JobState::Cancelled, "cancel did not stick");
  ck(snapshot(svc, id, 8) == before, "cancelled job changed a committed mask");
  svc.commit(id, 6, rle_encode(ph.mask.slice(6)));

  // export/import round trip
  bool same = true;
  const auto nifti = svc.export_session(id, "nifti");
  for (const std::string fmt_name : {"nifti", "rle"}) {
    const auto ex = svc.export_session(id, fmt_name);
    same = same && svc.export_session(id, fmt_name).bytes == ex.bytes;
    const std::string other = svc.create_session(bytes, "v.nii.gz")["session_id"];
    svc.import_annotations(other, ex.bytes, fmt_name);
    same = same && svc.export_session(other, "nifti").bytes == nifti.bytes;
    for (int z = 0; z < 8; ++z) {
      const bool a = snapshot(svc, id, 8).contains(std::to_string(z)), b = snapshot(svc, other, 8).contains(std::to_string(z));
      same = same && a == b;
      if (a && b) same = same && svc.committed(id, z)["mask"] == svc.committed(other, z)["mask"];
    }
    if (fmt_name == "rle") same = same && svc.export_session(other, "rle").bytes.size() > 0;
  }
  ck(same, "export/import round trip is not byte-identical");
  ck.info << "predicts old/new/torn " << n_old << "/" << n_new << "/" << torn << "; " << jobs_ok
          << " jobs left commits untouched; nifti+rle round trips byte-identical (" << nifti.bytes.size() << " B)";
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<void(Check&)>>> all = {
      {"P1", p1}, {"P2", p2}, {"P3", p3}, {"P4", p4},   {"P5", p5},   {"P6", p6},
      {"P7", p7}, {"P8", p8}, {"P9", p9}, {"P10", p10}, {"P11", p11}, {"P12", p12}};
  const std::map<std::string, double> budget = {{"P1", 1},  {"P2", 1},  {"P3", 1},   {"P4", 1},
                                                {"P5", 120}, {"P6", 300}, {"P7", 60}, {"P8", 60},
                                                {"P9", 600}, {"P10", 5}, {"P11", 60}, {"P12", 120}};
  std::set<std::string> pick(argv + 1, argv + argc);
  int failed = 0;
  for (const auto& [name, fn] : all) {
    if (!pick.empty() && !pick.count(name)) continue;
    Check ck;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn(ck);
    } catch (const std::exception& e) {
      ck(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ck(secs < budget.at(name), "took " + fmt(secs, 1) + "s, budget " + fmt(budget.at(name), 0) + "s");
    const bool ok = ck.failures.empty();
    failed += !ok;
    std::printf("%-4s %s (%.2fs) %s", name.c_str(), ok ? "PASS" : "FAIL", secs, ck.info.str().c_str());
    for (std::size_t i = 0; i < std::min<std::size_t>(ck.failures.size(), 3); ++i)
      std::printf(" | %s", ck.failures[i].c_str());
    std::printf("\n");
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
