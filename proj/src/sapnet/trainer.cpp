#include <chrono>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "promptmed/assist/optim.hpp"
#include "promptmed/core/errors.hpp"
#include "promptmed/core/kernels.hpp"
#include "promptmed/core/metrics.hpp"
#include "promptmed/sapnet/sapnet.hpp"

namespace promptmed {

void SapTrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("sapnet: epochs must be >= 1");
  if (!(lr > 0) || !(beta > 0) || !(alpha > 0) || !(sigma > 0) || d < 1)
    throw std::invalid_argument("sapnet: lr, beta, alpha, sigma and d must be positive");
  if (w_seg < 0 || w_align < 0 || w_seg + w_align <= 0) throw std::invalid_argument("sapnet: bad loss weights");
  if (!(align_beta > 0) || smooth < 0) throw std::invalid_argument("sapnet: bad align_beta/smooth");
}

void EpisodeSplit::validate() const {
  if (support.empty() || query.empty()) throw std::invalid_argument("episode: need J >= 1 and K >= 1");
}

EpisodeSplit random_split(const std::vector<TrainPair>& pairs, Rng& rng) {
  if (pairs.size() < 2) throw std::invalid_argument("episode: need at least 2 annotated slices");
  std::vector<std::size_t> idx(pairs.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx.begin(), idx.end());
  const std::size_t k = std::max<std::size_t>(1, pairs.size() / 2);
  EpisodeSplit s;
  for (std::size_t i = 0; i < idx.size(); ++i) (i < k ? s.query : s.support).push_back(pairs[idx[i]]);
  return s;
}

namespace {

// Cell-major copy of a feature map: n cells x D.
struct Cells {
  int h = 0, w = 0, D = 0;
  std::vector<double> v;
  const double* at(std::size_t i) const { return v.data() + i * D; }
  double* at(std::size_t i) { return v.data() + i * D; }
  std::size_t n() const { return static_cast<std::size_t>(h) * w; }
};

Cells to_cells(const FeatureMap& f) {
  Cells c{f.height(), f.width(), f.channels(), std::vector<double>(f.size())};
  const std::size_t n = c.n();
  for (int ch = 0; ch < c.D; ++ch)
    for (std::size_t i = 0; i < n; ++i) c.v[i * c.D + ch] = f.channel(ch)[i];
  return c;
}

// Forward state of the tuner for one image.
struct Forward {
  const FeatureMap* emb = nullptr;
  FeatureMap z1;  // tanh(conv1)
  Cells f;        // full features incl. position channels
  Cells df;
};

Forward forward(const ImageEmbedding& e, const FeatureExtractor& fx) {
  Forward r;
  r.emb = &e.features;
  r.z1 = kernels::conv2d(e.features, fx.tuner.conv1);
  kernels::tanh_inplace(r.z1);
  FeatureMap t = kernels::conv2d(r.z1, fx.tuner.conv2);
  if (fx.pos) {
    const FeatureMap g = fx.pos->grid(t.height(), t.width());
    FeatureMap all(fx.channels(), t.height(), t.width());
    std::copy(t.values().begin(), t.values().end(), all.values().begin());
    std::copy(g.values().begin(), g.values().end(), all.values().begin() + static_cast<std::ptrdiff_t>(t.size()));
    r.f = to_cells(all);
  } else {
    r.f = to_cells(t);
  }
  r.df = Cells{r.f.h, r.f.w, r.f.D, std::vector<double>(r.f.v.size(), 0.0)};
  return r;
}

void backward(const Forward& fw, const FeatureExtractor& fx, Tuner& grad) {
  const int T = fx.tuner.out_channels();
  FeatureMap dt(T, fw.f.h, fw.f.w);
  const std::size_t n = fw.f.n();
  for (int c = 0; c < T; ++c)
    for (std::size_t i = 0; i < n; ++i) dt.channel(c)[i] = fw.df.v[i * fw.f.D + c];
  kernels::conv2d_backward_weights(dt, fw.z1, grad.conv2);
  FeatureMap dz = kernels::conv2d_backward_input(dt, fx.tuner.conv2, fw.z1.height(), fw.z1.width());
  for (std::size_t i = 0; i < dz.size(); ++i) dz.values()[i] *= 1.0 - fw.z1.values()[i] * fw.z1.values()[i];
  kernels::conv2d_backward_weights(dz, *fw.emb, grad.conv1);
}

// cos(f, p) and optionally its gradients w.r.t. f and p scaled by `s`.
double cos_sim(const double* f, const double* p, int D, double s = 0.0, double* gf = nullptr, double* gp = nullptr) {
  double fp = 0, ff = 0, pp = 0;
  for (int i = 0; i < D; ++i) {
    fp += f[i] * p[i];
    ff += f[i] * f[i];
    pp += p[i] * p[i];
  }
  if (ff <= 0 || pp <= 0) return 0.0;  // zero-vector convention: distance 1, no gradient
  const double nf = std::sqrt(ff), np = std::sqrt(pp), c = fp / (nf * np);
  if (s != 0.0) {
    const double a = s / (nf * np);
    if (gf) {
      const double b = s * c / ff;
      for (int i = 0; i < D; ++i) gf[i] += a * p[i] - b * f[i];
    }
    if (gp) {
      const double b = s * c / pp;
      for (int i = 0; i < D; ++i) gp[i] += a * f[i] - b * p[i];
    }
  }
  return c;
}

struct Protos {
  std::vector<double> fg, bg;
  double wf = 0, wb = 0;
};

Protos pool(const std::vector<const Cells*>& f, const std::vector<const Grid2<double>*>& w) {
  const int D = f.front()->D;
  Protos p{std::vector<double>(D, 0.0), std::vector<double>(D, 0.0)};
  for (std::size_t k = 0; k < f.size(); ++k)
    for (std::size_t i = 0; i < f[k]->n(); ++i) {
      const double a = (*w[k])[i];
      const double* x = f[k]->at(i);
      for (int c = 0; c < D; ++c) {
        p.fg[c] += a * x[c];
        p.bg[c] += (1 - a) * x[c];
      }
      p.wf += a;
      p.wb += 1 - a;
    }
  if (p.wf <= 1e-12 || p.wb <= 1e-12) throw std::invalid_argument("episode: a class has no support pixels");
  for (int c = 0; c < D; ++c) {
    p.fg[c] /= p.wf;
    p.bg[c] /= p.wb;
  }
  return p;
}

// Grid logit map alpha * (cos_fg - cos_bg).
Grid2<double> logits(const Cells& f, const Protos& p, double alpha) {
  Grid2<double> a(f.h, f.w);
  for (std::size_t i = 0; i < f.n(); ++i)
    a[i] = alpha * (cos_sim(f.at(i), p.fg.data(), f.D) - cos_sim(f.at(i), p.bg.data(), f.D));
  return a;
}

// Biased Dice on sigmoid(upsample(a)) at label resolution. Returns loss and dL/da on the grid.
double upsampled_dice(const Grid2<double>& a, const LabelMask& gt, double beta, double smooth, Grid2<double>* da) {
  FeatureMap g(1, a.height(), a.width());
  std::copy(a.values().begin(), a.values().end(), g.values().begin());
  const FeatureMap up = kernels::upsample_bilinear(g, gt.height(), gt.width());
  Grid2<double> s(gt.height(), gt.width());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = sigmoid(up.values()[i]);
  Grid2<double> ds(gt.height(), gt.width());
  const double loss = biased_dice_loss_grad(s, gt, {beta, smooth}, ds);
  if (da) {
    FeatureMap dup(1, gt.height(), gt.width());
    for (std::size_t i = 0; i < s.size(); ++i) dup.values()[i] = ds[i] * s[i] * (1 - s[i]);
    const FeatureMap d = kernels::upsample_bilinear_adjoint(dup, a.height(), a.width());
    for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] = d.values()[i];
  }
  return loss;
}

// Pushes dL/da through a = alpha (cos(f, fg) - cos(f, bg)) onto df and the prototype grads.
void logit_backward(const Cells& f, Cells& df, const Protos& p, double alpha, const Grid2<double>& da,
                    std::vector<double>& gfg, std::vector<double>& gbg) {
  for (std::size_t i = 0; i < f.n(); ++i) {
    const double s = alpha * da[i];
    if (s == 0) continue;
    cos_sim(f.at(i), p.fg.data(), f.D, s, df.at(i), gfg.data());
    cos_sim(f.at(i), p.bg.data(), f.D, -s, df.at(i), gbg.data());
  }
}

// Pushes prototype grads onto the pooled features and returns nothing for the weights.
void pool_backward_features(const Cells& /*f*/, Cells& df, const Grid2<double>& w, const Protos& p,
                            const std::vector<double>& gfg, const std::vector<double>& gbg) {
  for (std::size_t i = 0; i < df.n(); ++i) {
    const double a = w[i] / p.wf, b = (1 - w[i]) / p.wb;
    double* d = df.at(i);
    for (int c = 0; c < df.D; ++c) d[c] += a * gfg[c] + b * gbg[c];
  }
}

struct CachedPair {
  ImageEmbedding emb;
  const LabelMask* label;
  Grid2<double> w;  // pooled label on the embedding grid
};

EpisodeLoss episode_impl(const std::vector<const CachedPair*>& sup, const std::vector<const CachedPair*>& qry,
                         const FeatureExtractor& fx, const SapTrainConfig& cfg, Tuner* grad) {
  std::vector<Forward> fs, fq;
  for (auto* c : sup) fs.push_back(forward(c->emb, fx));
  for (auto* c : qry) fq.push_back(forward(c->emb, fx));
  const int D = fx.channels();
  const double alpha = cfg.alpha;

  std::vector<const Cells*> sf, qf;
  std::vector<const Grid2<double>*> sw;
  for (std::size_t k = 0; k < sup.size(); ++k) {
    sf.push_back(&fs[k].f);
    sw.push_back(&sup[k]->w);
  }
  for (auto& f : fq) qf.push_back(&f.f);
  const Protos P = pool(sf, sw);

  EpisodeLoss L;
  std::vector<Grid2<double>> aq, daq, sq;
  for (std::size_t k = 0; k < qry.size(); ++k) {
    aq.push_back(logits(fq[k].f, P, alpha));
    daq.emplace_back(aq.back().height(), aq.back().width(), 0.0);
    Grid2<double> s(aq.back().height(), aq.back().width());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = sigmoid(aq.back()[i]);
    sq.push_back(std::move(s));
    L.seg += upsampled_dice(aq.back(), *qry[k]->label, cfg.beta, cfg.smooth, grad ? &daq.back() : nullptr) / qry.size();
  }
  if (grad)
    for (auto& d : daq)
      for (auto& v : d.values()) v *= cfg.w_seg / qry.size();

  // reverse episode: prototypes from the soft query prediction score the support
  std::vector<const Grid2<double>*> qw;
  for (auto& s : sq) qw.push_back(&s);
  bool align = cfg.w_align > 0;
  Protos Q;
  try {
    if (align) Q = pool(qf, qw);
  } catch (const std::invalid_argument&) {
    align = false;  // degenerate prediction, nothing to align
  }
  if (align) {
    std::vector<double> gqf(D, 0.0), gqb(D, 0.0);
    for (std::size_t j = 0; j < sup.size(); ++j) {
      const auto at = logits(fs[j].f, Q, alpha);
      Grid2<double> dat(at.height(), at.width(), 0.0);
      L.align += upsampled_dice(at, *sup[j]->label, cfg.align_beta, cfg.smooth, grad ? &dat : nullptr) / sup.size();
      if (grad) {
        for (auto& v : dat.values()) v *= cfg.w_align / sup.size();
        logit_backward(fs[j].f, fs[j].df, Q, alpha, dat, gqf, gqb);
      }
    }
    if (grad)
      for (std::size_t k = 0; k < qry.size(); ++k) {
        pool_backward_features(fq[k].f, fq[k].df, sq[k], Q, gqf, gqb);
        // through the soft weights: dq_fg/ds_i = (f_i - q_fg)/Wf, dq_bg/ds_i = -(f_i - q_bg)/Wb
        for (std::size_t i = 0; i < fq[k].f.n(); ++i) {
          const double* x = fq[k].f.at(i);
          double ds = 0;
          for (int c = 0; c < D; ++c) ds += (x[c] - Q.fg[c]) * gqf[c] / Q.wf - (x[c] - Q.bg[c]) * gqb[c] / Q.wb;
          daq[k][i] += ds * sq[k][i] * (1 - sq[k][i]);
        }
      }
  }
  L.total = cfg.w_seg * L.seg + (align ? cfg.w_align * L.align : 0.0);

  if (grad) {
    std::vector<double> gpf(D, 0.0), gpb(D, 0.0);
    for (std::size_t k = 0; k < qry.size(); ++k) logit_backward(fq[k].f, fq[k].df, P, alpha, daq[k], gpf, gpb);
    for (std::size_t j = 0; j < sup.size(); ++j) pool_backward_features(fs[j].f, fs[j].df, sup[j]->w, P, gpf, gpb);
    for (auto& f : fs) backward(f, fx, *grad);
    for (auto& f : fq) backward(f, fx, *grad);
  }
  return L;
}

CachedPair cache(const TrainPair& p, const Backbone& enc) {
  p.image.validate();
  require_same_shape(LabelMask(p.image.height(), p.image.width()), p.label, "sapnet pair");
  CachedPair c{enc.encode_image(p.image), &p.label, {}};
  c.w = pool_to_grid(p.label, c.emb.features.height(), c.emb.features.width());
  return c;
}

void check_finite(const std::vector<double>& v, const char* what, int epoch) {
  for (double x : v)
    if (!std::isfinite(x)) {
      std::ostringstream os;
      os << "sapnet training diverged at epoch " << epoch << ": non-finite " << what;
      throw TrainingDiverged(os.str());
    }
}

}  // namespace

EpisodeLoss episode_loss(const EpisodeSplit& split, const FeatureExtractor& fx, const SapTrainConfig& cfg,
                         Tuner* grad) {
  split.validate();
  if (!fx.encoder) throw std::invalid_argument("sapnet: extractor has no encoder");
  std::vector<CachedPair> s, q;
  for (auto& p : split.support) s.push_back(cache(p, *fx.encoder));
  for (auto& p : split.query) q.push_back(cache(p, *fx.encoder));
  std::vector<const CachedPair*> sp, qp;
  for (auto& c : s) sp.push_back(&c);
  for (auto& c : q) qp.push_back(&c);
  return episode_impl(sp, qp, fx, cfg, grad);
}

SapNet train_sapnet(const std::vector<TrainPair>& pairs, const Backbone& encoder, const SapTrainConfig& cfg,
                    const TrainControl& control) {
  cfg.validate();
  return train_sapnet(pairs, make_feature_extractor(encoder, cfg.use_pe, cfg.d, cfg.sigma, cfg.seed), cfg, control);
}

SapNet train_sapnet(const std::vector<TrainPair>& pairs, FeatureExtractor fx, const SapTrainConfig& cfg,
                    const TrainControl& control) {
  cfg.validate();
  if (!fx.encoder) throw std::invalid_argument("sapnet: extractor has no encoder");
  if (pairs.size() < 2) throw std::invalid_argument("sapnet: need at least 2 annotated slices");
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CachedPair> cached;
  for (auto& p : pairs) cached.push_back(cache(p, *fx.encoder));

  SapNet net;
  Rng rng(cfg.seed ^ 0x5a9e7ULL);
  auto flat = fx.tuner.flatten();
  Adam opt(flat.size(), cfg.lr);
  std::vector<std::size_t> order(cached.size());
  for (int e = 0; e < cfg.epochs; ++e) {
    if (control.cancel && control.cancel->load()) throw Cancelled();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());
    const std::size_t k = std::max<std::size_t>(1, order.size() / 2);
    std::vector<const CachedPair*> sp, qp;
    for (std::size_t i = 0; i < order.size(); ++i) (i < k ? qp : sp).push_back(&cached[order[i]]);
    Tuner g = fx.tuner.zeros_like();
    EpisodeLoss L;
    try {
      L = episode_impl(sp, qp, fx, cfg, &g);
    } catch (const std::invalid_argument&) {
      continue;  // split left one class without support pixels; draw another next epoch
    }
    const auto gf = g.flatten();
    if (!std::isfinite(L.total)) check_finite({L.total}, "loss", e);
    check_finite(gf, "gradient", e);
    opt.step(flat, gf);
    fx.tuner.unflatten(flat);
    net.log.push_back({e, L.total, L.seg, L.align});
    if (control.progress) control.progress(static_cast<double>(e + 1) / cfg.epochs);
  }
  if (net.log.empty()) throw std::invalid_argument("sapnet: no episode had both classes in its support set");

  std::vector<FeatureMap> feats;
  std::vector<Grid2<double>> ws;
  for (auto& c : cached) {
    feats.push_back(extract_features(c.emb, fx));
    ws.push_back(c.w);
  }
  net.protos = compute_prototypes(feats, ws, cfg.alpha);
  net.fx = std::move(fx);
  net.beta = cfg.beta;
  net.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return net;
}

LabelMask coarse_segment(const SliceImage& image, const SapNet& net) {
  const auto q = predict_query(extract_features(image, net.fx), net.protos);
  FeatureMap g(1, q.logit.height(), q.logit.width());
  std::copy(q.logit.values().begin(), q.logit.values().end(), g.values().begin());
  const FeatureMap up = kernels::upsample_bilinear(g, image.height(), image.width());
  LabelMask m(image.height(), image.width());
  for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] = up.values()[i] > 0;
  return m;
}

nlohmann::json sap_log_json(const SapNet& net) {
  nlohmann::json j;
  j["seconds"] = net.seconds;
  j["beta"] = net.beta;
  for (const auto& e : net.log) j["epochs"].push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"seg", e.seg}, {"align", e.align}});
  return j;
}

}  // namespace promptmed
