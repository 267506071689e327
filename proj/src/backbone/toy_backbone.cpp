#include "promptmed/backbone/toy_backbone.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "promptmed/core/hashing.hpp"
#include "promptmed/core/kernels.hpp"
#include "promptmed/core/metrics.hpp"
#include "promptmed/core/random.hpp"

namespace promptmed {

namespace {

constexpr int C = ToyBackbone::kChannels;
const double kInvSqrtC = 1.0 / std::sqrt(static_cast<double>(C));

void fill_normal(std::vector<double>& v, Rng& rng, double stddev) {
  for (auto& x : v) x = rng.normal(0.0, stddev);
}

ConvWeights make_conv(int out, int in, int stride, Rng& rng) {
  ConvWeights w(out, in, 3, stride, 1);
  fill_normal(w.weight, rng, std::sqrt(2.0 / (in * 9)));
  fill_normal(w.bias, rng, 0.05);
  return w;
}

// y = A x for a C x C row-major matrix.
inline void matvec(const std::vector<double>& a, const double* x, double* y) {
  for (int i = 0; i < C; ++i) {
    double s = 0.0;
    const double* row = a.data() + static_cast<std::size_t>(i) * C;
    for (int j = 0; j < C; ++j) s += row[j] * x[j];
    y[i] = s;
  }
}

// y += A^T x
inline void matvec_t_add(const std::vector<double>& a, const double* x, double* y) {
  for (int i = 0; i < C; ++i) {
    const double xi = x[i];
    const double* row = a.data() + static_cast<std::size_t>(i) * C;
    for (int j = 0; j < C; ++j) y[j] += row[j] * xi;
  }
}

inline double dot(const double* a, const double* b) {
  double s = 0.0;
  for (int i = 0; i < C; ++i) s += a[i] * b[i];
  return s;
}

// Fraction of source pixels of the mask covered by each embedding cell.
Grid2<double> pool_mask(const LabelMask& m, int he, int we) {
  Grid2<double> out(he, we, 0.0);
  for (int i = 0; i < he; ++i) {
    const int y0 = i * m.height() / he, y1 = std::max(y0 + 1, (i + 1) * m.height() / he);
    for (int j = 0; j < we; ++j) {
      const int x0 = j * m.width() / we, x1 = std::max(x0 + 1, (j + 1) * m.width() / we);
      double s = 0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) s += m.pixels(y, x);
      out(i, j) = s / ((y1 - y0) * (x1 - x0));
    }
  }
  return out;
}

}  // namespace

const char* token_param_prefix(TokenKind kind) {
  switch (kind) {
    case TokenKind::PointForeground: return "point_fg";
    case TokenKind::PointBackground: return "point_bg";
    case TokenKind::BoxTopLeft: return "box_tl";
    case TokenKind::BoxBottomRight: return "box_br";
  }
  return "?";
}

ToyBackbone::ToyBackbone(ToyBackboneConfig cfg) : cfg_(cfg) {
  if (!(cfg_.pixel_std > 0)) throw std::invalid_argument("ToyBackbone: pixel_std must be > 0");
  desc_ = BackboneDescriptor{"toy-conv32", C, 128, 128, TrainableScope::PromptEncoderOnly};
  Rng rng(cfg_.seed);
  conv1_ = make_conv(16, 1, 2, rng);
  conv2_ = make_conv(32, 16, 2, rng);
  conv3_ = make_conv(C, 32, 1, rng);
  pe_freq_.resize(2 * (C / 2));
  fill_normal(pe_freq_, rng, cfg_.pe_sigma);
  wk_.resize(C * C);
  wv_.resize(C * C);
  wx_.resize(C * C);
  fill_normal(wk_, rng, kInvSqrtC);
  fill_normal(wv_, rng, 2.0 * kInvSqrtC);
  fill_normal(wx_, rng, 0.5 * kInvSqrtC);
  bh_.resize(C);
  wout_.resize(C);
  fill_normal(bh_, rng, 0.1);
  fill_normal(wout_, rng, 2.0 * kInvSqrtC);
}

PromptEncoderState ToyBackbone::initial_state() const {
  // Seeded separately from the frozen weights so that the default theta is a
  // reproducible untrained starting point.
  Rng rng(cfg_.seed ^ 0x7f4a7c15u);
  PromptEncoderState s;
  for (auto kind : {TokenKind::PointForeground, TokenKind::PointBackground, TokenKind::BoxTopLeft,
                    TokenKind::BoxBottomRight}) {
    const std::string pre = token_param_prefix(kind);
    NamedArray proj{pre + ".proj", {C, C}, std::vector<double>(C * C)};
    NamedArray emb{pre + ".embed", {C}, std::vector<double>(C)};
    fill_normal(proj.values, rng, kInvSqrtC);
    fill_normal(emb.values, rng, 0.5);
    s.parameters.push_back(std::move(proj));
    s.parameters.push_back(std::move(emb));
  }
  NamedArray no_mask{"no_mask.embed", {C}, std::vector<double>(C)};
  NamedArray mask{"mask.embed", {C}, std::vector<double>(C)};
  fill_normal(no_mask.values, rng, 0.1);
  fill_normal(mask.values, rng, 0.1);
  s.parameters.push_back(std::move(no_mask));
  s.parameters.push_back(std::move(mask));
  s.supported = {PromptKind::Point, PromptKind::Box, PromptKind::Mask};
  return s;
}

std::vector<double> ToyBackbone::positional_encoding(double u, double v) const {
  std::vector<double> out(C);
  const double cu = 2.0 * u - 1.0, cv = 2.0 * v - 1.0;
  constexpr int half = C / 2;
  for (int j = 0; j < half; ++j) {
    const double a = 2.0 * std::numbers::pi * (pe_freq_[j] * cu + pe_freq_[half + j] * cv);
    out[j] = std::cos(a);
    out[half + j] = std::sin(a);
  }
  return out;
}

ImageEmbedding ToyBackbone::encode_image(const SliceImage& image) const {
  image.validate();
  FeatureMap x(1, image.height(), image.width());
  for (std::size_t i = 0; i < image.pixels.size(); ++i)
    x.data()[i] = (image.pixels[i] - cfg_.pixel_mean) / cfg_.pixel_std;
  auto relu = [](FeatureMap& f) {
    for (auto& v : f.values()) v = v > 0 ? v : 0;
  };
  FeatureMap h1 = kernels::conv2d(x, conv1_);
  relu(h1);
  FeatureMap h2 = kernels::conv2d(h1, conv2_);
  relu(h2);
  ImageEmbedding emb;
  emb.features = kernels::conv2d(h2, conv3_);
  emb.source_height = image.height();
  emb.source_width = image.width();
  emb.scale = static_cast<double>(image.width()) / emb.features.width();
  emb.content_hash = image_content_hash(image);

  const int he = emb.features.height(), we = emb.features.width();
  const std::size_t cells = static_cast<std::size_t>(he) * we;
  emb.key_base.assign(cells * C, 0.0);
  emb.skip_base.assign(cells * C, 0.0);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < he; ++i) {
    double e[C], t[C];
    for (int j = 0; j < we; ++j) {
      const std::size_t g = static_cast<std::size_t>(i) * we + j;
      const auto pe = positional_encoding((j + 0.5) / we, (i + 0.5) / he);
      for (int c = 0; c < C; ++c) e[c] = emb.features(c, i, j);
      matvec(wx_, e, emb.skip_base.data() + g * C);
      for (int c = 0; c < C; ++c) {
        emb.skip_base[g * C + c] += bh_[c];
        t[c] = e[c] + pe[c];
      }
      matvec(wk_, t, emb.key_base.data() + g * C);
    }
  }
  return emb;
}

std::vector<ToyBackbone::Token> ToyBackbone::tokens_of(const PromptSet& prompts, int height, int width) const {
  std::vector<Token> out;
  for (const auto& p : prompts.prompts) {
    if (auto* pt = std::get_if<PointPrompt>(&p)) {
      out.push_back({pt->label == PointLabel::Foreground ? TokenKind::PointForeground : TokenKind::PointBackground,
                     (pt->x + 0.5) / width, (pt->y + 0.5) / height});
    } else if (auto* b = std::get_if<BoxPrompt>(&p)) {
      out.push_back({TokenKind::BoxTopLeft, b->x1 / width, b->y1 / height});
      out.push_back({TokenKind::BoxBottomRight, b->x2 / width, b->y2 / height});
    }
  }
  return out;
}

PromptEmbedding ToyBackbone::encode_prompts(const PromptSet& prompts, const PromptEncoderState& state, int height,
                                             int width) const {
  validate_prompts(prompts, height, width);
  PromptEmbedding out;
  for (const auto& tok : tokens_of(prompts, height, width)) {
    const std::string pre = token_param_prefix(tok.kind);
    const auto& proj = state.at(pre + ".proj").values;
    const auto& emb = state.at(pre + ".embed").values;
    const auto pe = positional_encoding(tok.u, tok.v);
    std::vector<double> t(C);
    matvec(proj, pe.data(), t.data());
    for (int c = 0; c < C; ++c) t[c] += emb[c];
    out.sparse.push_back(std::move(t));
    out.kinds.push_back(tok.kind);
  }
  out.dense_bias = state.at("no_mask.embed").values;
  for (const auto& p : prompts.prompts) {
    if (auto* m = std::get_if<MaskPrompt>(&p)) {
      const int he = conv3_.out_size(conv2_.out_size(conv1_.out_size(height)));
      const int we = conv3_.out_size(conv2_.out_size(conv1_.out_size(width)));
      const auto pooled = pool_mask(m->mask, he, we);
      const auto& me = state.at("mask.embed").values;
      if (!out.dense) out.dense = FeatureMap(C, he, we);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < he; ++i)
          for (int j = 0; j < we; ++j) (*out.dense)(c, i, j) += pooled(i, j) * me[c];
    }
  }
  return out;
}

Grid2<double> ToyBackbone::decode_grid(const ImageEmbedding& emb, const PromptEmbedding& pe) const {
  const int he = emb.features.height(), we = emb.features.width();
  if (emb.features.channels() != C || emb.key_base.size() != static_cast<std::size_t>(he) * we * C)
    throw std::invalid_argument("decode_mask: embedding does not come from this backbone");
  if (pe.dense_bias.size() != static_cast<std::size_t>(C))
    throw std::invalid_argument("decode_mask: dense prompt embedding has wrong width");
  if (pe.dense && (pe.dense->channels() != C || pe.dense->height() != he || pe.dense->width() != we))
    throw std::invalid_argument("decode_mask: dense prompt grid does not match embedding grid");
  for (auto& t : pe.sparse)
    if (t.size() != static_cast<std::size_t>(C)) throw std::invalid_argument("decode_mask: token width mismatch");

  const std::size_t T = pe.sparse.size();
  std::vector<double> vtok(T * C);
  for (std::size_t t = 0; t < T; ++t) matvec(wv_, pe.sparse[t].data(), vtok.data() + t * C);
  double kd[C], xd[C];
  matvec(wk_, pe.dense_bias.data(), kd);
  matvec(wx_, pe.dense_bias.data(), xd);

  Grid2<double> out(he, we, 0.0);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < he; ++i) {
    double key[C], z[C], dg[C], kg[C], xg[C];
    for (int j = 0; j < we; ++j) {
      const std::size_t g = static_cast<std::size_t>(i) * we + j;
      for (int c = 0; c < C; ++c) {
        key[c] = emb.key_base[g * C + c] + kd[c];
        z[c] = emb.skip_base[g * C + c] + xd[c];
      }
      if (pe.dense) {
        for (int c = 0; c < C; ++c) dg[c] = (*pe.dense)(c, i, j);
        matvec(wk_, dg, kg);
        matvec(wx_, dg, xg);
        for (int c = 0; c < C; ++c) {
          key[c] += kg[c];
          z[c] += xg[c];
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        const double a = sigmoid(dot(pe.sparse[t].data(), key) * kInvSqrtC);
        const double* v = vtok.data() + t * C;
        for (int c = 0; c < C; ++c) z[c] += a * v[c];
      }
      double l = bout_;
      for (int c = 0; c < C; ++c) l += wout_[c] * std::tanh(z[c]);
      out(i, j) = l;
    }
  }
  return out;
}

MaskPrediction ToyBackbone::decode_mask(const ImageEmbedding& emb, const PromptEmbedding& pe) const {
  const auto grid = decode_grid(emb, pe);
  FeatureMap g(1, grid.height(), grid.width());
  std::copy(grid.values().begin(), grid.values().end(), g.data());
  const auto up = kernels::upsample_bilinear(g, emb.source_height, emb.source_width);
  MaskPrediction out;
  out.logits = Grid2<double>(emb.source_height, emb.source_width, up.values());
  double conf = 0.0;
  for (double l : out.logits.values()) conf += std::abs(2.0 * sigmoid(l) - 1.0);
  out.quality = out.logits.size() ? conf / static_cast<double>(out.logits.size()) : 0.0;
  return out;
}

void ToyBackbone::backward(const ImageEmbedding& emb, const PromptSet& prompts, const PromptEncoderState& state,
                           const Grid2<double>& dlogits, PromptEncoderState& grad) const {
  if (dlogits.height() != emb.source_height || dlogits.width() != emb.source_width)
    throw std::invalid_argument("backward: gradient shape does not match source image");
  const PromptEmbedding pe = encode_prompts(prompts, state, emb.source_height, emb.source_width);
  const auto toks = tokens_of(prompts, emb.source_height, emb.source_width);
  const int he = emb.features.height(), we = emb.features.width();

  FeatureMap dl_up(1, dlogits.height(), dlogits.width());
  std::copy(dlogits.values().begin(), dlogits.values().end(), dl_up.data());
  const FeatureMap dl = kernels::upsample_bilinear_adjoint(dl_up, he, we);

  const std::size_t T = pe.sparse.size();
  std::vector<double> vtok(T * C);
  for (std::size_t t = 0; t < T; ++t) matvec(wv_, pe.sparse[t].data(), vtok.data() + t * C);
  double kd[C], xd[C];
  matvec(wk_, pe.dense_bias.data(), kd);
  matvec(wx_, pe.dense_bias.data(), xd);
  const bool has_dense = pe.dense.has_value();

  // Per-row partial sums, reduced in row order afterwards so the result does
  // not depend on the thread count.
  const std::size_t stride = 2 * T * C + 4 * C;
  std::vector<double> partial(static_cast<std::size_t>(he) * stride, 0.0);
  // dense(g) is the sum of mask.embed weighted by the pooled masks.
  Grid2<double> mask_weight(he, we, 0.0);
  for (const auto& p : prompts.prompts)
    if (auto* m = std::get_if<MaskPrompt>(&p)) {
      const auto pooled = pool_mask(m->mask, he, we);
      for (std::size_t k = 0; k < pooled.size(); ++k) mask_weight.values()[k] += pooled.values()[k];
    }

#pragma omp parallel for schedule(static)
  for (int i = 0; i < he; ++i) {
    double* acc = partial.data() + static_cast<std::size_t>(i) * stride;
    double* dtok = acc;             // T x C
    double* dv = acc + T * C;       // T x C
    double* s_dz = acc + 2 * T * C; // C
    double* s_dk = s_dz + C;
    double* s_mdz = s_dk + C;
    double* s_mdk = s_mdz + C;
    double key[C], z[C], dz[C], dkey[C], dg[C], kg[C], xg[C];
    std::vector<double> gate(T);
    for (int j = 0; j < we; ++j) {
      const double dlg = dl(0, i, j);
      if (dlg == 0.0) continue;
      const std::size_t g = static_cast<std::size_t>(i) * we + j;
      for (int c = 0; c < C; ++c) {
        key[c] = emb.key_base[g * C + c] + kd[c];
        z[c] = emb.skip_base[g * C + c] + xd[c];
      }
      if (has_dense) {
        for (int c = 0; c < C; ++c) dg[c] = (*pe.dense)(c, i, j);
        matvec(wk_, dg, kg);
        matvec(wx_, dg, xg);
        for (int c = 0; c < C; ++c) {
          key[c] += kg[c];
          z[c] += xg[c];
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        gate[t] = sigmoid(dot(pe.sparse[t].data(), key) * kInvSqrtC);
        const double* v = vtok.data() + t * C;
        for (int c = 0; c < C; ++c) z[c] += gate[t] * v[c];
      }
      for (int c = 0; c < C; ++c) {
        const double h = std::tanh(z[c]);
        dz[c] = dlg * wout_[c] * (1.0 - h * h);
        dkey[c] = 0.0;
      }
      for (std::size_t t = 0; t < T; ++t) {
        const double a = gate[t];
        const double* v = vtok.data() + t * C;
        const double ds = a * (1.0 - a) * dot(v, dz) * kInvSqrtC;
        const double* tok = pe.sparse[t].data();
        double* dtt = dtok + t * C;
        double* dvt = dv + t * C;
        for (int c = 0; c < C; ++c) {
          dvt[c] += a * dz[c];
          dtt[c] += ds * key[c];
          dkey[c] += ds * tok[c];
        }
      }
      const double mw = has_dense ? mask_weight(i, j) : 0.0;
      for (int c = 0; c < C; ++c) {
        s_dz[c] += dz[c];
        s_dk[c] += dkey[c];
        s_mdz[c] += mw * dz[c];
        s_mdk[c] += mw * dkey[c];
      }
    }
  }
  std::vector<double> total(stride, 0.0);
  for (int i = 0; i < he; ++i) {
    const double* acc = partial.data() + static_cast<std::size_t>(i) * stride;
    for (std::size_t k = 0; k < stride; ++k) total[k] += acc[k];
  }
  double* dtok = total.data();
  double* dv = total.data() + T * C;
  double* s_dz = total.data() + 2 * T * C;
  double* s_dk = s_dz + C;
  double* s_mdz = s_dk + C;
  double* s_mdk = s_mdz + C;

  for (std::size_t t = 0; t < T; ++t) {
    double* dtt = dtok + t * C;
    matvec_t_add(wv_, dv + t * C, dtt);
    const std::string pre = token_param_prefix(toks[t].kind);
    auto& gproj = grad.at(pre + ".proj").values;
    auto& gemb = grad.at(pre + ".embed").values;
    const auto phi = positional_encoding(toks[t].u, toks[t].v);
    for (int r = 0; r < C; ++r) {
      gemb[r] += dtt[r];
      for (int c = 0; c < C; ++c) gproj[static_cast<std::size_t>(r) * C + c] += dtt[r] * phi[c];
    }
  }
  auto& gno = grad.at("no_mask.embed").values;
  matvec_t_add(wx_, s_dz, gno.data());
  matvec_t_add(wk_, s_dk, gno.data());
  if (has_dense) {
    auto& gm = grad.at("mask.embed").values;
    matvec_t_add(wx_, s_mdz, gm.data());
    matvec_t_add(wk_, s_mdk, gm.data());
  }
}

std::uint64_t ToyBackbone::image_encoder_hash() const {
  Fnv1a h;
  for (const auto* w : {&conv1_, &conv2_, &conv3_}) {
    h.update(w->weight);
    h.update(w->bias);
  }
  return h.digest();
}

std::uint64_t ToyBackbone::mask_decoder_hash() const {
  Fnv1a h;
  h.update(pe_freq_);
  h.update(wk_);
  h.update(wv_);
  h.update(wx_);
  h.update(bh_);
  h.update(wout_);
  h.update(&bout_, sizeof bout_);
  return h.digest();
}

}  // namespace promptmed
