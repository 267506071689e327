#include "promptmed/sapnet/auto.hpp"

#include <stdexcept>

#include "promptmed/assist/sampling.hpp"
#include "promptmed/backbone/prompt_json.hpp"
#include "promptmed/core/components.hpp"
#include "promptmed/core/hashing.hpp"

namespace promptmed {

void PostProcessConfig::validate() const {
  if (n_points < 1) throw std::invalid_argument("post-processing: n_points must be >= 1");
}

std::vector<PromptSet> instance_prompts_from_coarse(const LabelMask& coarse, const PostProcessConfig& post, Rng& rng) {
  post.validate();
  std::vector<PromptSet> out;
  if (!coarse.any()) return out;
  const LabelMask kept = post.k_components >= 1 ? top_k_components(coarse, post.k_components) : coarse;
  int id = 0;
  for (const auto& inst : split_instances(kept)) {
    PromptSet ps;
    ps.instance_id = ++id;
    if (post.prompt_type == CoarsePromptType::Boxes) {
      const auto b = bounding_box(inst);
      ps.add(BoxPrompt{double(b.x1), double(b.y1), double(b.x2), double(b.y2)});
    } else {
      for (const auto& p : sample_points_n(inst, PointScheme::Center, 1, Region::Foreground, post.n_points, rng).points)
        ps.add(p);
    }
    out.push_back(std::move(ps));
  }
  return out;
}

PromptSet generate_prompts_from_coarse(const LabelMask& coarse, const PostProcessConfig& post, Rng& rng) {
  PromptSet all;
  for (auto& ps : instance_prompts_from_coarse(coarse, post, rng))
    for (auto& p : ps.prompts) all.add(std::move(p));
  return all;
}

StageHashes stage_hashes(const SapNet& net, const PostProcessConfig& post, const AssistModel& assist) {
  StageHashes h;
  Fnv1a c;
  c.update(net.fx.tuner.flatten()).update(net.protos.fg).update(net.protos.bg);
  if (net.fx.pos) c.update(net.fx.pos->B);
  const double ab[2] = {net.protos.alpha, net.beta};
  c.update(ab, sizeof ab);
  h.coarse = c.digest();
  const int p[3] = {post.k_components, post.n_points, static_cast<int>(post.prompt_type)};
  h.post = Fnv1a().update(p, sizeof p).digest();
  h.assist = assist.state.hash() ^ assist.backbone.mask_decoder_hash();
  return h;
}

std::vector<AutoSliceResult> auto_segment(const std::vector<SliceImage>& images, const SapNet& net,
                                          const AssistModel& assist, const AutoConfig& cfg) {
  cfg.post.validate();
  const auto hashes = stage_hashes(net, cfg.post, assist);
  std::vector<AutoSliceResult> out(images.size());
  Rng base(cfg.seed);
  // slices are independent once the prototypes are fixed
  std::vector<Rng> rngs;
  for (std::size_t i = 0; i < images.size(); ++i) rngs.push_back(base.fork(i));
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i];
    auto& r = out[i];
    r.slice = img.slice_index.value_or(static_cast<int>(i));
    r.coarse = coarse_segment(img, net);
    r.prompts = instance_prompts_from_coarse(r.coarse, cfg.post, rngs[i]);
    r.mask = LabelMask(img.height(), img.width());
    nlohmann::json inst = nlohmann::json::array();
    for (const auto& ps : r.prompts) {
      const auto m = assist.segment(img, ps);
      for (std::size_t k = 0; k < m.pixels.size(); ++k) r.mask.pixels[k] |= m.pixels[k];
      inst.push_back(to_json(ps));
    }
    r.provenance = {{"generator", "sapnet"},
                    {"slice", r.slice},
                    {"instances", inst},
                    {"coarse_pixels", r.coarse.count()},
                    {"stage_hash",
                     {{"coarse", hex64(hashes.coarse)}, {"post", hex64(hashes.post)}, {"assist", hex64(hashes.assist)}}}};
  }
  return out;
}

const char* to_string(CoarsePromptType t) { return t == CoarsePromptType::Boxes ? "boxes" : "points"; }

CoarsePromptType coarse_prompt_type_from(const std::string& s) {
  if (s == "boxes" || s == "box") return CoarsePromptType::Boxes;
  if (s == "points" || s == "point") return CoarsePromptType::Points;
  throw std::invalid_argument("unknown prompt type: " + s);
}

}  // namespace promptmed
