#include "promptmed/backbone/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "promptmed/core/hashing.hpp"

namespace promptmed {

NamedArray& PromptEncoderState::at(const std::string& name) {
  for (auto& p : parameters)
    if (p.name == name) return p;
  throw std::out_of_range("PromptEncoderState: no parameter " + name);
}

const NamedArray& PromptEncoderState::at(const std::string& name) const {
  if (auto* p = find(name)) return *p;
  throw std::out_of_range("PromptEncoderState: no parameter " + name);
}

const NamedArray* PromptEncoderState::find(const std::string& name) const {
  for (auto& p : parameters)
    if (p.name == name) return &p;
  return nullptr;
}

std::size_t PromptEncoderState::total_size() const {
  std::size_t n = 0;
  for (auto& p : parameters) n += p.values.size();
  return n;
}

std::uint64_t PromptEncoderState::hash() const {
  Fnv1a h;
  for (auto& p : parameters) {
    h.update(p.name);
    h.update(p.shape);
    h.update(p.values);
  }
  return h.digest();
}

void PromptEncoderState::validate() const {
  std::set<std::string> names;
  for (auto& p : parameters) {
    if (!names.insert(p.name).second) throw std::invalid_argument("PromptEncoderState: duplicate name " + p.name);
    std::size_t n = 1;
    for (auto d : p.shape) n *= d;
    if (n != p.values.size()) throw std::invalid_argument("PromptEncoderState: shape mismatch for " + p.name);
    for (double v : p.values)
      if (!std::isfinite(v)) throw std::invalid_argument("PromptEncoderState: non-finite value in " + p.name);
  }
}

PromptEncoderState PromptEncoderState::zeros_like() const {
  PromptEncoderState z = *this;
  for (auto& p : z.parameters) std::fill(p.values.begin(), p.values.end(), 0.0);
  return z;
}

std::vector<double> PromptEncoderState::flatten() const {
  std::vector<double> out;
  out.reserve(total_size());
  for (auto& p : parameters) out.insert(out.end(), p.values.begin(), p.values.end());
  return out;
}

void PromptEncoderState::unflatten(const std::vector<double>& flat) {
  if (flat.size() != total_size()) throw std::invalid_argument("PromptEncoderState::unflatten: size mismatch");
  std::size_t off = 0;
  for (auto& p : parameters) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.values.size(), p.values.begin());
    off += p.values.size();
  }
}

void Backbone::load_weights(const std::filesystem::path& path) {
  throw std::runtime_error(descriptor().name + ": no external weights to load from " + path.string());
}

MaskPrediction Backbone::predict(const ImageEmbedding& embedding, const PromptSet& prompts,
                                 const PromptEncoderState& state) const {
  return decode_mask(embedding, encode_prompts(prompts, state, embedding.source_height, embedding.source_width));
}

LabelMask Backbone::segment(const ImageEmbedding& embedding, const PromptSet& prompts, const PromptEncoderState& state,
                            double threshold) const {
  return threshold_mask(predict(embedding, prompts, state).logits, threshold);
}

LabelMask Backbone::segment(const SliceImage& image, const PromptSet& prompts, const PromptEncoderState& state,
                            double threshold) const {
  return segment(encode_image(image), prompts, state, threshold);
}

std::uint64_t image_content_hash(const SliceImage& image) {
  Fnv1a h;
  const int dims[2] = {image.height(), image.width()};
  h.update(dims, sizeof dims);
  h.update(image.pixels.values());
  return h.digest();
}

std::shared_ptr<const ImageEmbedding> EmbeddingCache::get(const SliceImage& image) {
  const auto key = image_content_hash(image);
  {
    std::lock_guard lock(mu_);
    if (auto it = entries_.find(key); it != entries_.end()) return it->second;
  }
  auto emb = std::make_shared<const ImageEmbedding>(backbone_.encode_image(image));
  std::lock_guard lock(mu_);
  auto [it, inserted] = entries_.emplace(key, emb);
  if (inserted) {
    order_.push_back(key);
    if (order_.size() > capacity_) {
      entries_.erase(order_.front());
      order_.erase(order_.begin());
    }
  }
  return it->second;
}

std::size_t EmbeddingCache::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

}  // namespace promptmed
