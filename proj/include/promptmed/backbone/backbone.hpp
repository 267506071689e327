#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "promptmed/backbone/prompt.hpp"
#include "promptmed/core/raster.hpp"
#include "promptmed/core/tensor.hpp"

namespace promptmed {

struct ImageEmbedding {
  FeatureMap features;  // C x H_e x W_e
  int source_height = 0;
  int source_width = 0;
  double scale = 1.0;  // source pixels per embedding cell
  std::uint64_t content_hash = 0;
  // Backbone-private per-cell precomputation of frozen projections. Cell-major,
  // C values per cell. External adapters may leave these empty.
  std::vector<double> key_base;
  std::vector<double> skip_base;
};

struct NamedArray {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;
  bool operator==(const NamedArray&) const = default;
};

/// The trainable prompt-encoder parameters (theta).
class PromptEncoderState {
 public:
  std::vector<NamedArray> parameters;
  std::vector<PromptKind> supported;

  NamedArray& at(const std::string& name);
  const NamedArray& at(const std::string& name) const;
  const NamedArray* find(const std::string& name) const;
  std::size_t total_size() const;
  std::uint64_t hash() const;
  /// Finite values, unique names, shape products matching sizes.
  void validate() const;
  /// Same names and shapes, all values zero.
  PromptEncoderState zeros_like() const;
  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);
  bool operator==(const PromptEncoderState&) const = default;
};

enum class TokenKind { PointForeground, PointBackground, BoxTopLeft, BoxBottomRight };

struct PromptEmbedding {
  std::vector<std::vector<double>> sparse;  // one C-vector per token
  std::vector<TokenKind> kinds;
  std::vector<double> dense_bias;           // C, added at every cell
  std::optional<FeatureMap> dense;          // C x H_e x W_e (mask prompts only)
};

struct MaskPrediction {
  Grid2<double> logits;  // source resolution
  double quality = 0.0;  // in [0, 1]
};

enum class TrainableScope { PromptEncoderOnly };

struct BackboneDescriptor {
  std::string name;
  int embed_dim = 0;
  int input_height = 0;
  int input_width = 0;
  TrainableScope trainable_scope = TrainableScope::PromptEncoderOnly;
};

/// Promptable segmentation backbone: frozen image encoder and mask decoder,
/// trainable prompt encoder. This is also the adapter surface for externally
/// pretrained backbones.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual const BackboneDescriptor& descriptor() const = 0;
  virtual PromptEncoderState initial_state() const = 0;

  virtual ImageEmbedding encode_image(const SliceImage& image) const = 0;
  virtual PromptEmbedding encode_prompts(const PromptSet& prompts, const PromptEncoderState& state, int height,
                                         int width) const = 0;
  virtual MaskPrediction decode_mask(const ImageEmbedding& embedding, const PromptEmbedding& prompts) const = 0;

  /// Accumulates dLoss/dtheta into `grad` given dLoss/dlogits at source resolution.
  virtual void backward(const ImageEmbedding& embedding, const PromptSet& prompts, const PromptEncoderState& state,
                        const Grid2<double>& dlogits, PromptEncoderState& grad) const = 0;

  /// Weight-loading hook for external backbones. The toy backbone has none to load.
  virtual void load_weights(const std::filesystem::path& path);

  virtual std::uint64_t image_encoder_hash() const = 0;
  virtual std::uint64_t mask_decoder_hash() const = 0;

  MaskPrediction predict(const ImageEmbedding& embedding, const PromptSet& prompts,
                         const PromptEncoderState& state) const;
  LabelMask segment(const ImageEmbedding& embedding, const PromptSet& prompts, const PromptEncoderState& state,
                    double threshold = 0.0) const;
  LabelMask segment(const SliceImage& image, const PromptSet& prompts, const PromptEncoderState& state,
                    double threshold = 0.0) const;
};

/// Content-hash keyed embedding cache, safe for concurrent use.
class EmbeddingCache {
 public:
  explicit EmbeddingCache(const Backbone& backbone, std::size_t capacity = 256)
      : backbone_(backbone), capacity_(capacity) {}
  std::shared_ptr<const ImageEmbedding> get(const SliceImage& image);
  std::size_t size() const;

 private:
  const Backbone& backbone_;
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::map<std::uint64_t, std::shared_ptr<const ImageEmbedding>> entries_;
  std::vector<std::uint64_t> order_;
};

std::uint64_t image_content_hash(const SliceImage& image);

}  // namespace promptmed
