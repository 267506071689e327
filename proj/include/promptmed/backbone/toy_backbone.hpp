#pragma once

#include <cstdint>

#include "promptmed/backbone/backbone.hpp"
#include "promptmed/core/tensor.hpp"

namespace promptmed {

struct ToyBackboneConfig {
  std::uint64_t seed = 1234;      // frozen weights are generated from this
  double pe_sigma = 1.0;          // Fourier frequency scale of the prompt positional encoding
  double pixel_mean = 0.0;        // intensity normalization
  double pixel_std = 1.0;
};

/// Small deterministic backbone for CPU work.
///
/// Image encoder: three 3x3 convolutions (1->16 stride 2, 16->32 stride 2,
/// 32->32), ReLU between, giving a C=32 embedding on a stride-4 grid.
///
/// Prompt tokens: token = P_kind * pe(p) + e_kind with pe a fixed random
/// Fourier encoding of the normalized position and (P_kind, e_kind) trainable.
///
/// Mask decoder, per embedding cell g with x = e(g) + dense(g):
///   key    = Wk (x + pe(g))
///   gate_t = sigmoid(<token_t, key> / sqrt(C))
///   z      = Wx x + b + sum_t gate_t * Wv token_t
///   logit  = <w_out, tanh(z)> + b_out
/// followed by bilinear upsampling to the source resolution.
class ToyBackbone final : public Backbone {
 public:
  static constexpr int kChannels = 32;

  explicit ToyBackbone(ToyBackboneConfig cfg = {});

  const BackboneDescriptor& descriptor() const override { return desc_; }
  PromptEncoderState initial_state() const override;
  ImageEmbedding encode_image(const SliceImage& image) const override;
  PromptEmbedding encode_prompts(const PromptSet& prompts, const PromptEncoderState& state, int height,
                                 int width) const override;
  MaskPrediction decode_mask(const ImageEmbedding& embedding, const PromptEmbedding& prompts) const override;
  void backward(const ImageEmbedding& embedding, const PromptSet& prompts, const PromptEncoderState& state,
                const Grid2<double>& dlogits, PromptEncoderState& grad) const override;
  std::uint64_t image_encoder_hash() const override;
  std::uint64_t mask_decoder_hash() const override;

  const ToyBackboneConfig& config() const noexcept { return cfg_; }
  /// Fourier encoding of a normalized position in [0,1]^2 (C values).
  std::vector<double> positional_encoding(double u, double v) const;

 private:
  struct Token {
    TokenKind kind;
    double u, v;  // normalized position
  };
  std::vector<Token> tokens_of(const PromptSet& prompts, int height, int width) const;
  Grid2<double> decode_grid(const ImageEmbedding& emb, const PromptEmbedding& pe) const;

  ToyBackboneConfig cfg_;
  BackboneDescriptor desc_;
  ConvWeights conv1_, conv2_, conv3_;
  std::vector<double> pe_freq_;  // 2 x (C/2)
  std::vector<double> wk_, wv_, wx_;  // C x C row-major
  std::vector<double> bh_, wout_;
  double bout_ = 0.0;
};

const char* token_param_prefix(TokenKind kind);

}  // namespace promptmed
