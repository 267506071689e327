#pragma once

// Data-parallel inner loops. Every kernel in `kernels` is OpenMP-parallel and
// has a plain serial twin in `kernels::serial` that the tests compare against.
// Parallel versions never reduce across threads: each thread owns disjoint
// output elements, so results are bit-identical to the serial twin.

#include <vector>

#include "promptmed/core/tensor.hpp"

namespace promptmed::kernels {

FeatureMap conv2d(const FeatureMap& in, const ConvWeights& w);
/// Gradient w.r.t. the input, given the gradient w.r.t. the output.
FeatureMap conv2d_backward_input(const FeatureMap& dout, const ConvWeights& w, int in_h, int in_w);
/// Accumulates weight and bias gradients into dw (same layout as w).
void conv2d_backward_weights(const FeatureMap& dout, const FeatureMap& in, ConvWeights& dw);

/// Half-pixel-centred bilinear resize (edge clamped).
FeatureMap upsample_bilinear(const FeatureMap& in, int out_h, int out_w);
/// Transpose of upsample_bilinear: maps an output-sized gradient back to the input grid.
FeatureMap upsample_bilinear_adjoint(const FeatureMap& dout, int in_h, int in_w);

void tanh_inplace(FeatureMap& x);

/// Number of OpenMP threads in use (1 when built without OpenMP).
int max_threads();

namespace serial {
FeatureMap conv2d(const FeatureMap& in, const ConvWeights& w);
FeatureMap conv2d_backward_input(const FeatureMap& dout, const ConvWeights& w, int in_h, int in_w);
void conv2d_backward_weights(const FeatureMap& dout, const FeatureMap& in, ConvWeights& dw);
FeatureMap upsample_bilinear(const FeatureMap& in, int out_h, int out_w);
FeatureMap upsample_bilinear_adjoint(const FeatureMap& dout, int in_h, int in_w);
}  // namespace serial

/// 1-D interpolation taps for a resize from n_in to n_out samples.
struct ResizeTaps {
  std::vector<int> i0, i1;
  std::vector<double> w0, w1;
};
ResizeTaps resize_taps(int n_in, int n_out);

}  // namespace promptmed::kernels
