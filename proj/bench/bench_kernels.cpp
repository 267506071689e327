#include <benchmark/benchmark.h>

#include "promptmed/backbone/toy_backbone.hpp"
#include "promptmed/core/kernels.hpp"
#include "promptmed/core/random.hpp"

using namespace promptmed;

namespace {

FeatureMap random_map(int c, int h, int w) {
  Rng rng(1);
  FeatureMap f(c, h, w);
  for (auto& v : f.values()) v = rng.normal();
  return f;
}

ConvWeights random_conv(int out, int in) {
  Rng rng(2);
  ConvWeights w(out, in, 3, 1, 1);
  for (auto& v : w.weight) v = rng.normal(0, 0.1);
  return w;
}

// args: spatial size
template <bool Par>
void BM_conv2d(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const auto in = random_map(32, n, n);
  const auto w = random_conv(32, 32);
  for (auto _ : st) benchmark::DoNotOptimize(Par ? kernels::conv2d(in, w) : kernels::serial::conv2d(in, w));
  st.counters["threads"] = Par ? kernels::max_threads() : 1;
}

template <bool Par>
void BM_conv2d_backward_input(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const auto dout = random_map(32, n, n);
  const auto w = random_conv(32, 32);
  for (auto _ : st)
    benchmark::DoNotOptimize(Par ? kernels::conv2d_backward_input(dout, w, n, n)
                                 : kernels::serial::conv2d_backward_input(dout, w, n, n));
}

template <bool Par>
void BM_conv2d_backward_weights(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const auto dout = random_map(32, n, n);
  const auto in = random_map(32, n, n);
  auto dw = random_conv(32, 32);
  for (auto _ : st) {
    if (Par) kernels::conv2d_backward_weights(dout, in, dw);
    else kernels::serial::conv2d_backward_weights(dout, in, dw);
    benchmark::DoNotOptimize(dw.weight.data());
  }
}

template <bool Par>
void BM_upsample(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const auto in = random_map(1, n / 4, n / 4);
  for (auto _ : st)
    benchmark::DoNotOptimize(Par ? kernels::upsample_bilinear(in, n, n) : kernels::serial::upsample_bilinear(in, n, n));
}

template <bool Par>
void BM_upsample_adjoint(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  const auto dout = random_map(1, n, n);
  for (auto _ : st)
    benchmark::DoNotOptimize(Par ? kernels::upsample_bilinear_adjoint(dout, n / 4, n / 4)
                                 : kernels::serial::upsample_bilinear_adjoint(dout, n / 4, n / 4));
}

void BM_toy_encode(benchmark::State& st) {
  const int n = static_cast<int>(st.range(0));
  ToyBackbone bb;
  Rng rng(3);
  Grid2<double> px(n, n);
  for (auto& v : px.values()) v = rng.uniform();
  const SliceImage img(px);
  for (auto _ : st) benchmark::DoNotOptimize(bb.encode_image(img));
}

}  // namespace

BENCHMARK(BM_conv2d<false>)->Arg(32)->Arg(64);
BENCHMARK(BM_conv2d<true>)->Arg(32)->Arg(64);
BENCHMARK(BM_conv2d_backward_input<false>)->Arg(32);
BENCHMARK(BM_conv2d_backward_input<true>)->Arg(32);
BENCHMARK(BM_conv2d_backward_weights<false>)->Arg(32);
BENCHMARK(BM_conv2d_backward_weights<true>)->Arg(32);
BENCHMARK(BM_upsample<false>)->Arg(128)->Arg(256);
BENCHMARK(BM_upsample<true>)->Arg(128)->Arg(256);
BENCHMARK(BM_upsample_adjoint<false>)->Arg(128);
BENCHMARK(BM_upsample_adjoint<true>)->Arg(128);
BENCHMARK(BM_toy_encode)->Arg(64)->Arg(128);

BENCHMARK_MAIN();
