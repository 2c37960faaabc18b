// Microbenchmarks for the kernels that dominate reconstruction time:
// conv forward/backward, the FFT pair, one guided sampling step, and
// the NMI histogram. Run with --benchmark_filter=... to narrow.

#include <benchmark/benchmark.h>

#include <vector>

#include "mpflow/flow.hpp"
#include "mpflow/guidance.hpp"
#include "mpflow/nn.hpp"
#include "mpflow/operators.hpp"
#include "mpflow/pamri.hpp"
#include "mpflow/phantom.hpp"
#include "mpflow/rng.hpp"
#include "mpflow/tensor.hpp"

namespace {

using namespace mpflow;

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
    Image img(h, w);
    Rng rng(seed);
    for (double& p : img.pix) p = rng.normal();
    return img;
}

void bm_conv2d_forward(benchmark::State& state) {
    const std::size_t c = state.range(0);
    Rng rng(1);
    std::vector<double> xd(c * 32 * 32), wd(c * c * 9), bd(c);
    for (double& v : xd) v = rng.normal();
    for (double& v : wd) v = rng.normal();
    for (double& v : bd) v = rng.normal();
    const ad::Tensor x = ad::Tensor::from({c, 32, 32}, xd);
    const ad::Tensor w = ad::Tensor::from({c, c, 3, 3}, wd);
    const ad::Tensor b = ad::Tensor::from({c}, bd);
    for (auto _ : state) {
        benchmark::DoNotOptimize(ad::conv2d(x, w, b, 1, 1));
    }
}
BENCHMARK(bm_conv2d_forward)->Arg(8)->Arg(16)->Arg(32);

void bm_conv2d_backward(benchmark::State& state) {
    const std::size_t c = state.range(0);
    Rng rng(2);
    std::vector<double> xd(c * 32 * 32), wd(c * c * 9), bd(c);
    for (double& v : xd) v = rng.normal();
    for (double& v : wd) v = rng.normal();
    for (double& v : bd) v = rng.normal();
    for (auto _ : state) {
        ad::Tape tape;
        ad::Tensor x = tape.var({c, 32, 32}, xd);
        ad::Tensor w = tape.var({c, c, 3, 3}, wd);
        ad::Tensor b = tape.var({c}, bd);
        ad::Tensor loss = ad::sum(ad::square(ad::conv2d(x, w, b, 1, 1)));
        benchmark::DoNotOptimize(tape.gradient(loss, {x, w, b}));
    }
}
BENCHMARK(bm_conv2d_backward)->Arg(8)->Arg(16);

void bm_dft2(benchmark::State& state) {
    const std::size_t n = state.range(0);
    Rng rng(3);
    std::vector<double> re(n * n), im(n * n), fre, fim;
    for (double& v : re) v = rng.normal();
    for (double& v : im) v = rng.normal();
    for (auto _ : state) {
        op::dft2(re, im, n, n, fre, fim);
        benchmark::DoNotOptimize(fre.data());
    }
}
BENCHMARK(bm_dft2)->Arg(32)->Arg(64)->Arg(128);

void bm_guided_step(benchmark::State& state) {
    const auto pairs = phantom::sample_dataset(1, 32, 32, 1.0, 4);
    flow::ConvVelocityNet net(32, 32, 12, 5);
    const pamri::EncoderPair enc(64, 6);
    const op::ForwardOperator fwd = op::ForwardOperator::downsample(32, 32, 4);
    guide::GuidanceContext ctx;
    ctx.fwd = fwd;
    ctx.y = op::apply(fwd, pairs[0].target);
    ctx.x_aux = pairs[0].aux;
    ctx.encoders = &enc;
    guide::GuidanceConfig cfg;
    cfg.alpha0 = 1.0;
    cfg.lambda_p = 0.1;
    cfg.patch = 32;
    const Image x_t = random_image(32, 32, 7);
    for (auto _ : state) {
        benchmark::DoNotOptimize(guide::guided_velocity(net, x_t, 0.5, ctx, cfg));
    }
}
BENCHMARK(bm_guided_step)->Unit(benchmark::kMillisecond);

void bm_nmi(benchmark::State& state) {
    const Image a = random_image(32, 32, 8), b = random_image(32, 32, 9);
    for (auto _ : state) {
        benchmark::DoNotOptimize(pamri::nmi(a, b, 32));
    }
}
BENCHMARK(bm_nmi);

void bm_encoder_embed(benchmark::State& state) {
    const pamri::Encoder enc(64, 10);
    const Image patch = random_image(32, 32, 11);
    for (auto _ : state) {
        benchmark::DoNotOptimize(enc.embed(patch));
    }
}
BENCHMARK(bm_encoder_embed)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
