#pragma once

// Rectified-flow prior: straight-line interpolation, the flow-matching
// objective, Euler ODE sampling, and the clean-image projection used by
// the guided sampler.
//
// A VelocityField evaluates v(x, t) on [H,W] tensors. The tensor x
// carries any tape linkage, so the same forward code serves plain
// evaluation, guidance gradients (x watched, weights constant), and
// training (weights watched through a ParamView).

#include <cstdint>
#include <string>
#include <vector>

#include "mpflow/image.hpp"
#include "mpflow/nn.hpp"
#include "mpflow/oracle.hpp"
#include "mpflow/rng.hpp"

namespace mpflow::flow {

class VelocityField {
public:
    virtual ~VelocityField() = default;
    virtual std::size_t height() const = 0;
    virtual std::size_t width() const = 0;
    virtual ad::Tensor velocity(const ad::Tensor& x, double t) const = 0;
};

class TrainableField : public VelocityField {
public:
    virtual const nn::ParamStore& params() const = 0;
    virtual nn::ParamStore& params_mut() = 0;
    virtual ad::Tensor forward(const nn::ParamView& pv, const ad::Tensor& x, double t) const = 0;

    ad::Tensor velocity(const ad::Tensor& x, double t) const override {
        return forward(nn::constants(params()), x, t);
    }
};

// Small fully-convolutional hourglass with the time step embedded as a
// constant input channel: 5 conv layers, stride-2 bottleneck.
class ConvVelocityNet : public TrainableField {
public:
    ConvVelocityNet(std::size_t h, std::size_t w, std::size_t base_width, std::uint64_t seed);
    ConvVelocityNet(std::size_t h, std::size_t w, nn::ParamStore params);

    std::size_t height() const override { return h_; }
    std::size_t width() const override { return w_; }
    const nn::ParamStore& params() const override { return params_; }
    nn::ParamStore& params_mut() override { return params_; }
    ad::Tensor forward(const nn::ParamView& pv, const ad::Tensor& x, double t) const override;

private:
    std::size_t h_, w_;
    nn::ParamStore params_;
};

// Two-hidden-layer MLP on flattened images; the workhorse for the
// Gaussian-oracle experiments at d = H*W <= 64.
class MlpVelocityNet : public TrainableField {
public:
    MlpVelocityNet(std::size_t h, std::size_t w, std::size_t hidden, std::uint64_t seed);
    MlpVelocityNet(std::size_t h, std::size_t w, nn::ParamStore params);

    std::size_t height() const override { return h_; }
    std::size_t width() const override { return w_; }
    const nn::ParamStore& params() const override { return params_; }
    nn::ParamStore& params_mut() override { return params_; }
    ad::Tensor forward(const nn::ParamView& pv, const ad::Tensor& x, double t) const override;

private:
    std::size_t h_, w_;
    std::size_t hidden_;
    nn::ParamStore params_;
};

// Exact conditional straight-line field toward a fixed data point:
// v(x,t) = (x1 - x)/(1 - t). One Euler step of any size lands on x1.
class StraightLineField : public VelocityField {
public:
    explicit StraightLineField(Image x1);

    std::size_t height() const override { return x1_.h; }
    std::size_t width() const override { return x1_.w; }
    ad::Tensor velocity(const ad::Tensor& x, double t) const override;

private:
    Image x1_;
};

// Closed-form Gaussian-prior velocity as an affine map per t (cached).
class GaussianAnalyticField : public VelocityField {
public:
    GaussianAnalyticField(oracle::GaussianPrior prior, std::size_t h, std::size_t w);

    std::size_t height() const override { return h_; }
    std::size_t width() const override { return w_; }
    ad::Tensor velocity(const ad::Tensor& x, double t) const override;
    const oracle::GaussianPrior& prior() const { return prior_; }

private:
    oracle::GaussianPrior prior_;
    std::size_t h_, w_;
    mutable std::vector<std::pair<double, std::pair<ad::Tensor, ad::Tensor>>> cache_;
};

struct TrainConfig {
    std::size_t iterations = 2000;
    std::size_t batch_size = 8;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::string checkpoint_path;  // empty: skip writing
    std::string log_path;         // empty: skip CSV log
    bool force = false;           // overwrite existing artifacts
};

Image interpolate(const Image& z, const Image& x1, double t);

// Mean over the batch of ||v(x_t,t) - (x1 - z)||^2 with per-sample
// independent t ~ U[0,1], z ~ N(0,I). Recorded against pv's tape.
ad::Tensor fm_loss(const TrainableField& net, const nn::ParamView& pv,
                   const std::vector<Image>& batch, Rng& rng);

struct TrainResult {
    double initial_loss = 0.0;  // 100-step moving average at start
    double final_loss = 0.0;    // same window at end
};

// Adam training loop; per-sample gradients are computed on independent
// tapes and reduced in index order, so results are thread-count
// invariant. NaN loss aborts with the iteration in the message.
TrainResult train_prior(TrainableField& net, const std::vector<Image>& dataset,
                        const TrainConfig& cfg);

Image predict_clean(const VelocityField& field, const Image& x_t, double t);
// Tape form: x may be watched; t = 1 returns x unchanged.
ad::Tensor predict_clean_on_tape(const VelocityField& field, const ad::Tensor& x, double t);

Image euler_sample(const VelocityField& field, const Image& z, std::size_t steps);

}  // namespace mpflow::flow
