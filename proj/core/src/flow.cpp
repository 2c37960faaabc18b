#include "mpflow/flow.hpp"

#include <cmath>
#include <deque>
#include <fstream>

#include "mpflow/checkpoint.hpp"
#include "mpflow/threading.hpp"

namespace mpflow::flow {

namespace {

constexpr double kLeak = 0.1;

void check_unit_t(double t) {
    if (t < 0.0 || t > 1.0) {
        throw ShapeError("t must be in [0,1], got " + std::to_string(t));
    }
}

ad::Tensor time_channel(std::size_t h, std::size_t w, double t) {
    return ad::Tensor::full({1, h, w}, t);
}

}  // namespace

// ---- ConvVelocityNet ----

ConvVelocityNet::ConvVelocityNet(std::size_t h, std::size_t w, std::size_t base_width,
                                 std::uint64_t seed)
    : h_(h), w_(w) {
    if (base_width == 0 || base_width > 32) {
        throw ConfigError("ConvVelocityNet: base_width must be in [1,32]");
    }
    Rng rng(derive_seed(seed, "prior-init"));
    const std::size_t b = base_width;
    nn::register_conv(params_, rng, "c1", 2, b, 3);
    nn::register_conv(params_, rng, "c2", b, 2 * b, 3);
    nn::register_conv(params_, rng, "c3", 2 * b, 2 * b, 3);
    nn::register_conv(params_, rng, "c4", 2 * b, b, 3);
    nn::register_conv(params_, rng, "c5", b, 1, 3);
}

ConvVelocityNet::ConvVelocityNet(std::size_t h, std::size_t w, nn::ParamStore params)
    : h_(h), w_(w), params_(std::move(params)) {
    for (const char* name : {"c1.w", "c2.w", "c3.w", "c4.w", "c5.w"}) {
        if (!params_.contains(name)) {
            throw ConfigError(std::string("ConvVelocityNet: checkpoint missing ") + name);
        }
    }
}

ad::Tensor ConvVelocityNet::forward(const nn::ParamView& pv, const ad::Tensor& x, double t) const {
    check_unit_t(t);
    if (x.shape().size() != 2) {
        throw ShapeError("ConvVelocityNet: expected [H,W] input, got " + shape_str(x.shape()));
    }
    const std::size_t h = x.shape()[0], w = x.shape()[1];
    ad::Tensor in = ad::concat({ad::reshape(x, {1, h, w}), time_channel(h, w, t)});
    ad::Tensor a1 = ad::leaky_relu(nn::conv_layer(pv, "c1", in, 1, 1), kLeak);
    ad::Tensor a2 = ad::leaky_relu(nn::conv_layer(pv, "c2", a1, 2, 1), kLeak);
    ad::Tensor a3 = ad::leaky_relu(nn::conv_layer(pv, "c3", a2, 1, 1), kLeak);
    ad::Tensor a4 = ad::leaky_relu(nn::conv_layer(pv, "c4", ad::upsample_nearest(a3, 2), 1, 1),
                                   kLeak);
    ad::Tensor out = nn::conv_layer(pv, "c5", a4, 1, 1);
    return ad::reshape(out, {h, w});
}

// ---- MlpVelocityNet ----

MlpVelocityNet::MlpVelocityNet(std::size_t h, std::size_t w, std::size_t hidden, std::uint64_t seed)
    : h_(h), w_(w), hidden_(hidden) {
    const std::size_t d = h * w;
    Rng rng(derive_seed(seed, "mlp-init"));
    nn::register_linear(params_, rng, "l1", d + 1, hidden);
    nn::register_linear(params_, rng, "l2", hidden, hidden);
    nn::register_linear(params_, rng, "l3", hidden, d);
}

MlpVelocityNet::MlpVelocityNet(std::size_t h, std::size_t w, nn::ParamStore params)
    : h_(h), w_(w), params_(std::move(params)) {
    if (!params_.contains("l1.w")) throw ConfigError("MlpVelocityNet: checkpoint missing l1.w");
    hidden_ = params_.at("l1.w").shape()[1];
}

ad::Tensor MlpVelocityNet::forward(const nn::ParamView& pv, const ad::Tensor& x, double t) const {
    check_unit_t(t);
    const std::size_t d = h_ * w_;
    if (x.numel() != d) {
        throw ShapeError("MlpVelocityNet: expected " + std::to_string(d) + " elements, got " +
                         shape_str(x.shape()));
    }
    ad::Tensor flat = ad::concat({ad::reshape(x, {d}), ad::Tensor::scalar(t)});
    ad::Tensor v = ad::reshape(flat, {1, d + 1});
    v = ad::leaky_relu(nn::linear_layer(pv, "l1", v), kLeak);
    v = ad::leaky_relu(nn::linear_layer(pv, "l2", v), kLeak);
    v = nn::linear_layer(pv, "l3", v);
    return ad::reshape(v, {h_, w_});
}

// ---- StraightLineField ----

StraightLineField::StraightLineField(Image x1) : x1_(std::move(x1)) {
    if (x1_.numel() == 0) throw ShapeError("StraightLineField: empty target");
}

ad::Tensor StraightLineField::velocity(const ad::Tensor& x, double t) const {
    if (t < 0.0 || t >= 1.0) {
        throw ShapeError("StraightLineField: t must be in [0,1), got " + std::to_string(t));
    }
    ad::Tensor target = x1_.tensor();
    return ad::mul(ad::sub(target, x), 1.0 / (1.0 - t));
}

// ---- GaussianAnalyticField ----

GaussianAnalyticField::GaussianAnalyticField(oracle::GaussianPrior prior, std::size_t h,
                                             std::size_t w)
    : prior_(std::move(prior)), h_(h), w_(w) {
    prior_.validate();
    if (prior_.dim() != h * w) {
        throw ShapeError("GaussianAnalyticField: prior dimension " + std::to_string(prior_.dim()) +
                         " does not match " + std::to_string(h) + "x" + std::to_string(w));
    }
}

ad::Tensor GaussianAnalyticField::velocity(const ad::Tensor& x, double t) const {
    const std::size_t d = prior_.dim();
    if (x.numel() != d) {
        throw ShapeError("GaussianAnalyticField: expected " + std::to_string(d) +
                         " elements, got " + shape_str(x.shape()));
    }
    const ad::Tensor* m_t = nullptr;
    const ad::Tensor* c_t = nullptr;
    for (const auto& entry : cache_) {
        if (entry.first == t) {
            m_t = &entry.second.first;
            c_t = &entry.second.second;
            break;
        }
    }
    if (m_t == nullptr) {
        oracle::Mat m;
        oracle::Vec c;
        oracle::analytic_velocity_affine(prior_, t, m, c);
        cache_.emplace_back(t, std::make_pair(ad::Tensor::from({d, d}, std::move(m.a)),
                                              ad::Tensor::from({d, 1}, std::move(c))));
        m_t = &cache_.back().second.first;
        c_t = &cache_.back().second.second;
    }
    ad::Tensor col = ad::reshape(x, {d, 1});
    return ad::reshape(ad::add(ad::matmul(*m_t, col), *c_t), {h_, w_});
}

// ---- free functions ----

Image interpolate(const Image& z, const Image& x1, double t) {
    check_unit_t(t);
    if (!same_shape(z, x1)) {
        throw ShapeError("interpolate: shapes differ, " + std::to_string(z.h) + "x" +
                         std::to_string(z.w) + " vs " + std::to_string(x1.h) + "x" +
                         std::to_string(x1.w));
    }
    Image out(z.h, z.w, 0.0, x1.modality);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.pix[i] = (1.0 - t) * z.pix[i] + t * x1.pix[i];
    }
    return out;
}

ad::Tensor fm_loss(const TrainableField& net, const nn::ParamView& pv,
                   const std::vector<Image>& batch, Rng& rng) {
    if (batch.empty()) throw ShapeError("fm_loss: empty batch");
    ad::Tensor total;
    for (const Image& x1 : batch) {
        const double t = rng.uniform();
        std::vector<double> xt(x1.numel()), target(x1.numel());
        for (std::size_t i = 0; i < x1.numel(); ++i) {
            const double z = rng.normal();
            xt[i] = (1.0 - t) * z + t * x1.pix[i];
            target[i] = x1.pix[i] - z;
        }
        ad::Tensor v = net.forward(pv, ad::Tensor::from({x1.h, x1.w}, std::move(xt)), t);
        ad::Tensor resid = ad::sub(v, ad::Tensor::from({x1.h, x1.w}, std::move(target)));
        ad::Tensor s = ad::sum(ad::square(resid));
        total = total.defined() ? ad::add(total, s) : s;
    }
    return ad::mul(total, 1.0 / static_cast<double>(batch.size()));
}

TrainResult train_prior(TrainableField& net, const std::vector<Image>& dataset,
                        const TrainConfig& cfg) {
    if (dataset.empty()) throw ShapeError("train_prior: empty dataset");
    if (cfg.iterations < 1) throw ConfigError("train_prior: iterations must be >= 1");
    if (cfg.learning_rate <= 0.0) throw ConfigError("train_prior: learning_rate must be > 0");
    Rng rng(derive_seed(cfg.seed, "train-prior"));
    nn::Adam adam({cfg.learning_rate, 0.9, 0.999, 1e-8});

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, cfg.force ? std::ios::trunc : std::ios::app);
        if (!log) throw IoError("train_prior: cannot open log " + cfg.log_path);
        log << "iter,loss\n";
    }

    struct SampleDraw {
        const Image* x1;
        double t;
        std::vector<double> z;
    };
    const std::size_t n_params = net.params().size();
    std::deque<double> window;
    double window_sum = 0.0;
    TrainResult result;
    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        // All randomness is drawn sequentially up front; the per-sample
        // work below is order-independent.
        std::vector<SampleDraw> draws(cfg.batch_size);
        for (auto& d : draws) {
            d.x1 = &dataset[rng.index(dataset.size())];
            d.t = rng.uniform();
            d.z.resize(d.x1->numel());
            for (double& v : d.z) v = rng.normal();
        }
        std::vector<double> losses(cfg.batch_size, 0.0);
        std::vector<std::vector<std::pair<std::string, ad::Tensor>>> grads(cfg.batch_size);
        parallel_for(cfg.batch_size, [&](std::size_t s) {
            const SampleDraw& d = draws[s];
            ad::Tape tape;
            nn::ParamView pv = nn::watch(tape, net.params());
            std::vector<double> xt(d.x1->numel());
            std::vector<double> target(d.x1->numel());
            for (std::size_t i = 0; i < xt.size(); ++i) {
                xt[i] = (1.0 - d.t) * d.z[i] + d.t * d.x1->pix[i];
                target[i] = d.x1->pix[i] - d.z[i];
            }
            ad::Tensor v = net.forward(pv, ad::Tensor::from({d.x1->h, d.x1->w}, std::move(xt)), d.t);
            ad::Tensor loss =
                ad::sum(ad::square(ad::sub(v, ad::Tensor::from({d.x1->h, d.x1->w}, std::move(target)))));
            losses[s] = loss.value();
            grads[s] = nn::param_grads(tape, loss, pv);
        });
        const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
        double loss_val = 0.0;
        for (double l : losses) loss_val += l * inv_b;
        if (!std::isfinite(loss_val)) {
            throw NumericalError("train_prior: loss diverged (NaN/Inf) at iteration " +
                                 std::to_string(iter));
        }
        // Fixed-order reduction of per-sample gradients.
        std::vector<std::pair<std::string, ad::Tensor>> mean_grads;
        mean_grads.reserve(n_params);
        for (std::size_t p = 0; p < n_params; ++p) {
            std::vector<double> acc(grads[0][p].second.numel(), 0.0);
            for (std::size_t s = 0; s < cfg.batch_size; ++s) {
                const ad::Tensor& g = grads[s][p].second;
                for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i] * inv_b;
            }
            mean_grads.emplace_back(grads[0][p].first,
                                    ad::Tensor::from(grads[0][p].second.shape(), std::move(acc)));
        }
        adam.step(net.params_mut(), mean_grads);

        window.push_back(loss_val);
        window_sum += loss_val;
        if (window.size() > 100) {
            window_sum -= window.front();
            window.pop_front();
        }
        if (iter + 1 == window.size()) result.initial_loss = window_sum / window.size();
        if (log.is_open()) log << iter << "," << loss_val << "\n";
    }
    result.final_loss = window_sum / static_cast<double>(window.size());
    if (!cfg.checkpoint_path.empty()) {
        io::save_checkpoint(cfg.checkpoint_path, net.params());
    }
    return result;
}

Image predict_clean(const VelocityField& field, const Image& x_t, double t) {
    check_unit_t(t);
    if (t == 1.0) return x_t;
    ad::Tensor v = field.velocity(x_t.tensor(), t);
    Image out(x_t.h, x_t.w, 0.0, x_t.modality);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.pix[i] = x_t.pix[i] + (1.0 - t) * v[i];
    }
    return out;
}

ad::Tensor predict_clean_on_tape(const VelocityField& field, const ad::Tensor& x, double t) {
    check_unit_t(t);
    if (t == 1.0) return x;
    return ad::add(x, ad::mul(field.velocity(x, t), 1.0 - t));
}

Image euler_sample(const VelocityField& field, const Image& z, std::size_t steps) {
    if (steps < 1) throw ShapeError("euler_sample: steps must be >= 1");
    Image x = z;
    const double inv_t = 1.0 / static_cast<double>(steps);
    for (std::size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * inv_t;
        ad::Tensor v = field.velocity(x.tensor(), t);
        for (std::size_t i = 0; i < x.numel(); ++i) x.pix[i] += inv_t * v[i];
    }
    return x;
}

}  // namespace mpflow::flow
