#include "mpflow/nn.hpp"

#include <cmath>

namespace mpflow::nn {

void ParamStore::add(const std::string& name, Tensor value) {
    if (map_.count(name) != 0) throw ConfigError("parameter already registered: " + name);
    if (!value.defined()) throw ShapeError("parameter " + name + " is undefined");
    order_.push_back(name);
    map_.emplace(name, std::move(value));
}

const Tensor& ParamStore::at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
}

void ParamStore::set(const std::string& name, Tensor value) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ConfigError("unknown parameter: " + name);
    if (value.shape() != it->second.shape()) {
        throw ShapeError("parameter " + name + ": shape " + shape_str(value.shape()) +
                         " does not match registered " + shape_str(it->second.shape()));
    }
    it->second = std::move(value);
}

const Tensor& ParamView::operator[](const std::string& name) const {
    auto it = watched.find(name);
    if (it != watched.end()) return it->second;
    return store->at(name);
}

ParamView watch(Tape& tape, const ParamStore& params) {
    ParamView view;
    view.store = &params;
    for (const std::string& name : params.names()) {
        view.watched.emplace(name, tape.var(params.at(name)));
    }
    return view;
}

ParamView constants(const ParamStore& params) {
    ParamView view;
    view.store = &params;
    return view;
}

std::vector<std::pair<std::string, Tensor>> param_grads(Tape& tape, const Tensor& loss,
                                                        const ParamView& view) {
    std::vector<Tensor> wrt;
    wrt.reserve(view.store->size());
    for (const std::string& name : view.store->names()) {
        wrt.push_back(view.watched.at(name));
    }
    std::vector<Tensor> grads = tape.gradient(loss, wrt);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(grads.size());
    for (std::size_t i = 0; i < grads.size(); ++i) {
        out.emplace_back(view.store->names()[i], std::move(grads[i]));
    }
    return out;
}

void Adam::step(ParamStore& params, const std::vector<std::pair<std::string, Tensor>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const auto& [name, grad] : grads) {
        const Tensor& p = params.at(name);
        if (grad.shape() != p.shape()) {
            throw ShapeError("Adam: gradient shape " + shape_str(grad.shape()) +
                             " does not match parameter " + name + " " + shape_str(p.shape()));
        }
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(p.numel(), 0.0);
            v.assign(p.numel(), 0.0);
        }
        std::vector<double> next(p.numel());
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double g = grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            next[i] = p[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        params.set(name, Tensor::from(p.shape(), std::move(next)));
    }
}

namespace {

Tensor gaussian_init(Rng& rng, Shape shape, double stddev) {
    std::vector<double> d(ad::shape_numel(shape));
    for (double& x : d) x = rng.normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(d));
}

}  // namespace

void register_conv(ParamStore& params, Rng& rng, const std::string& name, std::size_t in_c,
                   std::size_t out_c, std::size_t k) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
    params.add(name + ".w", gaussian_init(rng, {out_c, in_c, k, k}, stddev));
    params.add(name + ".b", Tensor::zeros({out_c}));
}

void register_linear(ParamStore& params, Rng& rng, const std::string& name, std::size_t in,
                     std::size_t out) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    params.add(name + ".w", gaussian_init(rng, {in, out}, stddev));
    params.add(name + ".b", Tensor::zeros({1, out}));
}

Tensor conv_layer(const ParamView& pv, const std::string& name, const Tensor& x,
                  std::size_t stride, std::size_t pad) {
    return ad::conv2d(x, pv[name + ".w"], pv[name + ".b"], stride, pad);
}

Tensor linear_layer(const ParamView& pv, const std::string& name, const Tensor& x) {
    return ad::add(ad::matmul(x, pv[name + ".w"]), pv[name + ".b"]);
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.shape().size() != 3) {
        throw ShapeError("global_avg_pool: expected [C,H,W], got " + shape_str(x.shape()));
    }
    const std::size_t C = x.shape()[0];
    const std::size_t hw = x.shape()[1] * x.shape()[2];
    Tensor rows = ad::reshape(x, {C, hw});
    return ad::reshape(ad::mul(ad::rowsum(rows), 1.0 / static_cast<double>(hw)), {1, C});
}

}  // namespace mpflow::nn
