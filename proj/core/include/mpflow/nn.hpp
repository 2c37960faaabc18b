#pragma once

// Trainable-network substrate: named parameter registry, He-style init,
// Adam, and the layer forwards shared by the velocity nets and the PAMRI
// encoders/decoders. A forward pass runs against a ParamView, which is
// either a constant view of the store or a tape-watched view for one
// training/guidance step.

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mpflow/rng.hpp"
#include "mpflow/tensor.hpp"

namespace mpflow::nn {

using ad::Shape;
using ad::Tape;
using ad::Tensor;

// Ordered name -> tensor registry. Insertion order fixes serialization
// and optimizer update order, which is what makes checkpoints and
// training bit-reproducible.
class ParamStore {
public:
    void add(const std::string& name, Tensor value);
    const Tensor& at(const std::string& name) const;
    void set(const std::string& name, Tensor value);
    bool contains(const std::string& name) const { return map_.count(name) != 0; }
    std::size_t size() const { return order_.size(); }
    const std::vector<std::string>& names() const { return order_; }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> map_;
};

struct ParamView {
    const ParamStore* store = nullptr;
    std::unordered_map<std::string, Tensor> watched;  // empty for a constant view

    const Tensor& operator[](const std::string& name) const;
};

// Watches every parameter on the tape, in store order.
ParamView watch(Tape& tape, const ParamStore& params);
ParamView constants(const ParamStore& params);

// Gradients of a watched view's parameters, in store order. Consumes the tape.
std::vector<std::pair<std::string, Tensor>> param_grads(Tape& tape, const Tensor& loss,
                                                        const ParamView& view);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void step(ParamStore& params, const std::vector<std::pair<std::string, Tensor>>& grads);
    void set_lr(double lr) { cfg_.lr = lr; }
    std::size_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::unordered_map<std::string, std::vector<double>> m_, v_;
};

// He-style init: N(0, sqrt(2/fan_in)) weights, zero biases.
void register_conv(ParamStore& params, Rng& rng, const std::string& name, std::size_t in_c,
                   std::size_t out_c, std::size_t k);
void register_linear(ParamStore& params, Rng& rng, const std::string& name, std::size_t in,
                     std::size_t out);

// conv2d + bias for layer `name` (expects name.w [O,C,k,k] and name.b [O]).
Tensor conv_layer(const ParamView& pv, const std::string& name, const Tensor& x,
                  std::size_t stride, std::size_t pad);
// x [1,in] -> [1,out] (expects name.w [in,out] and name.b [1,out]).
Tensor linear_layer(const ParamView& pv, const std::string& name, const Tensor& x);
// Mean over the spatial extent of each channel: [C,H,W] -> [1,C].
Tensor global_avg_pool(const Tensor& x);

}  // namespace mpflow::nn
