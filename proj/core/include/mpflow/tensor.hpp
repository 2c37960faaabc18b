#pragma once

// Dense float64 tensors with tape-based reverse-mode autodiff.
//
// A Tensor is an immutable value: shape plus row-major data, shared by
// handle. Tensors are constants unless created through Tape::var(), which
// links them to a tape; any op consuming a tape-linked tensor records a
// node so Tape::gradient() can differentiate a scalar result w.r.t. the
// watched leaves. A tape is single-owner and consumed by gradient().
//
// Broadcasting is limited to scalar-vs-tensor (one operand with numel 1);
// everything else requires explicit reshape. NaN/Inf in any op output is
// a hard error.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mpflow/common.hpp"

namespace mpflow::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

struct Storage {
    Shape shape;
    std::vector<double> data;
};

class Tape;

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);  // shape [1]

    bool defined() const { return storage_ != nullptr; }
    const Shape& shape() const { return storage_->shape; }
    std::size_t numel() const { return storage_->data.size(); }
    const std::vector<double>& data() const { return storage_->data; }
    double operator[](std::size_t i) const { return storage_->data[i]; }

    // Value of a single-element tensor.
    double value() const;

    // True when this handle is linked to a live (unconsumed) tape.
    bool requires_grad() const;
    Tape* tape() const;

private:
    friend class Tape;
    friend struct OpWriter;
    std::shared_ptr<const Storage> storage_;
    Tape* tape_ = nullptr;
    std::int64_t node_ = -1;
    std::uint64_t gen_ = 0;
};

// Records the op graph for one forward pass. Nodes are stored in creation
// order, which is a topological order by construction; the backward sweep
// walks them once in reverse.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Differentiable leaf holding a copy of the given value.
    Tensor var(const Tensor& value);
    Tensor var(Shape shape, std::vector<double> data);

    // Gradient of a scalar ([1]-shaped) loss w.r.t. each watched tensor.
    // Consumes the tape: nodes are cleared and handles from this pass go
    // stale (they stay usable as plain constants). Tensors that never fed
    // the loss get zero gradients; tensors not on this tape are an error.
    std::vector<Tensor> gradient(const Tensor& loss, const std::vector<Tensor>& wrt);

    void reset();
    std::size_t node_count() const { return nodes_.size(); }
    std::uint64_t generation() const { return gen_; }

    // Inspection hooks for structural tests.
    std::vector<std::int64_t> node_inputs(std::size_t node) const { return nodes_[node].inputs; }
    const char* node_op(std::size_t node) const { return nodes_[node].op; }

private:
    friend struct OpWriter;

    struct Node {
        const char* op;
        std::vector<std::int64_t> inputs;
        std::function<void(const double*)> backward;  // grad of this node's output
    };

    std::int64_t record(const char* op, std::vector<std::int64_t> inputs,
                        std::function<void(const double*)> backward);
    double* grad_buffer(std::int64_t node, std::size_t numel);

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::uint64_t gen_ = 1;
    bool in_backward_ = false;
};

// ---- op set ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor sub(const Tensor& a, double c);
Tensor sub(double c, const Tensor& a);
Tensor mul(const Tensor& a, double c);
Tensor div(const Tensor& a, double c);
Tensor div(double c, const Tensor& a);

Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor sum(const Tensor& a);   // -> [1]
Tensor mean(const Tensor& a);  // -> [1]
Tensor rowsum(const Tensor& a);  // [m,n] -> [m]

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // [m,n] -> [n,m]
Tensor diagonal(const Tensor& a);                 // [n,n] -> [n]

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts);  // along axis 0
Tensor slice2d(const Tensor& a, std::size_t r0, std::size_t c0, std::size_t h, std::size_t w);

// x: [C,H,W], w: [O,C,kh,kw], b: [O] (or undefined for no bias).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad);
Tensor upsample_nearest(const Tensor& x, std::size_t factor);  // [C,H,W] -> [C,fH,fW]
Tensor reflect_pad2d(const Tensor& x, std::size_t r);          // [C,H,W] -> [C,H+2r,W+2r]

// Unit-norm over all elements. Inputs with norm < 1e-12 pass through
// unchanged and contribute zero gradient.
Tensor l2_normalize(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// Central-finite-difference check of a scalar function's gradient at x0.
// Returns max over coordinates of |analytic - numeric| / (|numeric| + 1e-12).
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;
double finite_difference_check(const ScalarFn& f, const Tensor& x0, double eps);

}  // namespace mpflow::ad
