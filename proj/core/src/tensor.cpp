#include "mpflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace mpflow::ad {

namespace {

std::shared_ptr<const Storage> make_storage(const char* op, Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError(std::string(op) + ": data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    }
    if (!all_finite(data)) {
        throw NumericalError(std::string(op) + ": non-finite value in output");
    }
    return std::make_shared<const Storage>(Storage{std::move(shape), std::move(data)});
}

}  // namespace

// Grants op implementations access to tensor/tape internals.
struct OpWriter {
    static const std::shared_ptr<const Storage>& st(const Tensor& t) { return t.storage_; }
    static bool live(const Tensor& t) {
        return t.tape_ != nullptr && t.gen_ == t.tape_->generation();
    }
    static Tape* tape(const Tensor& t) { return t.tape_; }
    static std::int64_t node(const Tensor& t) { return t.node_; }
    static double* gbuf(Tape* tape, std::int64_t id, std::size_t numel) {
        return tape->grad_buffer(id, numel);
    }
    static Tensor make(std::shared_ptr<const Storage> st, Tape* tape, std::int64_t node) {
        Tensor t;
        t.storage_ = std::move(st);
        if (tape != nullptr) {
            t.tape_ = tape;
            t.node_ = node;
            t.gen_ = tape->generation();
        }
        return t;
    }
    static std::int64_t record(Tape* tape, const char* op, std::vector<std::int64_t> inputs,
                               std::function<void(const double*)> backward) {
        return tape->record(op, std::move(inputs), std::move(backward));
    }
};

namespace {

// Tape linkage of an op's inputs: the (unique) live tape and per-input node
// ids (-1 for constants).
struct Rec {
    Tape* tape = nullptr;
    std::vector<std::int64_t> ids;

    bool on(std::size_t i) const { return ids[i] >= 0; }
};

Rec link(const char* op, std::initializer_list<const Tensor*> ins) {
    Rec r;
    r.ids.reserve(ins.size());
    for (const Tensor* t : ins) {
        if (t->defined() && OpWriter::live(*t)) {
            Tape* tp = OpWriter::tape(*t);
            if (r.tape != nullptr && r.tape != tp) {
                throw std::logic_error(std::string(op) + ": inputs belong to two different tapes");
            }
            r.tape = tp;
            r.ids.push_back(OpWriter::node(*t));
        } else {
            r.ids.push_back(-1);
        }
    }
    return r;
}

Tensor finish(const char* op, const Rec& r, Shape shape, std::vector<double> data,
              const std::function<std::function<void(const double*)>()>& make_backward) {
    auto st = make_storage(op, std::move(shape), std::move(data));
    if (r.tape == nullptr) return OpWriter::make(st, nullptr, -1);
    std::vector<std::int64_t> live_ids;
    for (std::int64_t id : r.ids) {
        if (id >= 0) live_ids.push_back(id);
    }
    const std::int64_t node = OpWriter::record(r.tape, op, std::move(live_ids), make_backward());
    return OpWriter::make(st, r.tape, node);
}

void require_defined(const char* op, const Tensor& t) {
    if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor input");
}

// ---- elementwise drivers ----

template <class F, class DF>
Tensor binary_impl(const char* op, const Tensor& a, const Tensor& b, F f, DF df) {
    require_defined(op, a);
    require_defined(op, b);
    const bool a_scalar = a.numel() == 1 && b.numel() != 1;
    const bool b_scalar = b.numel() == 1 && a.numel() != 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    const Shape& out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = f(a_scalar ? av[0] : av[i], b_scalar ? bv[0] : bv[i]);
    }
    Rec r = link(op, {&a, &b});
    return finish(op, r, out_shape, std::move(out), [&]() {
        auto sa = OpWriter::st(a);
        auto sb = OpWriter::st(b);
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0], idb = r.ids[1];
        return [=](const double* g) {
            const std::size_t m = shape_numel(a_scalar ? sb->shape : sa->shape);
            double* ga = ida >= 0 ? OpWriter::gbuf(tape, ida, sa->data.size()) : nullptr;
            double* gb = idb >= 0 ? OpWriter::gbuf(tape, idb, sb->data.size()) : nullptr;
            for (std::size_t i = 0; i < m; ++i) {
                const double x = a_scalar ? sa->data[0] : sa->data[i];
                const double y = b_scalar ? sb->data[0] : sb->data[i];
                double da = 0, db = 0;
                df(g[i], x, y, da, db);
                if (ga) ga[a_scalar ? 0 : i] += da;
                if (gb) gb[b_scalar ? 0 : i] += db;
            }
        };
    });
}

template <class F, class DF>
Tensor unary_impl(const char* op, const Tensor& a, F f, DF df) {
    require_defined(op, a);
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    const auto& av = a.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i]);
    Rec r = link(op, {&a});
    return finish(op, r, a.shape(), std::move(out), [&]() {
        auto sa = OpWriter::st(a);
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        return [=](const double* g) {
            double* ga = OpWriter::gbuf(tape, ida, sa->data.size());
            for (std::size_t i = 0; i < sa->data.size(); ++i) {
                ga[i] += df(g[i], sa->data[i]);
            }
        };
    });
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::from(Shape shape, std::vector<double> data) {
    return OpWriter::make(make_storage("tensor", std::move(shape), std::move(data)), nullptr, -1);
}

Tensor Tensor::zeros(Shape shape) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return from(std::move(shape), std::move(d));
}

Tensor Tensor::full(Shape shape, double value) {
    std::vector<double> d(shape_numel(shape), value);
    return from(std::move(shape), std::move(d));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::value() const {
    if (!defined() || numel() != 1) {
        throw ShapeError("value(): tensor is not a single element");
    }
    return storage_->data[0];
}

bool Tensor::requires_grad() const {
    return tape_ != nullptr && gen_ == tape_->generation();
}

Tape* Tensor::tape() const { return requires_grad() ? tape_ : nullptr; }

// ---- Tape ----

Tensor Tape::var(const Tensor& value) {
    if (!value.defined()) throw ShapeError("Tape::var: undefined tensor");
    if (in_backward_) throw std::logic_error("Tape::var called during backward");
    auto st = value.storage_;
    const std::int64_t id = record("leaf", {}, nullptr);
    return OpWriter::make(st, this, id);
}

Tensor Tape::var(Shape shape, std::vector<double> data) {
    return var(Tensor::from(std::move(shape), std::move(data)));
}

std::int64_t Tape::record(const char* op, std::vector<std::int64_t> inputs,
                          std::function<void(const double*)> backward) {
    if (in_backward_) throw std::logic_error("op recorded during backward pass");
    nodes_.push_back(Node{op, std::move(inputs), std::move(backward)});
    return static_cast<std::int64_t>(nodes_.size()) - 1;
}

double* Tape::grad_buffer(std::int64_t node, std::size_t numel) {
    auto& buf = grads_[static_cast<std::size_t>(node)];
    if (buf.empty()) buf.assign(numel, 0.0);
    return buf.data();
}

std::vector<Tensor> Tape::gradient(const Tensor& loss, const std::vector<Tensor>& wrt) {
    if (!loss.defined() || loss.tape_ != this || loss.gen_ != gen_) {
        throw std::logic_error("gradient: loss is not on this tape");
    }
    if (loss.numel() != 1) {
        throw ShapeError("gradient: loss must have shape [1], got " + shape_str(loss.shape()));
    }
    for (const Tensor& t : wrt) {
        if (!t.defined() || t.tape_ != this || t.gen_ != gen_) {
            throw std::logic_error("gradient: requested tensor is not on this tape");
        }
    }
    grads_.assign(nodes_.size(), {});
    grads_[static_cast<std::size_t>(loss.node_)] = {1.0};
    in_backward_ = true;
    for (std::int64_t id = static_cast<std::int64_t>(nodes_.size()) - 1; id >= 0; --id) {
        auto& buf = grads_[static_cast<std::size_t>(id)];
        if (buf.empty()) continue;
        auto& node = nodes_[static_cast<std::size_t>(id)];
        if (node.backward) node.backward(buf.data());
    }
    in_backward_ = false;
    std::vector<Tensor> result;
    result.reserve(wrt.size());
    for (const Tensor& t : wrt) {
        auto& buf = grads_[static_cast<std::size_t>(t.node_)];
        if (buf.empty()) buf.assign(t.numel(), 0.0);
        if (!all_finite(buf)) throw NumericalError("gradient: non-finite gradient");
        result.push_back(Tensor::from(t.shape(), buf));
    }
    reset();
    return result;
}

void Tape::reset() {
    nodes_.clear();
    grads_.clear();
    ++gen_;
}

// ---- binary / unary ops ----

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_impl(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double g, double, double, double& da, double& db) {
            da = g;
            db = g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_impl(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double g, double, double, double& da, double& db) {
            da = g;
            db = -g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_impl(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double g, double x, double y, double& da, double& db) {
            da = g * y;
            db = g * x;
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_impl(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double g, double x, double y, double& da, double& db) {
            da = g / y;
            db = -g * x / (y * y);
        });
}

Tensor add(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
Tensor sub(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
Tensor sub(double c, const Tensor& a) { return sub(Tensor::scalar(c), a); }
Tensor mul(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
Tensor div(const Tensor& a, double c) { return div(a, Tensor::scalar(c)); }
Tensor div(double c, const Tensor& a) { return div(Tensor::scalar(c), a); }

Tensor neg(const Tensor& a) {
    return unary_impl(
        "neg", a, [](double x) { return -x; }, [](double g, double) { return -g; });
}

Tensor relu(const Tensor& a) {
    return unary_impl(
        "relu", a, [](double x) { return x > 0 ? x : 0.0; },
        [](double g, double x) { return x > 0 ? g : 0.0; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary_impl(
        "leaky_relu", a, [slope](double x) { return x > 0 ? x : slope * x; },
        [slope](double g, double x) { return x > 0 ? g : slope * g; });
}

Tensor exp(const Tensor& a) {
    return unary_impl(
        "exp", a, [](double x) { return std::exp(x); },
        [](double g, double x) { return g * std::exp(x); });
}

Tensor log(const Tensor& a) {
    return unary_impl(
        "log", a, [](double x) { return std::log(x); }, [](double g, double x) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
    return unary_impl(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double g, double x) { return 0.5 * g / std::sqrt(x); });
}

Tensor square(const Tensor& a) {
    return unary_impl(
        "square", a, [](double x) { return x * x; },
        [](double g, double x) { return 2.0 * x * g; });
}

Tensor abs(const Tensor& a) {
    return unary_impl(
        "abs", a, [](double x) { return std::fabs(x); },
        [](double g, double x) { return x > 0 ? g : (x < 0 ? -g : 0.0); });
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
    require_defined("sum", a);
    double s = 0;
    for (double x : a.data()) s += x;
    Rec r = link("sum", {&a});
    return finish("sum", r, {1}, {s}, [&]() {
        auto sa = OpWriter::st(a);
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        return [=](const double* g) {
            double* ga = OpWriter::gbuf(tape, ida, sa->data.size());
            for (std::size_t i = 0; i < sa->data.size(); ++i) ga[i] += g[0];
        };
    });
}

Tensor mean(const Tensor& a) {
    require_defined("mean", a);
    double s = 0;
    for (double x : a.data()) s += x;
    const double inv = 1.0 / static_cast<double>(a.numel());
    Rec r = link("mean", {&a});
    return finish("mean", r, {1}, {s * inv}, [&]() {
        auto sa = OpWriter::st(a);
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        return [=](const double* g) {
            double* ga = OpWriter::gbuf(tape, ida, sa->data.size());
            for (std::size_t i = 0; i < sa->data.size(); ++i) ga[i] += g[0] * inv;
        };
    });
}

Tensor rowsum(const Tensor& a) {
    require_defined("rowsum", a);
    if (a.shape().size() != 2) {
        throw ShapeError("rowsum: expected rank-2 tensor, got " + shape_str(a.shape()));
    }
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m, 0.0);
    const auto& av = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < n; ++j) s += av[i * n + j];
        out[i] = s;
    }
    Rec r = link("rowsum", {&a});
    return finish("rowsum", r, {m}, std::move(out), [&]() {
        auto sa = OpWriter::st(a);
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        return [=](const double* g) {
            double* ga = OpWriter::gbuf(tape, ida, sa->data.size());
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[i];
            }
        };
    });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined("matmul", a);
    require_defined("matmul", b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = ap[i * k + kk];
            const double* brow = bp + kk * n;
            double* orow = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    Rec r = link("matmul", {&a, &b});
    return finish("matmul", r, {m, n}, std::move(out), [&]() {
        auto sa = OpWriter::st(a);
        auto sb = OpWriter::st(b);
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0], idb = r.ids[1];
        return [=](const double* g) {
            if (ida >= 0) {
                double* ga = OpWriter::gbuf(tape, ida, m * k);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double* brow = sb->data.data() + kk * n;
                        const double* grow = g + i * n;
                        double s = 0;
                        for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                        ga[i * k + kk] += s;
                    }
                }
            }
            if (idb >= 0) {
                double* gb = OpWriter::gbuf(tape, idb, k * n);
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const double av = sa->data[i * k + kk];
                        const double* grow = g + i * n;
                        double* gbrow = gb + kk * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        };
    });
}

Tensor transpose(const Tensor& a) {
    require_defined("transpose", a);
    if (a.shape().size() != 2) {
        throw ShapeError("transpose: expected rank-2 tensor, got " + shape_str(a.shape()));
    }
    const std::size_t m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(m * n);
    const auto& av = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    }
    Rec r = link("transpose", {&a});
    return finish("transpose", r, {n, m}, std::move(out), [&]() {
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        return [=](const double* g) {
            double* ga = OpWriter::gbuf(tape, ida, m * n);
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
            }
        };
    });
}

Tensor diagonal(const Tensor& a) {
    require_defined("diagonal", a);
    if (a.shape().size() != 2 || a.shape()[0] != a.shape()[1]) {
        throw ShapeError("diagonal: expected square matrix, got " + shape_str(a.shape()));
    }
    const std::size_t n = a.shape()[0];
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.data()[i * n + i];
    Rec r = link("diagonal", {&a});
    return finish("diagonal", r, {n}, std::move(out), [&]() {
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        return [=](const double* g) {
            double* ga = OpWriter::gbuf(tape, ida, n * n);
            for (std::size_t i = 0; i < n; ++i) ga[i * n + i] += g[i];
        };
    });
}

// ---- shape ops ----

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined("reshape", a);
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: cannot reshape " + shape_str(a.shape()) + " to " +
                         shape_str(shape));
    }
    Rec r = link("reshape", {&a});
    std::vector<double> out = a.data();
    return finish("reshape", r, std::move(shape), std::move(out), [&]() {
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        const std::size_t n = a.numel();
        return [=](const double* g) {
            double* ga = OpWriter::gbuf(tape, ida, n);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        };
    });
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    for (const Tensor& t : parts) require_defined("concat", t);
    const Shape& s0 = parts[0].shape();
    Shape out_shape = s0;
    std::size_t dim0 = 0;
    for (const Tensor& t : parts) {
        const Shape& s = t.shape();
        if (s.size() != s0.size()) {
            throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(s));
        }
        for (std::size_t d = 1; d < s.size(); ++d) {
            if (s[d] != s0[d]) {
                throw ShapeError("concat: trailing dims differ " + shape_str(s0) + " vs " +
                                 shape_str(s));
            }
        }
        dim0 += s[0];
    }
    out_shape[0] = dim0;
    std::vector<double> out;
    out.reserve(shape_numel(out_shape));
    for (const Tensor& t : parts) {
        out.insert(out.end(), t.data().begin(), t.data().end());
    }
    // link() wants pointers; build the Rec by hand for a variadic op.
    Rec r;
    for (const Tensor& t : parts) {
        if (OpWriter::live(t)) {
            Tape* tp = OpWriter::tape(t);
            if (r.tape != nullptr && r.tape != tp) {
                throw std::logic_error("concat: inputs belong to two different tapes");
            }
            r.tape = tp;
            r.ids.push_back(OpWriter::node(t));
        } else {
            r.ids.push_back(-1);
        }
    }
    return finish("concat", r, std::move(out_shape), std::move(out), [&]() {
        Tape* tape = r.tape;
        std::vector<std::int64_t> ids = r.ids;
        std::vector<std::size_t> sizes;
        sizes.reserve(parts.size());
        for (const Tensor& t : parts) sizes.push_back(t.numel());
        return [=](const double* g) {
            std::size_t off = 0;
            for (std::size_t p = 0; p < sizes.size(); ++p) {
                if (ids[p] >= 0) {
                    double* gp = OpWriter::gbuf(tape, ids[p], sizes[p]);
                    for (std::size_t i = 0; i < sizes[p]; ++i) gp[i] += g[off + i];
                }
                off += sizes[p];
            }
        };
    });
}

Tensor slice2d(const Tensor& a, std::size_t r0, std::size_t c0, std::size_t h, std::size_t w) {
    require_defined("slice2d", a);
    if (a.shape().size() != 2) {
        throw ShapeError("slice2d: expected rank-2 tensor, got " + shape_str(a.shape()));
    }
    const std::size_t H = a.shape()[0], W = a.shape()[1];
    if (r0 + h > H || c0 + w > W) {
        throw ShapeError("slice2d: window [" + std::to_string(r0) + "+" + std::to_string(h) + "," +
                         std::to_string(c0) + "+" + std::to_string(w) + "] exceeds " +
                         shape_str(a.shape()));
    }
    std::vector<double> out(h * w);
    const auto& av = a.data();
    for (std::size_t i = 0; i < h; ++i) {
        std::memcpy(out.data() + i * w, av.data() + (r0 + i) * W + c0, w * sizeof(double));
    }
    Rec r = link("slice2d", {&a});
    return finish("slice2d", r, {h, w}, std::move(out), [&]() {
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        return [=](const double* g) {
            double* ga = OpWriter::gbuf(tape, ida, H * W);
            for (std::size_t i = 0; i < h; ++i) {
                for (std::size_t j = 0; j < w; ++j) ga[(r0 + i) * W + c0 + j] += g[i * w + j];
            }
        };
    });
}

// ---- spatial ops ----

namespace {

// Valid output column range for a given kernel column offset: all ox with
// 0 <= ox*stride + off < in_w.
void col_range(std::int64_t off, std::int64_t stride, std::int64_t in_w, std::int64_t out_w,
               std::int64_t& lo, std::int64_t& hi) {
    // smallest ox with ox*stride + off >= 0
    lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    // largest ox with ox*stride + off < in_w
    hi = (in_w - 1 - off) / stride;
    if (hi > out_w - 1) hi = out_w - 1;
    if (off > in_w - 1) hi = -1;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
    require_defined("conv2d", x);
    require_defined("conv2d", w);
    if (x.shape().size() != 3 || w.shape().size() != 4) {
        throw ShapeError("conv2d: expected input [C,H,W] and weight [O,C,kh,kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const std::size_t O = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != C) {
        throw ShapeError("conv2d: input has " + std::to_string(C) + " channels but weight expects " +
                         std::to_string(w.shape()[1]) + " (input " + shape_str(x.shape()) +
                         ", weight " + shape_str(w.shape()) + ")");
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
    if (H + 2 * pad < kh || W + 2 * pad < kw) {
        throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
    }
    if (b.defined() && b.numel() != O) {
        throw ShapeError("conv2d: bias has " + std::to_string(b.numel()) + " entries, expected " +
                         std::to_string(O));
    }
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> out(O * Ho * Wo, 0.0);
    const double* xp = x.data().data();
    const double* wp = w.data().data();
    const std::int64_t s = static_cast<std::int64_t>(stride);
    const std::int64_t p = static_cast<std::int64_t>(pad);
    for (std::size_t oc = 0; oc < O; ++oc) {
        double* oplane = out.data() + oc * Ho * Wo;
        if (b.defined()) {
            const double bv = b.data()[oc];
            for (std::size_t i = 0; i < Ho * Wo; ++i) oplane[i] = bv;
        }
        for (std::size_t ic = 0; ic < C; ++ic) {
            const double* iplane = xp + ic * H * W;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const double wv = wp[((oc * C + ic) * kh + ky) * kw + kx];
                    if (wv == 0.0) continue;
                    const std::int64_t offy = static_cast<std::int64_t>(ky) - p;
                    const std::int64_t offx = static_cast<std::int64_t>(kx) - p;
                    std::int64_t ox_lo, ox_hi;
                    col_range(offx, s, static_cast<std::int64_t>(W),
                              static_cast<std::int64_t>(Wo), ox_lo, ox_hi);
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const std::int64_t iy = static_cast<std::int64_t>(oy) * s + offy;
                        if (iy < 0 || iy >= static_cast<std::int64_t>(H)) continue;
                        const double* irow = iplane + iy * static_cast<std::int64_t>(W);
                        double* orow = oplane + oy * Wo;
                        for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) {
                            orow[ox] += wv * irow[ox * s + offx];
                        }
                    }
                }
            }
        }
    }
    Rec r = link("conv2d", {&x, &w, &b});
    return finish("conv2d", r, {O, Ho, Wo}, std::move(out), [&]() {
        auto sx = OpWriter::st(x);
        auto sw = OpWriter::st(w);
        Tape* tape = r.tape;
        const std::int64_t idx = r.ids[0], idw = r.ids[1], idb = r.ids[2];
        return [=](const double* g) {
            const double* xv = sx->data.data();
            const double* wv = sw->data.data();
            double* gx = idx >= 0 ? OpWriter::gbuf(tape, idx, C * H * W) : nullptr;
            double* gw = idw >= 0 ? OpWriter::gbuf(tape, idw, O * C * kh * kw) : nullptr;
            double* gb = idb >= 0 ? OpWriter::gbuf(tape, idb, O) : nullptr;
            for (std::size_t oc = 0; oc < O; ++oc) {
                const double* gplane = g + oc * Ho * Wo;
                if (gb) {
                    double sB = 0;
                    for (std::size_t i = 0; i < Ho * Wo; ++i) sB += gplane[i];
                    gb[oc] += sB;
                }
                if (!gx && !gw) continue;
                for (std::size_t ic = 0; ic < C; ++ic) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::int64_t offy = static_cast<std::int64_t>(ky) - p;
                            const std::int64_t offx = static_cast<std::int64_t>(kx) - p;
                            std::int64_t ox_lo, ox_hi;
                            col_range(offx, s, static_cast<std::int64_t>(W),
                                      static_cast<std::int64_t>(Wo), ox_lo, ox_hi);
                            const double wvv = wv[((oc * C + ic) * kh + ky) * kw + kx];
                            double acc = 0;
                            for (std::size_t oy = 0; oy < Ho; ++oy) {
                                const std::int64_t iy = static_cast<std::int64_t>(oy) * s + offy;
                                if (iy < 0 || iy >= static_cast<std::int64_t>(H)) continue;
                                const double* grow = gplane + oy * Wo;
                                const std::size_t base = ic * H * W + iy * W;
                                if (gx) {
                                    double* gxrow = gx + base;
                                    for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                        gxrow[ox * s + offx] += wvv * grow[ox];
                                    }
                                }
                                if (gw) {
                                    const double* xrow = xv + base;
                                    for (std::int64_t ox = ox_lo; ox <= ox_hi; ++ox) {
                                        acc += grow[ox] * xrow[ox * s + offx];
                                    }
                                }
                            }
                            if (gw) gw[((oc * C + ic) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        };
    });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
    require_defined("upsample_nearest", x);
    if (x.shape().size() != 3) {
        throw ShapeError("upsample_nearest: expected [C,H,W], got " + shape_str(x.shape()));
    }
    if (factor == 0) throw ShapeError("upsample_nearest: factor must be >= 1");
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const std::size_t Ho = H * factor, Wo = W * factor;
    std::vector<double> out(C * Ho * Wo);
    const auto& xv = x.data();
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < Ho; ++y) {
            const double* irow = xv.data() + c * H * W + (y / factor) * W;
            double* orow = out.data() + c * Ho * Wo + y * Wo;
            for (std::size_t xo = 0; xo < Wo; ++xo) orow[xo] = irow[xo / factor];
        }
    }
    Rec r = link("upsample_nearest", {&x});
    return finish("upsample_nearest", r, {C, Ho, Wo}, std::move(out), [&]() {
        Tape* tape = r.tape;
        const std::int64_t idx = r.ids[0];
        return [=](const double* g) {
            double* gx = OpWriter::gbuf(tape, idx, C * H * W);
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t y = 0; y < Ho; ++y) {
                    const double* grow = g + c * Ho * Wo + y * Wo;
                    double* gxrow = gx + c * H * W + (y / factor) * W;
                    for (std::size_t xo = 0; xo < Wo; ++xo) gxrow[xo / factor] += grow[xo];
                }
            }
        };
    });
}

namespace {

// reflect-101 index (no edge duplication): -1 -> 1, n -> n-2.
inline std::size_t reflect_index(std::int64_t i, std::int64_t n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return static_cast<std::size_t>(i);
}

}  // namespace

Tensor reflect_pad2d(const Tensor& x, std::size_t r) {
    require_defined("reflect_pad2d", x);
    if (x.shape().size() != 3) {
        throw ShapeError("reflect_pad2d: expected [C,H,W], got " + shape_str(x.shape()));
    }
    const std::size_t C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    if (r >= H || r >= W) {
        throw ShapeError("reflect_pad2d: radius " + std::to_string(r) + " too large for " +
                         shape_str(x.shape()));
    }
    const std::size_t Ho = H + 2 * r, Wo = W + 2 * r;
    std::vector<double> out(C * Ho * Wo);
    const auto& xv = x.data();
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t y = 0; y < Ho; ++y) {
            const std::size_t sy = reflect_index(static_cast<std::int64_t>(y) -
                                                     static_cast<std::int64_t>(r),
                                                 static_cast<std::int64_t>(H));
            const double* irow = xv.data() + c * H * W + sy * W;
            double* orow = out.data() + c * Ho * Wo + y * Wo;
            for (std::size_t xo = 0; xo < Wo; ++xo) {
                orow[xo] = irow[reflect_index(static_cast<std::int64_t>(xo) -
                                                  static_cast<std::int64_t>(r),
                                              static_cast<std::int64_t>(W))];
            }
        }
    }
    Rec rc = link("reflect_pad2d", {&x});
    return finish("reflect_pad2d", rc, {C, Ho, Wo}, std::move(out), [&]() {
        Tape* tape = rc.tape;
        const std::int64_t idx = rc.ids[0];
        return [=](const double* g) {
            double* gx = OpWriter::gbuf(tape, idx, C * H * W);
            for (std::size_t c = 0; c < C; ++c) {
                for (std::size_t y = 0; y < Ho; ++y) {
                    const std::size_t sy = reflect_index(static_cast<std::int64_t>(y) -
                                                             static_cast<std::int64_t>(r),
                                                         static_cast<std::int64_t>(H));
                    const double* grow = g + c * Ho * Wo + y * Wo;
                    double* gxrow = gx + c * H * W + sy * W;
                    for (std::size_t xo = 0; xo < Wo; ++xo) {
                        gxrow[reflect_index(static_cast<std::int64_t>(xo) -
                                                static_cast<std::int64_t>(r),
                                            static_cast<std::int64_t>(W))] += grow[xo];
                    }
                }
            }
        };
    });
}

Tensor l2_normalize(const Tensor& a) {
    require_defined("l2_normalize", a);
    const std::size_t n = a.numel();
    const auto& av = a.data();
    double nsq = 0;
    for (double v : av) nsq += v * v;
    const double norm = std::sqrt(nsq);
    const bool guarded = norm < 1e-12;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = guarded ? av[i] : av[i] / norm;
    Rec r = link("l2_normalize", {&a});
    return finish("l2_normalize", r, a.shape(), std::move(out), [&]() {
        auto sa = OpWriter::st(a);
        Tape* tape = r.tape;
        const std::int64_t ida = r.ids[0];
        return [=](const double* g) {
            if (guarded) return;  // degenerate input passes through with zero gradient
            double* ga = OpWriter::gbuf(tape, ida, n);
            double dot = 0;
            for (std::size_t i = 0; i < n; ++i) dot += sa->data[i] * g[i];
            dot /= nsq;  // (y . g) / norm with y = a / norm
            for (std::size_t i = 0; i < n; ++i) {
                ga[i] += (g[i] - sa->data[i] * dot) / norm;
            }
        };
    });
}

double finite_difference_check(const ScalarFn& f, const Tensor& x0, double eps) {
    Tape tape;
    Tensor x = tape.var(x0);
    Tensor loss = f(tape, x);
    if (loss.numel() != 1) {
        throw ShapeError("finite_difference_check: f must return a scalar");
    }
    std::vector<Tensor> grads = tape.gradient(loss, {x});
    const std::vector<double>& g = grads[0].data();
    const std::size_t n = x0.numel();
    std::vector<double> probe = x0.data();
    double max_rel = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double saved = probe[i];
        probe[i] = saved + eps;
        Tape tp;
        const double fp = f(tp, Tensor::from(x0.shape(), probe)).value();
        probe[i] = saved - eps;
        Tape tm;
        const double fm = f(tm, Tensor::from(x0.shape(), probe)).value();
        probe[i] = saved;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NumericalError("finite_difference_check: non-finite function value");
        }
        const double numeric = (fp - fm) / (2.0 * eps);
        const double rel = std::fabs(g[i] - numeric) / (std::fabs(numeric) + 1e-12);
        if (rel > max_rel) max_rel = rel;
    }
    return max_rel;
}

}  // namespace mpflow::ad
