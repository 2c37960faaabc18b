#include "mpflow/operators.hpp"

#include <cmath>

namespace mpflow::op {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

void require_pow2(std::size_t h, std::size_t w) {
    if (!is_pow2(h) || !is_pow2(w)) {
        throw ShapeError("grid sizes must be powers of two, got " + std::to_string(h) + "x" +
                         std::to_string(w));
    }
}

// reflect-101: -1 -> 1, n -> n-2.
std::size_t reflect(std::int64_t i, std::int64_t n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return static_cast<std::size_t>(i);
}

std::vector<double> gaussian_kernel(double sigma, std::size_t radius) {
    std::vector<double> g(2 * radius + 1);
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double d = static_cast<double>(i) - static_cast<double>(radius);
        g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        s += g[i];
    }
    for (double& v : g) v /= s;
    return g;
}

// In-place radix-2 FFT; no normalization.
void fft_1d(double* re, double* im, std::size_t n, bool inverse) {
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::size_t a = i + k, b = i + k + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

void fft_2d(std::vector<double>& re, std::vector<double>& im, std::size_t h, std::size_t w,
            bool inverse) {
    for (std::size_t y = 0; y < h; ++y) fft_1d(re.data() + y * w, im.data() + y * w, w, inverse);
    std::vector<double> cr(h), ci(h);
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y) {
            cr[y] = re[y * w + x];
            ci[y] = im[y * w + x];
        }
        fft_1d(cr.data(), ci.data(), h, inverse);
        for (std::size_t y = 0; y < h; ++y) {
            re[y * w + x] = cr[y];
            im[y * w + x] = ci[y];
        }
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(h * w));
    for (double& v : re) v *= scale;
    for (double& v : im) v *= scale;
}

// Separable reflect-padded convolution along one axis; exact adjoint below.
void blur_axis(const std::vector<double>& in, std::vector<double>& out, std::size_t h,
               std::size_t w, const std::vector<double>& g, bool vertical) {
    const std::int64_t r = static_cast<std::int64_t>(g.size() / 2);
    out.assign(h * w, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double s = 0.0;
            for (std::int64_t j = -r; j <= r; ++j) {
                const std::size_t sy = vertical ? reflect(static_cast<std::int64_t>(y) + j,
                                                          static_cast<std::int64_t>(h))
                                                : y;
                const std::size_t sx = vertical ? x
                                                : reflect(static_cast<std::int64_t>(x) + j,
                                                          static_cast<std::int64_t>(w));
                s += g[static_cast<std::size_t>(j + r)] * in[sy * w + sx];
            }
            out[y * w + x] = s;
        }
    }
}

void blur_axis_adjoint(const std::vector<double>& in, std::vector<double>& out, std::size_t h,
                       std::size_t w, const std::vector<double>& g, bool vertical) {
    const std::int64_t r = static_cast<std::int64_t>(g.size() / 2);
    out.assign(h * w, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double u = in[y * w + x];
            for (std::int64_t j = -r; j <= r; ++j) {
                const std::size_t sy = vertical ? reflect(static_cast<std::int64_t>(y) + j,
                                                          static_cast<std::int64_t>(h))
                                                : y;
                const std::size_t sx = vertical ? x
                                                : reflect(static_cast<std::int64_t>(x) + j,
                                                          static_cast<std::int64_t>(w));
                out[sy * w + sx] += g[static_cast<std::size_t>(j + r)] * u;
            }
        }
    }
}

// Unitary DFT matrix as separate cos / -sin planes.
void dft_matrix(std::size_t n, std::vector<double>& re, std::vector<double>& im) {
    re.resize(n * n);
    im.resize(n * n);
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (std::size_t u = 0; u < n; ++u) {
        for (std::size_t y = 0; y < n; ++y) {
            const double ang = 2.0 * kPi * static_cast<double>(u * y % n) / static_cast<double>(n);
            re[u * n + y] = std::cos(ang) * scale;
            im[u * n + y] = -std::sin(ang) * scale;
        }
    }
}

}  // namespace

ForwardOperator ForwardOperator::downsample(std::size_t h, std::size_t w, std::size_t factor) {
    require_pow2(h, w);
    if (factor == 0 || h % factor != 0 || w % factor != 0) {
        throw ShapeError("downsample: factor " + std::to_string(factor) + " must divide " +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    ForwardOperator op;
    op.kind = Kind::downsample;
    op.h = h;
    op.w = w;
    op.factor = factor;
    return op;
}

ForwardOperator ForwardOperator::gaussian_blur(std::size_t h, std::size_t w, double sigma,
                                               std::size_t radius) {
    require_pow2(h, w);
    if (sigma <= 0.0) throw ShapeError("gaussian_blur: sigma must be positive");
    if (radius == 0 || radius >= h || radius >= w) {
        throw ShapeError("gaussian_blur: radius " + std::to_string(radius) + " invalid for " +
                         std::to_string(h) + "x" + std::to_string(w));
    }
    ForwardOperator op;
    op.kind = Kind::blur;
    op.h = h;
    op.w = w;
    op.sigma = sigma;
    op.radius = radius;
    return op;
}

ForwardOperator ForwardOperator::kspace(Image mask) {
    require_pow2(mask.h, mask.w);
    for (double v : mask.pix) {
        if (v != 0.0 && v != 1.0) throw ShapeError("kspace: mask values must be 0 or 1");
    }
    ForwardOperator op;
    op.kind = Kind::kspace;
    op.h = mask.h;
    op.w = mask.w;
    op.mask = std::move(mask);
    return op;
}

Measurement apply(const ForwardOperator& op, const Image& x) {
    if (x.h != op.h || x.w != op.w) {
        throw ShapeError("apply: image " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                         " does not match operator input " + std::to_string(op.h) + "x" +
                         std::to_string(op.w));
    }
    Measurement m;
    m.h = op.out_h();
    m.w = op.out_w();
    switch (op.kind) {
        case ForwardOperator::Kind::downsample: {
            const std::size_t k = op.factor;
            const double inv = 1.0 / static_cast<double>(k * k);
            m.re.assign(m.h * m.w, 0.0);
            for (std::size_t y = 0; y < op.h; ++y) {
                for (std::size_t xx = 0; xx < op.w; ++xx) {
                    m.re[(y / k) * m.w + xx / k] += x.pix[y * op.w + xx] * inv;
                }
            }
            break;
        }
        case ForwardOperator::Kind::blur: {
            const std::vector<double> g = gaussian_kernel(op.sigma, op.radius);
            std::vector<double> tmp;
            blur_axis(x.pix, tmp, op.h, op.w, g, false);
            blur_axis(tmp, m.re, op.h, op.w, g, true);
            break;
        }
        case ForwardOperator::Kind::kspace: {
            m.re = x.pix;
            m.im.assign(x.numel(), 0.0);
            fft_2d(m.re, m.im, op.h, op.w, false);
            for (std::size_t i = 0; i < m.re.size(); ++i) {
                m.re[i] *= op.mask.pix[i];
                m.im[i] *= op.mask.pix[i];
            }
            break;
        }
    }
    return m;
}

Image adjoint(const ForwardOperator& op, const Measurement& m) {
    if (m.h != op.out_h() || m.w != op.out_w()) {
        throw ShapeError("adjoint: measurement " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                         " does not match operator output " + std::to_string(op.out_h()) + "x" +
                         std::to_string(op.out_w()));
    }
    Image out(op.h, op.w);
    switch (op.kind) {
        case ForwardOperator::Kind::downsample: {
            const std::size_t k = op.factor;
            const double inv = 1.0 / static_cast<double>(k * k);
            for (std::size_t y = 0; y < op.h; ++y) {
                for (std::size_t xx = 0; xx < op.w; ++xx) {
                    out.pix[y * op.w + xx] = m.re[(y / k) * m.w + xx / k] * inv;
                }
            }
            break;
        }
        case ForwardOperator::Kind::blur: {
            const std::vector<double> g = gaussian_kernel(op.sigma, op.radius);
            std::vector<double> tmp;
            blur_axis_adjoint(m.re, tmp, op.h, op.w, g, true);
            blur_axis_adjoint(tmp, out.pix, op.h, op.w, g, false);
            break;
        }
        case ForwardOperator::Kind::kspace: {
            if (!m.is_complex()) throw ShapeError("adjoint: k-space measurement must be complex");
            std::vector<double> re(m.re), im(m.im);
            for (std::size_t i = 0; i < re.size(); ++i) {
                re[i] *= op.mask.pix[i];
                im[i] *= op.mask.pix[i];
            }
            fft_2d(re, im, op.h, op.w, true);
            out.pix = std::move(re);
            break;
        }
    }
    return out;
}

TapeMeasurement apply_on_tape(const ForwardOperator& op, const ad::Tensor& x) {
    if (x.shape() != ad::Shape{op.h, op.w}) {
        throw ShapeError("apply_on_tape: tensor " + shape_str(x.shape()) +
                         " does not match operator input " + std::to_string(op.h) + "x" +
                         std::to_string(op.w));
    }
    TapeMeasurement out;
    switch (op.kind) {
        case ForwardOperator::Kind::downsample: {
            const std::size_t k = op.factor;
            ad::Tensor kernel = ad::Tensor::full({1, 1, k, k}, 1.0 / static_cast<double>(k * k));
            ad::Tensor y = ad::conv2d(ad::reshape(x, {1, op.h, op.w}), kernel, ad::Tensor(), k, 0);
            out.re = ad::reshape(y, {op.h / k, op.w / k});
            break;
        }
        case ForwardOperator::Kind::blur: {
            const std::vector<double> g = gaussian_kernel(op.sigma, op.radius);
            const std::size_t ksz = g.size();
            std::vector<double> kk(ksz * ksz);
            for (std::size_t i = 0; i < ksz; ++i) {
                for (std::size_t j = 0; j < ksz; ++j) kk[i * ksz + j] = g[i] * g[j];
            }
            ad::Tensor kernel = ad::Tensor::from({1, 1, ksz, ksz}, std::move(kk));
            ad::Tensor padded = ad::reflect_pad2d(ad::reshape(x, {1, op.h, op.w}), op.radius);
            ad::Tensor y = ad::conv2d(padded, kernel, ad::Tensor(), 1, 0);
            out.re = ad::reshape(y, {op.h, op.w});
            break;
        }
        case ForwardOperator::Kind::kspace: {
            std::vector<double> ar, ai, cr, ci;
            dft_matrix(op.h, ar, ai);
            dft_matrix(op.w, cr, ci);
            ad::Tensor A = ad::Tensor::from({op.h, op.h}, std::move(ar));
            ad::Tensor B = ad::Tensor::from({op.h, op.h}, std::move(ai));
            ad::Tensor C = ad::Tensor::from({op.w, op.w}, std::move(cr));
            ad::Tensor D = ad::Tensor::from({op.w, op.w}, std::move(ci));
            ad::Tensor AX = ad::matmul(A, x);
            ad::Tensor BX = ad::matmul(B, x);
            // (A + iB) X (C + iD), with the DFT matrices symmetric.
            ad::Tensor re = ad::sub(ad::matmul(AX, C), ad::matmul(BX, D));
            ad::Tensor im = ad::add(ad::matmul(AX, D), ad::matmul(BX, C));
            ad::Tensor mask = ad::Tensor::from({op.h, op.w}, op.mask.pix);
            out.re = ad::mul(re, mask);
            out.im = ad::mul(im, mask);
            break;
        }
    }
    return out;
}

void dft2(const std::vector<double>& re_in, const std::vector<double>& im_in, std::size_t h,
          std::size_t w, std::vector<double>& re_out, std::vector<double>& im_out) {
    require_pow2(h, w);
    if (re_in.size() != h * w || (!im_in.empty() && im_in.size() != h * w)) {
        throw ShapeError("dft2: plane size does not match " + std::to_string(h) + "x" +
                         std::to_string(w));
    }
    re_out = re_in;
    im_out = im_in.empty() ? std::vector<double>(h * w, 0.0) : im_in;
    fft_2d(re_out, im_out, h, w, false);
}

void idft2(const std::vector<double>& re_in, const std::vector<double>& im_in, std::size_t h,
           std::size_t w, std::vector<double>& re_out, std::vector<double>& im_out) {
    require_pow2(h, w);
    if (re_in.size() != h * w || (!im_in.empty() && im_in.size() != h * w)) {
        throw ShapeError("idft2: plane size does not match " + std::to_string(h) + "x" +
                         std::to_string(w));
    }
    re_out = re_in;
    im_out = im_in.empty() ? std::vector<double>(h * w, 0.0) : im_in;
    fft_2d(re_out, im_out, h, w, true);
}

Image make_mask(std::size_t h, std::size_t w, double acceleration, double center_fraction,
                std::uint64_t seed) {
    require_pow2(h, w);
    if (acceleration < 1.0) throw ShapeError("make_mask: acceleration must be >= 1");
    if (center_fraction < 0.0 || center_fraction > 1.0) {
        throw ShapeError("make_mask: center_fraction must be in [0,1]");
    }
    if (center_fraction > 1.0 / acceleration) {
        throw ConfigError("make_mask: center_fraction " + std::to_string(center_fraction) +
                          " exceeds sampling budget 1/" + std::to_string(acceleration));
    }
    Image mask(h, w, 0.0, "mask");
    std::vector<double> cols(w, 0.0);
    if (acceleration == 1.0) {
        cols.assign(w, 1.0);
    } else {
        const std::size_t c =
            static_cast<std::size_t>(std::ceil(center_fraction * static_cast<double>(w)));
        const std::size_t start = (w - c) / 2;
        for (std::size_t i = 0; i < c; ++i) cols[start + i] = 1.0;
        const double budget = static_cast<double>(w) / acceleration - static_cast<double>(c);
        const double p = std::clamp(budget / static_cast<double>(w - c), 0.0, 1.0);
        Rng rng(derive_seed(seed, "kmask"));
        for (std::size_t x = 0; x < w; ++x) {
            if (cols[x] == 0.0 && rng.bernoulli(p)) cols[x] = 1.0;
        }
    }
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) mask.at(y, x) = cols[x];
    }
    return mask;
}

Measurement add_noise(const Measurement& m, double sigma, std::uint64_t seed) {
    if (sigma < 0.0) throw ShapeError("add_noise: sigma must be >= 0");
    Measurement out = m;
    out.noise_sigma = sigma;
    if (sigma == 0.0) return out;
    Rng rng(derive_seed(seed, "meas-noise"));
    for (double& v : out.re) v += rng.normal(0.0, sigma);
    for (double& v : out.im) v += rng.normal(0.0, sigma);
    return out;
}

Image null_space_witness(const ForwardOperator& op) {
    Image x(op.h, op.w);
    switch (op.kind) {
        case ForwardOperator::Kind::downsample: {
            if (op.factor < 2) throw NumericalError("null_space_witness: factor 1 has no null space");
            for (std::size_t y = 0; y < op.h; ++y) {
                for (std::size_t xx = 0; xx < op.w; ++xx) {
                    const std::size_t cx = xx % op.factor;
                    x.at(y, xx) = cx == 0 ? 1.0 : (cx == 1 ? -1.0 : 0.0);
                }
            }
            return x;
        }
        case ForwardOperator::Kind::kspace: {
            // A killed column whose mirror column is also killed carries a
            // real cosine the mask annihilates.
            const auto col = [&](std::size_t v) { return op.mask.at(0, v); };
            std::size_t v0 = op.w;
            if (col(op.w / 2) == 0.0) {
                v0 = op.w / 2;
            } else {
                for (std::size_t v = 1; v < op.w / 2; ++v) {
                    if (col(v) == 0.0 && col(op.w - v) == 0.0) {
                        v0 = v;
                        break;
                    }
                }
            }
            if (v0 == op.w) {
                throw NumericalError("null_space_witness: mask keeps every mirror column pair");
            }
            for (std::size_t y = 0; y < op.h; ++y) {
                for (std::size_t xx = 0; xx < op.w; ++xx) {
                    x.at(y, xx) = std::cos(2.0 * kPi * static_cast<double>(v0) *
                                           static_cast<double>(xx) / static_cast<double>(op.w));
                }
            }
            return x;
        }
        case ForwardOperator::Kind::blur:
            throw NumericalError("null_space_witness: gaussian blur has no finite null space");
    }
    throw NumericalError("null_space_witness: unreachable");
}

std::vector<double> operator_matrix(const ForwardOperator& op, std::size_t& rows_out,
                                    std::size_t& cols_out) {
    const std::size_t d = op.h * op.w;
    const std::size_t planes = op.kind == ForwardOperator::Kind::kspace ? 2 : 1;
    const std::size_t m = op.out_h() * op.out_w() * planes;
    std::vector<double> A(m * d, 0.0);
    Image basis(op.h, op.w);
    for (std::size_t j = 0; j < d; ++j) {
        basis.pix.assign(d, 0.0);
        basis.pix[j] = 1.0;
        const Measurement y = apply(op, basis);
        for (std::size_t i = 0; i < y.re.size(); ++i) A[i * d + j] = y.re[i];
        if (planes == 2) {
            const std::size_t off = y.re.size();
            for (std::size_t i = 0; i < y.im.size(); ++i) A[(off + i) * d + j] = y.im[i];
        }
    }
    rows_out = m;
    cols_out = d;
    return A;
}

}  // namespace mpflow::op
