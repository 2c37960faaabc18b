#pragma once

// Forward degradation operators F, their exact adjoints, the additive
// Gaussian noise model, and the unitary 2-D DFT used by the k-space
// task. Complex grids are stored as separate real/imag planes so the
// autodiff engine stays real-valued.
//
// Grid sizes are restricted to powers of two, which keeps the transform
// radix-2 and block downsampling exact.

#include <cstdint>
#include <vector>

#include "mpflow/image.hpp"
#include "mpflow/rng.hpp"
#include "mpflow/tensor.hpp"

namespace mpflow::op {

struct Measurement {
    std::size_t h = 0, w = 0;
    std::vector<double> re;
    std::vector<double> im;  // empty for real-valued measurements
    double noise_sigma = 0.0;

    bool is_complex() const { return !im.empty(); }
    std::size_t numel() const { return h * w; }
};

struct ForwardOperator {
    enum class Kind { downsample, blur, kspace };

    Kind kind = Kind::downsample;
    std::size_t h = 0, w = 0;  // input shape
    std::size_t factor = 2;    // downsample
    double sigma = 1.0;        // blur
    std::size_t radius = 2;    // blur kernel half-width
    Image mask;                // kspace, {0,1} values, shape (h,w)

    static ForwardOperator downsample(std::size_t h, std::size_t w, std::size_t factor);
    static ForwardOperator gaussian_blur(std::size_t h, std::size_t w, double sigma,
                                         std::size_t radius);
    static ForwardOperator kspace(Image mask);

    // Output dims of the real/imag planes.
    std::size_t out_h() const { return kind == Kind::downsample ? h / factor : h; }
    std::size_t out_w() const { return kind == Kind::downsample ? w / factor : w; }
};

Measurement apply(const ForwardOperator& op, const Image& x);
Image adjoint(const ForwardOperator& op, const Measurement& m);

// Differentiable forward application on a tape-linked [H,W] tensor.
// Matches apply() within float rounding; im is undefined for real ops.
struct TapeMeasurement {
    ad::Tensor re;
    ad::Tensor im;
};
TapeMeasurement apply_on_tape(const ForwardOperator& op, const ad::Tensor& x);

// Unitary DFT, 1/sqrt(HW) both directions; power-of-two H and W.
void dft2(const std::vector<double>& re_in, const std::vector<double>& im_in, std::size_t h,
          std::size_t w, std::vector<double>& re_out, std::vector<double>& im_out);
void idft2(const std::vector<double>& re_in, const std::vector<double>& im_in, std::size_t h,
           std::size_t w, std::vector<double>& re_out, std::vector<double>& im_out);

// Column sampling mask: fully kept center band of ceil(center_fraction*W)
// columns plus i.i.d. columns keeping the expected total at W/acceleration.
Image make_mask(std::size_t h, std::size_t w, double acceleration, double center_fraction,
                std::uint64_t seed);

Measurement add_noise(const Measurement& m, double sigma, std::uint64_t seed);

// Nonzero x with apply(op, x) = 0. Exact for downsample (zero-mean block
// pattern) and kspace (killed-frequency cosine); blur has no finite null
// space and throws.
Image null_space_witness(const ForwardOperator& op);

// Dense matrix of the operator on flattened images (rows: measurement
// components, re stacked above im for complex ops). Oracle/test plumbing.
std::vector<double> operator_matrix(const ForwardOperator& op, std::size_t& rows_out,
                                    std::size_t& cols_out);

}  // namespace mpflow::op
