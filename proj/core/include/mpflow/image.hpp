#pragma once

// 2-D real-valued grid with a modality tag: the currency every module
// trades in. File container: magic "MPIMG", version u32 LE, H and W as
// u64 LE, then f64 LE pixels row-major. PGM export maps [0,1] linearly
// to [0,255] for eyeballing.

#include <cstdint>
#include <string>
#include <vector>

#include "mpflow/common.hpp"
#include "mpflow/tensor.hpp"

namespace mpflow {

struct Image {
    std::size_t h = 0, w = 0;
    std::string modality;  // freeform tag ("target", "aux", "mask", ...)
    std::vector<double> pix;

    Image() = default;
    Image(std::size_t h_, std::size_t w_, double fill = 0.0, std::string tag = "")
        : h(h_), w(w_), modality(std::move(tag)), pix(h_ * w_, fill) {}

    double& at(std::size_t y, std::size_t x) { return pix[y * w + x]; }
    double at(std::size_t y, std::size_t x) const { return pix[y * w + x]; }
    std::size_t numel() const { return h * w; }

    ad::Tensor tensor() const { return ad::Tensor::from({h, w}, pix); }
    static Image from_tensor(const ad::Tensor& t, std::string tag = "");
};

bool same_shape(const Image& a, const Image& b);

namespace io {

inline constexpr std::uint32_t kImageVersion = 1;

// Throws IoError when path exists and force is not set.
void check_overwrite(const std::string& path, bool force);

// Refuses to overwrite an existing file unless force is set.
void save_image(const std::string& path, const Image& img, bool force = false);
Image load_image(const std::string& path);
void save_pgm(const std::string& path, const Image& img, bool force = false);

}  // namespace io
}  // namespace mpflow
