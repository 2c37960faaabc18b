#include "mpflow/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace mpflow {

Image Image::from_tensor(const ad::Tensor& t, std::string tag) {
    if (t.shape().size() != 2) {
        throw ShapeError("Image::from_tensor: expected rank-2 tensor, got " + shape_str(t.shape()));
    }
    Image img(t.shape()[0], t.shape()[1], 0.0, std::move(tag));
    img.pix = t.data();
    return img;
}

bool same_shape(const Image& a, const Image& b) { return a.h == b.h && a.w == b.w; }

namespace io {
namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("image: truncated " + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("image: truncated " + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void check_overwrite(const std::string& path, bool force) {
    if (!force && std::filesystem::exists(path)) {
        throw IoError("refusing to overwrite existing file (pass force): " + path);
    }
}

void save_image(const std::string& path, const Image& img, bool force) {
    check_overwrite(path, force);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open image for writing: " + path);
    os.write("MPIMG", 5);
    put_u32(os, kImageVersion);
    put_u64(os, img.h);
    put_u64(os, img.w);
    for (double v : img.pix) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(os, bits);
    }
    if (!os) throw IoError("short write on image: " + path);
}

Image load_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open image: " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, "MPIMG", 5) != 0) {
        throw IoError("not an image file (bad magic): " + path);
    }
    const std::uint32_t version = get_u32(is, "version");
    if (version != kImageVersion) {
        throw IoError("unsupported image version " + std::to_string(version) + ": " + path);
    }
    const std::size_t h = static_cast<std::size_t>(get_u64(is, "height"));
    const std::size_t w = static_cast<std::size_t>(get_u64(is, "width"));
    Image img(h, w);
    for (double& v : img.pix) {
        const std::uint64_t bits = get_u64(is, "pixel");
        std::memcpy(&v, &bits, 8);
    }
    return img;
}

void save_pgm(const std::string& path, const Image& img, bool force) {
    check_overwrite(path, force);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open pgm for writing: " + path);
    os << "P5\n" << img.w << " " << img.h << "\n255\n";
    for (double v : img.pix) {
        const double c = std::clamp(v, 0.0, 1.0);
        os.put(static_cast<char>(static_cast<int>(std::lround(c * 255.0))));
    }
    if (!os) throw IoError("short write on pgm: " + path);
}

}  // namespace io
}  // namespace mpflow
