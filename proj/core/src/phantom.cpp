#include "mpflow/phantom.hpp"

#include <algorithm>
#include <cmath>

namespace mpflow::phantom {

namespace {

bool inside(const Ellipse& e, double u, double v) {
    const double dx = u - e.cx;
    const double dy = v - e.cy;
    const double c = std::cos(e.rot), s = std::sin(e.rot);
    const double rx = c * dx + s * dy;
    const double ry = -s * dx + c * dy;
    const double q = (rx * rx) / (e.ax * e.ax) + (ry * ry) / (e.ay * e.ay);
    return q <= 1.0;
}

// Last-drawn-wins: index of the topmost ellipse containing (u,v), or -1.
int top_ellipse(const std::vector<Ellipse>& es, double u, double v) {
    for (int i = static_cast<int>(es.size()) - 1; i >= 0; --i) {
        if (inside(es[static_cast<std::size_t>(i)], u, v)) return i;
    }
    return -1;
}

}  // namespace

ImagePair render(const PhantomSpec& spec) {
    if (spec.h < 16 || spec.w < 16) {
        throw ShapeError("render: canvas must be at least 16x16, got " + std::to_string(spec.h) +
                         "x" + std::to_string(spec.w));
    }
    for (const Ellipse& e : spec.ellipses) {
        if (e.ax <= 0.0 || e.ay <= 0.0) {
            throw ShapeError("render: zero-area ellipse (semi-axes must be positive)");
        }
    }
    ImagePair pair{Image(spec.h, spec.w, 0.0, "target"), Image(spec.h, spec.w, 0.0, "aux"),
                   Image(spec.h, spec.w, 0.0, "lesion_mask")};
    // 2x2 supersampling offsets within a pixel.
    static constexpr double kOff[2] = {-0.25, 0.25};
    for (std::size_t y = 0; y < spec.h; ++y) {
        for (std::size_t x = 0; x < spec.w; ++x) {
            double tsum = 0.0, asum = 0.0;
            for (double oy : kOff) {
                for (double ox : kOff) {
                    const double u = (static_cast<double>(x) + 0.5 + ox) / static_cast<double>(spec.w);
                    const double v = (static_cast<double>(y) + 0.5 + oy) / static_cast<double>(spec.h);
                    const int idx = top_ellipse(spec.ellipses, u, v);
                    if (idx < 0) {
                        tsum += spec.bg_target;
                        asum += spec.bg_aux;
                    } else {
                        const Ellipse& e = spec.ellipses[static_cast<std::size_t>(idx)];
                        tsum += e.intensity_target;
                        asum += e.intensity_aux;
                    }
                }
            }
            double tval = tsum * 0.25;
            double aval = asum * 0.25;
            // Hard lesion pass: the pixel-center winner decides lesion
            // membership and, for lesions, overwrites the blended value.
            const double uc = (static_cast<double>(x) + 0.5) / static_cast<double>(spec.w);
            const double vc = (static_cast<double>(y) + 0.5) / static_cast<double>(spec.h);
            const int center_idx = top_ellipse(spec.ellipses, uc, vc);
            if (center_idx >= 0 && spec.ellipses[static_cast<std::size_t>(center_idx)].is_lesion) {
                const Ellipse& e = spec.ellipses[static_cast<std::size_t>(center_idx)];
                tval = e.intensity_target;
                aval = e.intensity_aux;
                pair.lesion_mask.at(y, x) = 1.0;
            }
            pair.target.at(y, x) = std::clamp(tval, 0.0, 1.0);
            pair.aux.at(y, x) = std::clamp(aval, 0.0, 1.0);
        }
    }
    return pair;
}

std::vector<ImagePair> sample_dataset(std::size_t n, std::size_t h, std::size_t w,
                                      double lesion_prob, std::uint64_t seed) {
    if (n < 1) throw ShapeError("sample_dataset: n must be >= 1");
    std::vector<ImagePair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "phantom", i));
        PhantomSpec spec;
        spec.h = h;
        spec.w = w;
        spec.seed = seed;
        spec.bg_target = rng.uniform(0.02, 0.08);
        spec.bg_aux = rng.uniform(0.10, 0.20);
        const std::size_t n_ell = 3 + rng.index(6);
        for (std::size_t k = 0; k < n_ell; ++k) {
            Ellipse e;
            e.cx = rng.uniform(0.22, 0.78);
            e.cy = rng.uniform(0.22, 0.78);
            e.ax = rng.uniform(0.08, 0.30);
            e.ay = rng.uniform(0.08, 0.30);
            e.rot = rng.uniform(0.0, 3.14159265358979323846);
            // Disjoint per-modality contrast ranges: correlation comes
            // from shared geometry only.
            e.intensity_target = rng.uniform(0.20, 0.50);
            e.intensity_aux = rng.uniform(0.45, 0.90);
            spec.ellipses.push_back(e);
        }
        if (rng.uniform() < lesion_prob) {
            Ellipse les;
            les.cx = rng.uniform(0.30, 0.70);
            les.cy = rng.uniform(0.30, 0.70);
            les.ax = rng.uniform(0.10, 0.16);
            les.ay = rng.uniform(0.10, 0.16);
            les.rot = rng.uniform(0.0, 3.14159265358979323846);
            les.intensity_target = rng.uniform(kLesionIntensityLo, 1.0);
            // Nearly isointense with the aux background: the lesion is
            // visible in the target modality only.
            les.intensity_aux = std::clamp(spec.bg_aux + rng.uniform(-0.03, 0.03), 0.0, 1.0);
            les.is_lesion = true;
            spec.ellipses.push_back(les);
        }
        out.push_back(render(spec));
    }
    return out;
}

}  // namespace mpflow::phantom
