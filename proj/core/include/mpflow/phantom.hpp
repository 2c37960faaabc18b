#pragma once

// Paired multi-contrast ellipse phantoms: one anatomy rendered twice
// ("target", T2-like; "aux", T1-like) plus an exact lesion mask.
//
// Rendering rules: normal tissue is 2x2 supersampled; lesion ellipses
// are rendered hard at pixel centers (no anti-aliasing) so the mask is
// byte-exact against the rendered target and threshold segmentation in
// a reserved intensity band recovers it exactly. Layering is
// last-drawn-wins at each sample point.

#include <cstdint>
#include <vector>

#include "mpflow/image.hpp"
#include "mpflow/rng.hpp"

namespace mpflow::phantom {

struct Ellipse {
    double cx = 0.5, cy = 0.5;  // center, unit canvas coordinates
    double ax = 0.1, ay = 0.1;  // semi-axes, unit canvas
    double rot = 0.0;           // radians
    double intensity_target = 0.5;
    double intensity_aux = 0.5;
    bool is_lesion = false;
};

struct PhantomSpec {
    std::size_t h = 64, w = 64;
    std::vector<Ellipse> ellipses;
    double bg_target = 0.05, bg_aux = 0.15;
    std::uint64_t seed = 0;
};

struct ImagePair {
    Image target, aux, lesion_mask;
};

// Intensity band reserved for lesions in the target modality; nothing
// else (including anti-aliased halos) can render into it.
inline constexpr double kLesionBandLo = 0.9;
inline constexpr double kLesionIntensityLo = 0.97;

ImagePair render(const PhantomSpec& spec);

// Randomized specs: 3-8 tissue ellipses with per-modality intensities
// from disjoint contrast ranges, plus at most one lesion (appended last,
// probability lesion_prob). Bit-reproducible from seed.
std::vector<ImagePair> sample_dataset(std::size_t n, std::size_t h, std::size_t w,
                                      double lesion_prob, std::uint64_t seed);

}  // namespace mpflow::phantom
