#pragma once

// Reconstruction-quality metrics plus the two lesion-focused ones:
// threshold segmentation into Dice (phantom lesions live in a reserved
// intensity band, so thresholding is an exact segmenter on ground
// truth) and an encoder-feature hallucination score standing in for a
// pretrained perceptual metric. For psnr and
// feature_hallucination_score the second argument is the reference.

#include <string>
#include <vector>

#include "mpflow/image.hpp"
#include "mpflow/pamri.hpp"

namespace mpflow::metrics {

// 10*log10(1/MSE) against a unit dynamic range; capped at 100 dB when
// MSE < 1e-10.
double psnr(const Image& x, const Image& ref);

// Single-scale SSIM: 8x8 sliding windows, stride 1, Gaussian weights
// sigma = 1.5, C1 = 0.01^2, C2 = 0.03^2 on range 1.0, mean over
// windows.
double ssim(const Image& x, const Image& ref);

// 2|A&B|/(|A|+|B|); inputs must be strictly {0,1}-valued. Both empty
// -> 1 by convention.
double dice(const Image& mask_a, const Image& mask_b);

// Pixels inside [lo, hi], then a 3x3 morphological opening (border
// neighborhoods clipped) to kill speckle.
Image threshold_segment(const Image& x, double lo, double hi);

// Exponentially weighted mean over non-overlapping patch tiles of
// |phi(tile(x)) - phi(tile(ref))|^2, weights proportional to
// exp(beta * tile_error) with beta = 4, so one bad tile dominates.
double feature_hallucination_score(const pamri::EncoderPair& enc, const Image& x,
                                   const Image& ref, std::size_t patch = 32);

struct MetricsRow {
    std::string id;
    double psnr = 0.0;
    double ssim = 0.0;
    double meas_loss = 0.0;
    double dice = 0.0;
    bool has_dice = false;
    double feat_score = 0.0;
};

struct Aggregate {
    std::size_t n = 0;
    double mean = 0.0;
    double stddev = 0.0;  // population
};

// Per-image rows are the source of truth; aggregates are always
// recomputed from them. CSV columns: id,psnr,ssim,meas_loss,dice,
// feat_score (dice empty when absent).
struct MetricsReport {
    std::vector<MetricsRow> rows;

    Aggregate agg_psnr() const;
    Aggregate agg_ssim() const;
    Aggregate agg_meas_loss() const;
    Aggregate agg_dice() const;  // rows without dice are skipped
    Aggregate agg_feat_score() const;

    void write_csv(const std::string& path, bool force) const;
    static MetricsReport read_csv(const std::string& path);
};

}  // namespace mpflow::metrics
