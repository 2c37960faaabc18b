#include "mpflow/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mpflow::metrics {

namespace {

void check_same_shape(const Image& a, const Image& b, const char* who) {
    if (!same_shape(a, b)) {
        throw ShapeError(std::string(who) + ": shapes differ, " + std::to_string(a.h) + "x" +
                         std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                         std::to_string(b.w));
    }
}

}  // namespace

double psnr(const Image& x, const Image& ref) {
    check_same_shape(x, ref, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double d = x.pix[i] - ref.pix[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.numel());
    if (mse < 1e-10) return 100.0;
    return -10.0 * std::log10(mse);
}

double ssim(const Image& x, const Image& ref) {
    check_same_shape(x, ref, "ssim");
    constexpr std::size_t kWin = 8;
    if (x.h < kWin || x.w < kWin) throw ShapeError("ssim: images must be at least 8x8");
    constexpr double kC1 = 0.01 * 0.01, kC2 = 0.03 * 0.03;

    double weight[kWin * kWin];
    double wsum = 0.0;
    for (std::size_t r = 0; r < kWin; ++r) {
        for (std::size_t c = 0; c < kWin; ++c) {
            const double dr = static_cast<double>(r) - 3.5, dc = static_cast<double>(c) - 3.5;
            weight[r * kWin + c] = std::exp(-(dr * dr + dc * dc) / (2.0 * 1.5 * 1.5));
            wsum += weight[r * kWin + c];
        }
    }
    for (double& w : weight) w /= wsum;

    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t r0 = 0; r0 + kWin <= x.h; ++r0) {
        for (std::size_t c0 = 0; c0 + kWin <= x.w; ++c0) {
            double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
            for (std::size_t r = 0; r < kWin; ++r) {
                for (std::size_t c = 0; c < kWin; ++c) {
                    const double w = weight[r * kWin + c];
                    const double a = x.pix[(r0 + r) * x.w + c0 + c];
                    const double b = ref.pix[(r0 + r) * x.w + c0 + c];
                    mx += w * a;
                    my += w * b;
                    sxx += w * a * a;
                    syy += w * b * b;
                    sxy += w * a * b;
                }
            }
            sxx -= mx * mx;
            syy -= my * my;
            sxy -= mx * my;
            total += (2.0 * mx * my + kC1) * (2.0 * sxy + kC2) /
                     ((mx * mx + my * my + kC1) * (sxx + syy + kC2));
            ++windows;
        }
    }
    return total / static_cast<double>(windows);
}

double dice(const Image& mask_a, const Image& mask_b) {
    check_same_shape(mask_a, mask_b, "dice");
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < mask_a.numel(); ++i) {
        const double a = mask_a.pix[i], b = mask_b.pix[i];
        if ((a != 0.0 && a != 1.0) || (b != 0.0 && b != 1.0)) {
            throw ShapeError("dice: masks must be binary");
        }
        na += a == 1.0;
        nb += b == 1.0;
        both += a == 1.0 && b == 1.0;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

Image threshold_segment(const Image& x, double lo, double hi) {
    if (lo >= hi) throw ConfigError("threshold_segment: need lo < hi");
    const std::size_t h = x.h, w = x.w;
    Image band(h, w, 0.0, "mask");
    for (std::size_t i = 0; i < x.numel(); ++i) {
        band.pix[i] = x.pix[i] >= lo && x.pix[i] <= hi ? 1.0 : 0.0;
    }
    // Opening: erode then dilate, 3x3 neighborhoods clipped at borders.
    Image eroded(h, w, 0.0, "mask");
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            bool all = true;
            for (long dr = -1; dr <= 1 && all; ++dr) {
                for (long dc = -1; dc <= 1 && all; ++dc) {
                    const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) {
                        continue;
                    }
                    if (band.pix[rr * w + cc] == 0.0) all = false;
                }
            }
            eroded.pix[r * w + c] = all ? 1.0 : 0.0;
        }
    }
    Image out(h, w, 0.0, "mask");
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            bool any = false;
            for (long dr = -1; dr <= 1 && !any; ++dr) {
                for (long dc = -1; dc <= 1 && !any; ++dc) {
                    const long rr = static_cast<long>(r) + dr, cc = static_cast<long>(c) + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) {
                        continue;
                    }
                    if (eroded.pix[rr * w + cc] == 1.0) any = true;
                }
            }
            out.pix[r * w + c] = any ? 1.0 : 0.0;
        }
    }
    return out;
}

double feature_hallucination_score(const pamri::EncoderPair& enc, const Image& x,
                                   const Image& ref, std::size_t patch) {
    check_same_shape(x, ref, "feature_hallucination_score");
    if (patch == 0 || x.h % patch != 0 || x.w % patch != 0) {
        throw ShapeError("feature_hallucination_score: canvas does not tile by " +
                         std::to_string(patch));
    }
    constexpr double kBeta = 4.0;
    std::vector<double> errs;
    for (std::size_t r = 0; r < x.h; r += patch) {
        for (std::size_t c = 0; c < x.w; c += patch) {
            Image tx(patch, patch, 0.0, x.modality), tr(patch, patch, 0.0, ref.modality);
            for (std::size_t rr = 0; rr < patch; ++rr) {
                for (std::size_t cc = 0; cc < patch; ++cc) {
                    tx.pix[rr * patch + cc] = x.pix[(r + rr) * x.w + c + cc];
                    tr.pix[rr * patch + cc] = ref.pix[(r + rr) * x.w + c + cc];
                }
            }
            ad::Tensor ex = enc.phi.embed(tx), er = enc.phi.embed(tr);
            double e = 0.0;
            for (std::size_t i = 0; i < ex.numel(); ++i) {
                const double d = ex[i] - er[i];
                e += d * d;
            }
            errs.push_back(e);
        }
    }
    double wsum = 0.0, score = 0.0;
    for (double e : errs) wsum += std::exp(kBeta * e);
    for (double e : errs) score += std::exp(kBeta * e) / wsum * e;
    return score;
}

// ---- report ----

namespace {

Aggregate aggregate_of(const std::vector<double>& vals) {
    Aggregate a;
    a.n = vals.size();
    if (a.n == 0) return a;
    for (double v : vals) a.mean += v;
    a.mean /= static_cast<double>(a.n);
    for (double v : vals) a.stddev += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(a.stddev / static_cast<double>(a.n));
    return a;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

Aggregate MetricsReport::agg_psnr() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.psnr);
    return aggregate_of(v);
}

Aggregate MetricsReport::agg_ssim() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.ssim);
    return aggregate_of(v);
}

Aggregate MetricsReport::agg_meas_loss() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.meas_loss);
    return aggregate_of(v);
}

Aggregate MetricsReport::agg_dice() const {
    std::vector<double> v;
    for (const auto& r : rows) {
        if (r.has_dice) v.push_back(r.dice);
    }
    return aggregate_of(v);
}

Aggregate MetricsReport::agg_feat_score() const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.feat_score);
    return aggregate_of(v);
}

void MetricsReport::write_csv(const std::string& path, bool force) const {
    io::check_overwrite(path, force);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("metrics: cannot open " + path);
    out << "id,psnr,ssim,meas_loss,dice,feat_score\n";
    for (const auto& r : rows) {
        out << r.id << "," << fmt(r.psnr) << "," << fmt(r.ssim) << "," << fmt(r.meas_loss) << ","
            << (r.has_dice ? fmt(r.dice) : "") << "," << fmt(r.feat_score) << "\n";
    }
    if (!out) throw IoError("metrics: write failed for " + path);
}

MetricsReport MetricsReport::read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("metrics: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "id,psnr,ssim,meas_loss,dice,feat_score") {
        throw IoError("metrics: bad header in " + path);
    }
    MetricsReport rep;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (line.back() == ',') fields.push_back("");
        if (fields.size() != 6) {
            throw IoError("metrics: line " + std::to_string(lineno) + " has " +
                          std::to_string(fields.size()) + " fields, want 6");
        }
        MetricsRow r;
        r.id = fields[0];
        r.psnr = std::stod(fields[1]);
        r.ssim = std::stod(fields[2]);
        r.meas_loss = std::stod(fields[3]);
        r.has_dice = !fields[4].empty();
        if (r.has_dice) r.dice = std::stod(fields[4]);
        r.feat_score = std::stod(fields[5]);
        rep.rows.push_back(std::move(r));
    }
    return rep;
}

}  // namespace mpflow::metrics
