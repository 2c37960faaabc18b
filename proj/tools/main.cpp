// mpflow command-line driver.
//
// Subcommands cover the full pipeline on one flat key=value config:
//   gen-data | train-prior | pretrain-pamri | reconstruct | evaluate
// plus verify-oracle, which exercises the analytic oracles against their
// Monte Carlo and brute-force counterparts.
//
// Every run re-serializes the configuration it actually used (defaults
// filled in) to <out_dir>/config/<subcommand>.cfg; re-running a
// subcommand from that copy reproduces its artifacts bit for bit.
// Artifacts are never appended to: an existing file is an error unless
// --force is given.
//
// Exit codes: 0 success, 1 usage or I/O error, 2 verification failure,
// 3 numerical failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mpflow/checkpoint.hpp"
#include "mpflow/common.hpp"
#include "mpflow/config.hpp"
#include "mpflow/flow.hpp"
#include "mpflow/guidance.hpp"
#include "mpflow/image.hpp"
#include "mpflow/metrics.hpp"
#include "mpflow/operators.hpp"
#include "mpflow/oracle.hpp"
#include "mpflow/pamri.hpp"
#include "mpflow/phantom.hpp"
#include "mpflow/rng.hpp"
#include "mpflow/threading.hpp"

namespace fs = std::filesystem;
using namespace mpflow;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitVerify = 2;
constexpr int kExitNumeric = 3;

std::string zpad3(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%03zu", i);
    return buf;
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// Config readers that write the applied default back into the map, so
// the resolved copy lists every effective value.
std::string cfg_str(Config& c, const std::string& key, const std::string& dflt) {
    if (!c.has(key)) c.set(key, dflt);
    return c.get_str(key);
}

std::uint64_t cfg_u64(Config& c, const std::string& key, std::uint64_t dflt) {
    if (!c.has(key)) c.set(key, std::to_string(dflt));
    return c.get_u64(key);
}

double cfg_f64(Config& c, const std::string& key, double dflt) {
    if (!c.has(key)) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", dflt);
        c.set(key, buf);
    }
    return c.get_f64(key);
}

bool cfg_bool(Config& c, const std::string& key, bool dflt) {
    if (!c.has(key)) c.set(key, dflt ? "true" : "false");
    return c.get_bool(key, dflt);
}

struct RunPaths {
    fs::path out;

    fs::path config_dir() const { return out / "config"; }
    fs::path data_dir() const { return out / "data"; }
    fs::path train_dir() const { return out / "data" / "train"; }
    fs::path test_dir() const { return out / "data" / "test"; }
    fs::path pamri_data_dir() const { return out / "data" / "pamri"; }
    fs::path prior_dir() const { return out / "prior"; }
    fs::path prior_ckpt() const { return prior_dir() / "prior.mpfw"; }
    fs::path pamri_dir() const { return out / "pamri"; }
    fs::path encoders_ckpt() const { return pamri_dir() / "encoders.mpfw"; }
    fs::path decoders_ckpt() const { return pamri_dir() / "decoders.mpfw"; }
    fs::path recon_dir() const { return out / "recon"; }
    fs::path arm_dir(const std::string& arm) const { return recon_dir() / arm; }
    fs::path metrics_dir() const { return out / "metrics"; }
    fs::path panels_dir() const { return out / "panels"; }
};

RunPaths paths_from(Config& cfg) {
    RunPaths p;
    p.out = cfg_str(cfg, "out_dir", "run");
    return p;
}

void write_resolved(const Config& cfg, const RunPaths& p, const std::string& cmd, bool force) {
    fs::create_directories(p.config_dir());
    cfg.write_file((p.config_dir() / (cmd + ".cfg")).string(), force);
}

op::ForwardOperator make_operator(Config& cfg, std::size_t h, std::size_t w) {
    const std::string task = cfg_str(cfg, "task", "sr");
    if (task == "sr") {
        return op::ForwardOperator::downsample(h, w, cfg_u64(cfg, "degrade.factor", 4));
    }
    if (task == "blur") {
        return op::ForwardOperator::gaussian_blur(h, w, cfg_f64(cfg, "degrade.blur_sigma", 1.5),
                                                  cfg_u64(cfg, "degrade.blur_radius", 2));
    }
    if (task == "kspace") {
        const double accel = cfg_f64(cfg, "degrade.accel", 4.0);
        const double center = cfg_f64(cfg, "degrade.center_frac", 0.125);
        const std::uint64_t seed = cfg.get_u64("seed", 0);
        return op::ForwardOperator::kspace(
            op::make_mask(h, w, accel, center, derive_seed(seed, "mask")));
    }
    throw ConfigError("task must be sr, blur or kspace, got '" + task + "'");
}

// ---- dataset files ----

bool any_nonzero(const Image& m) {
    for (double v : m.pix)
        if (v != 0.0) return true;
    return false;
}

void write_dataset(const fs::path& dir, const std::vector<phantom::ImagePair>& ds, bool force) {
    fs::create_directories(dir);
    const fs::path manifest = dir / "manifest.csv";
    io::check_overwrite(manifest.string(), force);
    std::ofstream os(manifest, std::ios::trunc);
    if (!os) throw IoError("cannot write " + manifest.string());
    os << "id,target,aux,mask,has_lesion\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string id = zpad3(i);
        const std::string tar = "target_" + id + ".mpimg";
        const std::string aux = "aux_" + id + ".mpimg";
        const std::string mask = "mask_" + id + ".mpimg";
        io::save_image((dir / tar).string(), ds[i].target, force);
        io::save_image((dir / aux).string(), ds[i].aux, force);
        io::save_image((dir / mask).string(), ds[i].lesion_mask, force);
        os << id << "," << tar << "," << aux << "," << mask << ","
           << (any_nonzero(ds[i].lesion_mask) ? 1 : 0) << "\n";
    }
}

struct DatasetEntry {
    std::string id;
    phantom::ImagePair pair;
    bool has_lesion = false;
};

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<DatasetEntry> read_dataset(const fs::path& dir) {
    const fs::path manifest = dir / "manifest.csv";
    std::ifstream is(manifest);
    if (!is) throw IoError("cannot open " + manifest.string() + " (run gen-data first)");
    std::string line;
    if (!std::getline(is, line) || split_csv(line) != std::vector<std::string>{
            "id", "target", "aux", "mask", "has_lesion"}) {
        throw IoError("bad manifest header in " + manifest.string());
    }
    std::vector<DatasetEntry> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split_csv(line);
        if (f.size() != 5) throw IoError("bad manifest row in " + manifest.string());
        DatasetEntry e;
        e.id = f[0];
        e.pair.target = io::load_image((dir / f[1]).string());
        e.pair.aux = io::load_image((dir / f[2]).string());
        e.pair.lesion_mask = io::load_image((dir / f[3]).string());
        e.has_lesion = f[4] == "1";
        out.push_back(std::move(e));
    }
    if (out.empty()) throw IoError("empty manifest " + manifest.string());
    return out;
}

// ---- subcommands ----

int run_gen_data(Config& cfg, bool force) {
    RunPaths p = paths_from(cfg);
    const std::uint64_t seed = cfg_u64(cfg, "seed", 0);
    const std::size_t h = cfg_u64(cfg, "data.h", 32);
    const std::size_t w = cfg_u64(cfg, "data.w", 32);
    const std::size_t n = cfg_u64(cfg, "data.n", 40);
    const std::size_t test_n = cfg_u64(cfg, "data.test_n", 16);
    const std::size_t pamri_n = cfg_u64(cfg, "data.pamri_n", 200);
    const std::size_t canvas = cfg_u64(cfg, "data.pamri_canvas", 48);
    const double lesion_prob = cfg_f64(cfg, "data.lesion_prob", 0.5);

    if (fs::exists(p.data_dir()) && !fs::is_empty(p.data_dir()) && !force) {
        throw IoError("output directory " + p.data_dir().string() +
                      " is not empty (use --force to overwrite)");
    }
    write_resolved(cfg, p, "gen-data", force);

    write_dataset(p.train_dir(), phantom::sample_dataset(n, h, w, lesion_prob,
                                                         derive_seed(seed, "data-train")), force);
    write_dataset(p.test_dir(), phantom::sample_dataset(test_n, h, w, lesion_prob,
                                                        derive_seed(seed, "data-test")), force);
    write_dataset(p.pamri_data_dir(),
                  phantom::sample_dataset(pamri_n, canvas, canvas, lesion_prob,
                                          derive_seed(seed, "data-pamri")), force);

    std::cout << "gen-data: " << n << " train + " << test_n << " test pairs (" << h << "x" << w
              << "), " << pamri_n << " pretraining pairs (" << canvas << "x" << canvas << ")\n";
    return kExitOk;
}

int run_train_prior(Config& cfg, bool force) {
    RunPaths p = paths_from(cfg);
    const std::uint64_t seed = cfg_u64(cfg, "seed", 0);
    flow::TrainConfig tc;
    tc.iterations = cfg_u64(cfg, "prior.iterations", 1500);
    tc.batch_size = cfg_u64(cfg, "prior.batch", 8);
    tc.learning_rate = cfg_f64(cfg, "prior.lr", 1e-3);
    tc.seed = derive_seed(seed, "prior-train");
    tc.checkpoint_path = p.prior_ckpt().string();
    tc.log_path = (p.prior_dir() / "train_log.csv").string();
    tc.force = force;
    const std::size_t width = cfg_u64(cfg, "prior.width", 12);

    io::check_overwrite(tc.checkpoint_path, force);
    io::check_overwrite(tc.log_path, force);
    write_resolved(cfg, p, "train-prior", force);
    fs::create_directories(p.prior_dir());

    const auto train = read_dataset(p.train_dir());
    std::vector<Image> images;
    images.reserve(train.size());
    for (const auto& e : train) images.push_back(e.pair.target);

    flow::ConvVelocityNet net(images[0].h, images[0].w, width, derive_seed(seed, "prior-net"));
    const flow::TrainResult r = flow::train_prior(net, images, tc);
    std::cout << "train-prior: " << tc.iterations << " iterations, fm loss "
              << fmt(r.initial_loss) << " -> " << fmt(r.final_loss) << "\n";
    return kExitOk;
}

int run_pretrain_pamri(Config& cfg, bool force) {
    RunPaths p = paths_from(cfg);
    const std::uint64_t seed = cfg_u64(cfg, "seed", 0);
    pamri::SSLConfig sc;
    sc.patch_size = cfg_u64(cfg, "pamri.patch", 32);
    sc.batch = cfg_u64(cfg, "pamri.batch", 16);
    sc.tau_min = cfg_f64(cfg, "pamri.tau_min", 0.05);
    sc.tau_max = cfg_f64(cfg, "pamri.tau_max", 0.5);
    sc.lambda_rec = cfg_f64(cfg, "pamri.lambda_rec", 0.5);
    sc.nmi_bins = cfg_u64(cfg, "pamri.bins", 32);
    sc.jitter = cfg_u64(cfg, "pamri.jitter", 4);
    sc.flip_h = cfg_bool(cfg, "pamri.flip_h", true);
    sc.flip_v = cfg_bool(cfg, "pamri.flip_v", false);
    sc.intensity_lo = cfg_f64(cfg, "pamri.intensity_lo", 0.9);
    sc.intensity_hi = cfg_f64(cfg, "pamri.intensity_hi", 1.1);
    sc.embed_dim = cfg_u64(cfg, "pamri.embed", 64);
    sc.iterations = cfg_u64(cfg, "pamri.iterations", 6000);
    sc.learning_rate = cfg_f64(cfg, "pamri.lr", 1e-3);
    sc.eval_every = cfg_u64(cfg, "pamri.eval_every", 50);
    sc.seed = derive_seed(seed, "pamri-train");
    sc.log_path = (p.pamri_dir() / "train_log.csv").string();
    sc.force = force;

    io::check_overwrite(p.encoders_ckpt().string(), force);
    io::check_overwrite(p.decoders_ckpt().string(), force);
    io::check_overwrite(sc.log_path, force);
    write_resolved(cfg, p, "pretrain-pamri", force);
    fs::create_directories(p.pamri_dir());

    const auto data = read_dataset(p.pamri_data_dir());
    std::vector<phantom::ImagePair> pairs;
    pairs.reserve(data.size());
    for (const auto& e : data) pairs.push_back(e.pair);

    auto [enc, dec] = pamri::pretrain_pamri(pairs, sc);
    enc.save(p.encoders_ckpt().string());
    dec.save(p.decoders_ckpt().string());

    const double acc = pamri::retrieval_accuracy(enc, pairs, std::min<std::size_t>(64, pairs.size()),
                                                 sc.patch_size, derive_seed(seed, "pamri-eval"));
    std::cout << "pretrain-pamri: " << sc.iterations << " iterations, train retrieval "
              << fmt(acc) << "\n";
    return kExitOk;
}

guide::GuidanceConfig arm_guidance(const guide::GuidanceConfig& base, const std::string& arm) {
    guide::GuidanceConfig g = base;
    if (arm == "full") return g;
    if (arm == "unguided") {
        g.alpha0 = 0.0;
        g.lambda_p = 0.0;
        g.candidates = 1;
        g.t_noise_frac = 0.0;
        return g;
    }
    if (arm == "base") {  // data consistency only
        g.lambda_p = 0.0;
        g.candidates = 1;
        g.t_noise_frac = 0.0;
        return g;
    }
    if (arm == "no-pamri") {
        g.lambda_p = 0.0;
        return g;
    }
    if (arm == "no-noiseopt") {
        g.candidates = 1;
        g.t_noise_frac = 0.0;
        return g;
    }
    throw ConfigError("unknown ablation arm '" + arm +
                      "' (expected full, unguided, base, no-pamri or no-noiseopt)");
}

std::vector<std::string> parse_arms(const std::string& csv) {
    std::vector<std::string> arms;
    for (const std::string& tok : split_csv(csv)) {
        if (tok.empty()) continue;
        if (std::find(arms.begin(), arms.end(), tok) != arms.end()) continue;
        arms.push_back(tok);
    }
    if (arms.empty()) throw ConfigError("no ablation arms given");
    return arms;
}

op::Measurement measure(const op::ForwardOperator& fwd, const Image& truth, double sigma,
                        std::uint64_t seed, std::size_t index) {
    op::Measurement y = op::apply(fwd, truth);
    if (sigma > 0.0) y = op::add_noise(y, sigma, derive_seed(seed, "meas", index));
    return y;
}

int run_reconstruct(Config& cfg, bool force, const std::string& ablate) {
    RunPaths p = paths_from(cfg);
    const std::uint64_t seed = cfg_u64(cfg, "seed", 0);
    if (!ablate.empty()) cfg.set("recon.arms", ablate);
    const std::vector<std::string> arms = parse_arms(cfg_str(cfg, "recon.arms", "full"));

    guide::GuidanceConfig base;
    base.steps = cfg_u64(cfg, "guide.steps", 50);
    base.alpha0 = cfg_f64(cfg, "guide.alpha0", 1.0);
    const std::string am = cfg_str(cfg, "guide.alpha_mode", "gradnorm");
    if (am == "gradnorm") {
        base.alpha_mode = guide::AlphaMode::gradnorm;
    } else if (am == "constant") {
        base.alpha_mode = guide::AlphaMode::constant;
    } else {
        throw ConfigError("guide.alpha_mode must be gradnorm or constant");
    }
    base.lambda_p = cfg_f64(cfg, "guide.lambda_p", 0.1);
    base.candidates = cfg_u64(cfg, "guide.candidates", 8);
    base.t_noise_frac = cfg_f64(cfg, "guide.t_noise_frac", 0.2);
    base.patch = cfg_u64(cfg, "guide.patch", 32);
    base.stop_grad_through_prior = cfg_bool(cfg, "guide.stop_grad", false);
    base.warm_start_guided = cfg_bool(cfg, "guide.warm_guided", true);
    const double sigma = cfg_f64(cfg, "degrade.noise_sigma", 0.0);

    const auto test = read_dataset(p.test_dir());
    const std::size_t h = test[0].pair.target.h, w = test[0].pair.target.w;
    const op::ForwardOperator fwd = make_operator(cfg, h, w);

    nn::ParamStore prior_params = io::load_checkpoint(p.prior_ckpt().string());
    flow::ConvVelocityNet net(h, w, std::move(prior_params));

    bool needs_enc = false;
    for (const auto& a : arms) needs_enc = needs_enc || arm_guidance(base, a).lambda_p > 0.0;
    pamri::EncoderPair* enc_ptr = nullptr;
    std::unique_ptr<pamri::EncoderPair> enc;
    if (needs_enc || fs::exists(p.encoders_ckpt())) {
        enc = std::make_unique<pamri::EncoderPair>(
            pamri::EncoderPair::load(p.encoders_ckpt().string()));
        enc_ptr = enc.get();
    }

    write_resolved(cfg, p, "reconstruct", force);

    for (const std::string& arm : arms) {
        const fs::path dir = p.arm_dir(arm);
        fs::create_directories(dir);
        const fs::path manifest = dir / "recon_manifest.csv";
        io::check_overwrite(manifest.string(), force);
        std::ofstream os(manifest, std::ios::trunc);
        if (!os) throw IoError("cannot write " + manifest.string());
        os << "id,seed_index\n";

        for (std::size_t i = 0; i < test.size(); ++i) {
            guide::GuidanceConfig g = arm_guidance(base, arm);
            g.seed = derive_seed(seed, "recon", i);
            g.diag_path = (dir / ("diag_" + test[i].id + ".csv")).string();
            g.force = force;

            guide::GuidanceContext ctx;
            ctx.fwd = fwd;
            ctx.y = measure(fwd, test[i].pair.target, sigma, seed, i);
            ctx.x_aux = test[i].pair.aux;
            ctx.encoders = g.lambda_p > 0.0 ? enc_ptr : nullptr;

            const guide::ReconResult r = guide::reconstruct(net, ctx, g);
            io::save_image((dir / ("recon_" + test[i].id + ".mpimg")).string(), r.image, force);
            os << test[i].id << "," << r.seed_index << "\n";
        }
        std::cout << "reconstruct[" << arm << "]: " << test.size() << " images, T=" << base.steps
                  << "\n";
    }
    return kExitOk;
}

Image hconcat(const std::vector<const Image*>& imgs, std::size_t gap = 2) {
    const std::size_t h = imgs[0]->h;
    std::size_t w = 0;
    for (const Image* im : imgs) w += im->w;
    w += gap * (imgs.size() - 1);
    Image out(h, w, 1.0, "panel");
    std::size_t x0 = 0;
    for (const Image* im : imgs) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < im->w; ++x) out.at(y, x0 + x) = im->at(y, x);
        x0 += im->w + gap;
    }
    return out;
}

int run_evaluate(Config& cfg, bool force) {
    RunPaths p = paths_from(cfg);
    const std::uint64_t seed = cfg_u64(cfg, "seed", 0);
    const double sigma = cfg_f64(cfg, "degrade.noise_sigma", 0.0);
    const double seg_lo = cfg_f64(cfg, "eval.seg_lo", 0.935);
    const double seg_hi = cfg_f64(cfg, "eval.seg_hi", 10.0);
    const std::size_t patch = cfg_u64(cfg, "guide.patch", 32);
    const bool panels = cfg_bool(cfg, "eval.panels", false);

    const auto test = read_dataset(p.test_dir());
    const op::ForwardOperator fwd = make_operator(cfg, test[0].pair.target.h,
                                                  test[0].pair.target.w);
    pamri::EncoderPair enc = pamri::EncoderPair::load(p.encoders_ckpt().string());

    std::vector<std::string> arms;
    if (fs::exists(p.recon_dir())) {
        for (const auto& e : fs::directory_iterator(p.recon_dir())) {
            if (e.is_directory() && fs::exists(e.path() / "recon_manifest.csv")) {
                arms.push_back(e.path().filename().string());
            }
        }
    }
    std::sort(arms.begin(), arms.end());
    if (arms.empty()) throw IoError("no reconstruction arms under " + p.recon_dir().string());

    write_resolved(cfg, p, "evaluate", force);
    fs::create_directories(p.metrics_dir());

    std::ostringstream summary;
    for (const std::string& arm : arms) {
        metrics::MetricsReport report;
        for (std::size_t i = 0; i < test.size(); ++i) {
            const Image& truth = test[i].pair.target;
            const Image recon = io::load_image(
                (p.arm_dir(arm) / ("recon_" + test[i].id + ".mpimg")).string());
            const op::Measurement y = measure(fwd, truth, sigma, seed, i);

            metrics::MetricsRow row;
            row.id = test[i].id;
            row.psnr = metrics::psnr(recon, truth);
            row.ssim = metrics::ssim(recon, truth);
            row.meas_loss = guide::dc_loss(fwd, recon, y);
            row.feat_score = metrics::feature_hallucination_score(enc, recon, truth, patch);
            if (test[i].has_lesion) {
                row.has_dice = true;
                row.dice = metrics::dice(metrics::threshold_segment(recon, seg_lo, seg_hi),
                                         test[i].pair.lesion_mask);
            }
            report.rows.push_back(std::move(row));

            if (panels) {
                fs::create_directories(p.panels_dir() / arm);
                const Image zf = op::adjoint(fwd, y);
                io::save_pgm((p.panels_dir() / arm / ("panel_" + test[i].id + ".pgm")).string(),
                             hconcat({&truth, &zf, &recon}), force);
            }
        }
        report.write_csv((p.metrics_dir() / (arm + ".csv")).string(), force);

        const auto ps = report.agg_psnr();
        const auto ss = report.agg_ssim();
        const auto ml = report.agg_meas_loss();
        const auto dc = report.agg_dice();
        const auto fh = report.agg_feat_score();
        std::ostringstream line;
        line << arm << ": psnr " << fmt(ps.mean) << " +- " << fmt(ps.stddev) << ", ssim "
             << fmt(ss.mean) << " +- " << fmt(ss.stddev) << ", meas " << fmt(ml.mean) << ", feat "
             << fmt(fh.mean);
        if (dc.n > 0) line << ", dice " << fmt(dc.mean) << " (n=" << dc.n << ")";
        summary << line.str() << "\n";
        std::cout << line.str() << "\n";
    }

    const fs::path sum_path = p.metrics_dir() / "summary.txt";
    io::check_overwrite(sum_path.string(), force);
    std::ofstream os(sum_path, std::ios::trunc);
    os << summary.str();
    return kExitOk;
}

// ---- oracle verification ----

struct VerifyState {
    bool ok = true;

    void check(const std::string& name, bool pass, const std::string& detail) {
        std::cout << (pass ? "ok   " : "FAIL ") << name;
        if (!detail.empty()) std::cout << " (" << detail << ")";
        std::cout << "\n";
        ok = ok && pass;
    }
};

double dot_meas(const op::Measurement& m, const std::vector<double>& ure,
                const std::vector<double>& uim) {
    double s = 0.0;
    for (std::size_t i = 0; i < m.re.size(); ++i) s += m.re[i] * ure[i];
    if (m.is_complex())
        for (std::size_t i = 0; i < m.im.size(); ++i) s += m.im[i] * uim[i];
    return s;
}

void verify_adjoint(VerifyState& v, const op::ForwardOperator& fwd, const std::string& name,
                    std::uint64_t seed) {
    double worst = 0.0;
    Rng rng(seed);
    for (std::size_t trial = 0; trial < 20; ++trial) {
        Image x(fwd.h, fwd.w);
        for (double& px : x.pix) px = rng.normal();
        const op::Measurement fx = op::apply(fwd, x);
        std::vector<double> ure(fx.re.size()), uim(fx.im.size());
        for (double& u : ure) u = rng.normal();
        for (double& u : uim) u = rng.normal();
        op::Measurement u;
        u.h = fx.h;
        u.w = fx.w;
        u.re = ure;
        u.im = uim;
        const Image atu = op::adjoint(fwd, u);
        double lhs = dot_meas(fx, ure, uim);
        double rhs = 0.0;
        for (std::size_t i = 0; i < x.pix.size(); ++i) rhs += x.pix[i] * atu.pix[i];
        const double scale = std::max({std::fabs(lhs), std::fabs(rhs), 1e-30});
        worst = std::max(worst, std::fabs(lhs - rhs) / scale);
    }
    v.check("adjoint " + name, worst < 1e-10, "rel err " + fmt(worst));
}

void verify_dft(VerifyState& v, std::uint64_t seed) {
    const std::size_t n = 8;
    Rng rng(seed);
    std::vector<double> re(n * n), im(n * n), fre, fim;
    for (double& x : re) x = rng.normal();
    for (double& x : im) x = rng.normal();
    op::dft2(re, im, n, n, fre, fim);
    double worst = 0.0;
    const double norm = 1.0 / std::sqrt(static_cast<double>(n * n));
    for (std::size_t ky = 0; ky < n; ++ky) {
        for (std::size_t kx = 0; kx < n; ++kx) {
            double sre = 0.0, sim = 0.0;
            for (std::size_t y = 0; y < n; ++y) {
                for (std::size_t x = 0; x < n; ++x) {
                    const double ang = -2.0 * 3.14159265358979323846 *
                                       (static_cast<double>(ky * y) / n +
                                        static_cast<double>(kx * x) / n);
                    const double c = std::cos(ang), s = std::sin(ang);
                    const double vr = re[y * n + x], vi = im[y * n + x];
                    sre += vr * c - vi * s;
                    sim += vr * s + vi * c;
                }
            }
            worst = std::max(worst, std::fabs(fre[ky * n + kx] - norm * sre));
            worst = std::max(worst, std::fabs(fim[ky * n + kx] - norm * sim));
        }
    }
    v.check("dft2 vs naive dft 8x8", worst < 1e-9, "max err " + fmt(worst));
}

void verify_transport(VerifyState& v, std::uint64_t seed) {
    Rng rng(seed);
    Image x1(8, 8), z(8, 8);
    for (double& px : x1.pix) px = rng.normal();
    for (double& px : z.pix) px = rng.normal();
    flow::StraightLineField field(x1);
    double worst = 0.0;
    for (std::size_t steps : {std::size_t{1}, std::size_t{10}, std::size_t{100}}) {
        const Image out = flow::euler_sample(field, z, steps);
        for (std::size_t i = 0; i < out.pix.size(); ++i) {
            worst = std::max(worst, std::fabs(out.pix[i] - x1.pix[i]));
        }
    }
    v.check("straight-line transport T=1,10,100", worst <= 1e-12, "max err " + fmt(worst));
}

oracle::GaussianPrior small_prior(std::uint64_t seed, std::size_t d) {
    Rng rng(seed);
    oracle::Mat b(d, d);
    for (double& x : b.a) x = 0.4 * rng.normal();
    oracle::Mat cov = oracle::matmul(b, oracle::transpose(b));
    for (std::size_t i = 0; i < d; ++i) cov.at(i, i) += 0.5;
    oracle::GaussianPrior prior;
    prior.mean.assign(d, 0.0);
    for (double& x : prior.mean) x = rng.normal();
    prior.cov = cov;
    prior.validate();
    return prior;
}

void verify_velocity_mc(VerifyState& v, std::uint64_t seed) {
    const std::size_t d = 4;
    const oracle::GaussianPrior prior = small_prior(derive_seed(seed, "vprior"), d);
    const oracle::Mat chol = oracle::cholesky(prior.cov);
    Rng rng(derive_seed(seed, "vprobe"));
    bool pass = true;
    std::string detail;
    for (std::size_t probe = 0; probe < 3; ++probe) {
        const double t = 0.2 + 0.25 * static_cast<double>(probe);
        // Probe on the typical set of x_t: the kernel estimator's
        // smoothing bias grows fast off-distribution.
        oracle::Vec eps(d), x_t(d);
        for (double& x : eps) x = rng.normal();
        const oracle::Vec sx = oracle::matvec(chol, eps);
        for (std::size_t i = 0; i < d; ++i) {
            x_t[i] = (1.0 - t) * rng.normal() + t * (prior.mean[i] + sx[i]);
        }
        const oracle::Vec exact = oracle::analytic_velocity(prior, x_t, t);
        const auto mc = oracle::mc_velocity_estimate(prior, x_t, t, 30000, 0.2,
                                                     derive_seed(seed, "vmc", probe));
        for (std::size_t i = 0; i < d; ++i) {
            const double err = std::fabs(mc.estimate[i] - exact[i]);
            const double band = 3.0 * mc.stderr_boot[i] + 1e-9;
            if (err > band) {
                pass = false;
                detail = "probe " + std::to_string(probe) + " coord " + std::to_string(i) +
                         ": |d|=" + fmt(err) + " > " + fmt(band);
            }
        }
    }
    v.check("analytic velocity vs monte carlo", pass, detail);
}

void verify_posterior_mc(VerifyState& v, std::uint64_t seed) {
    const std::size_t d = 4, m = 2;
    const oracle::GaussianPrior prior = small_prior(derive_seed(seed, "pprior"), d);
    Rng rng(derive_seed(seed, "pprobe"));
    oracle::LinearProblem prob;
    prob.A = oracle::Mat(m, d);
    for (double& x : prob.A.a) x = rng.normal();
    prob.sigma = 0.25;
    // Consistent y (prior draw through A plus noise): an off-support y
    // starves the prior-proposal importance weights.
    const oracle::Mat chol = oracle::cholesky(prior.cov);
    oracle::Vec eps(d);
    for (double& x : eps) x = rng.normal();
    const oracle::Vec sx = oracle::matvec(chol, eps);
    oracle::Vec x_star(d);
    for (std::size_t i = 0; i < d; ++i) x_star[i] = prior.mean[i] + sx[i];
    prob.y = oracle::matvec(prob.A, x_star);
    for (double& x : prob.y) x += prob.sigma * rng.normal();
    const oracle::Posterior post = oracle::analytic_posterior(prior, prob);
    const auto mc = oracle::mc_posterior_mean(prior, prob, 40000, derive_seed(seed, "pmc"));
    bool pass = true;
    std::string detail = "ess " + fmt(mc.ess);
    for (std::size_t i = 0; i < d; ++i) {
        const double err = std::fabs(mc.mean[i] - post.mean[i]);
        const double band = 3.0 * mc.stderr_boot[i] + 1e-9;
        if (err > band) {
            pass = false;
            detail = "coord " + std::to_string(i) + ": |d|=" + fmt(err) + " > " + fmt(band);
        }
    }
    v.check("analytic posterior vs importance sampling", pass, detail);
}

void verify_null_space(VerifyState& v, std::uint64_t seed) {
    const op::ForwardOperator ds = op::ForwardOperator::downsample(16, 16, 4);
    const op::ForwardOperator ks =
        op::ForwardOperator::kspace(op::make_mask(16, 16, 4.0, 0.125, derive_seed(seed, "nmask")));
    double worst_resid = 0.0, least_norm = 1e300;
    for (const op::ForwardOperator* fwd : {&ds, &ks}) {
        const Image wit = op::null_space_witness(*fwd);
        const op::Measurement fx = op::apply(*fwd, wit);
        double resid = 0.0, norm = 0.0;
        for (double x : fx.re) resid += x * x;
        for (double x : fx.im) resid += x * x;
        for (double x : wit.pix) norm += x * x;
        worst_resid = std::max(worst_resid, std::sqrt(resid));
        least_norm = std::min(least_norm, std::sqrt(norm));
    }
    v.check("null-space witnesses", worst_resid < 1e-10 && least_norm > 1e-6,
            "|F w| " + fmt(worst_resid) + ", |w| " + fmt(least_norm));
}

int run_verify_oracle(std::uint64_t seed) {
    VerifyState v;
    verify_adjoint(v, op::ForwardOperator::downsample(16, 16, 2), "downsample x2",
                   derive_seed(seed, "adj2"));
    verify_adjoint(v, op::ForwardOperator::downsample(16, 16, 4), "downsample x4",
                   derive_seed(seed, "adj4"));
    verify_adjoint(v, op::ForwardOperator::downsample(16, 16, 8), "downsample x8",
                   derive_seed(seed, "adj8"));
    verify_adjoint(v, op::ForwardOperator::gaussian_blur(16, 16, 1.5, 2), "gaussian blur",
                   derive_seed(seed, "adjb"));
    verify_adjoint(v,
                   op::ForwardOperator::kspace(
                       op::make_mask(16, 16, 4.0, 0.125, derive_seed(seed, "amask"))),
                   "k-space mask", derive_seed(seed, "adjk"));
    verify_dft(v, derive_seed(seed, "dft"));
    verify_transport(v, derive_seed(seed, "transport"));
    verify_velocity_mc(v, seed);
    verify_posterior_mc(v, seed);
    verify_null_space(v, seed);
    std::cout << (v.ok ? "verify-oracle: all checks passed\n"
                       : "verify-oracle: FAILURES above\n");
    return v.ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-modal posterior-guided flow matching on synthetic phantoms"};
    app.require_subcommand(1);

    std::string config_path;
    bool force = false;
    std::size_t threads = 0;
    std::string ablate;
    std::uint64_t verify_seed = 0;

    CLI::App* gen = app.add_subcommand("gen-data", "render paired-contrast phantom datasets");
    CLI::App* train = app.add_subcommand("train-prior", "train the rectified-flow prior");
    CLI::App* pre = app.add_subcommand("pretrain-pamri", "pretrain the cross-modal encoders");
    CLI::App* rec = app.add_subcommand("reconstruct", "guided reconstruction of the test set");
    CLI::App* ev = app.add_subcommand("evaluate", "metrics over reconstruction arms");
    CLI::App* ver = app.add_subcommand("verify-oracle", "check analytic oracles");

    for (CLI::App* sub : {gen, train, pre, rec, ev}) {
        sub->add_option("--config", config_path, "key=value run configuration")
            ->required()
            ->check(CLI::ExistingFile);
        sub->add_flag("--force", force, "overwrite existing artifacts");
        sub->add_option("--threads", threads, "cap worker threads");
    }
    rec->add_option("--ablate", ablate, "comma-separated ablation arms");
    ver->add_option("--seed", verify_seed, "oracle check seed");
    ver->add_option("--threads", threads, "cap worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (threads > 0) set_max_threads(threads);
        if (ver->parsed()) return run_verify_oracle(verify_seed);
        Config cfg = Config::parse_file(config_path);
        if (gen->parsed()) return run_gen_data(cfg, force);
        if (train->parsed()) return run_train_prior(cfg, force);
        if (pre->parsed()) return run_pretrain_pamri(cfg, force);
        if (rec->parsed()) return run_reconstruct(cfg, force, ablate);
        if (ev->parsed()) return run_evaluate(cfg, force);
    } catch (const NumericalError& e) {
        std::cerr << "mpflow: numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "mpflow: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}
