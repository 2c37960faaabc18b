#include "mpflow/guidance.hpp"

#include <cmath>
#include <fstream>

#include "mpflow/threading.hpp"

namespace mpflow::guide {

void GuidanceConfig::validate() const {
    if (steps < 1) throw ConfigError("GuidanceConfig: steps must be >= 1");
    if (candidates < 1) throw ConfigError("GuidanceConfig: candidates must be >= 1");
    if (t_noise_frac < 0.0 || t_noise_frac > 1.0) {
        throw ConfigError("GuidanceConfig: t_noise_frac must be in [0,1]");
    }
    if (lambda_p < 0.0) throw ConfigError("GuidanceConfig: lambda_p must be >= 0");
    if (alpha0 < 0.0) throw ConfigError("GuidanceConfig: alpha0 must be >= 0");
    if (patch < 8) throw ConfigError("GuidanceConfig: patch must be >= 8");
}

void GuidanceContext::validate(double lambda_p) const {
    if (x_aux.h != fwd.h || x_aux.w != fwd.w) {
        throw ShapeError("GuidanceContext: x_aux is " + std::to_string(x_aux.h) + "x" +
                         std::to_string(x_aux.w) + ", operator canvas is " + std::to_string(fwd.h) +
                         "x" + std::to_string(fwd.w));
    }
    if (y.h != fwd.out_h() || y.w != fwd.out_w()) {
        throw ShapeError("GuidanceContext: measurement shape does not match operator output");
    }
    if (lambda_p > 0.0 && encoders == nullptr) {
        throw ConfigError("GuidanceContext: lambda_p > 0 requires encoders");
    }
}

// ---- data consistency ----

ad::Tensor dc_loss_on_tape(const op::ForwardOperator& fwd, const ad::Tensor& x_hat,
                           const op::Measurement& y) {
    op::TapeMeasurement m = op::apply_on_tape(fwd, x_hat);
    if (m.re.numel() != y.numel()) {
        throw ShapeError("dc_loss: measurement size mismatch");
    }
    ad::Tensor loss =
        ad::sum(ad::square(ad::sub(m.re, ad::Tensor::from(m.re.shape(), y.re))));
    if (y.is_complex()) {
        if (!m.im.defined()) throw ShapeError("dc_loss: real operator, complex measurement");
        loss = ad::add(loss, ad::sum(ad::square(ad::sub(m.im, ad::Tensor::from(m.im.shape(), y.im)))));
    }
    return loss;
}

double dc_loss(const op::ForwardOperator& fwd, const Image& x_hat, const op::Measurement& y) {
    return dc_loss_on_tape(fwd, x_hat.tensor(), y).value();
}

// ---- feature alignment ----

ad::Tensor pamri_loss_terms(const std::vector<ad::Tensor>& emb_x,
                            const std::vector<ad::Tensor>& emb_aux) {
    if (emb_x.empty() || emb_x.size() != emb_aux.size()) {
        throw ShapeError("pamri_loss: embedding counts disagree");
    }
    ad::Tensor total;
    for (std::size_t i = 0; i < emb_x.size(); ++i) {
        ad::Tensor d = ad::sum(ad::square(ad::sub(emb_x[i], emb_aux[i])));
        total = total.defined() ? ad::add(total, d) : d;
    }
    return ad::mul(total, 1.0 / static_cast<double>(emb_x.size()));
}

namespace {

void check_tileable(std::size_t h, std::size_t w, std::size_t patch) {
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw ShapeError("pamri_loss: " + std::to_string(h) + "x" + std::to_string(w) +
                         " canvas does not tile by " + std::to_string(patch));
    }
}

}  // namespace

ad::Tensor pamri_loss_on_tape(const pamri::EncoderPair& enc, const ad::Tensor& x_hat,
                              const Image& x_aux, std::size_t patch) {
    if (x_hat.shape().size() != 2) {
        throw ShapeError("pamri_loss: expected [H,W] input, got " + shape_str(x_hat.shape()));
    }
    const std::size_t h = x_hat.shape()[0], w = x_hat.shape()[1];
    if (h != x_aux.h || w != x_aux.w) throw ShapeError("pamri_loss: x_hat/x_aux shapes differ");
    check_tileable(h, w, patch);
    nn::ParamView phi = nn::constants(enc.phi.params());
    std::vector<ad::Tensor> ex, ea;
    for (std::size_t r = 0; r < h; r += patch) {
        for (std::size_t c = 0; c < w; c += patch) {
            ex.push_back(enc.phi.forward(phi, ad::slice2d(x_hat, r, c, patch, patch)));
            Image tile(patch, patch, 0.0, x_aux.modality);
            for (std::size_t rr = 0; rr < patch; ++rr) {
                for (std::size_t cc = 0; cc < patch; ++cc) {
                    tile.pix[rr * patch + cc] = x_aux.pix[(r + rr) * w + c + cc];
                }
            }
            ea.push_back(enc.psi.embed(tile));
        }
    }
    return pamri_loss_terms(ex, ea);
}

double pamri_loss(const pamri::EncoderPair& enc, const Image& x_hat, const Image& x_aux,
                  std::size_t patch) {
    return pamri_loss_on_tape(enc, x_hat.tensor(), x_aux, patch).value();
}

// ---- guided velocity ----

Image guided_velocity(const flow::VelocityField& model, const Image& x_t, double t,
                      const GuidanceContext& ctx, const GuidanceConfig& cfg,
                      GuidedStepInfo* info) {
    if (t < 0.0 || t >= 1.0) {
        throw ShapeError("guided_velocity: t must be in [0,1), got " + std::to_string(t));
    }
    if (cfg.alpha0 == 0.0) {
        ad::Tensor v = model.velocity(x_t.tensor(), t);
        Image out(x_t.h, x_t.w, 0.0, x_t.modality);
        for (std::size_t i = 0; i < out.numel(); ++i) out.pix[i] = v[i];
        if (info) *info = {};
        return out;
    }

    ad::Tape tape;
    ad::Tensor xt = tape.var(x_t.tensor());
    ad::Tensor v, x_hat;
    if (cfg.stop_grad_through_prior) {
        v = model.velocity(x_t.tensor(), t);
        x_hat = ad::add(xt, ad::Tensor::from(v.shape(), [&] {
                            std::vector<double> scaled(v.numel());
                            for (std::size_t i = 0; i < scaled.size(); ++i) {
                                scaled[i] = (1.0 - t) * v[i];
                            }
                            return scaled;
                        }()));
    } else {
        v = model.velocity(xt, t);
        x_hat = ad::add(xt, ad::mul(v, 1.0 - t));
    }
    ad::Tensor loss = dc_loss_on_tape(ctx.fwd, x_hat, ctx.y);
    const double dc_v = loss.value();
    double pamri_v = 0.0;
    if (cfg.lambda_p > 0.0) {
        ad::Tensor pl = pamri_loss_on_tape(*ctx.encoders, x_hat, ctx.x_aux, cfg.patch);
        pamri_v = pl.value();
        loss = ad::add(loss, ad::mul(pl, cfg.lambda_p));
    }
    ad::Tensor grad = tape.gradient(loss, {xt})[0];
    double norm_sq = 0.0;
    for (std::size_t i = 0; i < grad.numel(); ++i) {
        if (!std::isfinite(grad[i])) {
            throw NumericalError("guided_velocity: non-finite gradient at t = " + std::to_string(t));
        }
        norm_sq += grad[i] * grad[i];
    }
    const double norm = std::sqrt(norm_sq);
    const double alpha =
        cfg.alpha_mode == AlphaMode::gradnorm ? cfg.alpha0 / (norm + 1e-8) : cfg.alpha0;
    Image out(x_t.h, x_t.w, 0.0, x_t.modality);
    for (std::size_t i = 0; i < out.numel(); ++i) out.pix[i] = v[i] - alpha * grad[i];
    if (info) *info = {dc_v, pamri_v, norm, alpha};
    return out;
}

// ---- noise optimization ----

double composite_objective(const Image& x, const GuidanceContext& ctx,
                           const GuidanceConfig& cfg) {
    double phi = dc_loss(ctx.fwd, x, ctx.y);
    if (cfg.lambda_p > 0.0) {
        phi += cfg.lambda_p * pamri_loss(*ctx.encoders, x, ctx.x_aux, cfg.patch);
    }
    return phi;
}

namespace {

Image draw_noise(std::size_t h, std::size_t w, std::uint64_t seed) {
    Image z(h, w, 0.0, "target");
    Rng rng(seed);
    for (double& p : z.pix) p = rng.normal();
    return z;
}

void guided_step(const flow::VelocityField& model, Image& x, std::size_t k,
                 const GuidanceContext& ctx, const GuidanceConfig& cfg, bool guided,
                 GuidedStepInfo* info) {
    // t and the step width must match euler_sample bit for bit so the
    // degenerate configuration reproduces unconditional sampling exactly.
    const double inv_t = 1.0 / static_cast<double>(cfg.steps);
    const double t = static_cast<double>(k) * inv_t;
    Image v;
    if (guided) {
        v = guided_velocity(model, x, t, ctx, cfg, info);
    } else {
        ad::Tensor vt = model.velocity(x.tensor(), t);
        v = Image(x.h, x.w, 0.0, x.modality);
        for (std::size_t i = 0; i < v.numel(); ++i) v.pix[i] = vt[i];
        if (info) *info = {};
    }
    for (std::size_t i = 0; i < x.numel(); ++i) x.pix[i] += inv_t * v.pix[i];
}

}  // namespace

NoiseSelection noise_select(const flow::VelocityField& model, const GuidanceContext& ctx,
                            const GuidanceConfig& cfg) {
    cfg.validate();
    ctx.validate(cfg.lambda_p);
    const std::size_t h = model.height(), w = model.width();
    const std::size_t warm = static_cast<std::size_t>(
        std::floor(cfg.t_noise_frac * static_cast<double>(cfg.steps)));
    std::vector<Image> states(cfg.candidates);
    std::vector<double> scores(cfg.candidates, 0.0);
    parallel_for(cfg.candidates, [&](std::size_t s) {
        Image x = draw_noise(h, w, derive_seed(cfg.seed, "noise", s));
        for (std::size_t k = 0; k < warm; ++k) {
            guided_step(model, x, k, ctx, cfg, cfg.warm_start_guided, nullptr);
        }
        const double t_here = static_cast<double>(warm) / static_cast<double>(cfg.steps);
        Image x_hat = flow::predict_clean(model, x, t_here);
        scores[s] = composite_objective(x_hat, ctx, cfg);
        states[s] = std::move(x);
    });
    NoiseSelection sel;
    sel.warm_steps = warm;
    sel.seed_index = 0;
    sel.phi = scores[0];
    for (std::size_t s = 1; s < cfg.candidates; ++s) {
        if (scores[s] < sel.phi) {
            sel.phi = scores[s];
            sel.seed_index = s;
        }
    }
    sel.state = std::move(states[sel.seed_index]);
    return sel;
}

ReconResult reconstruct(const flow::VelocityField& model, const GuidanceContext& ctx,
                        const GuidanceConfig& cfg) {
    NoiseSelection sel = noise_select(model, ctx, cfg);
    std::ofstream diag;
    if (!cfg.diag_path.empty()) {
        diag.open(cfg.diag_path, cfg.force ? std::ios::trunc : std::ios::app);
        if (!diag) throw IoError("reconstruct: cannot open diagnostics " + cfg.diag_path);
        diag << "t,dc_loss,pamri_loss,grad_norm\n";
    }
    Image x = std::move(sel.state);
    for (std::size_t k = sel.warm_steps; k < cfg.steps; ++k) {
        GuidedStepInfo info;
        guided_step(model, x, k, ctx, cfg, true, &info);
        if (diag.is_open()) {
            diag << static_cast<double>(k) / static_cast<double>(cfg.steps) << "," << info.dc << ","
                 << info.pamri << "," << info.grad_norm << "\n";
        }
    }
    return {std::move(x), sel.seed_index};
}

}  // namespace mpflow::guide
