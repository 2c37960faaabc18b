#pragma once

// Posterior-guided sampling: Euler integration of the prior velocity
// corrected at every step by the gradient of a composite objective
// (measurement consistency plus cross-modal feature alignment), with
// multi-seed noise optimization picking the best warm-started
// trajectory before the full run.
//
// The correction gradient is taken with full reverse-mode through the
// prior network and the encoders; stop_grad_through_prior swaps in the
// cheaper dx_hat/dx_t ~ identity approximation.

#include <cstdint>
#include <string>
#include <vector>

#include "mpflow/flow.hpp"
#include "mpflow/operators.hpp"
#include "mpflow/pamri.hpp"

namespace mpflow::guide {

enum class AlphaMode { constant, gradnorm };

struct GuidanceConfig {
    std::size_t steps = 50;  // T
    double alpha0 = 1.0;
    AlphaMode alpha_mode = AlphaMode::gradnorm;  // alpha = alpha0/(|grad| + 1e-8)
    double lambda_p = 0.1;
    std::size_t candidates = 8;  // S
    double t_noise_frac = 0.2;   // warm start runs floor(frac * T) steps
    std::size_t patch = 32;      // non-overlapping tile edge for pamri_loss
    std::uint64_t seed = 0;
    bool stop_grad_through_prior = false;
    bool warm_start_guided = true;  // Eq. 9 warm start uses the guided velocity
    std::string diag_path;          // per-step CSV: t,dc_loss,pamri_loss,grad_norm
    bool force = false;

    void validate() const;
};

struct GuidanceContext {
    op::ForwardOperator fwd;
    op::Measurement y;
    Image x_aux;                          // registered to the target canvas
    const pamri::EncoderPair* encoders;   // non-owning; may be null when lambda_p = 0

    void validate(double lambda_p) const;
};

// Squared L2 measurement residual (complex measurements count both
// planes). The _on_tape form differentiates w.r.t. x_hat.
double dc_loss(const op::ForwardOperator& fwd, const Image& x_hat, const op::Measurement& y);
ad::Tensor dc_loss_on_tape(const op::ForwardOperator& fwd, const ad::Tensor& x_hat,
                           const op::Measurement& y);

// Mean over embedding pairs of |a - b|^2; the formula layer under
// pamri_loss, testable without networks.
ad::Tensor pamri_loss_terms(const std::vector<ad::Tensor>& emb_x,
                            const std::vector<ad::Tensor>& emb_aux);

// Mean over the non-overlapping patch x patch tiling of
// |phi(tile(x_hat)) - psi(tile(x_aux))|^2. The canvas must tile evenly.
double pamri_loss(const pamri::EncoderPair& enc, const Image& x_hat, const Image& x_aux,
                  std::size_t patch);
ad::Tensor pamri_loss_on_tape(const pamri::EncoderPair& enc, const ad::Tensor& x_hat,
                              const Image& x_aux, std::size_t patch);

struct GuidedStepInfo {
    double dc = 0.0;
    double pamri = 0.0;
    double grad_norm = 0.0;
    double alpha = 0.0;
};

// v_theta(x_t,t) - alpha_t * grad_{x_t}[dc + lambda_p * pamri] evaluated
// at x_hat_{1|t}. alpha0 = 0 short-circuits to the unconditional
// velocity. Non-finite gradients abort naming t.
Image guided_velocity(const flow::VelocityField& model, const Image& x_t, double t,
                      const GuidanceContext& ctx, const GuidanceConfig& cfg,
                      GuidedStepInfo* info = nullptr);

// Phi(x) = dc_loss + lambda_p * pamri_loss, the noise-selection score.
double composite_objective(const Image& x, const GuidanceContext& ctx,
                           const GuidanceConfig& cfg);

struct NoiseSelection {
    Image state;                 // winning trajectory state at t_noise
    std::size_t seed_index = 0;
    double phi = 0.0;
    std::size_t warm_steps = 0;
};

// Integrates cfg.candidates independent trajectories for
// floor(t_noise_frac * T) steps and scores Phi on each one-step clean
// prediction; ties break to the lowest seed index. Candidate s draws
// its start from derive_seed(cfg.seed, "noise", s).
NoiseSelection noise_select(const flow::VelocityField& model, const GuidanceContext& ctx,
                            const GuidanceConfig& cfg);

struct ReconResult {
    Image image;
    std::size_t seed_index = 0;
};

// noise_select, then guided Euler integration to t = 1 on the winner.
// Deterministic per cfg.seed; diag_path (if set) gets one CSV row per
// post-selection step.
ReconResult reconstruct(const flow::VelocityField& model, const GuidanceContext& ctx,
                        const GuidanceConfig& cfg);

}  // namespace mpflow::guide
