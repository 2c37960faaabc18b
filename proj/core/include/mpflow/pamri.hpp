#pragma once

// Patch-level cross-modal pretraining: twin encoders mapping target and
// auxiliary patches into one unit-norm embedding space, aligned with an
// NMI-adaptive InfoNCE loss and regularized by patch reconstruction.
//
// Temperatures are per-pair: tau(i,j) = tau_min + (tau_max - tau_min) *
// (1 - NMI(p_i, p_j)) computed on raw patches, so naturally dissimilar
// pairs are pulled together more gently. The denominator's self term
// exp(z_i.z_i / tau_ii) is cancelled exactly against the k = i
// intra-modal term rather than added and subtracted, which keeps the
// B = 1 loss identically zero in floating point.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mpflow/image.hpp"
#include "mpflow/nn.hpp"
#include "mpflow/phantom.hpp"
#include "mpflow/rng.hpp"

namespace mpflow::pamri {

struct SSLConfig {
    std::size_t patch_size = 32;  // must be a multiple of 8 (decoder upsamples x8)
    std::size_t batch = 16;
    double tau_min = 0.05;
    double tau_max = 0.5;
    double lambda_rec = 0.5;
    std::size_t nmi_bins = 32;
    std::size_t jitter = 4;     // per-modality crop offset, px
    bool flip_h = true;         // independent per-modality horizontal flips
    bool flip_v = false;        // vertical flips off by default: doubling the
                                // flip group slows alignment markedly
    double intensity_lo = 0.9;  // per-modality multiplicative scale range
    double intensity_hi = 1.1;
    std::size_t embed_dim = 64;
    std::size_t iterations = 1200;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::size_t eval_every = 50;  // retrieval-accuracy cadence in the log
    std::string log_path;         // empty: skip CSV log
    bool force = false;

    void validate() const;
};

// 4 conv layers (stride 2,2,1,2) + global average pool + linear head;
// output is l2-normalized, so embeddings land on the unit sphere.
class Encoder {
public:
    Encoder(std::size_t embed, std::uint64_t seed);
    explicit Encoder(nn::ParamStore params);

    std::size_t embed_dim() const { return embed_; }
    const nn::ParamStore& params() const { return params_; }
    nn::ParamStore& params_mut() { return params_; }

    // [H,W] patch -> [1,embed] unit-norm embedding.
    ad::Tensor forward(const nn::ParamView& pv, const ad::Tensor& patch) const;
    ad::Tensor embed(const Image& patch) const;

private:
    std::size_t embed_;
    nn::ParamStore params_;
};

// Linear head + three nearest-upsample conv stages back to a
// patch x patch image (patch must be a multiple of 8).
class Decoder {
public:
    Decoder(std::size_t embed, std::size_t patch, std::uint64_t seed);
    explicit Decoder(nn::ParamStore params);

    std::size_t patch_size() const { return patch_; }
    const nn::ParamStore& params() const { return params_; }
    nn::ParamStore& params_mut() { return params_; }

    // [1,embed] embedding -> [patch,patch] reconstruction.
    ad::Tensor forward(const nn::ParamView& pv, const ad::Tensor& emb) const;

private:
    std::size_t embed_;
    std::size_t patch_;
    nn::ParamStore params_;
};

struct EncoderPair {
    Encoder phi;  // target modality
    Encoder psi;  // auxiliary modality

    EncoderPair(std::size_t embed, std::uint64_t seed);
    EncoderPair(Encoder phi_, Encoder psi_) : phi(std::move(phi_)), psi(std::move(psi_)) {}

    // Single checkpoint holding both nets under "phi." / "psi." prefixes.
    void save(const std::string& path) const;
    static EncoderPair load(const std::string& path);
};

struct DecoderPair {
    Decoder tar;
    Decoder aux;

    DecoderPair(std::size_t embed, std::size_t patch, std::uint64_t seed);
    DecoderPair(Decoder tar_, Decoder aux_) : tar(std::move(tar_)), aux(std::move(aux_)) {}

    void save(const std::string& path) const;
    static DecoderPair load(const std::string& path);
};

struct PatchPair {
    Image tar;
    Image aux;
};

// Draws cfg.batch positive pairs. Per slot the draw order is: pair
// index; shared top-left (row, col); then per modality (target first)
// jitter row/col offsets (clamped to the canvas), h-flip, v-flip, and
// intensity scale. Positives share the pre-jitter window; everything
// after it is applied independently per modality.
std::vector<PatchPair> extract_patch_pairs(const std::vector<phantom::ImagePair>& pairs,
                                           const SSLConfig& cfg, Rng& rng);

// Symmetric normalized mutual information 2I/(Ha+Hb) from a joint
// histogram over [0,1]^2 (values outside clamp into the edge bins).
// Both patches constant: 1 if they bin equally, else 0.
double nmi(const Image& a, const Image& b, std::size_t bins);

double adaptive_tau(double nmi_value, double tau_min, double tau_max);

// The three raw-patch temperature matrices the bidirectional loss
// needs: tt (target/target), aa (aux/aux), ta (target i vs aux k).
struct TauMatrices {
    std::size_t b = 0;
    std::vector<double> tt, aa, ta;  // row-major b x b

    double tt_at(std::size_t i, std::size_t k) const { return tt[i * b + k]; }
    double aa_at(std::size_t i, std::size_t k) const { return aa[i * b + k]; }
    double ta_at(std::size_t i, std::size_t k) const { return ta[i * b + k]; }
};

TauMatrices tau_from_patches(const std::vector<PatchPair>& batch, const SSLConfig& cfg);

// Bidirectional adaptive InfoNCE over unit embeddings u (target) and
// w (aux); rows that are not unit-norm within 1e-6 are an error.
ad::Tensor nce_loss(const std::vector<ad::Tensor>& u, const std::vector<ad::Tensor>& w,
                    const TauMatrices& tau);

// Mean absolute reconstruction error, averaged over batch and both
// modalities. The _terms form takes precomputed reconstructions so the
// formula is testable apart from the networks.
ad::Tensor rec_loss_terms(const std::vector<ad::Tensor>& recon_tar,
                          const std::vector<ad::Tensor>& recon_aux,
                          const std::vector<PatchPair>& batch);

struct PamriViews {
    nn::ParamView phi, psi, dtar, daux;
};

PamriViews watch_all(ad::Tape& tape, const EncoderPair& enc, const DecoderPair& dec);
PamriViews constant_views(const EncoderPair& enc, const DecoderPair& dec);

ad::Tensor rec_loss(const EncoderPair& enc, const DecoderPair& dec, const PamriViews& views,
                    const std::vector<PatchPair>& batch);

// Fraction of batch targets whose positive aux patch wins the cosine
// argmax among all candidates. Draws one unaugmented co-located patch
// per sampled pair; requires pairs.size() >= batch.
double retrieval_accuracy(const EncoderPair& enc, const std::vector<phantom::ImagePair>& pairs,
                          std::size_t batch, std::size_t patch_size, std::uint64_t seed);

// Full self-supervised pretraining loop (L_NCE + lambda_rec * L_rec,
// one Adam per net). Log CSV columns: iter,nce,rec,total,retrieval_acc
// (retrieval is refreshed every eval_every iterations on unaugmented
// batches from the dataset). NaN loss aborts with the iteration index.
std::pair<EncoderPair, DecoderPair> pretrain_pamri(const std::vector<phantom::ImagePair>& dataset,
                                                   const SSLConfig& cfg);

}  // namespace mpflow::pamri
