#include "mpflow/pamri.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "mpflow/checkpoint.hpp"
#include "mpflow/threading.hpp"

namespace mpflow::pamri {

namespace {

constexpr double kLeak = 0.1;

std::size_t bin_of(double v, std::size_t bins) {
    if (v <= 0.0) return 0;
    if (v >= 1.0) return bins - 1;
    return static_cast<std::size_t>(v * static_cast<double>(bins));
}

nn::ParamStore split_prefix(const nn::ParamStore& merged, const std::string& prefix) {
    nn::ParamStore out;
    for (const auto& name : merged.names()) {
        if (name.rfind(prefix, 0) == 0) {
            out.add(name.substr(prefix.size()), merged.at(name));
        }
    }
    return out;
}

void merge_prefixed(nn::ParamStore& dst, const nn::ParamStore& src, const std::string& prefix) {
    for (const auto& name : src.names()) dst.add(prefix + name, src.at(name));
}

}  // namespace

void SSLConfig::validate() const {
    if (tau_min <= 0.0 || tau_min > tau_max) {
        throw ConfigError("SSLConfig: need 0 < tau_min <= tau_max");
    }
    if (lambda_rec < 0.0) throw ConfigError("SSLConfig: lambda_rec must be >= 0");
    if (nmi_bins < 2) throw ConfigError("SSLConfig: nmi_bins must be >= 2");
    if (patch_size < 8 || patch_size % 8 != 0) {
        throw ConfigError("SSLConfig: patch_size must be a positive multiple of 8");
    }
    if (batch == 0) throw ConfigError("SSLConfig: batch must be >= 1");
    if (embed_dim == 0) throw ConfigError("SSLConfig: embed_dim must be >= 1");
    if (intensity_lo <= 0.0 || intensity_lo > intensity_hi) {
        throw ConfigError("SSLConfig: need 0 < intensity_lo <= intensity_hi");
    }
    if (learning_rate <= 0.0) throw ConfigError("SSLConfig: learning_rate must be > 0");
    if (eval_every == 0) throw ConfigError("SSLConfig: eval_every must be >= 1");
}

// ---- Encoder ----

Encoder::Encoder(std::size_t embed, std::uint64_t seed) : embed_(embed) {
    Rng rng(seed);
    nn::register_conv(params_, rng, "c1", 1, 16, 3);
    nn::register_conv(params_, rng, "c2", 16, 32, 3);
    nn::register_conv(params_, rng, "c3", 32, 32, 3);
    nn::register_conv(params_, rng, "c4", 32, 64, 3);
    nn::register_linear(params_, rng, "head", 64, embed);
}

Encoder::Encoder(nn::ParamStore params) : params_(std::move(params)) {
    if (!params_.contains("head.w")) throw ConfigError("Encoder: checkpoint missing head.w");
    embed_ = params_.at("head.w").shape()[1];
}

ad::Tensor Encoder::forward(const nn::ParamView& pv, const ad::Tensor& patch) const {
    if (patch.shape().size() != 2) {
        throw ShapeError("Encoder: expected [H,W] patch, got " + shape_str(patch.shape()));
    }
    const std::size_t h = patch.shape()[0], w = patch.shape()[1];
    ad::Tensor a = ad::reshape(patch, {1, h, w});
    a = ad::leaky_relu(nn::conv_layer(pv, "c1", a, 2, 1), kLeak);
    a = ad::leaky_relu(nn::conv_layer(pv, "c2", a, 2, 1), kLeak);
    a = ad::leaky_relu(nn::conv_layer(pv, "c3", a, 1, 1), kLeak);
    a = ad::leaky_relu(nn::conv_layer(pv, "c4", a, 2, 1), kLeak);
    a = nn::linear_layer(pv, "head", nn::global_avg_pool(a));
    return ad::l2_normalize(a);
}

ad::Tensor Encoder::embed(const Image& patch) const {
    return forward(nn::constants(params_), patch.tensor());
}

// ---- Decoder ----

Decoder::Decoder(std::size_t embed, std::size_t patch, std::uint64_t seed)
    : embed_(embed), patch_(patch) {
    if (patch < 8 || patch % 8 != 0) {
        throw ConfigError("Decoder: patch must be a positive multiple of 8");
    }
    const std::size_t s = patch / 8;
    Rng rng(seed);
    nn::register_linear(params_, rng, "head", embed, 24 * s * s);
    nn::register_conv(params_, rng, "c1", 24, 12, 3);
    nn::register_conv(params_, rng, "c2", 12, 6, 3);
    nn::register_conv(params_, rng, "c3", 6, 1, 3);
}

Decoder::Decoder(nn::ParamStore params) : params_(std::move(params)) {
    if (!params_.contains("head.w")) throw ConfigError("Decoder: checkpoint missing head.w");
    embed_ = params_.at("head.w").shape()[0];
    const std::size_t out = params_.at("head.w").shape()[1];
    std::size_t s = 1;
    while (24 * s * s < out) ++s;
    if (24 * s * s != out) throw ConfigError("Decoder: head.w output size is not 24*s^2");
    patch_ = 8 * s;
}

ad::Tensor Decoder::forward(const nn::ParamView& pv, const ad::Tensor& emb) const {
    if (emb.numel() != embed_) {
        throw ShapeError("Decoder: expected " + std::to_string(embed_) + " element embedding, got " +
                         shape_str(emb.shape()));
    }
    const std::size_t s = patch_ / 8;
    ad::Tensor a = ad::leaky_relu(nn::linear_layer(pv, "head", ad::reshape(emb, {1, embed_})), kLeak);
    a = ad::reshape(a, {24, s, s});
    a = ad::leaky_relu(nn::conv_layer(pv, "c1", ad::upsample_nearest(a, 2), 1, 1), kLeak);
    a = ad::leaky_relu(nn::conv_layer(pv, "c2", ad::upsample_nearest(a, 2), 1, 1), kLeak);
    a = nn::conv_layer(pv, "c3", ad::upsample_nearest(a, 2), 1, 1);
    return ad::reshape(a, {patch_, patch_});
}

// ---- pairs ----

EncoderPair::EncoderPair(std::size_t embed, std::uint64_t seed)
    : phi(embed, derive_seed(seed, "pamri-phi")), psi(embed, derive_seed(seed, "pamri-psi")) {}

void EncoderPair::save(const std::string& path) const {
    nn::ParamStore merged;
    merge_prefixed(merged, phi.params(), "phi.");
    merge_prefixed(merged, psi.params(), "psi.");
    io::save_checkpoint(path, merged);
}

EncoderPair EncoderPair::load(const std::string& path) {
    nn::ParamStore merged = io::load_checkpoint(path);
    return EncoderPair(Encoder(split_prefix(merged, "phi.")), Encoder(split_prefix(merged, "psi.")));
}

DecoderPair::DecoderPair(std::size_t embed, std::size_t patch, std::uint64_t seed)
    : tar(embed, patch, derive_seed(seed, "pamri-dtar")),
      aux(embed, patch, derive_seed(seed, "pamri-daux")) {}

void DecoderPair::save(const std::string& path) const {
    nn::ParamStore merged;
    merge_prefixed(merged, tar.params(), "dtar.");
    merge_prefixed(merged, aux.params(), "daux.");
    io::save_checkpoint(path, merged);
}

DecoderPair DecoderPair::load(const std::string& path) {
    nn::ParamStore merged = io::load_checkpoint(path);
    return DecoderPair(Decoder(split_prefix(merged, "dtar.")),
                       Decoder(split_prefix(merged, "daux.")));
}

// ---- patch extraction ----

namespace {

Image crop_augment(const Image& src, std::size_t cy, std::size_t cx, std::size_t ps, bool flip_h,
                   bool flip_v, double scale) {
    Image out(ps, ps, 0.0, src.modality);
    for (std::size_t r = 0; r < ps; ++r) {
        const std::size_t sr = cy + (flip_v ? ps - 1 - r : r);
        for (std::size_t c = 0; c < ps; ++c) {
            const std::size_t sc = cx + (flip_h ? ps - 1 - c : c);
            out.pix[r * ps + c] = scale * src.pix[sr * src.w + sc];
        }
    }
    return out;
}

std::size_t jittered(std::size_t base, long dj, std::size_t hi) {
    long v = static_cast<long>(base) + dj;
    if (v < 0) v = 0;
    if (v > static_cast<long>(hi)) v = static_cast<long>(hi);
    return static_cast<std::size_t>(v);
}

}  // namespace

std::vector<PatchPair> extract_patch_pairs(const std::vector<phantom::ImagePair>& pairs,
                                           const SSLConfig& cfg, Rng& rng) {
    if (pairs.empty()) throw ShapeError("extract_patch_pairs: empty dataset");
    const std::size_t ps = cfg.patch_size;
    std::vector<PatchPair> batch;
    batch.reserve(cfg.batch);
    const long j = static_cast<long>(cfg.jitter);
    for (std::size_t slot = 0; slot < cfg.batch; ++slot) {
        const phantom::ImagePair& pair = pairs[rng.index(pairs.size())];
        if (ps > pair.target.h || ps > pair.target.w) {
            throw ShapeError("extract_patch_pairs: patch_size exceeds image size");
        }
        const std::size_t max_y = pair.target.h - ps;
        const std::size_t max_x = pair.target.w - ps;
        const std::size_t ty = max_y ? rng.index(max_y + 1) : 0;
        const std::size_t tx = max_x ? rng.index(max_x + 1) : 0;
        PatchPair pp;
        for (int m = 0; m < 2; ++m) {
            std::size_t cy = ty, cx = tx;
            if (cfg.jitter > 0) {
                const long dy = static_cast<long>(rng.index(2 * cfg.jitter + 1)) - j;
                const long dx = static_cast<long>(rng.index(2 * cfg.jitter + 1)) - j;
                cy = jittered(ty, dy, max_y);
                cx = jittered(tx, dx, max_x);
            }
            const bool fh = cfg.flip_h && rng.bernoulli(0.5);
            const bool fv = cfg.flip_v && rng.bernoulli(0.5);
            const double scale = cfg.intensity_lo < cfg.intensity_hi
                                     ? rng.uniform(cfg.intensity_lo, cfg.intensity_hi)
                                     : cfg.intensity_lo;
            const Image& src = m == 0 ? pair.target : pair.aux;
            (m == 0 ? pp.tar : pp.aux) = crop_augment(src, cy, cx, ps, fh, fv, scale);
        }
        batch.push_back(std::move(pp));
    }
    return batch;
}

// ---- NMI and temperatures ----

double nmi(const Image& a, const Image& b, std::size_t bins) {
    if (!same_shape(a, b)) throw ShapeError("nmi: patches differ in shape");
    if (bins < 2) throw ConfigError("nmi: bins must be >= 2");
    const std::size_t n = a.numel();
    std::vector<std::size_t> joint(bins * bins, 0), ra(bins, 0), rb(bins, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ba = bin_of(a.pix[i], bins);
        const std::size_t bb = bin_of(b.pix[i], bins);
        ++joint[ba * bins + bb];
        ++ra[ba];
        ++rb[bb];
    }
    const double dn = static_cast<double>(n);
    double ha = 0.0, hb = 0.0, mi = 0.0;
    for (std::size_t i = 0; i < bins; ++i) {
        if (ra[i]) ha -= ra[i] / dn * std::log(ra[i] / dn);
        if (rb[i]) hb -= rb[i] / dn * std::log(rb[i] / dn);
    }
    if (ha == 0.0 && hb == 0.0) {
        return bin_of(a.pix[0], bins) == bin_of(b.pix[0], bins) ? 1.0 : 0.0;
    }
    for (std::size_t i = 0; i < bins; ++i) {
        for (std::size_t k = 0; k < bins; ++k) {
            const std::size_t c = joint[i * bins + k];
            if (c == 0) continue;
            mi += c / dn * std::log(c * dn / (static_cast<double>(ra[i]) * rb[k]));
        }
    }
    return std::clamp(2.0 * mi / (ha + hb), 0.0, 1.0);
}

double adaptive_tau(double nmi_value, double tau_min, double tau_max) {
    return tau_min + (tau_max - tau_min) * (1.0 - nmi_value);
}

TauMatrices tau_from_patches(const std::vector<PatchPair>& batch, const SSLConfig& cfg) {
    TauMatrices t;
    t.b = batch.size();
    t.tt.assign(t.b * t.b, 0.0);
    t.aa.assign(t.b * t.b, 0.0);
    t.ta.assign(t.b * t.b, 0.0);
    parallel_for(t.b, [&](std::size_t i) {
        for (std::size_t k = 0; k < t.b; ++k) {
            if (k >= i) {
                t.tt[i * t.b + k] =
                    adaptive_tau(nmi(batch[i].tar, batch[k].tar, cfg.nmi_bins), cfg.tau_min, cfg.tau_max);
                t.aa[i * t.b + k] =
                    adaptive_tau(nmi(batch[i].aux, batch[k].aux, cfg.nmi_bins), cfg.tau_min, cfg.tau_max);
            }
            t.ta[i * t.b + k] =
                adaptive_tau(nmi(batch[i].tar, batch[k].aux, cfg.nmi_bins), cfg.tau_min, cfg.tau_max);
        }
    });
    // Mirror the symmetric intra-modal halves.
    for (std::size_t i = 0; i < t.b; ++i) {
        for (std::size_t k = 0; k < i; ++k) {
            t.tt[i * t.b + k] = t.tt[k * t.b + i];
            t.aa[i * t.b + k] = t.aa[k * t.b + i];
        }
    }
    return t;
}

// ---- losses ----

namespace {

void check_unit(const std::vector<ad::Tensor>& rows, const char* which) {
    for (const ad::Tensor& r : rows) {
        double sq = 0.0;
        for (std::size_t i = 0; i < r.numel(); ++i) sq += r[i] * r[i];
        if (std::fabs(std::sqrt(sq) - 1.0) > 1e-6) {
            throw NumericalError(std::string("nce_loss: non-unit ") + which + " embedding");
        }
    }
}

ad::Tensor sum_terms(const std::vector<ad::Tensor>& terms) {
    ad::Tensor acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
    return acc;
}

}  // namespace

ad::Tensor nce_loss(const std::vector<ad::Tensor>& u, const std::vector<ad::Tensor>& w,
                    const TauMatrices& tau) {
    const std::size_t b = u.size();
    if (b == 0 || w.size() != b || tau.b != b) {
        throw ShapeError("nce_loss: batch sizes disagree");
    }
    check_unit(u, "target");
    check_unit(w, "aux");

    // All pairwise similarities once; intra-modal matrices are symmetric
    // so the (k,i) node is reused for (i,k).
    std::vector<ad::Tensor> duu(b * b), dww(b * b), duw(b * b);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t k = 0; k < b; ++k) {
            if (k >= i) {
                duu[i * b + k] = ad::sum(ad::mul(u[i], u[k]));
                dww[i * b + k] = ad::sum(ad::mul(w[i], w[k]));
            } else {
                duu[i * b + k] = duu[k * b + i];
                dww[i * b + k] = dww[k * b + i];
            }
            duw[i * b + k] = ad::sum(ad::mul(u[i], w[k]));
        }
    }

    // Each direction's denominator is recentered at the positive
    // argument (log-sum-exp shift), which both bounds the exponents and
    // cancels the Eq. 6 self term against the k = i intra-modal term
    // exactly; the B = 1 loss is bit-exact zero.
    ad::Tensor total;
    for (std::size_t i = 0; i < b; ++i) {
        ad::Tensor pos = ad::mul(duw[i * b + i], 1.0 / tau.ta_at(i, i));
        std::vector<ad::Tensor> den_t, den_a;
        for (std::size_t k = 0; k < b; ++k) {
            if (k != i) {
                den_t.push_back(ad::exp(ad::sub(ad::mul(duu[i * b + k], 1.0 / tau.tt_at(i, k)), pos)));
                den_a.push_back(ad::exp(ad::sub(ad::mul(dww[i * b + k], 1.0 / tau.aa_at(i, k)), pos)));
            }
            den_t.push_back(ad::exp(ad::sub(ad::mul(duw[i * b + k], 1.0 / tau.ta_at(i, k)), pos)));
            den_a.push_back(ad::exp(ad::sub(ad::mul(duw[k * b + i], 1.0 / tau.ta_at(k, i)), pos)));
        }
        ad::Tensor li = ad::add(ad::log(sum_terms(den_t)), ad::log(sum_terms(den_a)));
        total = total.defined() ? ad::add(total, li) : li;
    }
    return ad::mul(total, 1.0 / (2.0 * static_cast<double>(b)));
}

ad::Tensor rec_loss_terms(const std::vector<ad::Tensor>& recon_tar,
                          const std::vector<ad::Tensor>& recon_aux,
                          const std::vector<PatchPair>& batch) {
    const std::size_t b = batch.size();
    if (b == 0 || recon_tar.size() != b || recon_aux.size() != b) {
        throw ShapeError("rec_loss: batch sizes disagree");
    }
    ad::Tensor total;
    for (std::size_t i = 0; i < b; ++i) {
        ad::Tensor lt = ad::mean(ad::abs(ad::sub(recon_tar[i], batch[i].tar.tensor())));
        ad::Tensor la = ad::mean(ad::abs(ad::sub(recon_aux[i], batch[i].aux.tensor())));
        ad::Tensor term = ad::add(lt, la);
        total = total.defined() ? ad::add(total, term) : term;
    }
    return ad::mul(total, 1.0 / (2.0 * static_cast<double>(b)));
}

PamriViews watch_all(ad::Tape& tape, const EncoderPair& enc, const DecoderPair& dec) {
    return {nn::watch(tape, enc.phi.params()), nn::watch(tape, enc.psi.params()),
            nn::watch(tape, dec.tar.params()), nn::watch(tape, dec.aux.params())};
}

PamriViews constant_views(const EncoderPair& enc, const DecoderPair& dec) {
    return {nn::constants(enc.phi.params()), nn::constants(enc.psi.params()),
            nn::constants(dec.tar.params()), nn::constants(dec.aux.params())};
}

ad::Tensor rec_loss(const EncoderPair& enc, const DecoderPair& dec, const PamriViews& views,
                    const std::vector<PatchPair>& batch) {
    std::vector<ad::Tensor> rt, ra;
    rt.reserve(batch.size());
    ra.reserve(batch.size());
    for (const PatchPair& pp : batch) {
        rt.push_back(dec.tar.forward(views.dtar, enc.phi.forward(views.phi, pp.tar.tensor())));
        ra.push_back(dec.aux.forward(views.daux, enc.psi.forward(views.psi, pp.aux.tensor())));
    }
    return rec_loss_terms(rt, ra, batch);
}

// ---- retrieval ----

double retrieval_accuracy(const EncoderPair& enc, const std::vector<phantom::ImagePair>& pairs,
                          std::size_t batch, std::size_t patch_size, std::uint64_t seed) {
    if (batch < 2) throw ConfigError("retrieval_accuracy: batch must be >= 2");
    if (pairs.size() < batch) {
        throw ShapeError("retrieval_accuracy: need at least " + std::to_string(batch) + " pairs");
    }
    Rng rng(derive_seed(seed, "retrieval"));
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 0; i < batch; ++i) {
        std::swap(order[i], order[i + rng.index(order.size() - i)]);
    }
    std::vector<PatchPair> eval(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        const phantom::ImagePair& pair = pairs[order[i]];
        if (patch_size > pair.target.h || patch_size > pair.target.w) {
            throw ShapeError("retrieval_accuracy: patch_size exceeds image size");
        }
        const std::size_t my = pair.target.h - patch_size, mx = pair.target.w - patch_size;
        const std::size_t ty = my ? rng.index(my + 1) : 0;
        const std::size_t tx = mx ? rng.index(mx + 1) : 0;
        eval[i].tar = crop_augment(pair.target, ty, tx, patch_size, false, false, 1.0);
        eval[i].aux = crop_augment(pair.aux, ty, tx, patch_size, false, false, 1.0);
    }
    std::vector<ad::Tensor> u(batch), w(batch);
    parallel_for(2 * batch, [&](std::size_t s) {
        if (s < batch) {
            u[s] = enc.phi.embed(eval[s].tar);
        } else {
            w[s - batch] = enc.psi.embed(eval[s - batch].aux);
        }
    });
    std::size_t hits = 0;
    for (std::size_t i = 0; i < batch; ++i) {
        std::size_t best = 0;
        double best_dot = -2.0;
        for (std::size_t k = 0; k < batch; ++k) {
            double d = 0.0;
            for (std::size_t e = 0; e < u[i].numel(); ++e) d += u[i][e] * w[k][e];
            if (d > best_dot) {
                best_dot = d;
                best = k;
            }
        }
        if (best == i) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(batch);
}

// ---- pretraining ----

std::pair<EncoderPair, DecoderPair> pretrain_pamri(const std::vector<phantom::ImagePair>& dataset,
                                                   const SSLConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw ShapeError("pretrain_pamri: empty dataset");
    EncoderPair enc(cfg.embed_dim, cfg.seed);
    DecoderPair dec(cfg.embed_dim, cfg.patch_size, cfg.seed);
    Rng rng(derive_seed(cfg.seed, "pretrain"));
    nn::AdamConfig ac{cfg.learning_rate, 0.9, 0.999, 1e-8};
    nn::Adam opt_phi(ac), opt_psi(ac), opt_dtar(ac), opt_daux(ac);

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path, cfg.force ? std::ios::trunc : std::ios::app);
        if (!log) throw IoError("pretrain_pamri: cannot open log " + cfg.log_path);
        log << "iter,nce,rec,total,retrieval_acc\n";
    }
    const std::size_t eval_b = std::min<std::size_t>(64, dataset.size());
    double last_acc = 0.0;

    for (std::size_t iter = 0; iter < cfg.iterations; ++iter) {
        // Cosine decay to 10% of the base rate over the run.
        const double frac = static_cast<double>(iter) / static_cast<double>(cfg.iterations);
        const double lr = cfg.learning_rate * (0.55 + 0.45 * std::cos(frac * 3.14159265358979));
        for (nn::Adam* o : {&opt_phi, &opt_psi, &opt_dtar, &opt_daux}) o->set_lr(lr);

        std::vector<PatchPair> batch = extract_patch_pairs(dataset, cfg, rng);
        TauMatrices tau = tau_from_patches(batch, cfg);

        ad::Tape tape;
        PamriViews views = watch_all(tape, enc, dec);
        std::vector<ad::Tensor> u(batch.size()), w(batch.size());
        std::vector<ad::Tensor> rt(batch.size()), ra(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            u[i] = enc.phi.forward(views.phi, batch[i].tar.tensor());
            w[i] = enc.psi.forward(views.psi, batch[i].aux.tensor());
            rt[i] = dec.tar.forward(views.dtar, u[i]);
            ra[i] = dec.aux.forward(views.daux, w[i]);
        }
        ad::Tensor nce = nce_loss(u, w, tau);
        ad::Tensor rec = rec_loss_terms(rt, ra, batch);
        ad::Tensor total = ad::add(nce, ad::mul(rec, cfg.lambda_rec));
        const double nce_v = nce.value(), rec_v = rec.value(), total_v = total.value();
        if (!std::isfinite(total_v)) {
            throw NumericalError("pretrain_pamri: loss diverged (NaN/Inf) at iteration " +
                                 std::to_string(iter));
        }

        // One backward pass over all four nets, split back per store.
        std::vector<ad::Tensor> wrt;
        std::vector<const nn::ParamView*> view_order = {&views.phi, &views.psi, &views.dtar,
                                                        &views.daux};
        std::vector<const nn::ParamStore*> store_order = {&enc.phi.params(), &enc.psi.params(),
                                                          &dec.tar.params(), &dec.aux.params()};
        for (std::size_t v = 0; v < view_order.size(); ++v) {
            for (const auto& name : store_order[v]->names()) wrt.push_back((*view_order[v])[name]);
        }
        std::vector<ad::Tensor> grads = tape.gradient(total, wrt);
        std::size_t cursor = 0;
        nn::Adam* opts[4] = {&opt_phi, &opt_psi, &opt_dtar, &opt_daux};
        nn::ParamStore* stores[4] = {&enc.phi.params_mut(), &enc.psi.params_mut(),
                                     &dec.tar.params_mut(), &dec.aux.params_mut()};
        for (std::size_t v = 0; v < 4; ++v) {
            std::vector<std::pair<std::string, ad::Tensor>> g;
            for (const auto& name : stores[v]->names()) g.emplace_back(name, grads[cursor++]);
            opts[v]->step(*stores[v], g);
        }

        if (log.is_open()) {
            if (iter % cfg.eval_every == 0) {
                last_acc = retrieval_accuracy(enc, dataset, eval_b, cfg.patch_size,
                                              derive_seed(cfg.seed, "pretrain-eval"));
            }
            log << iter << "," << nce_v << "," << rec_v << "," << total_v << "," << last_acc
                << "\n";
        }
    }
    return {std::move(enc), std::move(dec)};
}

}  // namespace mpflow::pamri
