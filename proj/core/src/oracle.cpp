#include "mpflow/oracle.hpp"

#include <cmath>

namespace mpflow::oracle {

Mat Mat::identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Mat matmul(const Mat& x, const Mat& y) {
    if (x.cols != y.rows) {
        throw ShapeError("matmul: " + std::to_string(x.rows) + "x" + std::to_string(x.cols) +
                         " vs " + std::to_string(y.rows) + "x" + std::to_string(y.cols));
    }
    Mat out(x.rows, y.cols);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t k = 0; k < x.cols; ++k) {
            const double v = x.at(i, k);
            for (std::size_t j = 0; j < y.cols; ++j) out.at(i, j) += v * y.at(k, j);
        }
    }
    return out;
}

Mat transpose(const Mat& x) {
    Mat out(x.cols, x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
        for (std::size_t j = 0; j < x.cols; ++j) out.at(j, i) = x.at(i, j);
    }
    return out;
}

Vec matvec(const Mat& x, const Vec& v) {
    if (x.cols != v.size()) {
        throw ShapeError("matvec: " + std::to_string(x.rows) + "x" + std::to_string(x.cols) +
                         " vs vector of " + std::to_string(v.size()));
    }
    Vec out(x.rows, 0.0);
    for (std::size_t i = 0; i < x.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.cols; ++j) s += x.at(i, j) * v[j];
        out[i] = s;
    }
    return out;
}

Mat cholesky(const Mat& spd) {
    if (spd.rows != spd.cols) throw ShapeError("cholesky: matrix not square");
    const std::size_t n = spd.rows;
    Mat L(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = spd.at(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= L.at(i, k) * L.at(j, k);
            if (i == j) {
                if (s <= 0.0) throw NumericalError("cholesky: matrix not positive definite");
                L.at(i, i) = std::sqrt(s);
            } else {
                L.at(i, j) = s / L.at(j, j);
            }
        }
    }
    return L;
}

Vec chol_solve(const Mat& L, Vec b) {
    const std::size_t n = L.rows;
    if (b.size() != n) throw ShapeError("chol_solve: dimension mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= L.at(i, k) * b[k];
        b[i] = s / L.at(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double s = b[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= L.at(k, ii) * b[k];
        b[ii] = s / L.at(ii, ii);
    }
    return b;
}

Mat inv_spd(const Mat& spd) {
    const Mat L = cholesky(spd);
    const std::size_t n = spd.rows;
    Mat inv(n, n);
    Vec e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        e.assign(n, 0.0);
        e[j] = 1.0;
        const Vec col = chol_solve(L, e);
        for (std::size_t i = 0; i < n; ++i) inv.at(i, j) = col[i];
    }
    return inv;
}

void GaussianPrior::validate() const {
    if (cov.rows != cov.cols || cov.rows != mean.size()) {
        throw ShapeError("GaussianPrior: mean dimension " + std::to_string(mean.size()) +
                         " vs covariance " + std::to_string(cov.rows) + "x" +
                         std::to_string(cov.cols));
    }
    for (std::size_t i = 0; i < cov.rows; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            if (std::fabs(cov.at(i, j) - cov.at(j, i)) > 1e-12) {
                throw NumericalError("GaussianPrior: covariance not symmetric");
            }
        }
    }
    cholesky(cov);  // positive definiteness
}

namespace {

// Marginal covariance of x_t: S_t = (1-t)^2 I + t^2 Sigma.
Mat marginal_cov(const GaussianPrior& prior, double t) {
    const std::size_t d = prior.dim();
    Mat s(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            s.at(i, j) = t * t * prior.cov.at(i, j);
        }
        s.at(i, i) += (1.0 - t) * (1.0 - t);
    }
    return s;
}

void check_t(double t) {
    if (t < 0.0 || t >= 1.0) {
        throw ShapeError("analytic velocity: t must be in [0,1), got " + std::to_string(t));
    }
}

}  // namespace

Vec analytic_velocity(const GaussianPrior& prior, const Vec& x_t, double t) {
    check_t(t);
    const std::size_t d = prior.dim();
    if (x_t.size() != d) throw ShapeError("analytic_velocity: dimension mismatch");
    const Mat L = cholesky(marginal_cov(prior, t));
    Vec r(d);
    for (std::size_t i = 0; i < d; ++i) r[i] = x_t[i] - t * prior.mean[i];
    const Vec w = chol_solve(L, r);
    // E[x1|x_t] = mu + t Sigma w,  E[z|x_t] = (1-t) w.
    Vec v = matvec(prior.cov, w);
    for (std::size_t i = 0; i < d; ++i) {
        v[i] = prior.mean[i] + t * v[i] - (1.0 - t) * w[i];
    }
    return v;
}

void analytic_velocity_affine(const GaussianPrior& prior, double t, Mat& m_out, Vec& c_out) {
    check_t(t);
    const std::size_t d = prior.dim();
    const Mat s_inv = inv_spd(marginal_cov(prior, t));
    // M = (t Sigma - (1-t) I) S_t^{-1}
    Mat k(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) k.at(i, j) = t * prior.cov.at(i, j);
        k.at(i, i) -= 1.0 - t;
    }
    m_out = matmul(k, s_inv);
    c_out.assign(d, 0.0);
    const Vec m_mu = matvec(m_out, prior.mean);
    for (std::size_t i = 0; i < d; ++i) c_out[i] = prior.mean[i] - t * m_mu[i];
}

Vec analytic_clean_mean(const GaussianPrior& prior, const Vec& x_t, double t) {
    check_t(t);
    const std::size_t d = prior.dim();
    if (x_t.size() != d) throw ShapeError("analytic_clean_mean: dimension mismatch");
    const Mat L = cholesky(marginal_cov(prior, t));
    Vec r(d);
    for (std::size_t i = 0; i < d; ++i) r[i] = x_t[i] - t * prior.mean[i];
    const Vec w = chol_solve(L, r);
    Vec m = matvec(prior.cov, w);
    for (std::size_t i = 0; i < d; ++i) m[i] = prior.mean[i] + t * m[i];
    return m;
}

Posterior analytic_posterior(const GaussianPrior& prior, const LinearProblem& problem) {
    const std::size_t d = prior.dim();
    const std::size_t m = problem.A.rows;
    if (problem.A.cols != d || problem.y.size() != m) {
        throw ShapeError("analytic_posterior: inconsistent dimensions");
    }
    if (m > d) throw ShapeError("analytic_posterior: problem must be underdetermined (m <= d)");
    Posterior post;
    if (problem.sigma > 0.0) {
        const double inv_s2 = 1.0 / (problem.sigma * problem.sigma);
        const Mat prec_prior = inv_spd(prior.cov);
        const Mat at = transpose(problem.A);
        Mat prec = matmul(at, problem.A);
        for (double& v : prec.a) v *= inv_s2;
        for (std::size_t i = 0; i < d * d; ++i) prec.a[i] += prec_prior.a[i];
        post.cov = inv_spd(prec);
        Vec rhs = matvec(prec_prior, prior.mean);
        const Vec aty = matvec(at, problem.y);
        for (std::size_t i = 0; i < d; ++i) rhs[i] += inv_s2 * aty[i];
        post.mean = matvec(post.cov, rhs);
    } else {
        // Noiseless: condition on the consistent affine subspace
        // {x : A x = y}; A must have full row rank.
        const Mat at = transpose(problem.A);
        const Mat sigma_at = matmul(prior.cov, at);
        const Mat gram = matmul(problem.A, sigma_at);  // A Sigma A^T, SPD iff full row rank
        const Mat L = [&] {
            try {
                return cholesky(gram);
            } catch (const NumericalError&) {
                throw NumericalError(
                    "analytic_posterior: sigma=0 with rank-deficient A is unsupported");
            }
        }();
        Vec resid = matvec(problem.A, prior.mean);
        for (std::size_t i = 0; i < m; ++i) resid[i] = problem.y[i] - resid[i];
        const Vec alpha = chol_solve(L, resid);
        post.mean = matvec(sigma_at, alpha);
        for (std::size_t i = 0; i < d; ++i) post.mean[i] += prior.mean[i];
        // cov = Sigma - Sigma A^T (A Sigma A^T)^{-1} A Sigma
        const Mat gram_inv = inv_spd(gram);
        const Mat reduce = matmul(matmul(sigma_at, gram_inv), transpose(sigma_at));
        post.cov = prior.cov;
        for (std::size_t i = 0; i < d * d; ++i) post.cov.a[i] -= reduce.a[i];
    }
    return post;
}

McVelocityResult mc_velocity_estimate(const GaussianPrior& prior, const Vec& x_t, double t,
                                      std::size_t n_samples, double bandwidth, std::uint64_t seed,
                                      std::size_t bootstrap_reps) {
    check_t(t);
    if (n_samples < 10000) throw ShapeError("mc_velocity_estimate: n_samples must be >= 1e4");
    if (bandwidth <= 0.0) throw ShapeError("mc_velocity_estimate: bandwidth must be positive");
    const std::size_t d = prior.dim();
    if (x_t.size() != d) throw ShapeError("mc_velocity_estimate: dimension mismatch");
    const Mat L = cholesky(prior.cov);
    Rng rng(derive_seed(seed, "mc-velocity"));

    std::vector<double> wgt(n_samples);
    std::vector<double> vals(n_samples * d);
    std::vector<double> d2(n_samples);
    Vec z(d), xi(d), x1(d);
    double d2_min = 0.0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (std::size_t i = 0; i < d; ++i) z[i] = rng.normal();
        for (std::size_t i = 0; i < d; ++i) xi[i] = rng.normal();
        for (std::size_t i = 0; i < d; ++i) {
            double acc = prior.mean[i];
            for (std::size_t k = 0; k <= i; ++k) acc += L.at(i, k) * xi[k];
            x1[i] = acc;
        }
        double dist2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double key = (1.0 - t) * z[i] + t * x1[i];
            const double diff = key - x_t[i];
            dist2 += diff * diff;
            vals[s * d + i] = x1[i] - z[i];
        }
        d2[s] = dist2;
        if (s == 0 || dist2 < d2_min) d2_min = dist2;
    }
    const double inv_2b2 = 1.0 / (2.0 * bandwidth * bandwidth);
    double wsum = 0.0, w2sum = 0.0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        // shift by the minimum distance so the largest weight is 1
        wgt[s] = std::exp(-(d2[s] - d2_min) * inv_2b2);
        wsum += wgt[s];
        w2sum += wgt[s] * wgt[s];
    }
    McVelocityResult res;
    res.estimate.assign(d, 0.0);
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (std::size_t i = 0; i < d; ++i) res.estimate[i] += wgt[s] * vals[s * d + i];
    }
    for (std::size_t i = 0; i < d; ++i) res.estimate[i] /= wsum;
    res.ess = wsum * wsum / w2sum;
    res.low_ess = res.ess < 100.0;

    // Bootstrap over draws.
    Rng brng(derive_seed(seed, "mc-velocity-boot"));
    std::vector<double> acc(d);
    std::vector<double> mean_sum(d, 0.0), mean_sq(d, 0.0);
    for (std::size_t b = 0; b < bootstrap_reps; ++b) {
        acc.assign(d, 0.0);
        double ws = 0.0;
        for (std::size_t s = 0; s < n_samples; ++s) {
            const std::size_t idx = brng.index(n_samples);
            ws += wgt[idx];
            for (std::size_t i = 0; i < d; ++i) acc[i] += wgt[idx] * vals[idx * d + i];
        }
        for (std::size_t i = 0; i < d; ++i) {
            const double m = acc[i] / ws;
            mean_sum[i] += m;
            mean_sq[i] += m * m;
        }
    }
    res.stderr_boot.assign(d, 0.0);
    const double nb = static_cast<double>(bootstrap_reps);
    for (std::size_t i = 0; i < d; ++i) {
        const double mu = mean_sum[i] / nb;
        const double var = mean_sq[i] / nb - mu * mu;
        res.stderr_boot[i] = std::sqrt(std::max(var, 0.0) * nb / (nb - 1.0));
    }
    return res;
}

McPosteriorResult mc_posterior_mean(const GaussianPrior& prior, const LinearProblem& problem,
                                    std::size_t n_samples, std::uint64_t seed,
                                    std::size_t bootstrap_reps) {
    if (problem.sigma <= 0.0) {
        throw ShapeError("mc_posterior_mean: requires sigma > 0 (importance weights)");
    }
    const std::size_t d = prior.dim();
    const Mat L = cholesky(prior.cov);
    Rng rng(derive_seed(seed, "mc-posterior"));
    std::vector<double> wgt(n_samples);
    std::vector<double> xs(n_samples * d);
    std::vector<double> nll(n_samples);
    Vec xi(d), x(d);
    const double inv_2s2 = 1.0 / (2.0 * problem.sigma * problem.sigma);
    double nll_min = 0.0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (std::size_t i = 0; i < d; ++i) xi[i] = rng.normal();
        for (std::size_t i = 0; i < d; ++i) {
            double acc = prior.mean[i];
            for (std::size_t k = 0; k <= i; ++k) acc += L.at(i, k) * xi[k];
            x[i] = acc;
            xs[s * d + i] = acc;
        }
        const Vec ax = matvec(problem.A, x);
        double e = 0.0;
        for (std::size_t i = 0; i < ax.size(); ++i) {
            const double r = ax[i] - problem.y[i];
            e += r * r;
        }
        nll[s] = e * inv_2s2;
        if (s == 0 || nll[s] < nll_min) nll_min = nll[s];
    }
    double wsum = 0.0, w2sum = 0.0;
    for (std::size_t s = 0; s < n_samples; ++s) {
        wgt[s] = std::exp(-(nll[s] - nll_min));
        wsum += wgt[s];
        w2sum += wgt[s] * wgt[s];
    }
    McPosteriorResult res;
    res.mean.assign(d, 0.0);
    for (std::size_t s = 0; s < n_samples; ++s) {
        for (std::size_t i = 0; i < d; ++i) res.mean[i] += wgt[s] * xs[s * d + i];
    }
    for (std::size_t i = 0; i < d; ++i) res.mean[i] /= wsum;
    res.ess = wsum * wsum / w2sum;

    Rng brng(derive_seed(seed, "mc-posterior-boot"));
    std::vector<double> acc(d), mean_sum(d, 0.0), mean_sq(d, 0.0);
    for (std::size_t b = 0; b < bootstrap_reps; ++b) {
        acc.assign(d, 0.0);
        double ws = 0.0;
        for (std::size_t s = 0; s < n_samples; ++s) {
            const std::size_t idx = brng.index(n_samples);
            ws += wgt[idx];
            for (std::size_t i = 0; i < d; ++i) acc[i] += wgt[idx] * xs[idx * d + i];
        }
        for (std::size_t i = 0; i < d; ++i) {
            const double m = acc[i] / ws;
            mean_sum[i] += m;
            mean_sq[i] += m * m;
        }
    }
    res.stderr_boot.assign(d, 0.0);
    const double nb = static_cast<double>(bootstrap_reps);
    for (std::size_t i = 0; i < d; ++i) {
        const double mu = mean_sum[i] / nb;
        const double var = mean_sq[i] / nb - mu * mu;
        res.stderr_boot[i] = std::sqrt(std::max(var, 0.0) * nb / (nb - 1.0));
    }
    return res;
}

}  // namespace mpflow::oracle
