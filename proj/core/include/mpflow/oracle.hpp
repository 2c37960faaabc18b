#pragma once

// Closed-form ground truth for verification: the exact rectified-flow
// velocity for Gaussian priors, exact linear-Gaussian posteriors, and
// the Monte Carlo estimators that validate the closed forms themselves.
// Dense linear algebra is hand-rolled; dimensions stay <= 64.

#include <cstdint>
#include <vector>

#include "mpflow/common.hpp"
#include "mpflow/rng.hpp"

namespace mpflow::oracle {

using Vec = std::vector<double>;

struct Mat {
    std::size_t rows = 0, cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& at(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

    static Mat identity(std::size_t n);
};

Mat matmul(const Mat& x, const Mat& y);
Mat transpose(const Mat& x);
Vec matvec(const Mat& x, const Vec& v);

// Lower-triangular Cholesky factor; throws NumericalError when the input
// is not positive definite.
Mat cholesky(const Mat& spd);
Vec chol_solve(const Mat& L, Vec b);  // solves L L^T x = b
Mat inv_spd(const Mat& spd);

struct GaussianPrior {
    Vec mean;
    Mat cov;

    // Checks symmetry (1e-12) and positive definiteness.
    void validate() const;
    std::size_t dim() const { return mean.size(); }
};

// E[x1 - z | x_t] under z ~ N(0,I), x1 ~ prior, x_t = (1-t)z + t*x1.
Vec analytic_velocity(const GaussianPrior& prior, const Vec& x_t, double t);

// Same velocity as an affine map v(x) = M x + c, for tape-differentiable
// evaluation and for probing many x_t at one t.
void analytic_velocity_affine(const GaussianPrior& prior, double t, Mat& m_out, Vec& c_out);

// E[x1 | x_t], the clean-projection target predict_clean must reproduce.
Vec analytic_clean_mean(const GaussianPrior& prior, const Vec& x_t, double t);

struct LinearProblem {
    Mat A;         // m x d, m <= d
    double sigma = 0.0;
    Vec y;
};

struct Posterior {
    Vec mean;
    Mat cov;
};

// Conjugate Gaussian update. sigma = 0 restricts to the consistent
// affine subspace and requires A to have full row rank.
Posterior analytic_posterior(const GaussianPrior& prior, const LinearProblem& problem);

struct McVelocityResult {
    Vec estimate;
    Vec stderr_boot;  // per-coordinate bootstrap standard error
    double ess = 0.0;
    bool low_ess = false;  // effective sample size < 100
};

// Nadaraya-Watson estimate of E[x1 - z | x_t] from coupled draws with a
// Gaussian kernel in x_t-space. Deterministic per seed.
McVelocityResult mc_velocity_estimate(const GaussianPrior& prior, const Vec& x_t, double t,
                                      std::size_t n_samples, double bandwidth, std::uint64_t seed,
                                      std::size_t bootstrap_reps = 100);

// Posterior-mean estimate by self-normalized importance sampling with the
// prior as proposal; validates analytic_posterior. Deterministic per seed.
struct McPosteriorResult {
    Vec mean;
    Vec stderr_boot;
    double ess = 0.0;
};
McPosteriorResult mc_posterior_mean(const GaussianPrior& prior, const LinearProblem& problem,
                                    std::size_t n_samples, std::uint64_t seed,
                                    std::size_t bootstrap_reps = 100);

}  // namespace mpflow::oracle
