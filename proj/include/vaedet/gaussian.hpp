// Diagonal-covariance Gaussians: the approximate posterior q(z|x), the
// N(0,I) prior, the closed-form KL between them, and the fixed-sigma
// Gaussian image likelihood.

#pragma once

#include <cmath>
#include <numbers>
#include <span>

#include "vaedet/ops.hpp"
#include "vaedet/tensor.hpp"

namespace vaedet {

inline constexpr double kLogTwoPi = 1.8378770664093454836;  // log(2*pi)

// Batched diagonal Gaussian: mean and log-variance, both [B, M].
template <typename T>
struct GaussianDiag {
    Tensor<T> mean;
    Tensor<T> log_var;

    GaussianDiag(Tensor<T> mu, Tensor<T> lv) : mean(std::move(mu)), log_var(std::move(lv)) {
        if (mean.shape() != log_var.shape())
            throw std::invalid_argument("GaussianDiag: mean " + shape_str(mean.shape()) +
                                        " vs log_var " + shape_str(log_var.shape()));
        if (mean.ndim() != 2)
            throw std::invalid_argument("GaussianDiag: expected [B,M], got " +
                                        shape_str(mean.shape()));
    }

    int batch() const { return mean.dim(0); }
    int dim() const { return mean.dim(1); }
};

// Per-item KL(q || N(0,I)) = 1/2 * sum_j (mu_j^2 + exp(log_var_j) - 1 - log_var_j).
// Returns [B]; differentiable; nonnegative.
template <typename T>
Tensor<T> kl_divergence(const GaussianDiag<T>& q) {
    auto terms = sub(add_scalar(add(square(q.mean), exp(q.log_var)), T(-1)), q.log_var);
    return scale(sum(terms, {1}), T(0.5));
}

// z = mu + eps * exp(log_var / 2); differentiable through mu and log_var.
template <typename T>
Tensor<T> reparameterize(const GaussianDiag<T>& q, const Tensor<T>& eps) {
    if (eps.shape() != q.mean.shape())
        throw std::invalid_argument("reparameterize: eps " + shape_str(eps.shape()) +
                                    " vs q " + shape_str(q.mean.shape()));
    return add(q.mean, mul(eps, exp(scale(q.log_var, T(0.5)))));
}

// Per-item log N(x; mu, sigma^2 I) over [B,C,H,W]:
//   -N/2 * log(2*pi*sigma^2) - ||x - mu||^2 / (2*sigma^2),  N = C*H*W.
template <typename T>
Tensor<T> gaussian_log_likelihood(const Tensor<T>& x, const Tensor<T>& mu_dec, T sigma) {
    if (sigma <= T(0)) throw std::invalid_argument("gaussian_log_likelihood: sigma must be > 0");
    detail::require_same_shape(x, mu_dec, "gaussian_log_likelihood");
    if (x.ndim() != 4)
        throw std::invalid_argument("gaussian_log_likelihood: expected [B,C,H,W], got " +
                                    shape_str(x.shape()));
    const int64_t n = static_cast<int64_t>(x.dim(1)) * x.dim(2) * x.dim(3);
    auto sq = sum(square(sub(x, mu_dec)), {1, 2, 3});
    const T norm_const =
        static_cast<T>(-0.5 * static_cast<double>(n) *
                       (kLogTwoPi + 2.0 * std::log(static_cast<double>(sigma))));
    return add_scalar(scale(sq, T(-1) / (T(2) * sigma * sigma)), norm_const);
}

// ---------------------------------------------------------------------------
// Scalar log-densities (double precision, no tape) used by the scorers.
// ---------------------------------------------------------------------------

// log N(z; 0, I)
inline double std_normal_log_density(std::span<const double> z) {
    double acc = 0.0;
    for (const double v : z) acc += v * v;
    return -0.5 * (static_cast<double>(z.size()) * kLogTwoPi + acc);
}

// log N(z; mu, diag(exp(log_var)))
inline double diag_gaussian_log_density(std::span<const double> z, std::span<const double> mu,
                                        std::span<const double> log_var) {
    if (z.size() != mu.size() || z.size() != log_var.size())
        throw std::invalid_argument("diag_gaussian_log_density: size mismatch");
    double acc = 0.0;
    for (size_t j = 0; j < z.size(); ++j) {
        const double d = z[j] - mu[j];
        acc += kLogTwoPi + log_var[j] + d * d / std::exp(log_var[j]);
    }
    return -0.5 * acc;
}

// Scalar closed-form KL for one diagonal Gaussian against N(0,I).
inline double diag_gaussian_kl(std::span<const double> mu, std::span<const double> log_var) {
    if (mu.size() != log_var.size())
        throw std::invalid_argument("diag_gaussian_kl: size mismatch");
    double acc = 0.0;
    for (size_t j = 0; j < mu.size(); ++j)
        acc += mu[j] * mu[j] + std::exp(log_var[j]) - 1.0 - log_var[j];
    return 0.5 * acc;
}

// Scalar per-item Gaussian log-likelihood used by scorer recomputation.
inline double gaussian_log_likelihood_scalar(std::span<const double> x,
                                             std::span<const double> mu, double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("gaussian_log_likelihood: sigma must be > 0");
    if (x.size() != mu.size())
        throw std::invalid_argument("gaussian_log_likelihood: size mismatch");
    double sq = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - mu[i];
        sq += d * d;
    }
    const double n = static_cast<double>(x.size());
    return -0.5 * n * (kLogTwoPi + 2.0 * std::log(sigma)) - sq / (2.0 * sigma * sigma);
}

}  // namespace vaedet
