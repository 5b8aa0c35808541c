#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "model.hpp"

// Complete-data log-density on the transformed (Gaussian) latent scale and
// its exact gradients. These are the reference implementations; the fit
// driver carries a fused copy of the same arithmetic and is tested against
// these functions.

namespace gapmcdm {

inline constexpr double kProbClamp = 1e-12;

inline double clamp_prob(double p) {
    return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp);
}

// Latent position on both scales, u_k = Phi(z_k).
struct LatentPoint {
    Vec z;
    Vec u;

    static LatentPoint from_z(Vec z_in) {
        LatentPoint p;
        p.u.resize(z_in.size());
        for (std::size_t k = 0; k < z_in.size(); ++k) p.u[k] = normal_cdf(z_in[k]);
        p.z = std::move(z_in);
        return p;
    }

    void validate() const {
        if (z.size() != u.size()) throw config_error("LatentPoint: size mismatch");
        for (std::size_t k = 0; k < z.size(); ++k)
            if (std::abs(u[k] - normal_cdf(z[k])) > 1e-12)
                throw domain_error("LatentPoint: u is not Phi(z)");
    }
};

struct ParamGradient {
    std::vector<Vec> d_alpha;               // per item, length K
    std::vector<std::vector<Vec>> d_theta;  // per (item, attribute), length S
    Vec d_chol;                             // K x K, lower triangle
};

namespace detail {

// log N_K(z; 0, L L^T) where L is lower triangular with nonzero diagonal.
inline double mvn_logpdf_chol(std::span<const double> z, std::span<const double> l, int k) {
    Vec w(z.begin(), z.end());
    solve_lower(l, k, w);
    return -0.5 * k * kLog2Pi - log_det_lower(l, k) - 0.5 * squared_norm(w);
}

// (L L^T)^{-1} z.
inline Vec sigma_inv_times(std::span<const double> z, std::span<const double> l, int k) {
    Vec w(z.begin(), z.end());
    apply_sigma_inverse(l, k, w);
    return w;
}

inline double bernoulli_residual(std::uint8_t y, double p) {
    const double pc = clamp_prob(p);
    return y ? 1.0 / pc : -1.0 / (1.0 - pc);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// GaPM complete-data log-likelihood and gradients.
// ---------------------------------------------------------------------------
inline double complete_loglik(std::span<const std::uint8_t> y_row, const LatentPoint& point,
                              const GapmParams& params, const QMatrix& q) {
    const int jn = q.items(), kn = q.attrs();
    double ll = 0.0;
    for (int j = 0; j < jn; ++j) {
        const double p = clamp_prob(irf_gapm(params, q, j, point.u));
        const double term = y_row[j] ? std::log(p) : std::log1p(-p);
        if (!std::isfinite(term)) throw numerical_error("complete_loglik: non-finite item term", j);
        ll += term;
    }
    ll += detail::mvn_logpdf_chol(point.z, params.chol.rows(), kn);
    if (!std::isfinite(ll)) throw numerical_error("complete_loglik: non-finite result");
    return ll;
}

inline Vec grad_z(std::span<const std::uint8_t> y_row, const LatentPoint& point,
                  const GapmParams& params, const QMatrix& q) {
    const int jn = q.items(), kn = q.attrs();
    Vec g(kn, 0.0);
    for (int j = 0; j < jn; ++j) {
        const double r = detail::bernoulli_residual(y_row[j], irf_gapm(params, q, j, point.u));
        for (int k = 0; k < kn; ++k) {
            if (!q(j, k) || params.weights[j].alpha[k] == 0.0) continue;
            const double slope = sieve_derivatives(params.sieves[j][k], point.u[k]).dg_dx;
            g[k] += r * params.weights[j].alpha[k] * slope;
        }
    }
    for (int k = 0; k < kn; ++k) g[k] *= normal_pdf(point.z[k]);
    const Vec prior = detail::sigma_inv_times(point.z, params.chol.rows(), kn);
    for (int k = 0; k < kn; ++k) {
        g[k] -= prior[k];
        if (!std::isfinite(g[k])) throw numerical_error("grad_z: non-finite gradient");
    }
    return g;
}

inline ParamGradient grad_params(std::span<const std::uint8_t> y_row, const LatentPoint& point,
                                 const GapmParams& params, const QMatrix& q) {
    const int jn = q.items(), kn = q.attrs();
    ParamGradient g;
    g.d_alpha.assign(jn, Vec(kn, 0.0));
    g.d_theta.assign(jn, std::vector<Vec>(kn));
    for (int j = 0; j < jn; ++j) {
        const double r = detail::bernoulli_residual(y_row[j], irf_gapm(params, q, j, point.u));
        for (int k = 0; k < kn; ++k) {
            if (!q(j, k)) {
                g.d_theta[j][k].assign(params.sieves[j][k].theta.size(), 0.0);
                continue;
            }
            const auto& sieve = params.sieves[j][k];
            g.d_alpha[j][k] = r * sieve_eval(sieve, point.u[k]);
            auto d = sieve_derivatives(sieve, point.u[k]);
            const double scale = r * params.weights[j].alpha[k];
            for (double& v : d.dg_dtheta) v *= scale;
            g.d_theta[j][k] = std::move(d.dg_dtheta);
        }
    }
    // d/dL of log N(z; 0, LL^T) = S^{-1} z z^T S^{-1} L - S^{-1} L on the
    // lower triangle, with S = LL^T.
    const auto& l = params.chol.rows();
    const Vec a = detail::sigma_inv_times(point.z, l, kn);
    g.d_chol.assign(static_cast<std::size_t>(kn) * kn, 0.0);
    for (int c = 0; c < kn; ++c) {
        Vec lcol(kn, 0.0);
        for (int m = c; m < kn; ++m) lcol[m] = l[static_cast<std::size_t>(m) * kn + c];
        Vec silcol = lcol;
        detail::apply_sigma_inverse(l, kn, silcol);
        const double a_dot_lcol = detail::dot(a, lcol);
        for (int r = c; r < kn; ++r)
            g.d_chol[static_cast<std::size_t>(r) * kn + c] = a[r] * a_dot_lcol - silcol[r];
    }
    return g;
}

// ---------------------------------------------------------------------------
// aPM complete-data log-likelihood and gradients. The latent prior has free
// mean and covariance on the Gaussian scale.
// ---------------------------------------------------------------------------
struct ApmGradient {
    Vec d_delta0;
    std::vector<Vec> d_slopes;
    Vec d_mu;
    Vec d_cov_chol;  // lower triangle
};

inline double apm_complete_loglik(std::span<const std::uint8_t> y_row, const LatentPoint& point,
                                  const ApmParams& params, const QMatrix& q) {
    const int jn = q.items(), kn = q.attrs();
    double ll = 0.0;
    for (int j = 0; j < jn; ++j) {
        const double p = clamp_prob(irf_apm(params, q, j, point.u));
        const double term = y_row[j] ? std::log(p) : std::log1p(-p);
        if (!std::isfinite(term)) throw numerical_error("apm_complete_loglik: non-finite item term", j);
        ll += term;
    }
    Vec zc(kn);
    for (int k = 0; k < kn; ++k) zc[k] = point.z[k] - params.mu[k];
    ll += detail::mvn_logpdf_chol(zc, params.cov_chol, kn);
    if (!std::isfinite(ll)) throw numerical_error("apm_complete_loglik: non-finite result");
    return ll;
}

inline Vec apm_grad_z(std::span<const std::uint8_t> y_row, const LatentPoint& point,
                      const ApmParams& params, const QMatrix& q) {
    const int jn = q.items(), kn = q.attrs();
    Vec g(kn, 0.0);
    for (int j = 0; j < jn; ++j) {
        const double r = detail::bernoulli_residual(y_row[j], irf_apm(params, q, j, point.u));
        for (int k = 0; k < kn; ++k)
            if (q(j, k)) g[k] += r * params.slopes[j][k];
    }
    for (int k = 0; k < kn; ++k) g[k] *= normal_pdf(point.z[k]);
    Vec zc(kn);
    for (int k = 0; k < kn; ++k) zc[k] = point.z[k] - params.mu[k];
    detail::apply_sigma_inverse(params.cov_chol, kn, zc);
    for (int k = 0; k < kn; ++k) g[k] -= zc[k];
    return g;
}

inline ApmGradient apm_grads(std::span<const std::uint8_t> y_row, const LatentPoint& point,
                             const ApmParams& params, const QMatrix& q) {
    const int jn = q.items(), kn = q.attrs();
    ApmGradient g;
    g.d_delta0.assign(jn, 0.0);
    g.d_slopes.assign(jn, Vec(kn, 0.0));
    for (int j = 0; j < jn; ++j) {
        const double r = detail::bernoulli_residual(y_row[j], irf_apm(params, q, j, point.u));
        g.d_delta0[j] = r;
        for (int k = 0; k < kn; ++k)
            if (q(j, k)) g.d_slopes[j][k] = r * point.u[k];
    }
    Vec zc(kn);
    for (int k = 0; k < kn; ++k) zc[k] = point.z[k] - params.mu[k];
    Vec a = zc;
    detail::apply_sigma_inverse(params.cov_chol, kn, a);
    g.d_mu = a;
    g.d_cov_chol.assign(static_cast<std::size_t>(kn) * kn, 0.0);
    const auto& c = params.cov_chol;
    for (int cc = 0; cc < kn; ++cc) {
        Vec ccol(kn, 0.0);
        for (int m = cc; m < kn; ++m) ccol[m] = c[static_cast<std::size_t>(m) * kn + cc];
        Vec sic = ccol;
        detail::apply_sigma_inverse(c, kn, sic);
        const double a_dot_ccol = detail::dot(a, ccol);
        for (int r = cc; r < kn; ++r)
            g.d_cov_chol[static_cast<std::size_t>(r) * kn + cc] = a[r] * a_dot_ccol - sic[r];
    }
    return g;
}

}  // namespace gapmcdm
