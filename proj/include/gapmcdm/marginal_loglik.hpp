#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "detail/gauss_hermite.hpp"
#include "fit.hpp"

// Marginal log-likelihood: importance-sampling estimator with online
// posterior-moment proposals, plus a tensor Gauss-Hermite oracle for small K.

namespace gapmcdm {

struct IsResult {
    double loglik = 0.0;
    Vec per_unit_loglik;
    Vec per_unit_se;
    int proposal_fallbacks = 0;

    double joint_se() const {
        double s = 0.0;
        for (double v : per_unit_se) s += v * v;
        return std::sqrt(s);
    }
};

namespace detail {

template <class Flat>
IsResult is_loglik_impl(const Dataset& data, const Flat& flat, const PosteriorMoments& moments,
                        int m_draws, std::uint64_t seed, int threads) {
    if (m_draws < 2) throw domain_error("is_loglik: need at least 2 draws");
    if (moments.n != data.n() || moments.attrs != flat.attrs)
        throw config_error("is_loglik: posterior moments do not match the data");
    const int n = data.n(), kn = flat.attrs;
    IsResult res;
    res.per_unit_loglik.assign(n, 0.0);
    res.per_unit_se.assign(n, 0.0);
    std::vector<int> fallback_flag(n, 0);
    const double log_m = std::log(static_cast<double>(m_draws));

    ThreadPool pool(threads);
    const int block = 16;
    const int n_blocks = (n + block - 1) / block;
    const std::function<void(int)> task = [&](int b) {
        EvalScratch scratch;
        scratch.resize(flat.items, kn);
        Vec prop_chol, xi(kn), z(kn), logw(m_draws);
        Vec cov(static_cast<std::size_t>(kn) * kn);
        for (int i = b * block; i < std::min(n, (b + 1) * block); ++i) {
            // proposal N(mu_i, Sigma_i + I), heavier-tailed than the prior
            const auto mean_i = moments.mean_of(i);
            const auto cov_i = moments.cov_of(i);
            for (int a = 0; a < kn; ++a)
                for (int c = 0; c < kn; ++c)
                    cov[static_cast<std::size_t>(a) * kn + c] =
                        cov_i[static_cast<std::size_t>(a) * kn + c] + (a == c ? 1.0 : 0.0);
            try {
                prop_chol = cholesky(cov, kn);
            } catch (const numerical_error&) {
                fallback_flag[i] = 1;
                prop_chol.assign(static_cast<std::size_t>(kn) * kn, 0.0);
                for (int a = 0; a < kn; ++a) prop_chol[static_cast<std::size_t>(a) * kn + a] = 1.0;
            }
            const double prop_logdet = log_det_lower(prop_chol, kn);
            CounterRng rng(seed, 0x6d6c6c6bULL, static_cast<std::uint64_t>(i));
            for (int m = 0; m < m_draws; ++m) {
                for (int a = 0; a < kn; ++a) xi[a] = rng.normal();
                for (int a = 0; a < kn; ++a) {
                    double s = mean_i[a];
                    for (int c = 0; c <= a; ++c) s += prop_chol[static_cast<std::size_t>(a) * kn + c] * xi[c];
                    z[a] = s;
                }
                // log f(y_i, z) - log q_i(z); the complete-data eval already
                // contains the prior term.
                const double joint = flat.eval(data.row(i), z, scratch, nullptr);
                const double logq = -0.5 * kn * kLog2Pi - prop_logdet - 0.5 * squared_norm(xi);
                logw[m] = joint - logq;
            }
            const double lse = log_sum_exp(logw);
            res.per_unit_loglik[i] = lse - log_m;
            Vec logw2(logw);
            for (double& v : logw2) v *= 2.0;
            const double lse2 = log_sum_exp(logw2);
            // delta-method Monte-Carlo s.e. of log-mean weight
            const double ratio = std::exp(log_m + lse2 - 2.0 * lse);
            res.per_unit_se[i] = std::sqrt(std::max(0.0, ratio - 1.0) / (m_draws - 1.0));
        }
    };
    pool.run(n_blocks, task);

    for (int i = 0; i < n; ++i) {
        res.loglik += res.per_unit_loglik[i];
        res.proposal_fallbacks += fallback_flag[i];
    }
    return res;
}

template <class Flat>
double quad_loglik_impl(const Dataset& data, const Flat& flat, std::span<const double> prior_mean,
                        std::span<const double> prior_chol, int nodes_per_dim) {
    const int kn = flat.attrs;
    if (kn > 3) throw domain_error("quad_loglik: tensor quadrature supported only for K <= 3");
    if (nodes_per_dim < 1) throw domain_error("quad_loglik: need at least one node");
    const auto gh = gauss_hermite(nodes_per_dim);
    const int n = data.n(), jn = data.items();

    std::vector<double> lik(n, 0.0);
    EvalScratch scratch;
    scratch.resize(jn, kn);
    Vec u(kn), z(kn), x(kn), probs(jn), log_p(jn), log_1mp(jn);
    std::vector<int> idx(kn, 0);
    const double sqrt2 = std::sqrt(2.0);
    for (;;) {
        double wprod = 1.0;
        for (int k = 0; k < kn; ++k) {
            x[k] = gh.nodes[idx[k]];
            wprod *= gh.weights[idx[k]];
        }
        // z = mean + sqrt(2) L x decorrelates the Gaussian prior
        for (int a = 0; a < kn; ++a) {
            double s = prior_mean.empty() ? 0.0 : prior_mean[a];
            for (int c = 0; c <= a; ++c) s += sqrt2 * prior_chol[static_cast<std::size_t>(a) * kn + c] * x[c];
            z[a] = s;
        }
        for (int k = 0; k < kn; ++k) u[k] = normal_cdf(z[k]);
        flat.item_probs(u, scratch, probs);
        for (int j = 0; j < jn; ++j) {
            const double pc = clamp_prob(probs[j]);
            log_p[j] = std::log(pc);
            log_1mp[j] = std::log1p(-pc);
        }
        for (int i = 0; i < n; ++i) {
            double ll = 0.0;
            const auto y = data.row(i);
            for (int j = 0; j < jn; ++j) ll += y[j] ? log_p[j] : log_1mp[j];
            lik[i] += wprod * std::exp(ll);
        }
        int k = 0;
        while (k < kn && ++idx[k] == nodes_per_dim) idx[k++] = 0;
        if (k == kn) break;
    }
    const double log_norm = -0.5 * kn * std::log(M_PI);
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += std::log(lik[i]) + log_norm;
    return total;
}

template <class Flat>
PosteriorMoments sample_moments_impl(const Dataset& data, const Flat& flat, const MalaConfig& mala,
                                     long iters, long burn_in, std::uint64_t seed, int threads) {
    if (burn_in < 0 || burn_in >= iters)
        throw config_error("sample_posterior_moments: need 0 <= burn_in < iterations");
    const int n = data.n(), kn = flat.attrs;
    const double h = mala.h;
    const double sqrt2h = std::sqrt(2.0 * h);

    Rng init_rng(splitmix64(seed ^ 0x736d706cULL));
    auto z_start = init_latent_starts(data, kn, init_rng);
    Vec z(static_cast<std::size_t>(n) * kn);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < kn; ++k) z[static_cast<std::size_t>(i) * kn + k] = z_start[i][k];

    PosteriorMoments moments = PosteriorMoments::zeros(n, kn);
    ThreadPool pool(threads);
    const int n_blocks = (n + kBlockSize - 1) / kBlockSize;
    const std::function<void(int)> task = [&](int b) {
        EvalScratch s_cur, s_prop;
        s_cur.resize(flat.items, kn);
        s_prop.resize(flat.items, kn);
        Vec z_prop(kn);
        for (int i = b * kBlockSize; i < std::min(n, (b + 1) * kBlockSize); ++i) {
            std::span<double> zi(z.data() + static_cast<std::size_t>(i) * kn, static_cast<std::size_t>(kn));
            const auto y_row = data.row(i);
            for (long t = 1; t <= iters; ++t) {
                CounterRng rng(seed, static_cast<std::uint64_t>(i) + 1, static_cast<std::uint64_t>(t));
                const double ll_cur = flat.eval(y_row, zi, s_cur, s_cur.grad.data());
                for (int k = 0; k < kn; ++k)
                    z_prop[k] = zi[k] + h * s_cur.grad[k] + sqrt2h * rng.normal();
                const double ll_prop = flat.eval(y_row, z_prop, s_prop, s_prop.grad.data());
                double fwd = 0.0, bwd = 0.0;
                for (int k = 0; k < kn; ++k) {
                    const double df = z_prop[k] - zi[k] - h * s_cur.grad[k];
                    const double db = zi[k] - z_prop[k] - h * s_prop.grad[k];
                    fwd += df * df;
                    bwd += db * db;
                }
                const double log_alpha = (ll_prop - bwd / (4.0 * h)) - (ll_cur - fwd / (4.0 * h));
                const double u01 = rng.uniform();
                if (std::isfinite(log_alpha) && std::log(u01) < log_alpha)
                    for (int k = 0; k < kn; ++k) zi[k] = z_prop[k];
                if (t > burn_in) {
                    update_posterior_moments(
                        {moments.mean.data() + static_cast<std::size_t>(i) * kn, static_cast<std::size_t>(kn)},
                        {moments.cov.data() + static_cast<std::size_t>(i) * kn * kn,
                         static_cast<std::size_t>(kn) * kn},
                        kn, zi, moments.count[i]);
                    moments.count[i] += 1;
                }
            }
        }
    };
    pool.run(n_blocks, task);
    return moments;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public surface: GaPM and aPM overloads.
// ---------------------------------------------------------------------------
inline IsResult is_loglik(const Dataset& data, const GapmParams& params, const QMatrix& q,
                          const PosteriorMoments& moments, int m_draws, std::uint64_t seed,
                          int threads = 1) {
    return detail::is_loglik_impl(data, detail::FlatGapm::from_params(params, q), moments, m_draws,
                                  seed, threads);
}

inline IsResult is_loglik(const Dataset& data, const ApmParams& params, const QMatrix& q,
                          const PosteriorMoments& moments, int m_draws, std::uint64_t seed,
                          int threads = 1) {
    return detail::is_loglik_impl(data, detail::FlatApm::from_params(params, q), moments, m_draws,
                                  seed, threads);
}

inline double quad_loglik(const Dataset& data, const GapmParams& params, const QMatrix& q,
                          int nodes_per_dim) {
    const Vec empty;
    return detail::quad_loglik_impl(data, detail::FlatGapm::from_params(params, q), empty,
                                    params.chol.rows(), nodes_per_dim);
}

inline double quad_loglik(const Dataset& data, const ApmParams& params, const QMatrix& q,
                          int nodes_per_dim) {
    return detail::quad_loglik_impl(data, detail::FlatApm::from_params(params, q), params.mu,
                                    params.cov_chol, nodes_per_dim);
}

// Runs fixed-parameter MALA chains to accumulate posterior moments on data
// that was not part of the fit (needed before is_loglik on held-out units).
inline PosteriorMoments sample_posterior_moments(const Dataset& data, const GapmParams& params,
                                                 const QMatrix& q, const MalaConfig& mala, long iters,
                                                 long burn_in, std::uint64_t seed, int threads = 1) {
    return detail::sample_moments_impl(data, detail::FlatGapm::from_params(params, q), mala, iters,
                                       burn_in, seed, threads);
}

inline PosteriorMoments sample_posterior_moments(const Dataset& data, const ApmParams& params,
                                                 const QMatrix& q, const MalaConfig& mala, long iters,
                                                 long burn_in, std::uint64_t seed, int threads = 1) {
    return detail::sample_moments_impl(data, detail::FlatApm::from_params(params, q), mala, iters,
                                       burn_in, seed, threads);
}

}  // namespace gapmcdm
