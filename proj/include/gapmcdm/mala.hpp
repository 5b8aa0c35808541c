#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "likelihood.hpp"
#include "rng.hpp"

// Metropolis-adjusted Langevin sampler targeting the per-individual posterior
// of the latent attributes on the Gaussian scale.

namespace gapmcdm {

struct MalaConfig {
    double h = 0.2;       // discretization step
    int inner_steps = 1;  // transitions per individual per SA iteration

    static MalaConfig from_mu_z(double mu_z, int attrs) {
        MalaConfig c;
        c.h = mu_z * std::pow(static_cast<double>(attrs), -1.0 / 3.0);
        return c;
    }

    void validate() const {
        if (!(h > 0.0)) throw config_error("MalaConfig: step must be positive");
        if (inner_steps < 1) throw config_error("MalaConfig: inner_steps must be >= 1");
    }
};

struct ChainState {
    LatentPoint point;
    std::uint64_t proposals = 0;
    std::uint64_t accepts = 0;
    std::uint64_t numerical_warnings = 0;

    double acceptance_rate() const {
        return proposals ? static_cast<double>(accepts) / static_cast<double>(proposals) : 0.0;
    }
};

// Euler-Maruyama proposal z + h * drift + sqrt(2h) * noise.
inline Vec propose(std::span<const double> z, std::span<const double> drift, double h,
                   std::span<const double> noise) {
    if (!(h > 0.0)) throw domain_error("propose: step must be positive");
    Vec out(z.size());
    const double s = std::sqrt(2.0 * h);
    for (std::size_t k = 0; k < z.size(); ++k) out[k] = z[k] + h * drift[k] + s * noise[k];
    return out;
}

// log q_h(z_to | z_from) = -(K/2) log(4 pi h) - ||z_to - z_from - h drift||^2 / (4h).
inline double log_kernel(std::span<const double> z_to, std::span<const double> z_from,
                         std::span<const double> drift_from, double h) {
    if (!(h > 0.0)) throw domain_error("log_kernel: step must be positive");
    const auto k = static_cast<double>(z_to.size());
    double r2 = 0.0;
    for (std::size_t i = 0; i < z_to.size(); ++i) {
        const double d = z_to[i] - z_from[i] - h * drift_from[i];
        r2 += d * d;
    }
    return -0.5 * k * std::log(4.0 * M_PI * h) - r2 / (4.0 * h);
}

// One Metropolis-Hastings transition against a generic target. Target must
// provide log_density(z, grad_out) -> double with grad_out of size K. A
// non-finite acceptance ratio rejects the proposal and bumps the warning
// counter rather than aborting the run.
template <class Target, class RngT>
void mala_transition(ChainState& state, Target&& target, double h, RngT& rng) {
    const auto kn = state.point.z.size();
    Vec grad_cur(kn), grad_prop(kn), noise(kn);
    const double ll_cur = target.log_density(state.point.z, grad_cur);
    for (auto& e : noise) e = rng.normal();
    Vec z_prop = propose(state.point.z, grad_cur, h, noise);

    state.proposals += 1;
    double log_alpha;
    bool usable = true;
    double ll_prop = 0.0;
    try {
        ll_prop = target.log_density(z_prop, grad_prop);
        const double fwd = log_kernel(z_prop, state.point.z, grad_cur, h);
        const double bwd = log_kernel(state.point.z, z_prop, grad_prop, h);
        log_alpha = (ll_prop + bwd) - (ll_cur + fwd);
        usable = std::isfinite(log_alpha);
    } catch (const numerical_error&) {
        usable = false;
        log_alpha = -std::numeric_limits<double>::infinity();
    }
    if (!usable) {
        state.numerical_warnings += 1;
        (void)rng.uniform();  // keep the stream layout fixed across branches
        return;
    }
    const double u = rng.uniform();
    if (std::log(u) < log_alpha) {
        state.accepts += 1;
        state.point = LatentPoint::from_z(std::move(z_prop));
    }
}

namespace detail {

struct GapmTarget {
    std::span<const std::uint8_t> y_row;
    const GapmParams& params;
    const QMatrix& q;

    double log_density(const Vec& z, Vec& grad) const {
        const LatentPoint p = LatentPoint::from_z(z);
        grad = grad_z(y_row, p, params, q);
        return complete_loglik(y_row, p, params, q);
    }
};

struct ApmTarget {
    std::span<const std::uint8_t> y_row;
    const ApmParams& params;
    const QMatrix& q;

    double log_density(const Vec& z, Vec& grad) const {
        const LatentPoint p = LatentPoint::from_z(z);
        grad = apm_grad_z(y_row, p, params, q);
        return apm_complete_loglik(y_row, p, params, q);
    }
};

}  // namespace detail

template <class RngT>
void mala_step(ChainState& state, std::span<const std::uint8_t> y_row, const GapmParams& params,
               const QMatrix& q, const MalaConfig& config, RngT& rng) {
    detail::GapmTarget target{y_row, params, q};
    for (int s = 0; s < config.inner_steps; ++s) mala_transition(state, target, config.h, rng);
}

template <class RngT>
void mala_step(ChainState& state, std::span<const std::uint8_t> y_row, const ApmParams& params,
               const QMatrix& q, const MalaConfig& config, RngT& rng) {
    detail::ApmTarget target{y_row, params, q};
    for (int s = 0; s < config.inner_steps; ++s) mala_transition(state, target, config.h, rng);
}

}  // namespace gapmcdm
