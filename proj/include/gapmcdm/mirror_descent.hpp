#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "model.hpp"

// Closed-form mirror-descent updates: exponentiated gradient on simplexes
// (negative-entropy geometry), sphere projection for Cholesky rows, and the
// decaying step-size schedule. Gradients are of the log-likelihood (ascent).

namespace gapmcdm {

struct StepSchedule {
    double mu_alpha = 1.0;
    double mu_theta = 1.0;
    double mu_l = 1.0;
    double mu_delta = 1.0;
    double mu_z = 1.0;
    double epsilon = 0.01;

    void validate() const {
        if (!(mu_alpha > 0 && mu_theta > 0 && mu_l > 0 && mu_delta > 0 && mu_z > 0))
            throw config_error("StepSchedule: step constants must be positive");
        if (!(epsilon > 0 && epsilon < 0.5)) throw config_error("StepSchedule: epsilon outside (0, 0.5)");
    }
};

// gamma(t) = mu * t^(-0.5 - epsilon); square-summable but not summable.
inline double step_size(long t, double mu, double epsilon) {
    if (t < 1) throw domain_error("step_size: iteration must be >= 1");
    return mu * std::pow(static_cast<double>(t), -0.5 - epsilon);
}

namespace detail {

// Exponentiated-gradient step on the simplex spanned by the active entries.
// The shift by the largest active exponent keeps exp() in range and is exact
// for the normalized result.
inline void exp_gradient_update(std::span<double> w, std::span<const double> step_grad,
                                std::span<const std::uint8_t> mask) {
    double shift = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < w.size(); ++k)
        if ((mask.empty() || mask[k]) && step_grad[k] > shift) shift = step_grad[k];
    double norm = 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        if (!mask.empty() && !mask[k]) {
            w[k] = 0.0;
            continue;
        }
        w[k] *= std::exp(step_grad[k] - shift);
        norm += w[k];
    }
    if (!(norm > 0.0) || !std::isfinite(norm))
        throw numerical_error("exponentiated-gradient update collapsed to zero mass");
    for (double& v : w) v /= norm;
}

}  // namespace detail

inline ItemWeights update_weights(const ItemWeights& alpha, std::span<const double> grad, double gamma,
                                  std::span<const std::uint8_t> q_row) {
    ItemWeights out = alpha;
    Vec sg(grad.size());
    for (std::size_t k = 0; k < grad.size(); ++k) sg[k] = gamma * grad[k];
    detail::exp_gradient_update(out.alpha, sg, q_row);
    return out;
}

inline Vec update_theta(const Vec& theta, std::span<const double> grad, double gamma) {
    Vec out = theta;
    Vec sg(grad.size());
    for (std::size_t m = 0; m < grad.size(); ++m) sg[m] = gamma * grad[m];
    detail::exp_gradient_update(out, sg, {});
    return out;
}

// Projected gradient step on the unit sphere for row k (1-based index >= 2;
// the first row is fixed at e_1). The projection divides by the Euclidean
// norm; the diagonal entry (last coordinate of the prefix row) is floored at
// 1e-6 before renormalizing.
inline Vec update_chol_row(std::span<const double> row, std::span<const double> grad, double gamma) {
    Vec out(row.size());
    for (std::size_t c = 0; c < row.size(); ++c) out[c] = row[c] + gamma * grad[c];
    project_unit_row(out, static_cast<int>(row.size()) - 1);
    return out;
}

struct ApmBlockGradient {
    Vec d_delta0;               // per item
    std::vector<Vec> d_slopes;  // per item, length K
    Vec d_mu;
    Vec d_cov_chol;  // K x K lower triangle
};

// The delta block of each item lives on an augmented simplex
// (intercept, active slopes, slack = slipping probability); exponentiated
// gradient there preserves delta_j0 >= 0, slopes >= 0 and
// delta_j0 + sum slopes <= 1 exactly. The slack coordinate has zero gradient.
// Mean and covariance factor move by plain gradient ascent, with the factor's
// diagonal clamped away from zero.
inline ApmParams update_apm(const ApmParams& params, const QMatrix& q, const ApmBlockGradient& grads,
                            double gamma_delta, double gamma_musig) {
    ApmParams out = params;
    const int jn = params.items(), kn = params.attrs();
    for (int j = 0; j < jn; ++j) {
        Vec v, sg;
        v.reserve(kn + 2);
        sg.reserve(kn + 2);
        v.push_back(params.delta0[j]);
        sg.push_back(gamma_delta * grads.d_delta0[j]);
        double used = params.delta0[j];
        for (int k = 0; k < kn; ++k) {
            if (!q(j, k)) continue;
            v.push_back(params.slopes[j][k]);
            sg.push_back(gamma_delta * grads.d_slopes[j][k]);
            used += params.slopes[j][k];
        }
        v.push_back(std::max(1.0 - used, 0.0));  // slack: slipping probability
        sg.push_back(0.0);
        detail::exp_gradient_update(v, sg, {});
        out.delta0[j] = v[0];
        int idx = 1;
        for (int k = 0; k < kn; ++k)
            if (q(j, k)) out.slopes[j][k] = v[idx++];
    }
    for (int k = 0; k < kn; ++k) out.mu[k] = params.mu[k] + gamma_musig * grads.d_mu[k];
    for (int r = 0; r < kn; ++r)
        for (int c = 0; c <= r; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * kn + c;
            out.cov_chol[i] = params.cov_chol[i] + gamma_musig * grads.d_cov_chol[i];
            if (r == c && out.cov_chol[i] < kCholDiagFloor) out.cov_chol[i] = kCholDiagFloor;
        }
    return out;
}

}  // namespace gapmcdm
