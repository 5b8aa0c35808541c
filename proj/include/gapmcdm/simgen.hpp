#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "detail/linalg.hpp"
#include "model.hpp"
#include "rng.hpp"

// Data generation for the simulation studies: equicorrelated Gaussian copula
// draws, Beta-CDF truth response functions, guessing/slipping generation, and
// the two built-in 20-item design matrices.

namespace gapmcdm {

// Sigma = sigma * 11^T + (1 - sigma) * I, positive definite for sigma in [0,1).
inline Vec make_equicorr(int k, double sigma) {
    if (k < 1) throw domain_error("make_equicorr: K must be positive");
    if (!(sigma >= 0.0 && sigma < 1.0)) throw domain_error("make_equicorr: sigma outside [0,1)");
    Vec s(static_cast<std::size_t>(k) * k, sigma);
    for (int i = 0; i < k; ++i) s[static_cast<std::size_t>(i) * k + i] = 1.0;
    return s;
}

// n x K partial-mastery scores: Z ~ N(0, corr), U = Phi(Z). Marginals are
// Uniform(0,1).
template <class RngT>
Vec sample_copula(int n, const Vec& corr, int k, RngT& rng) {
    if (n < 1) throw domain_error("sample_copula: n must be positive");
    const Vec l = detail::cholesky(corr, k);
    Vec u(static_cast<std::size_t>(n) * k);
    Vec xi(k);
    for (int i = 0; i < n; ++i) {
        for (int a = 0; a < k; ++a) xi[a] = rng.normal();
        for (int a = 0; a < k; ++a) {
            double z = 0.0;
            for (int c = 0; c <= a; ++c) z += l[static_cast<std::size_t>(a) * k + c] * xi[c];
            u[static_cast<std::size_t>(i) * k + a] = normal_cdf(z);
        }
    }
    return u;
}

struct BetaShape {
    double a = 1.0;
    double b = 1.0;
};

inline constexpr std::array<BetaShape, 4> kTruthShapeCycle{
    BetaShape{3.0, 3.0}, BetaShape{1.0 / 3.0, 1.0 / 3.0}, BetaShape{1.0, 3.0}, BetaShape{3.0, 1.0}};

// Deterministic assignment: cycle through the four Beta CDF shapes over the
// active (item, attribute) pairs in row-major order.
inline std::vector<std::vector<BetaShape>> default_shape_map(const QMatrix& q) {
    std::vector<std::vector<BetaShape>> shapes(q.items(), std::vector<BetaShape>(q.attrs()));
    int c = 0;
    for (int j = 0; j < q.items(); ++j)
        for (int k = 0; k < q.attrs(); ++k)
            if (q(j, k)) shapes[j][k] = kTruthShapeCycle[c++ % kTruthShapeCycle.size()];
    return shapes;
}

struct GapmTruth {
    std::vector<ItemWeights> weights;
    std::vector<std::vector<BetaShape>> shapes;
    Vec corr;  // K x K
    Vec u;     // n x K true scores

    double irf(const QMatrix& q, int j, std::span<const double> u_point) const {
        double p = 0.0;
        for (int k = 0; k < q.attrs(); ++k)
            if (q(j, k) && weights[j].alpha[k] != 0.0)
                p += weights[j].alpha[k] * beta_cdf(shapes[j][k].a, shapes[j][k].b, u_point[k]);
        return p;
    }
};

struct ApmTruth {
    Vec delta0;
    std::vector<Vec> slopes;
    Vec slipping;
    Vec corr;
    Vec u;

    double irf(const QMatrix& q, int j, std::span<const double> u_point) const {
        return irf_apm(delta0[j], slopes[j], q.row(j), u_point);
    }
};

template <class RngT>
std::pair<Dataset, GapmTruth> gen_gapm(int n, const QMatrix& q,
                                       std::vector<std::vector<BetaShape>> shapes,
                                       std::vector<ItemWeights> weights, const Vec& corr, RngT& rng) {
    const int jn = q.items(), kn = q.attrs();
    GapmTruth truth;
    truth.weights = std::move(weights);
    truth.shapes = std::move(shapes);
    truth.corr = corr;
    truth.u = sample_copula(n, corr, kn, rng);
    std::vector<std::uint8_t> y(static_cast<std::size_t>(n) * jn);
    for (int i = 0; i < n; ++i) {
        const std::span<const double> ui{truth.u.data() + static_cast<std::size_t>(i) * kn,
                                         static_cast<std::size_t>(kn)};
        for (int j = 0; j < jn; ++j)
            y[static_cast<std::size_t>(i) * jn + j] = rng.uniform() < truth.irf(q, j, ui) ? 1 : 0;
    }
    return {Dataset(n, jn, std::move(y)), std::move(truth)};
}

// Intercepts and slipping from Unif(0, 0.2); active slopes drawn from
// Unif(0, 1 - delta0 - s) and rescaled so delta0 + sum slopes + s = 1 exactly.
template <class RngT>
std::pair<Dataset, ApmTruth> gen_apm(int n, const QMatrix& q, const Vec& corr, const Vec& mu,
                                     RngT& rng) {
    const int jn = q.items(), kn = q.attrs();
    if (!mu.empty() && static_cast<int>(mu.size()) != kn)
        throw config_error("gen_apm: mean length mismatch");
    ApmTruth truth;
    truth.delta0.resize(jn);
    truth.slipping.resize(jn);
    truth.slopes.assign(jn, Vec(kn, 0.0));
    truth.corr = corr;
    for (int j = 0; j < jn; ++j) truth.delta0[j] = rng.uniform(0.0, 0.2);
    for (int j = 0; j < jn; ++j) truth.slipping[j] = rng.uniform(0.0, 0.2);
    for (int j = 0; j < jn; ++j) {
        const double target = 1.0 - truth.delta0[j] - truth.slipping[j];
        double drawn_sum = 0.0;
        for (int k = 0; k < kn; ++k)
            if (q(j, k)) {
                truth.slopes[j][k] = rng.uniform(0.0, target);
                drawn_sum += truth.slopes[j][k];
            }
        const double scale = target / drawn_sum;
        double placed = 0.0;
        int last = -1;
        for (int k = 0; k < kn; ++k)
            if (q(j, k)) {
                truth.slopes[j][k] *= scale;
                placed += truth.slopes[j][k];
                last = k;
            }
        truth.slopes[j][last] += target - placed;  // absorb rounding so the sum is exact
    }
    truth.u = sample_copula(n, corr, kn, rng);
    if (!mu.empty()) {
        // shift on the Gaussian scale, then back to the uniform scale
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < kn; ++k) {
                double& u = truth.u[static_cast<std::size_t>(i) * kn + k];
                u = normal_cdf(normal_quantile(u) + mu[k]);
            }
    }
    std::vector<std::uint8_t> y(static_cast<std::size_t>(n) * jn);
    for (int i = 0; i < n; ++i) {
        const std::span<const double> ui{truth.u.data() + static_cast<std::size_t>(i) * kn,
                                         static_cast<std::size_t>(kn)};
        for (int j = 0; j < jn; ++j)
            y[static_cast<std::size_t>(i) * jn + j] = rng.uniform() < truth.irf(q, j, ui) ? 1 : 0;
    }
    return {Dataset(n, jn, std::move(y)), std::move(truth)};
}

// The two 20-item design matrices used by the simulation studies.
inline QMatrix builtin_q(const std::string& name) {
    if (name == "Q3") {
        static constexpr std::uint8_t rows[20][3] = {
            {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 0},
            {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}, {1, 1, 0}, {1, 0, 1},
            {0, 1, 1}, {1, 1, 0}, {1, 0, 1}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}};
        std::vector<std::uint8_t> a;
        a.reserve(60);
        for (const auto& r : rows) a.insert(a.end(), r, r + 3);
        return QMatrix(20, 3, std::move(a));
    }
    if (name == "Q5") {
        static constexpr std::uint8_t rows[20][5] = {
            {1, 0, 0, 0, 0}, {0, 1, 0, 0, 0}, {0, 0, 1, 0, 0}, {0, 0, 0, 1, 0}, {0, 0, 0, 0, 1},
            {1, 0, 0, 0, 0}, {0, 1, 0, 0, 0}, {0, 0, 1, 0, 0}, {0, 0, 0, 1, 0}, {0, 0, 0, 0, 1},
            {1, 1, 0, 0, 0}, {0, 1, 1, 0, 0}, {0, 0, 1, 1, 0}, {0, 0, 0, 1, 1}, {1, 0, 0, 0, 1},
            {1, 1, 1, 0, 0}, {0, 1, 1, 1, 0}, {0, 0, 1, 1, 1}, {1, 0, 0, 1, 1}, {1, 1, 0, 0, 1}};
        std::vector<std::uint8_t> a;
        a.reserve(100);
        for (const auto& r : rows) a.insert(a.end(), r, r + 5);
        return QMatrix(20, 5, std::move(a));
    }
    throw domain_error("builtin_q: unknown design '" + name + "' (expected Q3 or Q5)");
}

// Equal weights over the active attributes of every item.
inline std::vector<ItemWeights> equal_weights(const QMatrix& q) {
    std::vector<ItemWeights> w;
    w.reserve(q.items());
    for (int j = 0; j < q.items(); ++j) w.push_back(ItemWeights::equal(q.row(j)));
    return w;
}

}  // namespace gapmcdm
