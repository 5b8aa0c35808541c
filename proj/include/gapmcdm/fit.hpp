#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "detail/thread_pool.hpp"
#include "likelihood.hpp"
#include "mala.hpp"
#include "mirror_descent.hpp"
#include "model.hpp"
#include "rng.hpp"

// SA-MD driver: alternates one MALA transition per individual (SA step) with
// closed-form mirror-descent updates per parameter block (MD step), keeping
// Polyak-Ruppert averages of parameters and latent draws past burn-in.
//
// Determinism contract: every random draw comes from a counter stream keyed
// by (seed, individual, iteration), and per-iteration gradients are reduced
// over fixed-size individual blocks merged in block order. Results are
// bit-identical for any worker count.

namespace gapmcdm {

enum class ModelKind { gapm, apm };
enum class FitMode { confirmatory, exploratory };

struct FitConfig {
    long iterations = 90000;
    long burn_in = 45000;
    StepSchedule schedule;
    MalaConfig mala;
    std::uint64_t seed = 1;
    FitMode mode = FitMode::confirmatory;
    int threads = 1;
    long checkpoint_every = 0;  // 0: max(1, iterations/100)
    long validate_every = 0;    // 0: off; otherwise invariant spot checks
    std::ostream* progress = nullptr;

    void validate() const {
        if (iterations < 1) throw config_error("FitConfig: iterations must be >= 1");
        if (burn_in < 0 || burn_in >= iterations)
            throw config_error("FitConfig: burn-in must satisfy 0 <= burn_in < iterations");
        schedule.validate();
        mala.validate();
        if (threads < 1) throw config_error("FitConfig: threads must be >= 1");
    }
};

// Per-individual online posterior moments (population covariance) of the
// latent attributes on the Gaussian scale.
struct PosteriorMoments {
    int n = 0;
    int attrs = 0;
    std::vector<long> count;
    Vec mean;  // N x K
    Vec cov;   // N x K x K

    static PosteriorMoments zeros(int n_units, int k) {
        PosteriorMoments m;
        m.n = n_units;
        m.attrs = k;
        m.count.assign(n_units, 0);
        m.mean.assign(static_cast<std::size_t>(n_units) * k, 0.0);
        m.cov.assign(static_cast<std::size_t>(n_units) * k * k, 0.0);
        return m;
    }

    std::span<const double> mean_of(int i) const {
        return {mean.data() + static_cast<std::size_t>(i) * attrs, static_cast<std::size_t>(attrs)};
    }
    std::span<const double> cov_of(int i) const {
        return {cov.data() + static_cast<std::size_t>(i) * attrs * attrs,
                static_cast<std::size_t>(attrs) * attrs};
    }
};

// mu_{t+1} = mu_t + (z - mu_t)/(t+1),
// cov_{t+1} = t cov_t/(t+1) + t (z - mu_t)(z - mu_t)^T/(t+1)^2, with t draws seen so far.
inline void update_posterior_moments(std::span<double> mean, std::span<double> cov, int k,
                                     std::span<const double> z, long t) {
    if (t < 0) throw domain_error("update_posterior_moments: negative count");
    const double t1 = 1.0 / (t + 1.0);
    const double c2 = static_cast<double>(t) * t1;        // t/(t+1)
    const double c3 = static_cast<double>(t) * t1 * t1;   // t/(t+1)^2
    for (int a = 0; a < k; ++a)
        for (int b = 0; b < k; ++b) {
            const double da = z[a] - mean[a];
            const double db = z[b] - mean[b];
            cov[static_cast<std::size_t>(a) * k + b] =
                c2 * cov[static_cast<std::size_t>(a) * k + b] + c3 * da * db;
        }
    for (int a = 0; a < k; ++a) mean[a] += (z[a] - mean[a]) * t1;
}

// Post-burn-in arithmetic mean of latent draws (EAP scores) for one unit.
inline Vec eap_scores(const std::vector<Vec>& u_draws) {
    if (u_draws.empty()) throw domain_error("eap_scores: no post-burn-in draws");
    Vec s(u_draws.front().size(), 0.0);
    for (const auto& u : u_draws)
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += u[k];
    for (double& v : s) v /= static_cast<double>(u_draws.size());
    return s;
}

struct Checkpoint {
    long iteration = 0;
    double acceptance_rate = 0.0;
    double complete_loglik = 0.0;
    Vec params_flat;  // engine layout snapshot
};

struct FitResult {
    ModelKind model = ModelKind::gapm;
    std::optional<GapmParams> gapm;
    std::optional<ApmParams> apm;
    Vec eap;  // N x K
    PosteriorMoments moments;
    double acceptance_rate = 0.0;
    std::uint64_t numerical_warnings = 0;
    std::vector<Checkpoint> trajectory;
    std::vector<std::string> warnings;
    double early_loglik_mean = 0.0;  // first-decile mean of complete-data loglik
    double late_loglik_mean = 0.0;   // last-decile mean
};

// ---------------------------------------------------------------------------
// Starting values.
// ---------------------------------------------------------------------------

namespace detail {

// Rank-based proportion-correct latent start: the rank of each individual's
// share of correct responses (average ranks on ties) mapped through the
// normal quantile, replicated across attributes, plus N(0, 0.1^2) jitter.
inline std::vector<Vec> init_latent_starts(const Dataset& data, int attrs, Rng& rng) {
    const int n = data.n();
    Vec score(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < data.items(); ++j) s += data(i, j);
        score[i] = data.items() ? s / data.items() : 0.5;
    }
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return score[a] < score[b]; });
    Vec rank(n, 0.0);
    for (int pos = 0; pos < n;) {
        int end = pos;
        while (end < n && score[order[end]] == score[order[pos]]) ++end;
        const double avg = 0.5 * (pos + end - 1) + 1.0;  // 1-based average rank
        for (int m = pos; m < end; ++m) rank[order[m]] = avg;
        pos = end;
    }
    std::vector<Vec> z(n, Vec(attrs, 0.0));
    for (int i = 0; i < n; ++i) {
        const double p = std::clamp(rank[i] / (n + 1.0), 0.01, 0.99);
        const double base = normal_quantile(p);
        for (int k = 0; k < attrs; ++k) z[i][k] = base + 0.1 * rng.normal();
    }
    return z;
}

}  // namespace detail

inline std::pair<GapmParams, std::vector<Vec>> init_gapm(const Dataset& data, const QMatrix& q,
                                                         std::shared_ptr<const KnotGrid> grid, Rng& rng) {
    q.validate();  // rejects all-zero rows (invalid design)
    GapmParams p;
    p.grid = grid;
    p.chol = CholeskyCorrelation::identity(q.attrs());
    p.weights.reserve(q.items());
    p.sieves.assign(q.items(), std::vector<SieveMonotone>());
    for (int j = 0; j < q.items(); ++j) {
        p.weights.push_back(ItemWeights::equal(q.row(j)));
        p.sieves[j].reserve(q.attrs());
        for (int k = 0; k < q.attrs(); ++k) p.sieves[j].push_back(SieveMonotone::identity(grid));
    }
    return {std::move(p), detail::init_latent_starts(data, q.attrs(), rng)};
}

// Intercepts start at 0.1, active slopes share 0.8 equally (slipping 0.1),
// latent prior starts standard normal.
inline std::pair<ApmParams, std::vector<Vec>> init_apm(const Dataset& data, const QMatrix& q, Rng& rng) {
    q.validate();
    const int jn = q.items(), kn = q.attrs();
    ApmParams p;
    p.delta0.assign(jn, 0.1);
    p.slopes.assign(jn, Vec(kn, 0.0));
    for (int j = 0; j < jn; ++j) {
        int active = 0;
        for (int k = 0; k < kn; ++k) active += q(j, k);
        for (int k = 0; k < kn; ++k)
            if (q(j, k)) p.slopes[j][k] = 0.8 / active;
    }
    p.mu.assign(kn, 0.0);
    p.cov_chol.assign(static_cast<std::size_t>(kn) * kn, 0.0);
    for (int k = 0; k < kn; ++k) p.cov_chol[static_cast<std::size_t>(kn) * k + k] = 1.0;
    return {std::move(p), detail::init_latent_starts(data, kn, rng)};
}

// ---------------------------------------------------------------------------
// Fused engine internals.
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr int kBlockSize = 32;

struct EvalScratch {
    Vec u, frac, solve_tmp, grad, z_work;
    std::vector<int> seg;
    Vec r;  // per-item Bernoulli residual

    void resize(int items, int attrs) {
        u.assign(attrs, 0.0);
        frac.assign(attrs, 0.0);
        solve_tmp.assign(attrs, 0.0);
        grad.assign(attrs, 0.0);
        z_work.assign(attrs, 0.0);
        seg.assign(attrs, 0);
        r.assign(items, 0.0);
    }
};

// Flattened GaPM parameters plus per-iteration caches.
struct FlatGapm {
    int items = 0, attrs = 0, segs = 0;
    std::shared_ptr<const KnotGrid> grid;
    Vec breaks, seglen;
    std::vector<std::vector<int>> active;  // attribute list per item
    std::vector<std::uint8_t> qmask;       // J*K

    Vec alpha;  // J*K
    Vec theta;  // J*K*S
    Vec chol;   // K*K

    Vec cum;    // J*K*(S+1) prefix sums of theta
    Vec slope;  // J*K*S
    double log_det = 0.0;

    std::size_t pair(int j, int k) const { return static_cast<std::size_t>(j) * attrs + k; }

    static FlatGapm from_params(const GapmParams& p, const QMatrix& q) {
        FlatGapm f;
        f.items = q.items();
        f.attrs = q.attrs();
        f.segs = p.grid->segments();
        f.grid = p.grid;
        f.breaks = p.grid->breakpoints();
        f.seglen.resize(f.segs);
        for (int m = 0; m < f.segs; ++m) f.seglen[m] = p.grid->segment_length(m);
        f.active.resize(f.items);
        f.qmask.assign(static_cast<std::size_t>(f.items) * f.attrs, 0);
        for (int j = 0; j < f.items; ++j)
            for (int k = 0; k < f.attrs; ++k)
                if (q(j, k)) {
                    f.active[j].push_back(k);
                    f.qmask[f.pair(j, k)] = 1;
                }
        f.alpha.assign(static_cast<std::size_t>(f.items) * f.attrs, 0.0);
        f.theta.assign(static_cast<std::size_t>(f.items) * f.attrs * f.segs, 0.0);
        for (int j = 0; j < f.items; ++j)
            for (int k = 0; k < f.attrs; ++k) {
                f.alpha[f.pair(j, k)] = p.weights[j].alpha[k];
                for (int m = 0; m < f.segs; ++m)
                    f.theta[f.pair(j, k) * f.segs + m] = p.sieves[j][k].theta[m];
            }
        f.chol = p.chol.rows();
        f.cum.assign(static_cast<std::size_t>(f.items) * f.attrs * (f.segs + 1), 0.0);
        f.slope.assign(f.theta.size(), 0.0);
        f.refresh();
        return f;
    }

    GapmParams to_params() const {
        GapmParams p;
        p.grid = grid;
        p.chol = CholeskyCorrelation::project(attrs, chol);
        p.weights.resize(items);
        p.sieves.assign(items, std::vector<SieveMonotone>());
        for (int j = 0; j < items; ++j) {
            p.weights[j].alpha.assign(attrs, 0.0);
            for (int k = 0; k < attrs; ++k) p.weights[j].alpha[k] = alpha[pair(j, k)];
            p.sieves[j].reserve(attrs);
            for (int k = 0; k < attrs; ++k) {
                Vec th(theta.begin() + static_cast<long>(pair(j, k)) * segs,
                       theta.begin() + static_cast<long>(pair(j, k) + 1) * segs);
                p.sieves[j].emplace_back(grid, std::move(th));
            }
        }
        return p;
    }

    void refresh() {
        for (std::size_t p = 0; p < static_cast<std::size_t>(items) * attrs; ++p) {
            double c = 0.0;
            cum[p * (segs + 1)] = 0.0;
            for (int m = 0; m < segs; ++m) {
                slope[p * segs + m] = theta[p * segs + m] / seglen[m];
                c += theta[p * segs + m];
                cum[p * (segs + 1) + m + 1] = c;
            }
        }
        log_det = log_det_lower(chol, attrs);
    }

    void locate(std::span<const double> z, EvalScratch& s) const {
        for (int k = 0; k < attrs; ++k) {
            const double u = normal_cdf(z[k]);
            const int m = grid->segment_of(u);
            s.u[k] = u;
            s.seg[k] = m;
            s.frac[k] = (u - breaks[m]) / seglen[m];
        }
    }

    void locate_u(std::span<const double> u, EvalScratch& s) const {
        for (int k = 0; k < attrs; ++k) {
            const int m = grid->segment_of(u[k]);
            s.u[k] = u[k];
            s.seg[k] = m;
            s.frac[k] = (u[k] - breaks[m]) / seglen[m];
        }
    }

    // Item response probabilities at a point on the uniform scale.
    void item_probs(std::span<const double> u, EvalScratch& s, Vec& out) const {
        locate_u(u, s);
        out.resize(items);
        for (int j = 0; j < items; ++j) {
            double pi = 0.0;
            for (const int k : active[j]) {
                const std::size_t p = pair(j, k);
                pi += alpha[p] * (cum[p * (segs + 1) + s.seg[k]] + theta[p * segs + s.seg[k]] * s.frac[k]);
            }
            out[j] = pi;
        }
    }

    // Complete-data loglik; fills s.r and, when grad is non-null, the z-score.
    double eval(std::span<const std::uint8_t> y_row, std::span<const double> z, EvalScratch& s,
                double* grad) const {
        locate(z, s);
        double ll = 0.0;
        if (grad)
            for (int k = 0; k < attrs; ++k) s.grad[k] = 0.0;
        for (int j = 0; j < items; ++j) {
            double pi = 0.0;
            for (const int k : active[j]) {
                const std::size_t p = pair(j, k);
                pi += alpha[p] * (cum[p * (segs + 1) + s.seg[k]] + theta[p * segs + s.seg[k]] * s.frac[k]);
            }
            const double pc = clamp_prob(pi);
            double r;
            if (y_row[j]) {
                ll += std::log(pc);
                r = 1.0 / pc;
            } else {
                ll += std::log1p(-pc);
                r = -1.0 / (1.0 - pc);
            }
            s.r[j] = r;
            if (grad)
                for (const int k : active[j]) {
                    const std::size_t p = pair(j, k);
                    s.grad[k] += r * alpha[p] * slope[p * segs + s.seg[k]];
                }
        }
        for (int k = 0; k < attrs; ++k) s.solve_tmp[k] = z[k];
        solve_lower(chol, attrs, s.solve_tmp);
        ll += -0.5 * attrs * kLog2Pi - log_det - 0.5 * squared_norm(s.solve_tmp);
        if (grad) {
            solve_lower_transposed(chol, attrs, s.solve_tmp);  // now Sigma^{-1} z
            for (int k = 0; k < attrs; ++k) grad[k] = s.grad[k] * normal_pdf(z[k]) - s.solve_tmp[k];
        }
        return ll;
    }

    struct Accum {
        Vec d_alpha;        // J*K
        Vec mark_full;      // J*K*S  (suffix markers: weight 1 below segment)
        Vec mark_frac;      // J*K*S  (weight frac at segment)
        Vec zz;             // K*K lower
        double cdll = 0.0;
        std::uint64_t proposals = 0, accepts = 0, warnings = 0;
        EvalScratch s_cur, s_prop;

        void init(const FlatGapm& f) {
            d_alpha.assign(f.alpha.size(), 0.0);
            mark_full.assign(f.theta.size(), 0.0);
            mark_frac.assign(f.theta.size(), 0.0);
            zz.assign(static_cast<std::size_t>(f.attrs) * f.attrs, 0.0);
            s_cur.resize(f.items, f.attrs);
            s_prop.resize(f.items, f.attrs);
        }
        void clear() {
            std::fill(d_alpha.begin(), d_alpha.end(), 0.0);
            std::fill(mark_full.begin(), mark_full.end(), 0.0);
            std::fill(mark_frac.begin(), mark_frac.end(), 0.0);
            std::fill(zz.begin(), zz.end(), 0.0);
            cdll = 0.0;
            proposals = accepts = warnings = 0;
        }
        void merge_into(Accum& total) const {
            for (std::size_t i = 0; i < d_alpha.size(); ++i) total.d_alpha[i] += d_alpha[i];
            for (std::size_t i = 0; i < mark_full.size(); ++i) {
                total.mark_full[i] += mark_full[i];
                total.mark_frac[i] += mark_frac[i];
            }
            for (std::size_t i = 0; i < zz.size(); ++i) total.zz[i] += zz[i];
            total.cdll += cdll;
            total.proposals += proposals;
            total.accepts += accepts;
            total.warnings += warnings;
        }
    };

    void accumulate(Accum& acc, const EvalScratch& s, std::span<const double> z) const {
        for (int j = 0; j < items; ++j) {
            const double r = s.r[j];
            for (const int k : active[j]) {
                const std::size_t p = pair(j, k);
                const int m = s.seg[k];
                acc.d_alpha[p] += r * (cum[p * (segs + 1) + m] + theta[p * segs + m] * s.frac[k]);
                const double ra = r * alpha[p];
                acc.mark_full[p * segs + m] += ra;
                acc.mark_frac[p * segs + m] += ra * s.frac[k];
            }
        }
        for (int a = 0; a < attrs; ++a)
            for (int b = 0; b <= a; ++b)
                acc.zz[static_cast<std::size_t>(a) * attrs + b] += z[a] * z[b];
    }

    void md_update(const Accum& total, long t, const StepSchedule& sch, long n_units) {
        const double g_alpha = step_size(t, sch.mu_alpha, sch.epsilon);
        const double g_theta = step_size(t, sch.mu_theta, sch.epsilon);
        const double g_l = step_size(t, sch.mu_l, sch.epsilon);
        Vec d_theta(segs);
        for (int j = 0; j < items; ++j) {
            if (active[j].size() > 1) {
                Vec sg(attrs, 0.0);
                for (const int k : active[j]) sg[k] = g_alpha * total.d_alpha[pair(j, k)];
                std::span<double> row(alpha.data() + pair(j, 0), static_cast<std::size_t>(attrs));
                exp_gradient_update(row, sg, {qmask.data() + pair(j, 0), static_cast<std::size_t>(attrs)});
            }
            for (const int k : active[j]) {
                const std::size_t p = pair(j, k);
                double suffix = 0.0;
                for (int m = segs - 1; m >= 0; --m) {
                    d_theta[m] = g_theta * (total.mark_frac[p * segs + m] + suffix);
                    suffix += total.mark_full[p * segs + m];
                }
                std::span<double> th(theta.data() + p * segs, static_cast<std::size_t>(segs));
                exp_gradient_update(th, d_theta, {});
            }
        }
        // d/dL = S^{-1} W S^{-1} L - N S^{-1} L on the lower triangle
        if (attrs > 1) {
            const int k = attrs;
            Vec w(static_cast<std::size_t>(k) * k);
            for (int a = 0; a < k; ++a)
                for (int b = 0; b < k; ++b)
                    w[static_cast<std::size_t>(a) * k + b] =
                        total.zz[a >= b ? static_cast<std::size_t>(a) * k + b
                                        : static_cast<std::size_t>(b) * k + a];
            const Vec g_rows = chol_gradient(w, static_cast<double>(n_units));
            for (int r = 1; r < k; ++r) {
                Vec row(r + 1), grad(r + 1);
                for (int c = 0; c <= r; ++c) {
                    row[c] = chol[static_cast<std::size_t>(r) * k + c];
                    grad[c] = g_rows[static_cast<std::size_t>(r) * k + c];
                }
                const Vec updated = update_chol_row(row, grad, g_l);
                for (int c = 0; c <= r; ++c) chol[static_cast<std::size_t>(r) * k + c] = updated[c];
            }
        }
        refresh();
    }

    // S^{-1} W S^{-1} L - n S^{-1} L for dense symmetric W.
    Vec chol_gradient(const Vec& w, double n_units) const {
        const int k = attrs;
        Vec x = w;  // columns solved in place: X = S^{-1} W
        Vec col(k);
        for (int c = 0; c < k; ++c) {
            for (int r = 0; r < k; ++r) col[r] = x[static_cast<std::size_t>(r) * k + c];
            apply_sigma_inverse(chol, k, col);
            for (int r = 0; r < k; ++r) x[static_cast<std::size_t>(r) * k + c] = col[r];
        }
        // A = X S^{-1} = (S^{-1} X^T)^T, X^T has columns = rows of X
        Vec a(static_cast<std::size_t>(k) * k);
        for (int r = 0; r < k; ++r) {
            for (int c = 0; c < k; ++c) col[c] = x[static_cast<std::size_t>(r) * k + c];
            apply_sigma_inverse(chol, k, col);
            for (int c = 0; c < k; ++c) a[static_cast<std::size_t>(r) * k + c] = col[c];
        }
        Vec sl(static_cast<std::size_t>(k) * k, 0.0);  // S^{-1} L
        for (int c = 0; c < k; ++c) {
            for (int r = 0; r < k; ++r) col[r] = chol[static_cast<std::size_t>(r) * k + c];
            apply_sigma_inverse(chol, k, col);
            for (int r = 0; r < k; ++r) sl[static_cast<std::size_t>(r) * k + c] = col[r];
        }
        Vec g(static_cast<std::size_t>(k) * k, 0.0);
        for (int r = 0; r < k; ++r)
            for (int c = 0; c <= r; ++c) {
                double al = 0.0;
                for (int m = c; m < k; ++m)
                    al += a[static_cast<std::size_t>(r) * k + m] * chol[static_cast<std::size_t>(m) * k + c];
                g[static_cast<std::size_t>(r) * k + c] = al - n_units * sl[static_cast<std::size_t>(r) * k + c];
            }
        return g;
    }

    std::size_t flat_size() const { return alpha.size() + theta.size() + chol.size(); }

    void snapshot(Vec& out) const {
        out.clear();
        out.reserve(flat_size());
        out.insert(out.end(), alpha.begin(), alpha.end());
        out.insert(out.end(), theta.begin(), theta.end());
        out.insert(out.end(), chol.begin(), chol.end());
    }

    void pr_add(Vec& sums) const {
        std::size_t i = 0;
        for (const double v : alpha) sums[i++] += v;
        for (const double v : theta) sums[i++] += v;
        for (const double v : chol) sums[i++] += v;
    }

    // Loads the Polyak-Ruppert average and re-projects onto the constraint set.
    void load_average(const Vec& sums, double count) {
        std::size_t i = 0;
        for (double& v : alpha) v = sums[i++] / count;
        for (double& v : theta) v = sums[i++] / count;
        for (double& v : chol) v = sums[i++] / count;
        for (int j = 0; j < items; ++j) {
            double s = 0.0;
            for (const int k : active[j]) s += alpha[pair(j, k)];
            for (const int k : active[j]) alpha[pair(j, k)] /= s;
            for (const int k : active[j]) {
                const std::size_t p = pair(j, k);
                double ts = 0.0;
                for (int m = 0; m < segs; ++m) ts += theta[p * segs + m];
                for (int m = 0; m < segs; ++m) theta[p * segs + m] /= ts;
            }
        }
        chol = CholeskyCorrelation::project(attrs, chol).rows();
        refresh();
    }

    void validate_against(const QMatrix& q) const { to_params().validate(q); }
};

// Flattened aPM parameters; same driver contract as FlatGapm.
struct FlatApm {
    int items = 0, attrs = 0;
    std::vector<std::vector<int>> active;
    Vec delta0;    // J
    Vec slopes;    // J*K
    Vec mu;        // K
    Vec cov_chol;  // K*K
    double log_det = 0.0;

    std::size_t pair(int j, int k) const { return static_cast<std::size_t>(j) * attrs + k; }

    static FlatApm from_params(const ApmParams& p, const QMatrix& q) {
        FlatApm f;
        f.items = q.items();
        f.attrs = q.attrs();
        f.active.resize(f.items);
        for (int j = 0; j < f.items; ++j)
            for (int k = 0; k < f.attrs; ++k)
                if (q(j, k)) f.active[j].push_back(k);
        f.delta0 = p.delta0;
        f.slopes.assign(static_cast<std::size_t>(f.items) * f.attrs, 0.0);
        for (int j = 0; j < f.items; ++j)
            for (int k = 0; k < f.attrs; ++k) f.slopes[f.pair(j, k)] = p.slopes[j][k];
        f.mu = p.mu;
        f.cov_chol = p.cov_chol;
        f.refresh();
        return f;
    }

    ApmParams to_params() const {
        ApmParams p;
        p.delta0 = delta0;
        p.slopes.assign(items, Vec(attrs, 0.0));
        for (int j = 0; j < items; ++j)
            for (int k = 0; k < attrs; ++k) p.slopes[j][k] = slopes[pair(j, k)];
        p.mu = mu;
        p.cov_chol = cov_chol;
        return p;
    }

    void refresh() { log_det = log_det_lower(cov_chol, attrs); }

    void locate(std::span<const double> z, EvalScratch& s) const {
        for (int k = 0; k < attrs; ++k) s.u[k] = normal_cdf(z[k]);
    }

    void item_probs(std::span<const double> u, EvalScratch& s, Vec& out) const {
        (void)s;
        out.resize(items);
        for (int j = 0; j < items; ++j) {
            double pi = delta0[j];
            for (const int k : active[j]) pi += slopes[pair(j, k)] * u[k];
            out[j] = pi;
        }
    }

    double eval(std::span<const std::uint8_t> y_row, std::span<const double> z, EvalScratch& s,
                double* grad) const {
        locate(z, s);
        double ll = 0.0;
        if (grad)
            for (int k = 0; k < attrs; ++k) s.grad[k] = 0.0;
        for (int j = 0; j < items; ++j) {
            double pi = delta0[j];
            for (const int k : active[j]) pi += slopes[pair(j, k)] * s.u[k];
            const double pc = clamp_prob(pi);
            double r;
            if (y_row[j]) {
                ll += std::log(pc);
                r = 1.0 / pc;
            } else {
                ll += std::log1p(-pc);
                r = -1.0 / (1.0 - pc);
            }
            s.r[j] = r;
            if (grad)
                for (const int k : active[j]) s.grad[k] += r * slopes[pair(j, k)];
        }
        for (int k = 0; k < attrs; ++k) s.solve_tmp[k] = z[k] - mu[k];
        solve_lower(cov_chol, attrs, s.solve_tmp);
        ll += -0.5 * attrs * kLog2Pi - log_det - 0.5 * squared_norm(s.solve_tmp);
        if (grad) {
            solve_lower_transposed(cov_chol, attrs, s.solve_tmp);
            for (int k = 0; k < attrs; ++k) grad[k] = s.grad[k] * normal_pdf(z[k]) - s.solve_tmp[k];
        }
        return ll;
    }

    struct Accum {
        Vec d_delta0;  // J
        Vec d_slopes;  // J*K
        Vec z_sum;     // K
        Vec zz;        // K*K lower
        double cdll = 0.0;
        std::uint64_t proposals = 0, accepts = 0, warnings = 0;
        EvalScratch s_cur, s_prop;

        void init(const FlatApm& f) {
            d_delta0.assign(f.delta0.size(), 0.0);
            d_slopes.assign(f.slopes.size(), 0.0);
            z_sum.assign(f.attrs, 0.0);
            zz.assign(static_cast<std::size_t>(f.attrs) * f.attrs, 0.0);
            s_cur.resize(f.items, f.attrs);
            s_prop.resize(f.items, f.attrs);
        }
        void clear() {
            std::fill(d_delta0.begin(), d_delta0.end(), 0.0);
            std::fill(d_slopes.begin(), d_slopes.end(), 0.0);
            std::fill(z_sum.begin(), z_sum.end(), 0.0);
            std::fill(zz.begin(), zz.end(), 0.0);
            cdll = 0.0;
            proposals = accepts = warnings = 0;
        }
        void merge_into(Accum& total) const {
            for (std::size_t i = 0; i < d_delta0.size(); ++i) total.d_delta0[i] += d_delta0[i];
            for (std::size_t i = 0; i < d_slopes.size(); ++i) total.d_slopes[i] += d_slopes[i];
            for (std::size_t i = 0; i < z_sum.size(); ++i) total.z_sum[i] += z_sum[i];
            for (std::size_t i = 0; i < zz.size(); ++i) total.zz[i] += zz[i];
            total.cdll += cdll;
            total.proposals += proposals;
            total.accepts += accepts;
            total.warnings += warnings;
        }
    };

    void accumulate(Accum& acc, const EvalScratch& s, std::span<const double> z) const {
        for (int j = 0; j < items; ++j) {
            const double r = s.r[j];
            acc.d_delta0[j] += r;
            for (const int k : active[j]) acc.d_slopes[pair(j, k)] += r * s.u[k];
        }
        for (int a = 0; a < attrs; ++a) {
            acc.z_sum[a] += z[a];
            for (int b = 0; b <= a; ++b)
                acc.zz[static_cast<std::size_t>(a) * attrs + b] += z[a] * z[b];
        }
    }

    void md_update(const Accum& total, long t, const StepSchedule& sch, long n_units) {
        const double g_delta = step_size(t, sch.mu_delta, sch.epsilon);
        const double g_musig = step_size(t, sch.mu_l, sch.epsilon);
        const int k = attrs;
        const double n = static_cast<double>(n_units);

        ApmBlockGradient g;
        g.d_delta0 = total.d_delta0;
        g.d_slopes.assign(items, Vec(k, 0.0));
        for (int j = 0; j < items; ++j)
            for (const int kk : active[j]) g.d_slopes[j][kk] = total.d_slopes[pair(j, kk)];
        // centered second moment M = W - s mu^T - mu s^T + n mu mu^T
        Vec m(static_cast<std::size_t>(k) * k);
        for (int a = 0; a < k; ++a)
            for (int b = 0; b < k; ++b) {
                const double w =
                    total.zz[a >= b ? static_cast<std::size_t>(a) * k + b : static_cast<std::size_t>(b) * k + a];
                m[static_cast<std::size_t>(a) * k + b] =
                    w - total.z_sum[a] * mu[b] - mu[a] * total.z_sum[b] + n * mu[a] * mu[b];
            }
        Vec col(k);
        // G_mu = S^{-1} (z_sum - n mu)
        Vec gm(k);
        for (int a = 0; a < k; ++a) gm[a] = total.z_sum[a] - n * mu[a];
        apply_sigma_inverse(cov_chol, k, gm);
        g.d_mu = gm;
        // G_C = S^{-1} M S^{-1} C - n S^{-1} C
        Vec x = m;
        for (int c = 0; c < k; ++c) {
            for (int r = 0; r < k; ++r) col[r] = x[static_cast<std::size_t>(r) * k + c];
            apply_sigma_inverse(cov_chol, k, col);
            for (int r = 0; r < k; ++r) x[static_cast<std::size_t>(r) * k + c] = col[r];
        }
        Vec a_full(static_cast<std::size_t>(k) * k);
        for (int r = 0; r < k; ++r) {
            for (int c = 0; c < k; ++c) col[c] = x[static_cast<std::size_t>(r) * k + c];
            apply_sigma_inverse(cov_chol, k, col);
            for (int c = 0; c < k; ++c) a_full[static_cast<std::size_t>(r) * k + c] = col[c];
        }
        Vec sc(static_cast<std::size_t>(k) * k, 0.0);
        for (int c = 0; c < k; ++c) {
            for (int r = 0; r < k; ++r) col[r] = cov_chol[static_cast<std::size_t>(r) * k + c];
            apply_sigma_inverse(cov_chol, k, col);
            for (int r = 0; r < k; ++r) sc[static_cast<std::size_t>(r) * k + c] = col[r];
        }
        g.d_cov_chol.assign(static_cast<std::size_t>(k) * k, 0.0);
        for (int r = 0; r < k; ++r)
            for (int c = 0; c <= r; ++c) {
                double al = 0.0;
                for (int mm = c; mm < k; ++mm)
                    al += a_full[static_cast<std::size_t>(r) * k + mm] *
                          cov_chol[static_cast<std::size_t>(mm) * k + c];
                g.d_cov_chol[static_cast<std::size_t>(r) * k + c] =
                    al - n * sc[static_cast<std::size_t>(r) * k + c];
            }

        QMatrix q = mask_q();
        const ApmParams updated = update_apm(to_params(), q, g, g_delta, g_musig);
        delta0 = updated.delta0;
        for (int j = 0; j < items; ++j)
            for (int kk = 0; kk < k; ++kk) slopes[pair(j, kk)] = updated.slopes[j][kk];
        mu = updated.mu;
        cov_chol = updated.cov_chol;
        refresh();
    }

    QMatrix mask_q() const {
        std::vector<std::uint8_t> m(static_cast<std::size_t>(items) * attrs, 0);
        for (int j = 0; j < items; ++j)
            for (const int k : active[j]) m[pair(j, k)] = 1;
        return QMatrix(items, attrs, std::move(m));
    }

    std::size_t flat_size() const { return delta0.size() + slopes.size() + mu.size() + cov_chol.size(); }

    void snapshot(Vec& out) const {
        out.clear();
        out.reserve(flat_size());
        out.insert(out.end(), delta0.begin(), delta0.end());
        out.insert(out.end(), slopes.begin(), slopes.end());
        out.insert(out.end(), mu.begin(), mu.end());
        out.insert(out.end(), cov_chol.begin(), cov_chol.end());
    }

    void pr_add(Vec& sums) const {
        std::size_t i = 0;
        for (const double v : delta0) sums[i++] += v;
        for (const double v : slopes) sums[i++] += v;
        for (const double v : mu) sums[i++] += v;
        for (const double v : cov_chol) sums[i++] += v;
    }

    void load_average(const Vec& sums, double count) {
        std::size_t i = 0;
        for (double& v : delta0) v = sums[i++] / count;
        for (double& v : slopes) v = sums[i++] / count;
        for (double& v : mu) v = sums[i++] / count;
        for (double& v : cov_chol) v = sums[i++] / count;
        for (int r = 0; r < attrs; ++r) {
            double& d = cov_chol[static_cast<std::size_t>(r) * attrs + r];
            if (d < kCholDiagFloor) d = kCholDiagFloor;
        }
        refresh();
    }

    void validate_against(const QMatrix& q) const { to_params().validate(q); }
};

// ---------------------------------------------------------------------------
// Generic SA-MD loop.
// ---------------------------------------------------------------------------
template <class Flat>
FitResult fit_driver(const Dataset& data, const QMatrix& q, Flat flat, std::vector<Vec> z_start,
                     const FitConfig& cfg, ModelKind kind) {
    cfg.validate();
    const int n = data.n(), kn = q.attrs();
    const long T = cfg.iterations, burn = cfg.burn_in;
    const double h = cfg.mala.h;
    const double sqrt2h = std::sqrt(2.0 * h);
    const long checkpoint_every = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : std::max<long>(1, T / 100);

    FitResult res;
    res.model = kind;

    for (int j = 0; j < data.items(); ++j) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += data(i, j);
        if (n > 0 && (s == 0.0 || s == static_cast<double>(n)))
            res.warnings.push_back("item " + std::to_string(j + 1) + ": degenerate all-" +
                                   (s == 0.0 ? std::string("zero") : std::string("one")) + " column");
    }

    Vec z(static_cast<std::size_t>(n) * kn);
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < kn; ++k) z[static_cast<std::size_t>(i) * kn + k] = z_start[i][k];

    Vec eap_sum(static_cast<std::size_t>(n) * kn, 0.0);
    PosteriorMoments moments = PosteriorMoments::zeros(n, kn);

    const int n_blocks = (n + kBlockSize - 1) / kBlockSize;
    std::vector<typename Flat::Accum> accs(n_blocks);
    for (auto& a : accs) a.init(flat);
    typename Flat::Accum total;
    total.init(flat);

    Vec pr_sums(flat.flat_size(), 0.0);
    long pr_count = 0;

    std::uint64_t accepts_all = 0, proposals_all = 0, warnings_all = 0;
    double early_sum = 0.0, late_sum = 0.0;
    long early_n = 0, late_n = 0;
    const long decile = std::max<long>(1, T / 10);

    ThreadPool pool(cfg.threads);

    long current_t = 0;
    const auto run_block = [&](int b) {
        const long t = current_t;
        auto& acc = accs[b];
        acc.clear();
        const int lo = b * kBlockSize;
        const int hi = std::min(n, lo + kBlockSize);
        Vec& z_prop = acc.s_prop.z_work;
        for (int i = lo; i < hi; ++i) {
            CounterRng rng(cfg.seed, static_cast<std::uint64_t>(i) + 1, static_cast<std::uint64_t>(t));
            std::span<double> zi(z.data() + static_cast<std::size_t>(i) * kn, static_cast<std::size_t>(kn));
            const auto y_row = data.row(i);

            const double ll_cur = flat.eval(y_row, zi, acc.s_cur, acc.s_cur.grad.data());
            for (int k = 0; k < kn; ++k)
                z_prop[k] = zi[k] + h * acc.s_cur.grad[k] + sqrt2h * rng.normal();
            const double ll_prop = flat.eval(y_row, z_prop, acc.s_prop, acc.s_prop.grad.data());

            double fwd = 0.0, bwd = 0.0;  // residual parts; constants cancel
            for (int k = 0; k < kn; ++k) {
                const double df = z_prop[k] - zi[k] - h * acc.s_cur.grad[k];
                const double db = zi[k] - z_prop[k] - h * acc.s_prop.grad[k];
                fwd += df * df;
                bwd += db * db;
            }
            const double log_alpha = (ll_prop - bwd / (4.0 * h)) - (ll_cur - fwd / (4.0 * h));

            acc.proposals += 1;
            const double u01 = rng.uniform();
            bool accepted = false;
            if (std::isfinite(log_alpha)) {
                accepted = std::log(u01) < log_alpha;
            } else {
                acc.warnings += 1;
            }
            const EvalScratch* s = &acc.s_cur;
            double ll = ll_cur;
            if (accepted) {
                acc.accepts += 1;
                for (int k = 0; k < kn; ++k) zi[k] = z_prop[k];
                s = &acc.s_prop;
                ll = ll_prop;
            }
            flat.accumulate(acc, *s, zi);
            acc.cdll += ll;
            if (t > burn) {
                for (int k = 0; k < kn; ++k) eap_sum[static_cast<std::size_t>(i) * kn + k] += s->u[k];
                update_posterior_moments(
                    {moments.mean.data() + static_cast<std::size_t>(i) * kn, static_cast<std::size_t>(kn)},
                    {moments.cov.data() + static_cast<std::size_t>(i) * kn * kn,
                     static_cast<std::size_t>(kn) * kn},
                    kn, zi, moments.count[i]);
                moments.count[i] += 1;
            }
        }
    };

    const std::function<void(int)> task = run_block;
    for (long t = 1; t <= T; ++t) {
        current_t = t;
        pool.run(n_blocks, task);

        total.clear();
        for (const auto& a : accs) a.merge_into(total);
        if (!std::isfinite(total.cdll))
            throw numerical_error("fit: complete-data log-likelihood became non-finite");

        accepts_all += total.accepts;
        proposals_all += total.proposals;
        warnings_all += total.warnings;
        if (t <= decile) {
            early_sum += total.cdll;
            ++early_n;
        }
        if (t > T - decile) {
            late_sum += total.cdll;
            ++late_n;
        }

        flat.md_update(total, t, cfg.schedule, n);

        if (t > burn) {
            flat.pr_add(pr_sums);
            ++pr_count;
        }
        if (t % checkpoint_every == 0 || t == T) {
            Checkpoint cp;
            cp.iteration = t;
            cp.acceptance_rate =
                proposals_all ? static_cast<double>(accepts_all) / static_cast<double>(proposals_all) : 0.0;
            cp.complete_loglik = total.cdll;
            flat.snapshot(cp.params_flat);
            res.trajectory.push_back(std::move(cp));
            if (cfg.progress)
                (*cfg.progress) << "iter=" << t << " accept=" << cp.acceptance_rate
                                << " cdll=" << cp.complete_loglik << "\n";
        }
        if (cfg.validate_every > 0 && t % cfg.validate_every == 0) flat.validate_against(q);
    }

    flat.load_average(pr_sums, static_cast<double>(pr_count));
    if constexpr (std::is_same_v<Flat, FlatGapm>) {
        res.gapm = flat.to_params();
        res.gapm->validate(q);
    } else {
        res.apm = flat.to_params();
        res.apm->validate(q);
    }
    res.eap.assign(eap_sum.begin(), eap_sum.end());
    for (double& v : res.eap) v /= static_cast<double>(T - burn);
    res.moments = std::move(moments);
    res.acceptance_rate =
        proposals_all ? static_cast<double>(accepts_all) / static_cast<double>(proposals_all) : 0.0;
    res.numerical_warnings = warnings_all;
    res.early_loglik_mean = early_n ? early_sum / early_n : 0.0;
    res.late_loglik_mean = late_n ? late_sum / late_n : 0.0;
    return res;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public entry point.
// ---------------------------------------------------------------------------
inline FitResult fit(const Dataset& data, const QMatrix& q, std::shared_ptr<const KnotGrid> grid,
                     const FitConfig& config, ModelKind model) {
    config.validate();
    if (data.items() != q.items()) throw config_error("fit: responses and Q disagree on item count");
    Rng init_rng(detail::splitmix64(config.seed ^ 0x696e6974ULL));
    if (model == ModelKind::gapm) {
        if (!grid) throw config_error("fit: GaPM requires a knot grid");
        auto [params, z0] = init_gapm(data, q, std::move(grid), init_rng);
        return detail::fit_driver(data, q, detail::FlatGapm::from_params(params, q), std::move(z0),
                                  config, ModelKind::gapm);
    }
    auto [params, z0] = init_apm(data, q, init_rng);
    return detail::fit_driver(data, q, detail::FlatApm::from_params(params, q), std::move(z0), config,
                              ModelKind::apm);
}

}  // namespace gapmcdm
