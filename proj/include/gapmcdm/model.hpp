#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "detail/linalg.hpp"
#include "errors.hpp"
#include "special.hpp"

namespace gapmcdm {

using Vec = std::vector<double>;

inline constexpr double kSimplexTol = 1e-10;
inline constexpr double kCholDiagFloor = 1e-6;

// ---------------------------------------------------------------------------
// Q-matrix: J x K binary item-attribute design. Every row must name at least
// one attribute; the exploratory design is the all-ones matrix.
// ---------------------------------------------------------------------------
class QMatrix {
  public:
    QMatrix() = default;
    QMatrix(int items, int attrs, std::vector<std::uint8_t> entries)
        : j_(items), k_(attrs), a_(std::move(entries)) {
        validate();
    }

    static QMatrix ones(int items, int attrs) {
        return QMatrix(items, attrs, std::vector<std::uint8_t>(static_cast<std::size_t>(items) * attrs, 1));
    }

    int items() const { return j_; }
    int attrs() const { return k_; }
    std::uint8_t operator()(int j, int k) const { return a_[static_cast<std::size_t>(j) * k_ + k]; }
    std::span<const std::uint8_t> row(int j) const {
        return {a_.data() + static_cast<std::size_t>(j) * k_, static_cast<std::size_t>(k_)};
    }

    void validate() const {
        if (j_ < 0 || k_ <= 0 || a_.size() != static_cast<std::size_t>(j_) * k_)
            throw config_error("QMatrix: inconsistent shape");
        for (std::uint8_t v : a_)
            if (v > 1) throw config_error("QMatrix: entries must be 0 or 1");
        for (int j = 0; j < j_; ++j) {
            bool any = false;
            for (int k = 0; k < k_; ++k) any = any || (*this)(j, k);
            if (!any) throw config_error("QMatrix: row " + std::to_string(j + 1) + " selects no attribute");
        }
    }

  private:
    int j_ = 0, k_ = 0;
    std::vector<std::uint8_t> a_;
};

// ---------------------------------------------------------------------------
// Knot grid: augmented breakpoints 0 = b_0 < b_1 < ... < b_S = 1. The grid is
// constructed from the interior knots; endpoints are always present, so the
// sieve has S segments and S simplex parameters.
// ---------------------------------------------------------------------------
class KnotGrid {
  public:
    explicit KnotGrid(const Vec& interior_knots) {
        b_.reserve(interior_knots.size() + 2);
        b_.push_back(0.0);
        b_.insert(b_.end(), interior_knots.begin(), interior_knots.end());
        b_.push_back(1.0);
        validate();
    }

    static std::shared_ptr<const KnotGrid> uniform(int segments) {
        if (segments < 2) throw domain_error("KnotGrid: need at least 2 segments");
        Vec knots(segments - 1);
        for (int i = 1; i < segments; ++i) knots[i - 1] = static_cast<double>(i) / segments;
        return std::make_shared<const KnotGrid>(knots);
    }

    int segments() const { return static_cast<int>(b_.size()) - 1; }
    const Vec& breakpoints() const { return b_; }
    Vec interior() const { return Vec(b_.begin() + 1, b_.end() - 1); }
    double segment_length(int m) const { return b_[m + 1] - b_[m]; }

    // Segment index m with b_m <= x < b_{m+1}; x = 1 belongs to the last one.
    int segment_of(double x) const {
        if (x >= b_[b_.size() - 2]) return segments() - 1;
        int lo = 0, hi = static_cast<int>(b_.size()) - 1;
        while (hi - lo > 1) {
            const int mid = (lo + hi) / 2;
            (b_[mid] <= x ? lo : hi) = mid;
        }
        return lo;
    }

    void validate() const {
        if (segments() < 2) throw domain_error("KnotGrid: need at least 2 segments");
        if (b_.front() != 0.0 || b_.back() != 1.0) throw domain_error("KnotGrid: endpoints must be 0 and 1");
        for (std::size_t i = 1; i < b_.size(); ++i)
            if (!(b_[i] > b_[i - 1])) throw domain_error("KnotGrid: breakpoints must be strictly increasing");
    }

  private:
    Vec b_;
};

// ---------------------------------------------------------------------------
// Monotone piecewise-linear function on [0,1] with g(0)=0, g(1)=1,
// parameterized by nonnegative per-segment increments summing to one.
// ---------------------------------------------------------------------------
struct SieveMonotone {
    std::shared_ptr<const KnotGrid> grid;
    Vec theta;

    SieveMonotone() = default;
    SieveMonotone(std::shared_ptr<const KnotGrid> g, Vec th) : grid(std::move(g)), theta(std::move(th)) {}

    // Increments equal to segment lengths make g the identity.
    static SieveMonotone identity(std::shared_ptr<const KnotGrid> g) {
        Vec th(g->segments());
        for (int m = 0; m < g->segments(); ++m) th[m] = g->segment_length(m);
        return SieveMonotone(std::move(g), std::move(th));
    }

    void validate() const {
        if (!grid) throw config_error("SieveMonotone: missing grid");
        if (static_cast<int>(theta.size()) != grid->segments())
            throw config_error("SieveMonotone: theta length does not match grid");
        double s = 0.0;
        for (double t : theta) {
            if (!(t >= 0.0)) throw domain_error("SieveMonotone: negative increment");
            s += t;
        }
        if (std::abs(s - 1.0) > kSimplexTol) throw domain_error("SieveMonotone: increments must sum to 1");
    }
};

inline double sieve_eval(const SieveMonotone& g, double x) {
    if (!(x >= 0.0 && x <= 1.0)) throw domain_error("sieve_eval: x outside [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const auto& b = g.grid->breakpoints();
    const int m = g.grid->segment_of(x);
    double cum = 0.0;
    for (int s = 0; s < m; ++s) cum += g.theta[s];
    const double frac = (x - b[m]) / (b[m + 1] - b[m]);
    return std::min(cum + g.theta[m] * frac, 1.0);
}

struct SieveDerivatives {
    double dg_dx;
    Vec dg_dtheta;
};

// Right-hand slope at breakpoints; at x = 1 the last segment's slope.
inline SieveDerivatives sieve_derivatives(const SieveMonotone& g, double x) {
    if (!(x >= 0.0 && x <= 1.0)) throw domain_error("sieve_derivatives: x outside [0,1]");
    const auto& b = g.grid->breakpoints();
    const int s = g.grid->segments();
    const int m = (x == 1.0) ? s - 1 : g.grid->segment_of(x);
    SieveDerivatives d;
    d.dg_dx = g.theta[m] / (b[m + 1] - b[m]);
    d.dg_dtheta.assign(s, 0.0);
    for (int i = 0; i < m; ++i) d.dg_dtheta[i] = 1.0;
    d.dg_dtheta[m] = (x - b[m]) / (b[m + 1] - b[m]);
    return d;
}

// ---------------------------------------------------------------------------
// Nonnegative mixture weights for one item; active entries sum to one and
// masked entries are exactly zero.
// ---------------------------------------------------------------------------
struct ItemWeights {
    Vec alpha;

    static ItemWeights equal(std::span<const std::uint8_t> q_row) {
        int active = 0;
        for (std::uint8_t q : q_row) active += q;
        ItemWeights w;
        w.alpha.assign(q_row.size(), 0.0);
        for (std::size_t k = 0; k < q_row.size(); ++k)
            if (q_row[k]) w.alpha[k] = 1.0 / active;
        return w;
    }

    void validate(std::span<const std::uint8_t> q_row) const {
        if (alpha.size() != q_row.size()) throw config_error("ItemWeights: length mismatch with Q row");
        double s = 0.0;
        for (std::size_t k = 0; k < alpha.size(); ++k) {
            if (!(alpha[k] >= 0.0)) throw domain_error("ItemWeights: negative weight");
            if (!q_row[k] && alpha[k] != 0.0) throw domain_error("ItemWeights: masked entry must be zero");
            s += alpha[k] * q_row[k];
        }
        if (std::abs(s - 1.0) > kSimplexTol) throw domain_error("ItemWeights: active weights must sum to 1");
    }
};

// ---------------------------------------------------------------------------
// Lower-triangular Cholesky rows of a correlation matrix: unit-norm rows,
// first row pinned to e_1, diagonal kept away from zero.
// ---------------------------------------------------------------------------
class CholeskyCorrelation {
  public:
    CholeskyCorrelation() = default;
    CholeskyCorrelation(int k, Vec rows) : k_(k), l_(std::move(rows)) { validate(); }

    static CholeskyCorrelation identity(int k) {
        Vec l(static_cast<std::size_t>(k) * k, 0.0);
        for (int i = 0; i < k; ++i) l[static_cast<std::size_t>(i) * k + i] = 1.0;
        return CholeskyCorrelation(k, std::move(l));
    }

    // Nearest valid factor to an arbitrary lower-triangular matrix: rows are
    // renormalized to the unit sphere with the diagonal floored first.
    static CholeskyCorrelation project(int k, Vec rows);

    int dim() const { return k_; }
    double operator()(int r, int c) const { return l_[static_cast<std::size_t>(r) * k_ + c]; }
    const Vec& rows() const { return l_; }
    std::span<const double> row(int r) const {
        return {l_.data() + static_cast<std::size_t>(r) * k_, static_cast<std::size_t>(k_)};
    }

    Vec correlation() const { return detail::lower_times_transpose(l_, k_); }

    void validate() const {
        if (k_ <= 0 || l_.size() != static_cast<std::size_t>(k_) * k_)
            throw config_error("CholeskyCorrelation: inconsistent shape");
        if (l_[0] != 1.0) throw domain_error("CholeskyCorrelation: first row must be (1,0,...,0)");
        for (int r = 0; r < k_; ++r) {
            for (int c = r + 1; c < k_; ++c)
                if ((*this)(r, c) != 0.0) throw domain_error("CholeskyCorrelation: upper triangle must be zero");
            double n2 = 0.0;
            for (int c = 0; c <= r; ++c) n2 += (*this)(r, c) * (*this)(r, c);
            if (std::abs(n2 - 1.0) > kSimplexTol)
                throw domain_error("CholeskyCorrelation: row " + std::to_string(r + 1) + " not unit norm");
            if (std::abs((*this)(r, r)) < kCholDiagFloor * (1.0 - 1e-9))
                throw domain_error("CholeskyCorrelation: diagonal entry below nonsingularity floor");
        }
    }

  private:
    int k_ = 0;
    Vec l_;
};

// Floors the diagonal, renormalizes, and repairs the rare case where
// normalization pushes the diagonal back under the floor.
inline void project_unit_row(std::span<double> row, int diag_index) {
    double& d = row[diag_index];
    if (std::abs(d) < kCholDiagFloor) d = (d < 0.0 ? -kCholDiagFloor : kCholDiagFloor);
    const double n = std::sqrt(detail::squared_norm(row));
    if (!(n > 1e-12)) throw numerical_error("degenerate Cholesky row update");
    for (double& v : row) v /= n;
    if (std::abs(row[diag_index]) < kCholDiagFloor) {
        const double sign = row[diag_index] < 0.0 ? -1.0 : 1.0;
        double rest = 0.0;
        for (int c = 0; c < static_cast<int>(row.size()); ++c)
            if (c != diag_index) rest += row[c] * row[c];
        const double scale = std::sqrt((1.0 - kCholDiagFloor * kCholDiagFloor) / rest);
        for (int c = 0; c < static_cast<int>(row.size()); ++c)
            if (c != diag_index) row[c] *= scale;
        row[diag_index] = sign * kCholDiagFloor;
    }
}

inline CholeskyCorrelation CholeskyCorrelation::project(int k, Vec rows) {
    rows[0] = 1.0;
    for (int c = 1; c < k; ++c) rows[c] = 0.0;
    for (int r = 1; r < k; ++r) {
        for (int c = r + 1; c < k; ++c) rows[static_cast<std::size_t>(r) * k + c] = 0.0;
        project_unit_row({rows.data() + static_cast<std::size_t>(r) * k, static_cast<std::size_t>(r) + 1}, r);
    }
    return CholeskyCorrelation(k, std::move(rows));
}

// ---------------------------------------------------------------------------
// Parameter bundles.
// ---------------------------------------------------------------------------
struct GapmParams {
    std::vector<ItemWeights> weights;                 // per item
    std::vector<std::vector<SieveMonotone>> sieves;   // per (item, attribute)
    CholeskyCorrelation chol;
    std::shared_ptr<const KnotGrid> grid;

    int items() const { return static_cast<int>(weights.size()); }
    int attrs() const { return chol.dim(); }

    void validate(const QMatrix& q) const {
        if (items() != q.items() || attrs() != q.attrs())
            throw config_error("GapmParams: shape mismatch with Q");
        chol.validate();
        for (int j = 0; j < items(); ++j) {
            weights[j].validate(q.row(j));
            if (static_cast<int>(sieves[j].size()) != attrs())
                throw config_error("GapmParams: sieve grid shape mismatch");
            for (int k = 0; k < attrs(); ++k)
                if (q(j, k)) sieves[j][k].validate();
        }
    }
};

struct ApmParams {
    Vec delta0;               // per-item intercept (guessing)
    std::vector<Vec> slopes;  // per-item length-K slopes, zero where masked
    Vec mu;                   // latent mean on the Gaussian scale
    Vec cov_chol;             // K x K lower-triangular, positive diagonal

    int items() const { return static_cast<int>(delta0.size()); }
    int attrs() const { return static_cast<int>(mu.size()); }

    void validate(const QMatrix& q) const {
        const int jn = items(), kn = attrs();
        if (jn != q.items() || kn != q.attrs()) throw config_error("ApmParams: shape mismatch with Q");
        if (cov_chol.size() != static_cast<std::size_t>(kn) * kn)
            throw config_error("ApmParams: covariance factor shape mismatch");
        for (int j = 0; j < jn; ++j) {
            if (!(delta0[j] >= -kSimplexTol)) throw domain_error("ApmParams: negative intercept");
            double s = delta0[j];
            for (int k = 0; k < kn; ++k) {
                if (!(slopes[j][k] >= -kSimplexTol)) throw domain_error("ApmParams: negative slope");
                if (!q(j, k) && slopes[j][k] != 0.0) throw domain_error("ApmParams: masked slope must be zero");
                s += slopes[j][k] * q(j, k);
            }
            if (s > 1.0 + kSimplexTol) throw domain_error("ApmParams: intercept plus slopes exceeds 1");
        }
        for (int r = 0; r < kn; ++r) {
            for (int c = r + 1; c < kn; ++c)
                if (cov_chol[static_cast<std::size_t>(r) * kn + c] != 0.0)
                    throw domain_error("ApmParams: covariance factor must be lower triangular");
            if (!(cov_chol[static_cast<std::size_t>(r) * kn + r] > 0.0))
                throw domain_error("ApmParams: covariance factor needs positive diagonal");
        }
    }
};

// ---------------------------------------------------------------------------
// Binary response matrix, individuals by items, no missing values.
// ---------------------------------------------------------------------------
class Dataset {
  public:
    Dataset() = default;
    Dataset(int n, int items, std::vector<std::uint8_t> responses)
        : n_(n), j_(items), y_(std::move(responses)) {
        validate();
    }

    int n() const { return n_; }
    int items() const { return j_; }
    std::uint8_t operator()(int i, int j) const { return y_[static_cast<std::size_t>(i) * j_ + j]; }
    std::span<const std::uint8_t> row(int i) const {
        return {y_.data() + static_cast<std::size_t>(i) * j_, static_cast<std::size_t>(j_)};
    }

    void validate() const {
        if (n_ < 0 || j_ < 0 || y_.size() != static_cast<std::size_t>(n_) * j_)
            throw config_error("Dataset: inconsistent shape");
        for (std::uint8_t v : y_)
            if (v > 1) throw config_error("Dataset: responses must be 0 or 1");
    }

  private:
    int n_ = 0, j_ = 0;
    std::vector<std::uint8_t> y_;
};

// ---------------------------------------------------------------------------
// Item response functions.
// ---------------------------------------------------------------------------
inline double irf_gapm(const ItemWeights& w, std::span<const SieveMonotone> sieves,
                       std::span<const std::uint8_t> q_row, std::span<const double> u) {
    double p = 0.0;
    for (std::size_t k = 0; k < q_row.size(); ++k)
        if (q_row[k] && w.alpha[k] != 0.0) p += w.alpha[k] * sieve_eval(sieves[k], u[k]);
    return p;
}

inline double irf_gapm(const GapmParams& params, const QMatrix& q, int item, std::span<const double> u) {
    return irf_gapm(params.weights[item], params.sieves[item], q.row(item), u);
}

inline double irf_apm(double delta0, std::span<const double> slopes,
                      std::span<const std::uint8_t> q_row, std::span<const double> u) {
    double p = delta0;
    for (std::size_t k = 0; k < q_row.size(); ++k)
        if (q_row[k]) p += slopes[k] * u[k];
    return p;
}

inline double irf_apm(const ApmParams& params, const QMatrix& q, int item, std::span<const double> u) {
    return irf_apm(params.delta0[item], params.slopes[item], q.row(item), u);
}

}  // namespace gapmcdm
