#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "../errors.hpp"

// Small dense helpers for K x K problems (K <= 8 throughout). Matrices are
// row-major std::vector<double>; triangular ones keep explicit zeros above
// the diagonal.

namespace gapmcdm::detail {

using Vec = std::vector<double>;

// Cholesky factor (lower) of a symmetric positive definite matrix.
inline Vec cholesky(std::span<const double> a, int k) {
    Vec l(static_cast<std::size_t>(k) * k, 0.0);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = a[i * k + j];
            for (int m = 0; m < j; ++m) s -= l[i * k + m] * l[j * k + m];
            if (i == j) {
                if (!(s > 0.0)) throw numerical_error("cholesky: matrix not positive definite");
                l[i * k + i] = std::sqrt(s);
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    return l;
}

// Forward substitution, L y = b (in place).
inline void solve_lower(std::span<const double> l, int k, std::span<double> b) {
    for (int i = 0; i < k; ++i) {
        double s = b[i];
        for (int j = 0; j < i; ++j) s -= l[i * k + j] * b[j];
        b[i] = s / l[i * k + i];
    }
}

// Backward substitution, L^T x = b (in place).
inline void solve_lower_transposed(std::span<const double> l, int k, std::span<double> b) {
    for (int i = k - 1; i >= 0; --i) {
        double s = b[i];
        for (int j = i + 1; j < k; ++j) s -= l[j * k + i] * b[j];
        b[i] = s / l[i * k + i];
    }
}

// v <- (L L^T)^{-1} v via two triangular solves.
inline void apply_sigma_inverse(std::span<const double> l, int k, std::span<double> v) {
    solve_lower(l, k, v);
    solve_lower_transposed(l, k, v);
}

inline double log_det_lower(std::span<const double> l, int k) {
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += std::log(std::abs(l[i * k + i]));
    return s;
}

// Full matrix L L^T from a lower-triangular factor.
inline Vec lower_times_transpose(std::span<const double> l, int k) {
    Vec s(static_cast<std::size_t>(k) * k, 0.0);
    for (int i = 0; i < k; ++i)
        for (int j = 0; j <= i; ++j) {
            double v = 0.0;
            for (int m = 0; m <= std::min(i, j); ++m) v += l[i * k + m] * l[j * k + m];
            s[i * k + j] = v;
            s[j * k + i] = v;
        }
    return s;
}

// y = M x for a dense row-major k x k matrix.
inline void matvec(std::span<const double> m, int k, std::span<const double> x, std::span<double> y) {
    for (int i = 0; i < k; ++i) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += m[i * k + j] * x[j];
        y[i] = s;
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

}  // namespace gapmcdm::detail
