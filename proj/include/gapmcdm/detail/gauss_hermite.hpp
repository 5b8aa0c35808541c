#pragma once

#include <cmath>
#include <vector>

#include "../errors.hpp"

namespace gapmcdm::detail {

struct GaussHermite {
    std::vector<double> nodes;
    std::vector<double> weights;  // for the weight function exp(-x^2)
};

// Nodes and weights by Newton iteration on the Hermite recurrence
// (physicists' convention). Stable up to a few hundred nodes.
inline GaussHermite gauss_hermite(int n) {
    if (n < 1) throw domain_error("gauss_hermite: need at least one node");
    GaussHermite gh;
    gh.nodes.assign(n, 0.0);
    gh.weights.assign(n, 0.0);
    const double pim4 = 0.7511255444649425;  // pi^{-1/4}
    const int m = (n + 1) / 2;
    double z = 0.0;
    for (int i = 0; i < m; ++i) {
        if (i == 0)
            z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -0.16667);
        else if (i == 1)
            z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
        else if (i == 2)
            z = 1.86 * z - 0.86 * gh.nodes[0];
        else if (i == 3)
            z = 1.91 * z - 0.91 * gh.nodes[1];
        else
            z = 2.0 * z - gh.nodes[i - 2];
        double pp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p1 = pim4, p2 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p3 = p2;
                p2 = p1;
                p1 = z * std::sqrt(2.0 / (j + 1.0)) * p2 - std::sqrt(static_cast<double>(j) / (j + 1.0)) * p3;
            }
            pp = std::sqrt(2.0 * n) * p2;
            const double dz = p1 / pp;
            z -= dz;
            if (std::abs(dz) < 1e-15) break;
        }
        gh.nodes[i] = z;
        gh.nodes[n - 1 - i] = -z;
        gh.weights[i] = 2.0 / (pp * pp);
        gh.weights[n - 1 - i] = gh.weights[i];
    }
    return gh;
}

}  // namespace gapmcdm::detail
