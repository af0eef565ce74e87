#ifndef H2ML_QUADRATURE_HPP
#define H2ML_QUADRATURE_HPP

#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <utility>
#include <vector>

#include "h2ml/errors.hpp"

namespace h2ml {

// Gauss-Legendre rule mapped to [0,1]
struct Rule1D {
    std::vector<double> x, w;
};

namespace detail {

inline Rule1D compute_gauss_legendre(int n)
{
    Rule1D r;
    r.x.resize(n);
    r.w.resize(n);
    for (int i = 0; i < n; ++i) {
        // Newton on P_n starting from the Chebyshev-like guess
        double x = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p = std::legendre(n, x);
            double pm = (n > 1) ? std::legendre(n - 1, x) : 1.0;
            dp = n * (x * p - pm) / (x * x - 1.0);
            double dx = p / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16)
                break;
        }
        double p = std::legendre(n, x);
        double pm = (n > 1) ? std::legendre(n - 1, x) : 1.0;
        dp = n * (x * p - pm) / (x * x - 1.0);
        double w = 2.0 / ((1.0 - x * x) * dp * dp);
        // ascending order on [0,1]
        r.x[n - 1 - i] = 0.5 * (x + 1.0);
        r.w[n - 1 - i] = 0.5 * w;
    }
    return r;
}

} // namespace detail

inline const Rule1D& gauss_legendre(int n)
{
    if (n < 1)
        throw config_error("gauss_legendre: n must be >= 1");
    static std::map<int, Rule1D> cache;
    static std::mutex mtx;
    std::lock_guard<std::mutex> lock(mtx);
    auto it = cache.find(n);
    if (it == cache.end())
        it = cache.emplace(n, detail::compute_gauss_legendre(n)).first;
    return it->second;
}

} // namespace h2ml

#endif
