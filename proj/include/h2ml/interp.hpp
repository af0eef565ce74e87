#ifndef H2ML_INTERP_HPP
#define H2ML_INTERP_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include <Eigen/Dense>

#include "h2ml/errors.hpp"
#include "h2ml/geometry.hpp"

namespace h2ml {

// k first-kind Chebyshev points on [a,b], ascending
inline std::vector<double> cheb_points(int k, double a, double b)
{
    if (k < 1)
        throw config_error("cheb_points: k must be >= 1");
    if (a > b)
        throw config_error("cheb_points: a > b");
    std::vector<double> x(k);
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    for (int i = 0; i < k; ++i)
        x[k - 1 - i] = mid + half * std::cos(std::numbers::pi * (2 * i + 1) / (2.0 * k));
    return x;
}

// 1D barycentric Lagrange data on [a,b]
struct Grid1D {
    double a = -1.0, b = 1.0;
    std::vector<double> x;
    std::vector<double> w; // barycentric weights (scale-free)

    Grid1D() = default;

    Grid1D(int k, double a_, double b_) : a(a_), b(b_)
    {
        x = cheb_points(k, a, b);
        std::vector<double> ref = cheb_points(k, -1.0, 1.0);
        set_weights(ref);
    }

    // arbitrary nodes (used by tests); weights computed on the affine reference interval
    static Grid1D from_nodes(std::vector<double> nodes)
    {
        Grid1D g;
        g.x = nodes;
        g.a = *std::min_element(nodes.begin(), nodes.end());
        g.b = *std::max_element(nodes.begin(), nodes.end());
        std::vector<double> ref(nodes.size());
        const double mid = 0.5 * (g.a + g.b), half = 0.5 * (g.b - g.a);
        for (std::size_t i = 0; i < nodes.size(); ++i)
            ref[i] = half > 0 ? (nodes[i] - mid) / half : 0.0;
        g.set_weights(ref);
        return g;
    }

    int size() const { return static_cast<int>(x.size()); }

    // Lagrange basis values at t
    void eval(double t, double* out) const
    {
        const int k = size();
        for (int j = 0; j < k; ++j)
            if (t == x[j]) {
                for (int i = 0; i < k; ++i)
                    out[i] = (i == j) ? 1.0 : 0.0;
                return;
            }
        double s = 0.0;
        for (int j = 0; j < k; ++j) {
            out[j] = w[j] / (t - x[j]);
            s += out[j];
        }
        for (int j = 0; j < k; ++j)
            out[j] /= s;
    }

    std::vector<double> eval(double t) const
    {
        std::vector<double> v(x.size());
        eval(t, v.data());
        return v;
    }

private:
    void set_weights(const std::vector<double>& ref)
    {
        const int k = static_cast<int>(ref.size());
        w.assign(k, 1.0);
        for (int j = 0; j < k; ++j)
            for (int m = 0; m < k; ++m)
                if (m != j) {
                    double d = ref[j] - ref[m];
                    if (d == 0.0)
                        throw config_error("Lagrange grid has duplicate points");
                    w[j] /= d;
                }
    }
};

// tensor Chebyshev grid on a box; index i = i0 + k*i1 + k^2*i2 (axis 0 fastest)
struct TensorGrid {
    int dim = 2;
    int k = 1;
    std::array<Grid1D, 3> axes;

    TensorGrid() = default;

    TensorGrid(const BoundingBox& box, int k_) : dim(box.dim), k(k_)
    {
        // guard against flat boxes: give every axis a tiny positive width
        double scale = std::max(box.diam_inf(), 1e-300);
        for (int a = 0; a < dim; ++a) {
            double lo = box.lo[a], hi = box.hi[a];
            double minw = 1e-9 * scale;
            if (hi - lo < minw) {
                double m = 0.5 * (lo + hi);
                lo = m - 0.5 * minw;
                hi = m + 0.5 * minw;
            }
            axes[a] = Grid1D(k, lo, hi);
        }
    }

    int size() const
    {
        int n = 1;
        for (int a = 0; a < dim; ++a)
            n *= k;
        return n;
    }

    Point point(int i) const
    {
        Point p{0, 0, 0};
        for (int a = 0; a < dim; ++a) {
            p[a] = axes[a].x[i % k];
            i /= k;
        }
        return p;
    }

    // all tensor Lagrange basis values at x (length size())
    void eval(const Point& x, double* out) const
    {
        double buf[3][128];
        std::vector<double> big;
        double* v[3];
        if (k > 128) {
            big.resize(3 * static_cast<std::size_t>(k));
            for (int a = 0; a < 3; ++a)
                v[a] = big.data() + a * k;
        } else {
            for (int a = 0; a < 3; ++a)
                v[a] = buf[a];
        }
        for (int a = 0; a < dim; ++a)
            axes[a].eval(x[a], v[a]);
        if (dim == 1) {
            std::copy(v[0], v[0] + k, out);
        } else if (dim == 2) {
            for (int j = 0; j < k; ++j)
                for (int i = 0; i < k; ++i)
                    out[i + k * j] = v[0][i] * v[1][j];
        } else {
            for (int l = 0; l < k; ++l)
                for (int j = 0; j < k; ++j)
                    for (int i = 0; i < k; ++i)
                        out[i + k * (j + k * l)] = v[0][i] * v[1][j] * v[2][l];
        }
    }

    Eigen::VectorXd eval(const Point& x) const
    {
        Eigen::VectorXd out(size());
        eval(x, out.data());
        return out;
    }
};

// lagrange_eval: weights w with interpolant(x) = sum_i w_i f(point_i)
inline std::vector<double> lagrange_eval(const Grid1D& g, double x) { return g.eval(x); }
inline Eigen::VectorXd lagrange_eval(const TensorGrid& g, const Point& x) { return g.eval(x); }

// points per direction k_l = ceil((beta + alpha (p - l))^delta); K_l = k_l^dim
struct RankSchedule {
    int alpha = 1;
    int beta = 2;
    double delta = 1.5;
    int dim = 2;
    int depth = 0;

    int order(int level) const
    {
        if (level < 0 || level > depth)
            throw config_error("RankSchedule: level out of range");
        double v = std::pow(static_cast<double>(beta + alpha * (depth - level)), delta);
        int k = static_cast<int>(std::ceil(v * (1.0 - 1e-12)));
        return std::max(k, 1);
    }
    int rank(int level) const
    {
        int k = order(level), K = 1;
        for (int a = 0; a < dim; ++a)
            K *= k;
        return K;
    }
};

// E(i,j) = j-th parent Lagrange basis function at the i-th child point
inline Eigen::MatrixXd transfer_matrix(const TensorGrid& parent, const TensorGrid& child)
{
    const int m = child.size(), n = parent.size();
    Eigen::MatrixXd E(m, n);
    Eigen::VectorXd row(n);
    for (int i = 0; i < m; ++i) {
        parent.eval(child.point(i), row.data());
        E.row(i) = row.transpose();
    }
    return E;
}

// sup-norm tensor interpolation errors on a dense sample grid, one per order in ks
inline std::vector<double> interp_error_decay(const std::function<double(const Point&)>& f,
                                              const BoundingBox& box, const std::vector<int>& ks,
                                              int samples_per_axis = 41)
{
    std::vector<double> errs;
    std::vector<Point> xs;
    int n = 1;
    for (int a = 0; a < box.dim; ++a)
        n *= samples_per_axis;
    for (int i = 0; i < n; ++i) {
        Point p{0, 0, 0};
        int r = i;
        for (int a = 0; a < box.dim; ++a) {
            int j = r % samples_per_axis;
            r /= samples_per_axis;
            p[a] = box.lo[a] + box.extent(a) * j / (samples_per_axis - 1.0);
        }
        xs.push_back(p);
    }
    for (int k : ks) {
        TensorGrid g(box, k);
        Eigen::VectorXd vals(g.size());
        for (int i = 0; i < g.size(); ++i)
            vals[i] = f(g.point(i));
        double e = 0.0;
        Eigen::VectorXd w(g.size());
        for (const Point& x : xs) {
            g.eval(x, w.data());
            e = std::max(e, std::abs(w.dot(vals) - f(x)));
        }
        errs.push_back(e);
    }
    return errs;
}

} // namespace h2ml

#endif
