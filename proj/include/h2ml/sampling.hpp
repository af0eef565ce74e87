#ifndef H2ML_SAMPLING_HPP
#define H2ML_SAMPLING_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "h2ml/errors.hpp"
#include "h2ml/geometry.hpp"
#include "h2ml/kernel.hpp"

namespace h2ml {

//
// reference kernels
//

inline double matern92(double r)
{
    const double r2 = r * r;
    return (1.0 + 3.0 * r + 27.0 * r2 / 7.0 + 18.0 * r2 * r / 7.0 + 27.0 * r2 * r2 / 35.0) * std::exp(-3.0 * r);
}

// smooth cutoff: exp(-t^{1/(1-delta)}) for t > 0, zero otherwise
inline double gevrey_bump(double t, double delta)
{
    if (t <= 0.0)
        return 0.0;
    return std::exp(-std::pow(t, 1.0 / (1.0 - delta)));
}

// Gevrey partition of unity: 1 for t <= 0, 0 for t >= 1
inline double gevrey_partition(double t, double delta)
{
    if (!(delta > 1.0))
        throw config_error("gevrey warp requires delta > 1");
    double a = gevrey_bump(1.0 - t, delta), b = gevrey_bump(t, delta);
    return a / (a + b);
}

inline Point gevrey_warp(const Point& x, double delta)
{
    return {0.1 + gevrey_partition(2.0 * x[0] - 1.0, delta) * x[0], x[1], x[2]};
}

inline KernelFunction matern_kernel()
{
    return {"matern92", 1.0, 0.0, [](const Point& x, const Point& y) { return matern92(norm2(x - y)); }};
}

inline KernelFunction warped_matern_kernel(double delta)
{
    if (!(delta > 1.0))
        throw config_error("warped kernel requires delta > 1");
    return {"matern92-warped", delta, 0.0, [delta](const Point& x, const Point& y) {
                return matern92(norm2(gevrey_warp(x, delta) - gevrey_warp(y, delta)));
            }};
}

// plain Matern for delta = 1, warped Matern otherwise
inline KernelFunction reference_kernel(double delta)
{
    if (delta == 1.0)
        return matern_kernel();
    return warped_matern_kernel(delta);
}

//
// pivoted Cholesky
//

struct KLFactor {
    Eigen::MatrixXd L;              // n x r
    std::vector<int> pivots;
    double tol = 0.0;
    double residual_trace = 0.0;
    std::vector<double> trace_history; // residual trace after each step (first entry: initial trace)
    std::string kernel;

    Eigen::Index rank() const { return L.cols(); }
};

// greedy largest-diagonal pivoting until the residual trace drops to tol
inline KLFactor pivoted_cholesky(Eigen::Index n, const std::function<double(Eigen::Index)>& diag,
                                 const std::function<void(Eigen::Index, Eigen::VectorXd&)>& column, double tol,
                                 Eigen::Index max_rank = -1)
{
    if (tol < 0.0)
        throw config_error("pivoted_cholesky: tol must be nonnegative");
    if (max_rank < 0 || max_rank > n)
        max_rank = n;
    Eigen::VectorXd d(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d[i] = diag(i);
        if (d[i] < -1e-10)
            throw numeric_error("pivoted_cholesky: negative diagonal entry, matrix is not SPSD");
    }
    KLFactor f;
    f.tol = tol;
    std::vector<Eigen::VectorXd> cols;
    std::vector<bool> used(n, false);
    double tr = d.sum();
    f.trace_history.push_back(tr);
    Eigen::VectorXd c(n);
    while (tr > tol && static_cast<Eigen::Index>(cols.size()) < max_rank) {
        Eigen::Index piv = -1;
        double best = -1.0;
        for (Eigen::Index i = 0; i < n; ++i)
            if (!used[i] && d[i] > best) {
                best = d[i];
                piv = i;
            }
        if (piv < 0 || best <= 0.0)
            break;
        column(piv, c);
        for (const auto& l : cols)
            c -= l[piv] * l;
        Eigen::VectorXd l = c / std::sqrt(best);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (used[i])
                continue;
            d[i] -= l[i] * l[i];
            if (d[i] < -1e-10 * std::max(1.0, f.trace_history.front()))
                throw numeric_error("pivoted_cholesky: negative residual diagonal, matrix is not SPSD");
        }
        d[piv] = 0.0;
        used[piv] = true;
        cols.push_back(std::move(l));
        f.pivots.push_back(static_cast<int>(piv));
        tr = 0.0;
        for (Eigen::Index i = 0; i < n; ++i)
            if (!used[i])
                tr += std::max(d[i], 0.0);
        f.trace_history.push_back(tr);
    }
    f.residual_trace = tr;
    f.L.resize(n, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t j = 0; j < cols.size(); ++j)
        f.L.col(static_cast<Eigen::Index>(j)) = cols[j];
    return f;
}

inline KLFactor pivoted_cholesky(const Eigen::MatrixXd& C, double tol)
{
    return pivoted_cholesky(
        C.rows(), [&](Eigen::Index i) { return C(i, i); },
        [&](Eigen::Index j, Eigen::VectorXd& out) { out = C.col(j); }, tol);
}

//
// Karhunen-Loeve sampler on one mesh
//

enum class SampleLaw { normal, uniform };

inline SampleLaw parse_law(const std::string& s)
{
    if (s == "normal")
        return SampleLaw::normal;
    if (s == "uniform")
        return SampleLaw::uniform;
    throw config_error("unknown sample law '" + s + "'");
}

inline std::string law_name(SampleLaw l) { return l == SampleLaw::normal ? "normal" : "uniform"; }

// stream derivation: seed -> (level, sample index) through splitmix64
inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t stream_id(std::uint64_t seed, int level, std::uint64_t index)
{
    return splitmix64(splitmix64(splitmix64(seed) ^ static_cast<std::uint64_t>(level)) ^ index);
}

inline Eigen::VectorXd draw_law(std::uint64_t stream, Eigen::Index r, SampleLaw law)
{
    std::mt19937_64 gen(stream);
    Eigen::VectorXd y(r);
    if (law == SampleLaw::normal) {
        std::normal_distribution<double> nd(0.0, 1.0);
        for (Eigen::Index i = 0; i < r; ++i)
            y[i] = nd(gen);
    } else {
        std::uniform_real_distribution<double> ud(-1.0, 1.0);
        for (Eigen::Index i = 0; i < r; ++i)
            y[i] = std::sqrt(3.0) * ud(gen);
    }
    return y;
}

// The factor approximates W^{-1/2} C W^{-1/2}, with C the Galerkin covariance and W
// the panel areas; samples are z = W^{-1/2} L y, so Cov(z) ~ W^{-1} C W^{-1}, the law of
// the piecewise-constant L2 projection of the field.
struct FieldSampler {
    int level = 0;
    KLFactor kl;
    Eigen::VectorXd inv_sqrt_area;
    SampleLaw law = SampleLaw::normal;

    Eigen::Index n() const { return kl.L.rows(); }

    Eigen::VectorXd sample(const Eigen::VectorXd& y) const { return inv_sqrt_area.cwiseProduct(kl.L * y); }

    Eigen::VectorXd draw(std::uint64_t seed, std::uint64_t index) const
    {
        return sample(draw_law(stream_id(seed, level, index), kl.rank(), law));
    }

    // x -> L (L^T x): the reference covariance in orthonormal piecewise-constant coordinates
    Eigen::VectorXd apply_covariance(const Eigen::VectorXd& x) const { return kl.L * (kl.L.transpose() * x); }
};

// truncation tolerance 1e-3 * h with a floor of 1e-10 * trace
inline FieldSampler make_field_sampler(const Mesh& mesh, const KernelFunction& g, SampleLaw law = SampleLaw::normal,
                                       int nq = 2, double tol_factor = 1e-3)
{
    const Eigen::Index n = static_cast<Eigen::Index>(mesh.size());
    std::vector<PanelRule> rules;
    rules.reserve(mesh.size());
    for (const Panel& p : mesh.panels)
        rules.push_back(panel_rule(p, nq));
    Eigen::VectorXd area(n);
    for (Eigen::Index i = 0; i < n; ++i)
        area[i] = mesh.panels[i].area;
    auto entry = [&](Eigen::Index i, Eigen::Index j) {
        double acc = 0.0;
        const PanelRule& ri = rules[i];
        const PanelRule& rj = rules[j];
        for (std::size_t a = 0; a < ri.w.size(); ++a)
            for (std::size_t b = 0; b < rj.w.size(); ++b)
                acc += ri.w[a] * rj.w[b] * g(ri.pts[a], rj.pts[b]);
        return acc / std::sqrt(area[i] * area[j]);
    };
    double trace = 0.0;
    Eigen::VectorXd dg(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        dg[i] = entry(i, i);
        trace += dg[i];
    }
    double tol = std::max(tol_factor * mesh_width(mesh), 1e-10 * trace);
    FieldSampler s;
    s.level = mesh.level;
    s.law = law;
    s.kl = pivoted_cholesky(
        n, [&](Eigen::Index i) { return dg[i]; },
        [&](Eigen::Index j, Eigen::VectorXd& out) {
            out.resize(n);
            for (Eigen::Index i = 0; i < n; ++i)
                out[i] = (i == j) ? dg[i] : entry(i, j);
        },
        tol);
    s.kl.kernel = g.name;
    s.inv_sqrt_area = area.cwiseSqrt().cwiseInverse();
    return s;
}

//
// transfer between nested piecewise-constant spaces
//

// coarse value = area-weighted mean of the children (exact L2 projection)
inline Eigen::VectorXd restrict_to_coarse(const Eigen::VectorXd& z_fine, const Mesh& fine, std::size_t n_coarse)
{
    if (fine.parent_of.size() != fine.size() || static_cast<std::size_t>(z_fine.size()) != fine.size())
        throw structure_error("restrict: fine mesh/vector mismatch");
    Eigen::VectorXd num = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_coarse));
    Eigen::VectorXd den = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_coarse));
    for (std::size_t j = 0; j < fine.size(); ++j) {
        const double a = fine.panels[j].area;
        num[fine.parent_of[j]] += a * z_fine[j];
        den[fine.parent_of[j]] += a;
    }
    return num.cwiseQuotient(den);
}

inline Eigen::VectorXd prolong_to_fine(const Eigen::VectorXd& z_coarse, const Mesh& fine)
{
    if (fine.parent_of.size() != fine.size())
        throw structure_error("prolong: fine mesh carries no parent_of data");
    Eigen::VectorXd z(static_cast<Eigen::Index>(fine.size()));
    for (std::size_t j = 0; j < fine.size(); ++j)
        z[j] = z_coarse[fine.parent_of[j]];
    return z;
}

struct SampleDraw {
    std::uint64_t stream = 0;
    int level = 0;
    Eigen::VectorXd fine;   // on level
    Eigen::VectorXd coarse; // on level - 1 (empty for level 0)
};

// coupled pair (z_l, restrict(z_l)) from the level-l sampler
inline SampleDraw draw_coupled(const FieldSampler& s, const Mesh& mesh_l, std::size_t n_coarse, std::uint64_t seed,
                               std::uint64_t index, int level)
{
    if (s.level != level || mesh_l.level != level)
        throw structure_error("draw_coupled: sampler/mesh level does not match the requested level");
    SampleDraw d;
    d.level = level;
    d.stream = stream_id(seed, level, index);
    d.fine = s.sample(draw_law(d.stream, s.kl.rank(), s.law));
    if (level > 0)
        d.coarse = restrict_to_coarse(d.fine, mesh_l, n_coarse);
    return d;
}

} // namespace h2ml

#endif
