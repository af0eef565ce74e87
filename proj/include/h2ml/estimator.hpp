#ifndef H2ML_ESTIMATOR_HPP
#define H2ML_ESTIMATOR_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "h2ml/errors.hpp"
#include "h2ml/geometry.hpp"
#include "h2ml/h2.hpp"
#include "h2ml/sampling.hpp"

namespace h2ml {

//
// sample numbers
//

struct Schedule {
    int L = 0;
    double gamma = 1.0;
    double dim = 2.0;
    double c_uni = 4.0;
    std::vector<long long> M;

    long long total() const
    {
        long long s = 0;
        for (long long m : M)
            s += m;
        return s;
    }
};

// ceil that forgives representation noise just above an integer
inline long long safe_ceil(double v) { return static_cast<long long>(std::ceil(v * (1.0 - 1e-12))); }

inline Schedule sample_schedule(int L, double gamma, double dim, double c_uni)
{
    if (L < 0 || !(gamma > 0.0) || !(dim >= 1.0) || !(c_uni > 1.0))
        throw config_error("sample_schedule: need L >= 0, gamma > 0, d >= 1, C_uni > 1");
    Schedule s{L, gamma, dim, c_uni, {}};
    const double two_g = 2.0 * gamma;
    double m0;
    if (std::abs(two_g - dim) <= 1e-12 * dim) {
        const double l = std::max(L, 1);
        m0 = std::pow(c_uni, two_g * L / dim) * l * l;
    } else if (two_g > dim) {
        m0 = std::pow(c_uni, two_g * L / dim);
    } else {
        m0 = std::pow(c_uni, 2.0 * (1.0 + gamma / dim) * L / 3.0);
    }
    for (int l = 0; l <= L; ++l) {
        double m = m0 * std::pow(c_uni, -2.0 * l * (1.0 + gamma / dim) / 3.0);
        s.M.push_back(std::max<long long>(1, safe_ceil(m)));
    }
    return s;
}

inline int level_for_epsilon(double eps, double gamma, double dim, double c_uni)
{
    if (!(eps > 0.0 && eps < 1.0))
        throw config_error("level_for_epsilon: need 0 < eps < 1");
    double v = (dim / gamma) * std::abs(std::log(1.0 / eps) / std::log(c_uni));
    return std::max(0, static_cast<int>(std::ceil(v - 1e-9)));
}

//
// multilevel setup: levels built on one nested hierarchy
//

struct MultilevelSetup {
    NestedHierarchy hierarchy;
    std::vector<LevelPtr> levels;

    int finest() const { return static_cast<int>(levels.size()) - 1; }
};

inline MultilevelSetup build_multilevel(const std::string& geometry, int L, const H2Params& prm)
{
    MultilevelSetup s;
    s.hierarchy = build_hierarchy(geometry, L, prm.n_min);
    for (int l = 0; l <= L; ++l)
        s.levels.push_back(make_level(s.hierarchy.meshes[l], s.hierarchy.trees[l], prm));
    return s;
}

//
// sample loops
//

// Splits [0, M) into contiguous chunks, one per worker; each worker accumulates into its
// own kernels and chunks are merged in index order, so the result is independent of timing.
template <class Body>
void chunked_accumulate(long long M, int threads, const std::function<std::vector<H2Kernel>()>& make_zero,
                        std::vector<H2Kernel>& out, Body&& body)
{
    threads = std::max(1, static_cast<int>(std::min<long long>(threads, M)));
    if (threads == 1) {
        for (long long k = 0; k < M; ++k)
            body(k, out);
        return;
    }
    std::vector<std::vector<H2Kernel>> part(threads);
    std::vector<std::exception_ptr> err(threads);
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                part[w] = make_zero();
                long long b = M * w / threads, e = M * (w + 1) / threads;
                for (long long k = b; k < e; ++k)
                    body(k, part[w]);
            } catch (...) {
                err[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    for (auto& e : err)
        if (e)
            std::rethrow_exception(e);
    for (int w = 0; w < threads; ++w)
        for (std::size_t i = 0; i < out.size(); ++i)
            h2_axpy_inplace(1.0, part[w][i], out[i]);
}

// (1/M) sum_k Pi^H(z_k (x) z_k)
inline H2Kernel sce(LevelPtr lv, long long M, const std::function<Eigen::VectorXd(long long)>& draw, int threads = 1)
{
    if (M <= 0)
        throw config_error("sce: M must be positive");
    std::vector<H2Kernel> acc{zero_kernel(lv)};
    const double w = 1.0 / static_cast<double>(M);
    chunked_accumulate(
        M, threads, [&] { return std::vector<H2Kernel>{zero_kernel(lv)}; }, acc,
        [&](long long k, std::vector<H2Kernel>& G) { accumulate_simple_tensor(G[0], draw(k), w); });
    return std::move(acc[0]);
}

struct LevelKernels {
    std::vector<H2Kernel> g; // g[l] on level l
};

using DrawFn = std::function<SampleDraw(int level, long long index)>;

// independent coupled draws per level from per-level KL samplers
inline DrawFn level_draws(const MultilevelSetup& s, const std::vector<FieldSampler>& samplers, std::uint64_t seed)
{
    return [&s, &samplers, seed](int l, long long k) {
        const std::size_t nc = l > 0 ? s.hierarchy.meshes[l - 1].size() : 0;
        return draw_coupled(samplers.at(l), s.hierarchy.meshes[l], nc, seed, static_cast<std::uint64_t>(k), l);
    };
}

// draws from the finest sampler restricted to every level: sample k is the same field on all levels
inline DrawFn shared_draws(const MultilevelSetup& s, const FieldSampler& finest, std::uint64_t seed)
{
    return [&s, &finest, seed](int l, long long k) {
        const int L = s.finest();
        if (finest.level != L)
            throw structure_error("shared_draws: sampler is not on the finest level");
        SampleDraw d;
        d.level = l;
        d.stream = stream_id(seed, L, static_cast<std::uint64_t>(k));
        Eigen::VectorXd z = finest.sample(draw_law(d.stream, finest.kl.rank(), finest.law));
        for (int m = L; m > l; --m)
            z = restrict_to_coarse(z, s.hierarchy.meshes[m], s.hierarchy.meshes[m - 1].size());
        d.fine = z;
        if (l > 0)
            d.coarse = restrict_to_coarse(z, s.hierarchy.meshes[l], s.hierarchy.meshes[l - 1].size());
        return d;
    };
}

// per-level difference estimators: level l gets +Pi(z_l), level l-1 gets -Pi(restrict z_l)
inline LevelKernels mlsce_levels(const MultilevelSetup& s, const Schedule& sched, const DrawFn& draw, int threads = 1)
{
    const int L = s.finest();
    if (sched.L != L || static_cast<int>(sched.M.size()) != L + 1)
        throw structure_error("mlsce: schedule does not match the hierarchy");
    LevelKernels out;
    for (int l = 0; l <= L; ++l)
        out.g.push_back(zero_kernel(s.levels[l]));
    for (int l = 0; l <= L; ++l) {
        const long long M = sched.M[l];
        if (M <= 0)
            throw config_error("mlsce: sample numbers must be positive");
        const double w = 1.0 / static_cast<double>(M);
        std::vector<H2Kernel> acc;
        acc.push_back(zero_kernel(s.levels[l]));
        if (l > 0)
            acc.push_back(zero_kernel(s.levels[l - 1]));
        auto make_zero = [&] {
            std::vector<H2Kernel> z{zero_kernel(s.levels[l])};
            if (l > 0)
                z.push_back(zero_kernel(s.levels[l - 1]));
            return z;
        };
        chunked_accumulate(M, threads, make_zero, acc, [&](long long k, std::vector<H2Kernel>& G) {
            SampleDraw d = draw(l, k);
            if (d.level != l)
                throw structure_error("mlsce: draw returned the wrong level");
            accumulate_simple_tensor(G[0], d.fine, w);
            if (l > 0)
                accumulate_simple_tensor(G[1], d.coarse, -w);
        });
        h2_axpy_inplace(1.0, acc[0], out.g[l]);
        if (l > 0)
            h2_axpy_inplace(1.0, acc[1], out.g[l - 1]);
    }
    return out;
}

//
// cross-level matrices
//

// Constant-order family on the finest tree: R_t = int psi^{var}_t psi^{const}_t, lifted with
// the variable-order transfers E and the constant-order transfers F. N_t are the full-cluster
// moment matrices, memoized on demand.
struct RNBase {
    const Level* level = nullptr;
    int order = 0;
    std::vector<TensorGrid> cgrid;
    std::vector<Eigen::MatrixXd> F; // F[t]: cgrid[t] points x cgrid[parent] basis (empty at root)
    std::vector<Eigen::MatrixXd> R; // K_t x order^dim

    const Eigen::MatrixXd& N(int t) const
    {
        if (memo_.empty())
            memo_.resize(level->tree.nodes.size());
        Eigen::MatrixXd& m = memo_[t];
        if (m.size() > 0)
            return m;
        const Cluster& c = level->tree.nodes[t];
        if (c.is_leaf()) {
            m = level->ops.M[t];
            return m;
        }
        Eigen::MatrixXd out(level->ops.K[t], static_cast<Eigen::Index>(c.size()));
        for (int ch : c.children) {
            const Cluster& cc = level->tree.nodes[ch];
            out.middleCols(static_cast<Eigen::Index>(cc.begin - c.begin), static_cast<Eigen::Index>(cc.size())) =
                level->ops.E[ch].transpose() * N(ch);
        }
        m = std::move(out);
        return m;
    }

private:
    mutable std::vector<Eigen::MatrixXd> memo_;
};

inline RNBase assemble_RN_base(const Level& fin, int order)
{
    if (order < 1)
        throw config_error("assemble_RN_base: order must be >= 1");
    const auto& tree = fin.tree;
    const std::size_t n = tree.nodes.size();
    RNBase b;
    b.level = &fin;
    b.order = order;
    b.cgrid.resize(n);
    b.F.resize(n);
    b.R.resize(n);
    for (std::size_t t = 0; t < n; ++t)
        b.cgrid[t] = TensorGrid(tree.nodes[t].box, order);
    for (std::size_t t = 1; t < n; ++t)
        b.F[t] = transfer_matrix(b.cgrid[tree.nodes[t].parent], b.cgrid[t]);
    for (std::size_t r = n; r-- > 0;) {
        const Cluster& c = tree.nodes[r];
        const TensorGrid& gv = fin.ops.grid[r];
        if (c.is_leaf()) {
            if (gv.k == order) {
                b.R[r] = fin.ops.Q[r];
                continue;
            }
            const int nq = gram_quadrature_points(std::max(gv.k, order));
            Eigen::MatrixXd R = Eigen::MatrixXd::Zero(gv.size(), b.cgrid[r].size());
            for (int p : tree.indices(static_cast<int>(r))) {
                PanelRule pr = panel_rule(fin.mesh.panels[p], nq);
                for (std::size_t q = 0; q < pr.w.size(); ++q)
                    R += pr.w[q] * gv.eval(pr.pts[q]) * b.cgrid[r].eval(pr.pts[q]).transpose();
            }
            b.R[r] = std::move(R);
        } else {
            Eigen::MatrixXd R = Eigen::MatrixXd::Zero(gv.size(), b.cgrid[r].size());
            for (int ch : c.children)
                R.noalias() += fin.ops.E[ch].transpose() * b.R[ch] * b.F[ch];
            b.R[r] = std::move(R);
        }
    }
    return b;
}

// lazily built base families, one per constant order
class RNBaseFamily {
public:
    explicit RNBaseFamily(const Level& fin) : fin_(fin) {}
    const RNBase& get(int order)
    {
        auto it = fam_.find(order);
        if (it == fam_.end())
            it = fam_.emplace(order, assemble_RN_base(fin_, order)).first;
        return it->second;
    }
    const Level& finest() const { return fin_; }

private:
    const Level& fin_;
    std::map<int, RNBase> fam_;
};

// columns of N^L_tau summed by level-l ancestor panel, in the storage order of cluster t of T_l
inline Eigen::MatrixXd aggregate_moments(const Eigen::MatrixXd& Ntau, const ClusterTree& treeL, int tau,
                                         const NestedHierarchy& h, int L, const ClusterTree& tree_l, int l, int t)
{
    const Cluster& ct = tree_l.nodes[t];
    const Cluster& cu = treeL.nodes[tau];
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(Ntau.rows(), static_cast<Eigen::Index>(ct.size()));
    for (std::size_t p = cu.begin; p < cu.end; ++p) {
        const int a = h.ancestor_panel(L, treeL.perm[p], l);
        const std::size_t q = tree_l.pos_of[a];
        if (q < ct.begin || q >= ct.end)
            throw structure_error("aggregate_moments: fine cluster is not inside the coarse cluster");
        out.col(static_cast<Eigen::Index>(q - ct.begin)) += Ntau.col(static_cast<Eigen::Index>(p - cu.begin));
    }
    return out;
}

struct RNCross {
    int level = 0, finest = 0;
    std::vector<Eigen::MatrixXd> R; // K^L_{img t} x K^l_t
    std::vector<Eigen::MatrixXd> N; // K^L_{img t} x |t|_l
};

inline RNCross assemble_RN_cross(const NestedHierarchy& h, const Level& lv, int l, RNBaseFamily& bases, int L)
{
    const Level& fin = bases.finest();
    if (l < 0 || l > L || L >= h.levels() || lv.n() != h.meshes[l].size() || fin.n() != h.meshes[L].size())
        throw structure_error("assemble_RN_cross: levels do not match the hierarchy");
    const auto& tree = lv.tree;
    const std::size_t n = tree.nodes.size();
    RNCross rc;
    rc.level = l;
    rc.finest = L;
    rc.R.resize(n);
    rc.N.resize(n);
    std::vector<int> img(n);
    for (std::size_t t = 0; t < n; ++t) {
        img[t] = h.image(l, static_cast<int>(t), L);
        if (img[t] < 0)
            throw structure_error("assemble_RN_cross: cluster has no image on the finest level");
    }
    for (std::size_t r = n; r-- > 0;) {
        const Cluster& c = tree.nodes[r];
        const int tau = img[r];
        if (c.is_leaf()) {
            const RNBase& b = bases.get(lv.ops.grid[r].k);
            // psi^l_t is a polynomial of the same order: its constant-order coefficients at tau
            // are its values on the constant-order grid
            rc.R[r] = b.R[tau] * transfer_matrix(lv.ops.grid[r], b.cgrid[tau]);
            rc.N[r] = aggregate_moments(b.N(tau), fin.tree, tau, h, L, tree, l, static_cast<int>(r));
        } else {
            rc.R[r] = Eigen::MatrixXd::Zero(fin.ops.K[tau], lv.ops.K[r]);
            rc.N[r].resize(fin.ops.K[tau], static_cast<Eigen::Index>(c.size()));
            for (int ch : c.children) {
                const int tc = img[ch];
                if (fin.tree.nodes[tc].parent != tau)
                    throw structure_error("assemble_RN_cross: images of parent and child are not nested");
                rc.R[r].noalias() += fin.ops.E[tc].transpose() * rc.R[ch] * lv.ops.E[ch];
                const Cluster& cc = tree.nodes[ch];
                rc.N[r].middleCols(static_cast<Eigen::Index>(cc.begin - c.begin), static_cast<Eigen::Index>(cc.size())) =
                    fin.ops.E[tc].transpose() * rc.N[ch];
            }
        }
    }
    return rc;
}

//
// multilevel reduction
//

// Pi^{H_L} sum_l g_l. Far blocks of level l map onto the coinciding far blocks of level L
// (R-equation); near blocks are descended through the level-L block tree, admissible pieces
// projected with aggregated moments (N-equation) and inadmissible pieces copied as
// piecewise-constant values. All right-hand sides are collected first, then one Gram solve
// per far block.
inline H2Kernel multilevel_reduce(const NestedHierarchy& h, const LevelKernels& in)
{
    const int L = static_cast<int>(in.g.size()) - 1;
    if (L < 0)
        throw structure_error("multilevel_reduce: no levels");
    if (L >= h.levels())
        throw structure_error("multilevel_reduce: more kernels than hierarchy levels");
    for (int l = 0; l <= L; ++l)
        if (!in.g[l].level || in.g[l].level->n() != h.meshes[l].size() ||
            in.g[l].level->tree.nodes.size() != h.trees[l].nodes.size())
            throw structure_error("multilevel_reduce: kernel " + std::to_string(l) + " does not live on the hierarchy");
    H2Kernel out = in.g[L];
    if (L == 0)
        return out;
    const Level& fin = *in.g[L].level;
    const auto& treeL = fin.tree;
    const double eta = fin.blocks.eta;
    RNBaseFamily bases(fin);
    const RNBase& nbase = bases.get(fin.ops.schedule.order(fin.tree.depth));
    std::vector<Eigen::MatrixXd> Y(fin.blocks.farfield.size());
    auto add_rhs = [&](int B, const Eigen::MatrixXd& V) {
        if (Y[B].size() == 0)
            Y[B] = V;
        else
            Y[B] += V;
    };

    for (int l = 0; l < L; ++l) {
        const H2Kernel& g = in.g[l];
        const Level& lv = *g.level;
        RNCross rc = assemble_RN_cross(h, lv, l, bases, L);
        for (std::size_t b = 0; b < lv.blocks.farfield.size(); ++b) {
            const Block& bl = lv.blocks.farfield[b];
            const int B = fin.blocks.find_far(h.image(l, bl.t, L), h.image(l, bl.s, L));
            if (B < 0)
                throw structure_error("multilevel_reduce: farfield block of level " + std::to_string(l) +
                                      " has no farfield counterpart on the finest level");
            add_rhs(B, rc.R[bl.t] * g.far[b] * rc.R[bl.s].transpose());
        }
        for (std::size_t b = 0; b < lv.blocks.nearfield.size(); ++b) {
            const Block& bl = lv.blocks.nearfield[b];
            const Eigen::MatrixXd& C = g.near[b];
            const Cluster& ct = lv.tree.nodes[bl.t];
            const Cluster& cs = lv.tree.nodes[bl.s];
            auto local_col = [&](const Cluster& c, int fine_pos) {
                const int a = h.ancestor_panel(L, treeL.perm[fine_pos], l);
                return static_cast<Eigen::Index>(lv.tree.pos_of[a] - c.begin);
            };
            block_recursion(
                treeL, h.image(l, bl.t, L), h.image(l, bl.s, L), eta,
                [&](int tau, int sig) {
                    const int B = fin.blocks.find_far(tau, sig);
                    if (B < 0)
                        throw structure_error("multilevel_reduce: block recursion left the finest block tree");
                    Eigen::MatrixXd Nt = aggregate_moments(nbase.N(tau), treeL, tau, h, L, lv.tree, l, bl.t);
                    Eigen::MatrixXd Ns = aggregate_moments(nbase.N(sig), treeL, sig, h, L, lv.tree, l, bl.s);
                    add_rhs(B, Nt * C * Ns.transpose());
                },
                [&](int tau, int sig) {
                    const int B = fin.blocks.find_near(tau, sig);
                    if (B < 0)
                        throw structure_error("multilevel_reduce: block recursion left the finest block tree");
                    const Cluster& cu = treeL.nodes[tau];
                    const Cluster& cv = treeL.nodes[sig];
                    Eigen::MatrixXd& D = out.near[B];
                    for (std::size_t p = cu.begin; p < cu.end; ++p) {
                        const Eigen::Index i = local_col(ct, static_cast<int>(p));
                        for (std::size_t q = cv.begin; q < cv.end; ++q)
                            D(static_cast<Eigen::Index>(p - cu.begin), static_cast<Eigen::Index>(q - cv.begin)) +=
                                C(i, local_col(cs, static_cast<int>(q)));
                    }
                });
        }
    }
    for (std::size_t B = 0; B < Y.size(); ++B) {
        if (Y[B].size() == 0)
            continue;
        const Block& bl = fin.blocks.farfield[B];
        Eigen::MatrixXd X = fin.ops.Qfac[bl.t].solve(Y[B]);
        out.far[B] += fin.ops.Qfac[bl.s].solve(X.transpose()).transpose();
    }
    return out;
}

inline H2Kernel mlsce(const MultilevelSetup& s, const Schedule& sched, const DrawFn& draw, int threads = 1)
{
    return multilevel_reduce(s.hierarchy, mlsce_levels(s, sched, draw, threads));
}

} // namespace h2ml

#endif
