#ifndef H2ML_H2_HPP
#define H2ML_H2_HPP

#include <cmath>
#include <cstddef>
#include <memory>
#include <vector>

#include <Eigen/Dense>

#include "h2ml/errors.hpp"
#include "h2ml/geometry.hpp"
#include "h2ml/interp.hpp"
#include "h2ml/kernel.hpp"

namespace h2ml {

struct H2Params {
    int alpha = 1;
    int beta = 2;
    double delta = 1.5;
    double eta = 0.8;
    int n_min = 4;
    int near_quad = 3; // Gauss points per direction for nearfield kernel quadrature
};

// Local solves with Q_t. Cholesky when well conditioned; otherwise a symmetric
// eigen pseudo-inverse (the iterated-interpolation spaces may have dimension < K_t).
class GramSolver {
public:
    static constexpr double cutoff = 1e-10;

    void factor(const Eigen::MatrixXd& Q)
    {
        n_ = Q.rows();
        if (n_ == 0)
            return;
        llt_.compute(Q);
        if (llt_.info() == Eigen::Success && llt_.rcond() > cutoff) {
            cholesky_ = true;
            return;
        }
        cholesky_ = false;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Q);
        if (es.info() != Eigen::Success)
            throw numeric_error("GramSolver: eigendecomposition failed");
        const Eigen::VectorXd& lam = es.eigenvalues();
        double lmax = lam.cwiseAbs().maxCoeff();
        if (!(lmax > 0.0))
            throw numeric_error("GramSolver: zero Gram matrix (degenerate cluster measure)");
        Eigen::VectorXd inv(lam.size());
        for (Eigen::Index i = 0; i < lam.size(); ++i)
            inv[i] = lam[i] > cutoff * lmax ? 1.0 / lam[i] : 0.0;
        pinv_ = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
        llt_ = Eigen::LLT<Eigen::MatrixXd>();
    }

    bool is_cholesky() const { return cholesky_; }

    template <class Derived>
    Eigen::MatrixXd solve(const Eigen::MatrixBase<Derived>& b) const
    {
        if (cholesky_)
            return llt_.solve(b);
        return pinv_ * b;
    }

private:
    Eigen::Index n_ = 0;
    bool cholesky_ = true;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    Eigen::MatrixXd pinv_;
};

// per-cluster grids and local L2 matrices of one level
struct ClusterOperators {
    RankSchedule schedule;
    std::vector<TensorGrid> grid;
    std::vector<int> K;
    std::vector<Eigen::MatrixXd> E; // E[t]: K_t x K_parent (empty at the root)
    std::vector<Eigen::MatrixXd> M; // leaf moments K_t x |t|, columns in storage order
    std::vector<Eigen::MatrixXd> Q; // Gram matrices
    std::vector<GramSolver> Qfac;
};

// leaf moment matrix: M(i,j) = int_{panel j} psi_i
inline Eigen::MatrixXd assemble_moment_leaf(const Mesh& mesh, const TensorGrid& grid, const std::vector<int>& panels,
                                            int nq)
{
    const int K = grid.size();
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(K, static_cast<Eigen::Index>(panels.size()));
    Eigen::VectorXd psi(K);
    for (std::size_t j = 0; j < panels.size(); ++j) {
        PanelRule r = panel_rule(mesh.panels[panels[j]], nq);
        for (std::size_t q = 0; q < r.w.size(); ++q) {
            grid.eval(r.pts[q], psi.data());
            M.col(j) += r.w[q] * psi;
        }
    }
    return M;
}

// leaf Gram matrix by quadrature, filled symmetrically
inline Eigen::MatrixXd assemble_gram_leaf(const Mesh& mesh, const TensorGrid& grid, const std::vector<int>& panels,
                                          int nq)
{
    const int K = grid.size();
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(K, K);
    Eigen::VectorXd psi(K);
    for (int p : panels) {
        PanelRule r = panel_rule(mesh.panels[p], nq);
        for (std::size_t q = 0; q < r.w.size(); ++q) {
            grid.eval(r.pts[q], psi.data());
            Q.selfadjointView<Eigen::Lower>().rankUpdate(psi, r.w[q]);
        }
    }
    Q.triangularView<Eigen::StrictlyUpper>() = Q.transpose();
    return Q;
}

inline int moment_quadrature_points(int k) { return (k + 2) / 2 + 1; } // ceil((k+1)/2) + 1
inline int gram_quadrature_points(int k) { return k; }                // exact for degree 2k-2

inline ClusterOperators build_cluster_operators(const Mesh& mesh, const ClusterTree& tree, const H2Params& prm)
{
    ClusterOperators ops;
    ops.schedule = RankSchedule{prm.alpha, prm.beta, prm.delta, tree.dim, tree.depth};
    const std::size_t n = tree.nodes.size();
    ops.grid.resize(n);
    ops.K.resize(n);
    ops.E.resize(n);
    ops.M.resize(n);
    ops.Q.resize(n);
    ops.Qfac.resize(n);
    for (std::size_t t = 0; t < n; ++t) {
        const Cluster& c = tree.nodes[t];
        ops.grid[t] = TensorGrid(c.box, ops.schedule.order(c.level));
        ops.K[t] = ops.grid[t].size();
    }
    for (std::size_t t = 1; t < n; ++t)
        ops.E[t] = transfer_matrix(ops.grid[tree.nodes[t].parent], ops.grid[t]);
    // children carry larger preorder ids: reverse sweep is bottom-up
    for (std::size_t r = n; r-- > 0;) {
        const Cluster& c = tree.nodes[r];
        if (c.is_leaf()) {
            std::vector<int> idx = tree.indices(static_cast<int>(r));
            int k = ops.grid[r].k;
            ops.M[r] = assemble_moment_leaf(mesh, ops.grid[r], idx, moment_quadrature_points(k));
            ops.Q[r] = assemble_gram_leaf(mesh, ops.grid[r], idx, gram_quadrature_points(k));
        } else {
            Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(ops.K[r], ops.K[r]);
            for (int ch : c.children)
                Q.noalias() += ops.E[ch].transpose() * (ops.Q[ch] * ops.E[ch]);
            ops.Q[r] = 0.5 * (Q + Q.transpose());
        }
        ops.Qfac[r].factor(ops.Q[r]);
    }
    return ops;
}

// one level of the discretization: mesh, cluster tree, block tree, operators
struct Level {
    Mesh mesh;
    ClusterTree tree;
    BlockClusterTree blocks;
    H2Params params;
    ClusterOperators ops;
    Eigen::VectorXd area; // by panel id

    std::size_t n() const { return mesh.size(); }
};
using LevelPtr = std::shared_ptr<const Level>;

inline LevelPtr make_level(Mesh mesh, ClusterTree tree, const H2Params& prm)
{
    auto L = std::make_shared<Level>();
    L->mesh = std::move(mesh);
    L->tree = std::move(tree);
    L->params = prm;
    L->blocks = build_block_cluster_tree(L->tree, prm.eta);
    L->ops = build_cluster_operators(L->mesh, L->tree, prm);
    L->area.resize(static_cast<Eigen::Index>(L->mesh.size()));
    for (std::size_t i = 0; i < L->mesh.size(); ++i)
        L->area[i] = L->mesh.panels[i].area;
    return L;
}

inline LevelPtr make_level(const std::string& geometry, int level, const H2Params& prm)
{
    Mesh m = build_mesh(geometry, level);
    ClusterTree t = build_cluster_tree(m, prm.n_min);
    return make_level(std::move(m), std::move(t), prm);
}

// gather / scatter between panel-id order and a cluster's storage order
inline Eigen::VectorXd gather(const ClusterTree& tree, int t, const Eigen::VectorXd& x)
{
    const Cluster& c = tree.nodes[t];
    Eigen::VectorXd out(static_cast<Eigen::Index>(c.size()));
    for (std::size_t i = c.begin; i < c.end; ++i)
        out[i - c.begin] = x[tree.perm[i]];
    return out;
}

inline void scatter_add(const ClusterTree& tree, int t, const Eigen::VectorXd& v, Eigen::VectorXd& y)
{
    const Cluster& c = tree.nodes[t];
    for (std::size_t i = c.begin; i < c.end; ++i)
        y[tree.perm[i]] += v[i - c.begin];
}

//
// forward / backward transformations
//

// leaf data for a test space: moment matrices and the panel ids they act on
struct LeafSpace {
    std::vector<const Eigen::MatrixXd*> M;  // per cluster (leaves only)
    std::vector<std::vector<int>> panels;    // per cluster (leaves only)
    std::size_t n = 0;                       // dimension of the FE space
};

inline LeafSpace native_leaf_space(const Level& lv)
{
    LeafSpace s;
    s.n = lv.n();
    s.M.assign(lv.tree.nodes.size(), nullptr);
    s.panels.resize(lv.tree.nodes.size());
    for (int t : lv.tree.leaves) {
        s.M[t] = &lv.ops.M[t];
        s.panels[t] = lv.tree.indices(t);
    }
    return s;
}

// q_t = M_t x_t at leaves, q_t = sum E'^T q_t' above
inline std::vector<Eigen::VectorXd> forward_transform(const Level& lv, const LeafSpace& sp, const Eigen::VectorXd& x)
{
    const auto& tree = lv.tree;
    std::vector<Eigen::VectorXd> q(tree.nodes.size());
    for (std::size_t r = tree.nodes.size(); r-- > 0;) {
        const Cluster& c = tree.nodes[r];
        if (c.is_leaf()) {
            const auto& ids = sp.panels[r];
            Eigen::VectorXd xl(static_cast<Eigen::Index>(ids.size()));
            for (std::size_t i = 0; i < ids.size(); ++i)
                xl[i] = x[ids[i]];
            q[r] = (*sp.M[r]) * xl;
        } else {
            q[r] = Eigen::VectorXd::Zero(lv.ops.K[r]);
            for (int ch : c.children)
                q[r].noalias() += lv.ops.E[ch].transpose() * q[ch];
        }
    }
    return q;
}

inline std::vector<Eigen::VectorXd> forward_transform(const Level& lv, const Eigen::VectorXd& x)
{
    return forward_transform(lv, native_leaf_space(lv), x);
}

// y = sum_t N_t^T v_t (transpose of the forward transformation)
inline Eigen::VectorXd backward_transform(const Level& lv, const LeafSpace& sp, std::vector<Eigen::VectorXd> v)
{
    const auto& tree = lv.tree;
    Eigen::VectorXd y = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(sp.n));
    for (std::size_t t = 0; t < tree.nodes.size(); ++t) {
        const Cluster& c = tree.nodes[t];
        if (v[t].size() == 0)
            v[t] = Eigen::VectorXd::Zero(lv.ops.K[t]);
        if (c.is_leaf()) {
            Eigen::VectorXd yl = sp.M[t]->transpose() * v[t];
            const auto& ids = sp.panels[t];
            for (std::size_t i = 0; i < ids.size(); ++i)
                y[ids[i]] += yl[i];
        } else {
            for (int ch : c.children) {
                if (v[ch].size() == 0)
                    v[ch] = Eigen::VectorXd::Zero(lv.ops.K[ch]);
                v[ch].noalias() += lv.ops.E[ch] * v[t];
            }
        }
    }
    return y;
}

// full-cluster moment matrix N_t (K_t x |t|), columns in storage order
inline Eigen::MatrixXd full_moments(const Level& lv, int t)
{
    const Cluster& c = lv.tree.nodes[t];
    if (c.is_leaf())
        return lv.ops.M[t];
    Eigen::MatrixXd N(lv.ops.K[t], static_cast<Eigen::Index>(c.size()));
    for (int ch : c.children) {
        const Cluster& cc = lv.tree.nodes[ch];
        N.middleCols(static_cast<Eigen::Index>(cc.begin - c.begin), static_cast<Eigen::Index>(cc.size())) =
            lv.ops.E[ch].transpose() * full_moments(lv, ch);
    }
    return N;
}

//
// the compressed kernel
//

// farfield: coefficients in the nested nodal bases (K_t x K_s);
// nearfield: coefficients in the piecewise-constant basis, rows/cols in storage order
struct H2Kernel {
    LevelPtr level;
    std::vector<Eigen::MatrixXd> far;
    std::vector<Eigen::MatrixXd> near;
};

inline H2Kernel zero_kernel(LevelPtr lv)
{
    H2Kernel G;
    G.level = lv;
    for (const Block& b : lv->blocks.farfield)
        G.far.push_back(Eigen::MatrixXd::Zero(lv->ops.K[b.t], lv->ops.K[b.s]));
    for (const Block& b : lv->blocks.nearfield)
        G.near.push_back(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(lv->tree.nodes[b.t].size()),
                                               static_cast<Eigen::Index>(lv->tree.nodes[b.s].size())));
    return G;
}

// local L2 projections u_t = Q_t^{-1} q_t for all clusters
inline std::vector<Eigen::VectorXd> local_projections(const Level& lv, const Eigen::VectorXd& z)
{
    std::vector<Eigen::VectorXd> q = forward_transform(lv, z);
    std::vector<Eigen::VectorXd> u(q.size());
    for (std::size_t t = 0; t < q.size(); ++t)
        u[t] = lv.ops.Qfac[t].solve(q[t]);
    return u;
}

// G += w * Pi(z (x) z)
inline void accumulate_simple_tensor(H2Kernel& G, const Eigen::VectorXd& z, double w)
{
    const Level& lv = *G.level;
    if (static_cast<std::size_t>(z.size()) != lv.n())
        throw structure_error("accumulate_simple_tensor: vector length does not match the level");
    std::vector<Eigen::VectorXd> u = local_projections(lv, z);
    const auto& far = lv.blocks.farfield;
    for (std::size_t b = 0; b < far.size(); ++b)
        G.far[b].noalias() += (w * u[far[b].t]) * u[far[b].s].transpose();
    const auto& near = lv.blocks.nearfield;
    for (std::size_t b = 0; b < near.size(); ++b) {
        Eigen::VectorXd zt = gather(lv.tree, near[b].t, z);
        Eigen::VectorXd zs = gather(lv.tree, near[b].s, z);
        G.near[b].noalias() += (w * zt) * zs.transpose();
    }
}

inline H2Kernel project_simple_tensor(LevelPtr lv, const Eigen::VectorXd& z)
{
    H2Kernel G = zero_kernel(lv);
    accumulate_simple_tensor(G, z, 1.0);
    return G;
}

inline void check_same_structure(const H2Kernel& X, const H2Kernel& Y)
{
    if (X.level != Y.level || X.far.size() != Y.far.size() || X.near.size() != Y.near.size())
        throw structure_error("H2 kernels do not share a block structure");
}

// Y += a X
inline void h2_axpy_inplace(double a, const H2Kernel& X, H2Kernel& Y)
{
    check_same_structure(X, Y);
    for (std::size_t b = 0; b < X.far.size(); ++b)
        Y.far[b] += a * X.far[b];
    for (std::size_t b = 0; b < X.near.size(); ++b)
        Y.near[b] += a * X.near[b];
}

inline H2Kernel h2_axpy(double a, const H2Kernel& X, const H2Kernel& Y)
{
    H2Kernel R = Y;
    h2_axpy_inplace(a, X, R);
    return R;
}

inline void h2_scale(double a, H2Kernel& X)
{
    for (auto& m : X.far)
        m *= a;
    for (auto& m : X.near)
        m *= a;
}

// Galerkin quadrature of g over panel pairs, divided by the areas (V_h (x) V_h coefficients)
inline Eigen::MatrixXd near_block_coefficients(const Level& lv, const KernelFunction& g, int t, int s,
                                               const std::vector<PanelRule>& rules)
{
    const Cluster& ct = lv.tree.nodes[t];
    const Cluster& cs = lv.tree.nodes[s];
    Eigen::MatrixXd C(static_cast<Eigen::Index>(ct.size()), static_cast<Eigen::Index>(cs.size()));
    for (std::size_t i = ct.begin; i < ct.end; ++i) {
        const int pi = lv.tree.perm[i];
        const PanelRule& ri = rules[pi];
        for (std::size_t j = cs.begin; j < cs.end; ++j) {
            const int pj = lv.tree.perm[j];
            const PanelRule& rj = rules[pj];
            double acc = 0.0;
            for (std::size_t a = 0; a < ri.w.size(); ++a)
                for (std::size_t b = 0; b < rj.w.size(); ++b)
                    acc += ri.w[a] * rj.w[b] * g(ri.pts[a], rj.pts[b]);
            C(i - ct.begin, j - cs.begin) = acc / (lv.area[pi] * lv.area[pj]);
        }
    }
    return C;
}

inline std::vector<PanelRule> all_panel_rules(const Mesh& mesh, int nq)
{
    std::vector<PanelRule> rules;
    rules.reserve(mesh.size());
    for (const Panel& p : mesh.panels)
        rules.push_back(panel_rule(p, nq));
    return rules;
}

// farfield: g sampled on the block's tensor grids (nodal coefficients of the
// iterated interpolant); nearfield: direct quadrature
inline H2Kernel compress_kernel(LevelPtr lv, const KernelFunction& g)
{
    H2Kernel G = zero_kernel(lv);
    const auto& ops = lv->ops;
    const auto& far = lv->blocks.farfield;
    for (std::size_t b = 0; b < far.size(); ++b) {
        const TensorGrid& gt = ops.grid[far[b].t];
        const TensorGrid& gs = ops.grid[far[b].s];
        std::vector<Point> ps(gs.size());
        for (int j = 0; j < gs.size(); ++j)
            ps[j] = gs.point(j);
        for (int i = 0; i < gt.size(); ++i) {
            Point x = gt.point(i);
            for (int j = 0; j < gs.size(); ++j)
                G.far[b](i, j) = g(x, ps[j]);
        }
    }
    std::vector<PanelRule> rules = all_panel_rules(lv->mesh, lv->params.near_quad);
    const auto& near = lv->blocks.nearfield;
    for (std::size_t b = 0; b < near.size(); ++b)
        G.near[b] = near_block_coefficients(*lv, g, near[b].t, near[b].s, rules);
    return G;
}

// y = A x with A the Galerkin matrix of the kernel (panel-id order)
inline Eigen::VectorXd h2_matvec(const H2Kernel& G, const Eigen::VectorXd& x, bool transpose = false)
{
    const Level& lv = *G.level;
    if (static_cast<std::size_t>(x.size()) != lv.n())
        throw structure_error("h2_matvec: vector length does not match the level");
    LeafSpace sp = native_leaf_space(lv);
    std::vector<Eigen::VectorXd> q = forward_transform(lv, sp, x);
    std::vector<Eigen::VectorXd> v(q.size());
    const auto& far = lv.blocks.farfield;
    for (std::size_t b = 0; b < far.size(); ++b) {
        int t = far[b].t, s = far[b].s;
        if (transpose)
            std::swap(t, s);
        if (v[t].size() == 0)
            v[t] = Eigen::VectorXd::Zero(lv.ops.K[t]);
        if (transpose)
            v[t].noalias() += G.far[b].transpose() * q[s];
        else
            v[t].noalias() += G.far[b] * q[s];
    }
    Eigen::VectorXd y = backward_transform(lv, sp, std::move(v));
    Eigen::VectorXd wx = lv.area.cwiseProduct(x);
    const auto& near = lv.blocks.nearfield;
    for (std::size_t b = 0; b < near.size(); ++b) {
        int t = near[b].t, s = near[b].s;
        if (transpose) {
            Eigen::VectorXd ys = G.near[b].transpose() * gather(lv.tree, t, wx);
            scatter_add(lv.tree, s, gather(lv.tree, s, lv.area).cwiseProduct(ys), y);
        } else {
            Eigen::VectorXd yt = G.near[b] * gather(lv.tree, s, wx);
            scatter_add(lv.tree, t, gather(lv.tree, t, lv.area).cwiseProduct(yt), y);
        }
    }
    return y;
}

inline constexpr std::size_t default_oracle_cap = 4096;

// dense Galerkin matrix in panel-id order
inline Eigen::MatrixXd to_dense(const H2Kernel& G, std::size_t cap = default_oracle_cap)
{
    const Level& lv = *G.level;
    const std::size_t n = lv.n();
    if (n > cap)
        throw resource_error("to_dense: " + std::to_string(n) + " DOFs exceed the oracle cap " + std::to_string(cap));
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    std::vector<Eigen::MatrixXd> N(lv.tree.nodes.size());
    auto moments = [&](int t) -> const Eigen::MatrixXd& {
        if (N[t].size() == 0)
            N[t] = full_moments(lv, t);
        return N[t];
    };
    auto put = [&](int t, int s, const Eigen::MatrixXd& B) {
        const Cluster& ct = lv.tree.nodes[t];
        const Cluster& cs = lv.tree.nodes[s];
        for (std::size_t i = ct.begin; i < ct.end; ++i)
            for (std::size_t j = cs.begin; j < cs.end; ++j)
                A(lv.tree.perm[i], lv.tree.perm[j]) += B(i - ct.begin, j - cs.begin);
    };
    const auto& far = lv.blocks.farfield;
    for (std::size_t b = 0; b < far.size(); ++b)
        put(far[b].t, far[b].s, moments(far[b].t).transpose() * G.far[b] * moments(far[b].s));
    const auto& near = lv.blocks.nearfield;
    for (std::size_t b = 0; b < near.size(); ++b) {
        Eigen::VectorXd wt = gather(lv.tree, near[b].t, lv.area);
        Eigen::VectorXd ws = gather(lv.tree, near[b].s, lv.area);
        put(near[b].t, near[b].s, wt.asDiagonal() * G.near[b] * ws.asDiagonal());
    }
    return A;
}

struct Footprint {
    std::size_t far_scalars = 0;
    std::size_t near_scalars = 0;
    std::vector<std::size_t> per_block; // farfield blocks first, then nearfield

    std::size_t scalars() const { return far_scalars + near_scalars; }
    std::size_t bytes() const { return 8 * scalars(); }
};

// stored scalars of the layout on a level (independent of the values)
inline Footprint layout_footprint(const Level& lv)
{
    Footprint f;
    for (const Block& b : lv.blocks.farfield) {
        std::size_t s = static_cast<std::size_t>(lv.ops.K[b.t]) * lv.ops.K[b.s];
        f.far_scalars += s;
        f.per_block.push_back(s);
    }
    for (const Block& b : lv.blocks.nearfield) {
        std::size_t s = lv.tree.nodes[b.t].size() * lv.tree.nodes[b.s].size();
        f.near_scalars += s;
        f.per_block.push_back(s);
    }
    return f;
}

inline Footprint memory_footprint(const H2Kernel& G)
{
    Footprint f;
    for (const auto& m : G.far) {
        f.far_scalars += static_cast<std::size_t>(m.size());
        f.per_block.push_back(static_cast<std::size_t>(m.size()));
    }
    for (const auto& m : G.near) {
        f.near_scalars += static_cast<std::size_t>(m.size());
        f.per_block.push_back(static_cast<std::size_t>(m.size()));
    }
    return f;
}

} // namespace h2ml

#endif
