#ifndef H2ML_ORACLE_HPP
#define H2ML_ORACLE_HPP

// Dense reference computations used by the test suite. Everything here is
// O(n^2) or worse and refuses sizes above the oracle cap.

#include <algorithm>
#include <map>
#include <memory>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "h2ml/h2.hpp"

namespace h2ml::oracle {

inline void check_cap(std::size_t n, std::size_t cap = default_oracle_cap)
{
    if (n > cap)
        throw resource_error("oracle: " + std::to_string(n) + " DOFs exceed the cap " + std::to_string(cap));
}

// leaf cluster of a level containing a panel
inline std::vector<int> leaf_of_panel(const Level& lv)
{
    std::vector<int> out(lv.n(), -1);
    for (int t : lv.tree.leaves)
        for (int p : lv.tree.indices(t))
            out[p] = t;
    return out;
}

// Evaluates psi^t by iterated pointwise interpolation down the chain t -> leaf.
// The chain values at the leaf grid are cached per (t, leaf); no stored E is used.
class BasisEvaluator {
public:
    explicit BasisEvaluator(const Level& lv) : lv_(lv) {}

    // V(a, i) = psi^t_i at the a-th leaf grid point
    const Eigen::MatrixXd& chain(int t, int leaf)
    {
        auto key = std::make_pair(t, leaf);
        auto it = cache_.find(key);
        if (it != cache_.end())
            return it->second;
        std::vector<int> path;
        for (int c = leaf; c != t; c = lv_.tree.nodes[c].parent) {
            if (c < 0)
                throw structure_error("BasisEvaluator: leaf is not below t");
            path.push_back(c);
        }
        const TensorGrid* cur = &lv_.ops.grid[t];
        Eigen::MatrixXd V = Eigen::MatrixXd::Identity(cur->size(), cur->size());
        for (auto p = path.rbegin(); p != path.rend(); ++p) {
            const TensorGrid& g = lv_.ops.grid[*p];
            Eigen::MatrixXd W(g.size(), V.cols());
            for (int a = 0; a < g.size(); ++a)
                W.row(a) = cur->eval(g.point(a)).transpose() * V;
            V = std::move(W);
            cur = &g;
        }
        return cache_.emplace(key, std::move(V)).first->second;
    }

    Eigen::VectorXd eval(int t, int leaf, const Point& x)
    {
        return chain(t, leaf).transpose() * lv_.ops.grid[leaf].eval(x);
    }

private:
    const Level& lv_;
    std::map<std::pair<int, int>, Eigen::MatrixXd> cache_;
};

inline int oracle_quadrature(const Level& lv) { return lv.ops.schedule.order(0) + 1; }

// N_t by quadrature; columns follow `panels` (any mesh nested inside the level's leaves)
inline Eigen::MatrixXd dense_moments(const Level& lv, BasisEvaluator& be, int t, const Mesh& mesh,
                                     const std::vector<int>& panels, const std::vector<int>& leaf_of, int nq)
{
    Eigen::MatrixXd N = Eigen::MatrixXd::Zero(lv.ops.K[t], static_cast<Eigen::Index>(panels.size()));
    for (std::size_t j = 0; j < panels.size(); ++j) {
        PanelRule r = panel_rule(mesh.panels[panels[j]], nq);
        Eigen::VectorXd acc = Eigen::VectorXd::Zero(lv.ops.grid[leaf_of[j]].size());
        for (std::size_t q = 0; q < r.w.size(); ++q)
            acc += r.w[q] * lv.ops.grid[leaf_of[j]].eval(r.pts[q]);
        N.col(static_cast<Eigen::Index>(j)) = be.chain(t, leaf_of[j]).transpose() * acc;
    }
    return N;
}

// native-space moments of cluster t (columns in storage order)
inline Eigen::MatrixXd dense_moments(const Level& lv, int t)
{
    BasisEvaluator be(lv);
    std::vector<int> panels = lv.tree.indices(t);
    std::vector<int> lof = leaf_of_panel(lv), leaf(panels.size());
    for (std::size_t j = 0; j < panels.size(); ++j)
        leaf[j] = lof[panels[j]];
    return dense_moments(lv, be, t, lv.mesh, panels, leaf, oracle_quadrature(lv));
}

// Gram matrix of cluster t by quadrature over its panels
inline Eigen::MatrixXd dense_gram(const Level& lv, BasisEvaluator& be, int t)
{
    std::vector<int> lof = leaf_of_panel(lv);
    const int K = lv.ops.K[t];
    Eigen::MatrixXd Q = Eigen::MatrixXd::Zero(K, K);
    const int nq = oracle_quadrature(lv);
    for (int p : lv.tree.indices(t)) {
        PanelRule r = panel_rule(lv.mesh.panels[p], nq);
        const TensorGrid& g = lv.ops.grid[lof[p]];
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(g.size(), g.size());
        for (std::size_t q = 0; q < r.w.size(); ++q) {
            Eigen::VectorXd v = g.eval(r.pts[q]);
            G += r.w[q] * v * v.transpose();
        }
        const Eigen::MatrixXd& V = be.chain(t, lof[p]);
        Q += V.transpose() * G * V;
    }
    return 0.5 * (Q + Q.transpose());
}

inline Eigen::MatrixXd dense_gram(const Level& lv, int t)
{
    BasisEvaluator be(lv);
    return dense_gram(lv, be, t);
}

// dense Galerkin matrix (panel-id order) of g by the same panel quadrature as the nearfield
inline Eigen::MatrixXd dense_galerkin(const Level& lv, const KernelFunction& g)
{
    check_cap(lv.n());
    std::vector<PanelRule> rules = all_panel_rules(lv.mesh, lv.params.near_quad);
    const Eigen::Index n = static_cast<Eigen::Index>(lv.n());
    Eigen::MatrixXd A(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j <= i; ++j) {
            double acc = 0.0;
            for (std::size_t a = 0; a < rules[i].w.size(); ++a)
                for (std::size_t b = 0; b < rules[j].w.size(); ++b)
                    acc += rules[i].w[a] * rules[j].w[b] * g(rules[i].pts[a], rules[j].pts[b]);
            A(i, j) = A(j, i) = acc;
        }
    return A;
}

// Per-cluster dense projectors P_t = N_t^T Q_t^+ N_t W_t^{-1}, in storage order
struct DenseProjector {
    std::vector<Eigen::MatrixXd> P;
};

inline DenseProjector make_projector(const Level& lv)
{
    check_cap(lv.n());
    BasisEvaluator be(lv);
    std::vector<int> lof = leaf_of_panel(lv);
    DenseProjector dp;
    dp.P.resize(lv.tree.nodes.size());
    std::vector<bool> need(lv.tree.nodes.size(), false);
    for (const Block& b : lv.blocks.farfield)
        need[b.t] = need[b.s] = true;
    for (std::size_t t = 0; t < need.size(); ++t) {
        if (!need[t])
            continue;
        const int ti = static_cast<int>(t);
        std::vector<int> panels = lv.tree.indices(ti), leaf(panels.size());
        for (std::size_t j = 0; j < panels.size(); ++j)
            leaf[j] = lof[panels[j]];
        Eigen::MatrixXd N = dense_moments(lv, be, ti, lv.mesh, panels, leaf, oracle_quadrature(lv));
        GramSolver S;
        S.factor(dense_gram(lv, be, ti));
        Eigen::VectorXd w = gather(lv.tree, ti, lv.area);
        dp.P[t] = N.transpose() * S.solve(N) * w.cwiseInverse().asDiagonal();
    }
    return dp;
}

// blockwise L2 projection of a dense Galerkin matrix B of a piecewise-constant kernel
inline Eigen::MatrixXd dense_project(const Level& lv, const DenseProjector& dp, const Eigen::MatrixXd& B)
{
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(B.rows(), B.cols());
    for (const Block& b : lv.blocks.farfield) {
        std::vector<int> it = lv.tree.indices(b.t), is = lv.tree.indices(b.s);
        Eigen::MatrixXd Bts(it.size(), is.size());
        for (std::size_t i = 0; i < it.size(); ++i)
            for (std::size_t j = 0; j < is.size(); ++j)
                Bts(i, j) = B(it[i], is[j]);
        Eigen::MatrixXd R = dp.P[b.t] * Bts * dp.P[b.s].transpose();
        for (std::size_t i = 0; i < it.size(); ++i)
            for (std::size_t j = 0; j < is.size(); ++j)
                A(it[i], is[j]) = R(i, j);
    }
    for (const Block& b : lv.blocks.nearfield) {
        for (int i : lv.tree.indices(b.t))
            for (int j : lv.tree.indices(b.s))
                A(i, j) = B(i, j);
    }
    return A;
}

// block of a level containing the panel pair (a, b), as (is_far, index)
inline std::pair<bool, int> block_of_pair(const Level& lv, const std::vector<int>& lof, int a, int b)
{
    auto chain = [&](int leaf) {
        std::vector<int> c;
        for (int x = leaf; x >= 0; x = lv.tree.nodes[x].parent)
            c.push_back(x);
        std::reverse(c.begin(), c.end());
        return c;
    };
    std::vector<int> ca = chain(lof[a]), cb = chain(lof[b]);
    for (std::size_t d = 0; d < std::min(ca.size(), cb.size()); ++d) {
        int f = lv.blocks.find_far(ca[d], cb[d]);
        if (f >= 0)
            return {true, f};
        int n = lv.blocks.find_near(ca[d], cb[d]);
        if (n >= 0)
            return {false, n};
    }
    throw structure_error("block_of_pair: panel pair not covered by the block tree");
}

// Blockwise L2 projection onto the level-L H2 space of the function sum_l g_l, each g_l an
// H2 kernel on level l of the hierarchy. Integrals are taken by tensor Gauss quadrature on the
// level-L panels with pointwise-evaluated bases, so polynomial farfield data of coarse levels
// is projected as a function.
inline H2Kernel dense_reduce(const NestedHierarchy& h, const std::vector<const H2Kernel*>& g)
{
    const int L = static_cast<int>(g.size()) - 1;
    if (L < 0 || L >= h.levels())
        throw structure_error("dense_reduce: level count does not match the hierarchy");
    const Level& top = *g[L]->level;
    check_cap(top.n());
    const Mesh& fine = top.mesh;
    const std::size_t n = fine.size();
    int nq = oracle_quadrature(top);

    // per level: evaluator, leaf map, ancestor map, panel rules
    std::vector<std::unique_ptr<BasisEvaluator>> be(L + 1);
    std::vector<std::vector<int>> lof(L + 1), anc(L + 1);
    for (int l = 0; l <= L; ++l) {
        const Level& lv = *g[l]->level;
        if (lv.n() != h.meshes[l].size())
            throw structure_error("dense_reduce: level kernel does not live on the hierarchy");
        be[l] = std::make_unique<BasisEvaluator>(lv);
        lof[l] = leaf_of_panel(lv);
        anc[l].resize(n);
        for (std::size_t i = 0; i < n; ++i)
            anc[l][i] = h.ancestor_panel(L, static_cast<int>(i), l);
        nq = std::max(nq, oracle_quadrature(lv));
    }
    std::vector<PanelRule> rules = all_panel_rules(fine, nq);
    const auto& lofL = lof[L];

    // int_{panel i} psi^{L,leaf}(x) psi^{l,leaf}(x)^T  and  int_{panel i} psi^{l,leaf}
    std::vector<std::vector<Eigen::MatrixXd>> cross_memo(L + 1, std::vector<Eigen::MatrixXd>(n));
    auto cross_leaf = [&](int i, int l) -> const Eigen::MatrixXd& {
        Eigen::MatrixXd& G = cross_memo[l][i];
        if (G.size() > 0)
            return G;
        const TensorGrid& gL = top.ops.grid[lofL[i]];
        const TensorGrid& gl = g[l]->level->ops.grid[lof[l][anc[l][i]]];
        G = Eigen::MatrixXd::Zero(gL.size(), gl.size());
        for (std::size_t q = 0; q < rules[i].w.size(); ++q)
            G += rules[i].w[q] * gL.eval(rules[i].pts[q]) * gl.eval(rules[i].pts[q]).transpose();
        return G;
    };
    std::map<int, GramSolver> gram;
    auto gram_of = [&](int tau) -> const GramSolver& {
        auto it = gram.find(tau);
        if (it == gram.end()) {
            it = gram.emplace(tau, GramSolver{}).first;
            it->second.factor(dense_gram(top, *be[L], tau));
        }
        return it->second;
    };
    auto moment_leaf = [&](int i, const Level& lv, int leaf) {
        const TensorGrid& gr = lv.ops.grid[leaf];
        Eigen::VectorXd m = Eigen::VectorXd::Zero(gr.size());
        for (std::size_t q = 0; q < rules[i].w.size(); ++q)
            m += rules[i].w[q] * gr.eval(rules[i].pts[q]);
        return m;
    };

    H2Kernel out = zero_kernel(g[L]->level);
    // farfield of level L
    for (std::size_t fb = 0; fb < top.blocks.farfield.size(); ++fb) {
        const Block& B = top.blocks.farfield[fb];
        std::vector<int> it = top.tree.indices(B.t), is = top.tree.indices(B.s);
        Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(top.ops.K[B.t], top.ops.K[B.s]);
        for (int l = 0; l <= L; ++l) {
            const Level& lv = *g[l]->level;
            std::set<std::pair<bool, int>> hit;
            for (int i : it)
                for (int j : is)
                    hit.insert(block_of_pair(lv, lof[l], anc[l][i], anc[l][j]));
            for (auto [far, bi] : hit) {
                const Block& cb = far ? lv.blocks.farfield[bi] : lv.blocks.nearfield[bi];
                const Cluster& ct = lv.tree.nodes[cb.t];
                const Cluster& cs = lv.tree.nodes[cb.s];
                auto in = [&](const Cluster& c, int coarse) {
                    std::size_t p = lv.tree.pos_of[coarse];
                    return p >= c.begin && p < c.end;
                };
                if (far) {
                    auto side = [&](const std::vector<int>& ids, int tau, int t, const Cluster& c) {
                        Eigen::MatrixXd R = Eigen::MatrixXd::Zero(top.ops.K[tau], lv.ops.K[t]);
                        for (int i : ids) {
                            if (!in(c, anc[l][i]))
                                continue;
                            R += be[L]->chain(tau, lofL[i]).transpose() * cross_leaf(i, l) *
                                 be[l]->chain(t, lof[l][anc[l][i]]);
                        }
                        return R;
                    };
                    Y += side(it, B.t, cb.t, ct) * g[l]->far[bi] * side(is, B.s, cb.s, cs).transpose();
                } else {
                    auto side = [&](const std::vector<int>& ids, int tau, const Cluster& c) {
                        Eigen::MatrixXd N = Eigen::MatrixXd::Zero(top.ops.K[tau], static_cast<Eigen::Index>(c.size()));
                        for (int i : ids) {
                            if (!in(c, anc[l][i]))
                                continue;
                            N.col(static_cast<Eigen::Index>(lv.tree.pos_of[anc[l][i]] - c.begin)) +=
                                be[L]->chain(tau, lofL[i]).transpose() * moment_leaf(i, top, lofL[i]);
                        }
                        return N;
                    };
                    Y += side(it, B.t, ct) * g[l]->near[bi] * side(is, B.s, cs).transpose();
                }
            }
        }
        Eigen::MatrixXd X = gram_of(B.t).solve(Y);
        out.far[fb] = gram_of(B.s).solve(X.transpose()).transpose();
    }
    // nearfield of level L: panel-pair averages
    for (std::size_t nb = 0; nb < top.blocks.nearfield.size(); ++nb) {
        const Block& B = top.blocks.nearfield[nb];
        std::vector<int> it = top.tree.indices(B.t), is = top.tree.indices(B.s);
        Eigen::MatrixXd& C = out.near[nb];
        for (std::size_t a = 0; a < it.size(); ++a)
            for (std::size_t b = 0; b < is.size(); ++b) {
                const int i = it[a], j = is[b];
                double v = 0.0;
                for (int l = 0; l <= L; ++l) {
                    const Level& lv = *g[l]->level;
                    auto [far, bi] = block_of_pair(lv, lof[l], anc[l][i], anc[l][j]);
                    const Block& cb = far ? lv.blocks.farfield[bi] : lv.blocks.nearfield[bi];
                    if (far) {
                        Eigen::VectorXd mi = be[l]->chain(cb.t, lof[l][anc[l][i]]).transpose() *
                                             moment_leaf(i, lv, lof[l][anc[l][i]]);
                        Eigen::VectorXd mj = be[l]->chain(cb.s, lof[l][anc[l][j]]).transpose() *
                                             moment_leaf(j, lv, lof[l][anc[l][j]]);
                        v += mi.dot(g[l]->far[bi] * mj) / (fine.panels[i].area * fine.panels[j].area);
                    } else {
                        const Cluster& ct = lv.tree.nodes[cb.t];
                        const Cluster& cs = lv.tree.nodes[cb.s];
                        v += g[l]->near[bi](static_cast<Eigen::Index>(lv.tree.pos_of[anc[l][i]] - ct.begin),
                                            static_cast<Eigen::Index>(lv.tree.pos_of[anc[l][j]] - cs.begin));
                    }
                }
                C(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = v;
            }
    }
    return out;
}

} // namespace h2ml::oracle

#endif
