#include <cmath>

#include <gtest/gtest.h>

#include "h2ml/h2.hpp"
#include "h2ml/oracle.hpp"
#include "h2ml/sampling.hpp"
#include "test_support.hpp"

using namespace h2ml;
using h2ml::testing::random_kernel;
using h2ml::testing::random_vector;
using h2ml::testing::rel_frob;

namespace {

Mesh single_panel(double w, double h)
{
    Mesh m;
    Panel p;
    p.uv = {0, w, 0, h};
    detail::finish_panel("unit-square", p);
    m.panels.push_back(p);
    return m;
}

BoundingBox box_of(const Mesh& m)
{
    std::vector<int> ids(m.size());
    for (std::size_t i = 0; i < ids.size(); ++i)
        ids[i] = static_cast<int>(i);
    return detail::panel_box(m, ids.data(), ids.size());
}

LevelPtr square(int level, H2Params p = {}) { return make_level("unit-square", level, p); }

Eigen::MatrixXd outer_galerkin(const Level& lv, const Eigen::VectorXd& z)
{
    Eigen::VectorXd wz = lv.area.cwiseProduct(z);
    return wz * wz.transpose();
}

} // namespace

TEST(Moments, ConstantBasisOnOnePanel)
{
    Mesh m = single_panel(0.5, 0.25);
    TensorGrid g(box_of(m), 1);
    Eigen::MatrixXd M = assemble_moment_leaf(m, g, {0}, moment_quadrature_points(1));
    ASSERT_EQ(M.rows(), 1);
    EXPECT_NEAR(M(0, 0), 0.125, 1e-15);
}

TEST(Moments, ColumnsIntegrateInterpolatedLinearFunctions)
{
    LevelPtr lv = square(1);
    for (int t : lv->tree.leaves) {
        const TensorGrid& g = lv->ops.grid[t];
        Eigen::VectorXd f(g.size());
        for (int i = 0; i < g.size(); ++i)
            f[i] = 2 + 3 * g.point(i)[0] - g.point(i)[1];
        Eigen::VectorXd integrals = lv->ops.M[t].transpose() * f;
        auto ix = lv->tree.indices(t);
        for (std::size_t j = 0; j < ix.size(); ++j) {
            const Panel& p = lv->mesh.panels[ix[j]];
            double exact = p.area * (2 + 3 * p.centroid[0] - p.centroid[1]);
            EXPECT_NEAR(integrals[j], exact, 1e-14);
        }
    }
}

TEST(Moments, RowSumsAreBasisIntegrals)
{
    LevelPtr lv = square(1);
    for (int t : lv->tree.leaves) {
        const TensorGrid& g = lv->ops.grid[t];
        auto ix = lv->tree.indices(t);
        Eigen::VectorXd direct = Eigen::VectorXd::Zero(g.size());
        for (int p : ix) {
            PanelRule r = panel_rule(lv->mesh.panels[p], 8);
            for (std::size_t q = 0; q < r.w.size(); ++q)
                direct += r.w[q] * g.eval(r.pts[q]);
        }
        EXPECT_LT((lv->ops.M[t].rowwise().sum() - direct).norm(), 1e-13);
    }
}

TEST(Gram, UnitPanelConstantBasis)
{
    Mesh m = single_panel(1, 1);
    TensorGrid g(box_of(m), 1);
    Eigen::MatrixXd Q = assemble_gram_leaf(m, g, {0}, gram_quadrature_points(1));
    EXPECT_NEAR(Q(0, 0), 1.0, 1e-15);
}

TEST(Gram, RecursionMatchesDenseQuadrature)
{
    LevelPtr lv = square(1);
    for (std::size_t t = 0; t < lv->tree.nodes.size(); ++t) {
        Eigen::MatrixXd Qd = oracle::dense_gram(*lv, static_cast<int>(t));
        EXPECT_LT(rel_frob(lv->ops.Q[t], Qd), 1e-12) << "cluster " << t;
        EXPECT_EQ((lv->ops.Q[t] - lv->ops.Q[t].transpose()).norm(), 0.0);
    }
}

TEST(Forward, ZeroInputGivesZeroMoments)
{
    LevelPtr lv = square(1);
    auto q = forward_transform(*lv, Eigen::VectorXd::Zero(lv->n()));
    for (auto& v : q)
        EXPECT_EQ(v.norm(), 0.0);
}

TEST(Forward, MatchesDenseMomentsOnEveryCluster)
{
    LevelPtr lv = square(1);
    for (int trial = 0; trial < 2; ++trial) {
        Eigen::VectorXd z = trial == 0 ? Eigen::VectorXd::Ones(lv->n()) : random_vector(lv->n(), 11);
        auto q = forward_transform(*lv, z);
        for (std::size_t t = 0; t < lv->tree.nodes.size(); ++t) {
            Eigen::VectorXd ref = oracle::dense_moments(*lv, static_cast<int>(t)) * gather(lv->tree, static_cast<int>(t), z);
            EXPECT_LT((q[t] - ref).norm() / ref.norm(), 1e-12);
        }
    }
}

TEST(Project, ZeroVectorGivesZeroKernel)
{
    LevelPtr lv = square(1);
    H2Kernel G = project_simple_tensor(lv, Eigen::VectorXd::Zero(lv->n()));
    EXPECT_EQ(to_dense(G).norm(), 0.0);
}

TEST(Project, MatchesDenseBlockwiseProjection)
{
    LevelPtr lv = square(1);
    auto dp = oracle::make_projector(*lv);
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        Eigen::VectorXd z = random_vector(lv->n(), seed);
        Eigen::MatrixXd A = to_dense(project_simple_tensor(lv, z));
        Eigen::MatrixXd B = oracle::dense_project(*lv, dp, outer_galerkin(*lv, z));
        EXPECT_LT(rel_frob(A, B), 1e-10);
        EXPECT_LT((A - A.transpose()).norm() / A.norm(), 1e-12);
    }
}

TEST(Project, BlocksAreTransposesOfMirrorBlocks)
{
    LevelPtr lv = square(2);
    H2Kernel G = project_simple_tensor(lv, random_vector(lv->n(), 3));
    const auto& bt = lv->blocks;
    for (std::size_t b = 0; b < bt.farfield.size(); ++b) {
        int m = bt.find_far(bt.farfield[b].s, bt.farfield[b].t);
        ASSERT_GE(m, 0);
        EXPECT_LT((G.far[b] - G.far[m].transpose()).norm(), 1e-12 * (1 + G.far[b].norm()));
    }
    for (std::size_t b = 0; b < bt.nearfield.size(); ++b) {
        int m = bt.find_near(bt.nearfield[b].s, bt.nearfield[b].t);
        EXPECT_EQ((G.near[b] - G.near[m].transpose()).norm(), 0.0);
    }
}

TEST(Project, BruteForceNormalEquationsOnSixteenPanels)
{
    LevelPtr lv = square(0);
    Eigen::VectorXd z = random_vector(lv->n(), 5);
    Eigen::MatrixXd A = to_dense(project_simple_tensor(lv, z));
    // per far block: minimize || N_t^T U N_s - (W z z^T W) ||_{L2} via the normal equations
    Eigen::MatrixXd ref = outer_galerkin(*lv, z);
    for (const Block& b : lv->blocks.farfield) {
        Eigen::MatrixXd Nt = oracle::dense_moments(*lv, b.t), Ns = oracle::dense_moments(*lv, b.s);
        Eigen::MatrixXd Qt = oracle::dense_gram(*lv, b.t), Qs = oracle::dense_gram(*lv, b.s);
        Eigen::VectorXd zt = gather(lv->tree, b.t, z), zs = gather(lv->tree, b.s, z);
        Eigen::VectorXd ut = Qt.completeOrthogonalDecomposition().solve(Nt * zt);
        Eigen::VectorXd us = Qs.completeOrthogonalDecomposition().solve(Ns * zs);
        Eigen::MatrixXd blk = Nt.transpose() * ut * us.transpose() * Ns;
        auto it = lv->tree.indices(b.t), is = lv->tree.indices(b.s);
        for (std::size_t i = 0; i < it.size(); ++i)
            for (std::size_t j = 0; j < is.size(); ++j)
                ref(it[i], is[j]) = blk(i, j);
    }
    EXPECT_LT(rel_frob(A, ref), 1e-10);
}

TEST(Project, AveragingCommutesWithProjection)
{
    LevelPtr lv = square(1);
    auto dp = oracle::make_projector(*lv);
    H2Kernel G = zero_kernel(lv);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(lv->n(), lv->n());
    for (std::uint64_t k = 0; k < 5; ++k) {
        Eigen::VectorXd z = random_vector(lv->n(), 100 + k);
        accumulate_simple_tensor(G, z, 0.2);
        S += 0.2 * outer_galerkin(*lv, z);
    }
    EXPECT_LT(rel_frob(to_dense(G), oracle::dense_project(*lv, dp, S)), 1e-10);
}

TEST(Axpy, LinearityAndTrivialCases)
{
    LevelPtr lv = square(1);
    H2Kernel X = random_kernel(lv, 1), Y = random_kernel(lv, 2);
    Eigen::MatrixXd dx = to_dense(X), dy = to_dense(Y);
    EXPECT_EQ(to_dense(h2_axpy(0.0, X, Y)), dy);
    EXPECT_LT(rel_frob(to_dense(h2_axpy(1.0, X, zero_kernel(lv))), dx), 1e-15);
    Eigen::MatrixXd s = dy + 0.7 * dx;
    EXPECT_LT((to_dense(h2_axpy(0.7, X, Y)) - s).norm() / s.norm(), 1e-13);
    H2Kernel Z = X;
    h2_scale(-2.0, Z);
    EXPECT_LT(rel_frob(to_dense(Z), -2.0 * dx), 1e-15);
}

TEST(Axpy, StructureMismatchThrows)
{
    H2Kernel X = zero_kernel(square(0)), Y = zero_kernel(square(1));
    EXPECT_THROW(h2_axpy(1.0, X, Y), structure_error);
}

TEST(Compress, ConstantKernelReproduced)
{
    LevelPtr lv = square(1);
    Eigen::MatrixXd A = to_dense(compress_kernel(lv, constant_kernel(1.0)));
    Eigen::MatrixXd ref = lv->area * lv->area.transpose();
    EXPECT_LT(rel_frob(A, ref), 1e-12);
}

TEST(Compress, SeparableKernelGivesRankOneBlocks)
{
    LevelPtr lv = square(2);
    auto f = [](const Point& x) { return std::cos(2 * x[0]) + x[1] * x[1]; };
    KernelFunction g{"separable", 1.0, 0.0, [f](const Point& x, const Point& y) { return f(x) * f(y); }};
    H2Kernel G = compress_kernel(lv, g);
    for (std::size_t b = 0; b < G.far.size(); ++b) {
        const Block& blk = lv->blocks.farfield[b];
        const TensorGrid &gt = lv->ops.grid[blk.t], &gs = lv->ops.grid[blk.s];
        Eigen::VectorXd ft(gt.size()), fs(gs.size());
        for (int i = 0; i < gt.size(); ++i)
            ft[i] = f(gt.point(i));
        for (int j = 0; j < gs.size(); ++j)
            fs[j] = f(gs.point(j));
        Eigen::MatrixXd want = ft * fs.transpose();
        EXPECT_LT((G.far[b] - want).norm(), 1e-12 * want.norm());
    }
}

TEST(Compress, ProjectionLeavesCompressedKernelUnchanged)
{
    // L2 projection of the compressed kernel, taken as a function on the finer level of a hierarchy
    NestedHierarchy h = build_hierarchy("unit-square", 1, 4);
    LevelPtr l0 = make_level(h.meshes[0], h.trees[0], {}), l1 = make_level(h.meshes[1], h.trees[1], {});
    H2Kernel zero = zero_kernel(l0), G = compress_kernel(l1, matern_kernel());
    H2Kernel P = oracle::dense_reduce(h, {&zero, &G});
    EXPECT_LT(rel_frob(to_dense(P), to_dense(G)), 1e-12);
}

TEST(Compress, MaternApproximatesDenseGalerkin)
{
    H2Params p;
    p.delta = 1.0;
    p.beta = 4;
    LevelPtr lv = square(2, p);
    Eigen::MatrixXd A = to_dense(compress_kernel(lv, matern_kernel()));
    EXPECT_LT(rel_frob(A, oracle::dense_galerkin(*lv, matern_kernel())), 1e-5);
}

TEST(Matvec, ZeroKernelGivesZero)
{
    LevelPtr lv = square(1);
    EXPECT_EQ(h2_matvec(zero_kernel(lv), random_vector(lv->n(), 1)).norm(), 0.0);
}

TEST(Matvec, MatchesDenseAndTranspose)
{
    LevelPtr lv = square(1);
    H2Kernel G = random_kernel(lv, 9);
    Eigen::MatrixXd A = to_dense(G);
    Eigen::VectorXd x = random_vector(lv->n(), 4);
    Eigen::VectorXd y = A * x, yt = A.transpose() * x;
    EXPECT_LT((h2_matvec(G, x) - y).norm() / y.norm(), 1e-11);
    EXPECT_LT((h2_matvec(G, x, true) - yt).norm() / yt.norm(), 1e-11);
}

TEST(Matvec, SymmetricKernelGivesSymmetricForm)
{
    LevelPtr lv = square(2);
    H2Kernel G = compress_kernel(lv, matern_kernel());
    Eigen::VectorXd x = random_vector(lv->n(), 1), y = random_vector(lv->n(), 2);
    double a = x.dot(h2_matvec(G, y)), b = y.dot(h2_matvec(G, x));
    EXPECT_LT(std::abs(a - b), 1e-11 * std::abs(a));
    Eigen::VectorXd lin = h2_matvec(G, 2 * x - 3 * y) - (2 * h2_matvec(G, x) - 3 * h2_matvec(G, y));
    EXPECT_LT(lin.norm(), 1e-13 * h2_matvec(G, x).norm());
}

TEST(Dense, ZeroKernelAndCap)
{
    LevelPtr lv = square(1);
    EXPECT_EQ(to_dense(zero_kernel(lv)).norm(), 0.0);
    EXPECT_THROW(to_dense(zero_kernel(lv), 32), resource_error);
}

TEST(Footprint, CountsMatchLayout)
{
    LevelPtr lv = square(2);
    Footprint f = memory_footprint(zero_kernel(lv));
    std::size_t far = 0, near = 0;
    for (const Block& b : lv->blocks.farfield)
        far += static_cast<std::size_t>(lv->ops.K[b.t]) * lv->ops.K[b.s];
    for (const Block& b : lv->blocks.nearfield)
        near += lv->tree.nodes[b.t].size() * lv->tree.nodes[b.s].size();
    EXPECT_EQ(f.far_scalars, far);
    EXPECT_EQ(f.near_scalars, near);
    EXPECT_EQ(f.bytes(), 8 * (far + near));
    EXPECT_EQ(layout_footprint(*lv).scalars(), f.scalars());
}

TEST(Footprint, ScalarsPerDofStableFromLevelThreeToFour)
{
    H2Params p;
    p.delta = 1.0;
    double a = double(layout_footprint(*square(3, p)).scalars()) / square(3, p)->n();
    double b = double(layout_footprint(*square(4, p)).scalars()) / square(4, p)->n();
    EXPECT_GE(b / a, 0.5);
    EXPECT_LE(b / a, 2.0);
}
