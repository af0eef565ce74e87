#include <cmath>
#include <limits>
#include <sstream>

#include <gtest/gtest.h>

#include "h2ml/io.hpp"
#include "h2ml/sampling.hpp"

using namespace h2ml;

namespace {

Eigen::MatrixXd matern_gram(int n)
{
    Eigen::MatrixXd C(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            Point x{i / double(n), 0.3 * std::sin(i), 0}, y{j / double(n), 0.3 * std::sin(j), 0};
            C(i, j) = matern92(norm2(x - y));
        }
    return C;
}

} // namespace

TEST(Matern, ValuesAtZeroAndOne)
{
    EXPECT_EQ(matern92(0.0), 1.0);
    EXPECT_NEAR(matern92(1.0), 11.2 * std::exp(-3.0), 1e-15);
    EXPECT_NEAR(matern92(1.0), 0.557615, 1e-6);
}

TEST(Matern, MonotoneDecreasing)
{
    for (int i = 1; i <= 50; ++i)
        EXPECT_LT(matern92(0.1 * i), matern92(0.1 * (i - 1)));
}

TEST(Gevrey, PartitionLimitsAndMidpoint)
{
    for (double d : {1.25, 1.5, 3.0}) {
        EXPECT_EQ(gevrey_partition(-0.3, d), 1.0);
        EXPECT_EQ(gevrey_partition(0.0, d), 1.0);
        EXPECT_EQ(gevrey_partition(1.0, d), 0.0);
        EXPECT_EQ(gevrey_partition(1.7, d), 0.0);
        EXPECT_NEAR(gevrey_partition(0.5, d), 0.5, 1e-15);
    }
}

TEST(Gevrey, QuarterPointForThreeHalves)
{
    double a = std::exp(-16.0 / 9.0), b = std::exp(-16.0);
    EXPECT_NEAR(gevrey_partition(0.25, 1.5), a / (a + b), 1e-15);
}

TEST(Gevrey, DeltaOneRejected)
{
    EXPECT_THROW(gevrey_partition(0.2, 1.0), config_error);
    EXPECT_THROW(warped_matern_kernel(1.0), config_error);
    EXPECT_EQ(reference_kernel(1.0).name, "matern92");
}

TEST(Gevrey, WarpedKernelSymmetricWithUnitDiagonal)
{
    KernelFunction g = warped_matern_kernel(1.5);
    for (int i = 0; i < 20; ++i) {
        Point x{0.05 * i, 0.3, 0}, y{1 - 0.04 * i, 0.7 * std::cos(i), 0};
        EXPECT_EQ(g(x, y), g(y, x));
        EXPECT_EQ(g(x, x), 1.0);
    }
    // shift by 0.1 on the left half, first coordinate collapses to 0.1 at x = 1
    Point w = gevrey_warp({0.2, 0.4, 0}, 1.5);
    EXPECT_NEAR(w[0], 0.3, 1e-15);
    EXPECT_EQ(w[1], 0.4);
    EXPECT_EQ(gevrey_warp({1.0, 0.4, 0}, 1.5)[0], 0.1);
    EXPECT_GT(gevrey_warp({0.9, 0.4, 0}, 1.5)[0], 0.1);
}

TEST(PivotedCholesky, DiagonalPivotsInOrder)
{
    Eigen::MatrixXd C = Eigen::Vector3d(3, 2, 1).asDiagonal();
    KLFactor f = pivoted_cholesky(C, 0.0);
    EXPECT_EQ(f.pivots, (std::vector<int>{0, 1, 2}));
    EXPECT_EQ(f.rank(), 3);
    EXPECT_LT((f.L * f.L.transpose() - C).norm(), 1e-15);
}

TEST(PivotedCholesky, RankOneStopsAfterOneStep)
{
    Eigen::VectorXd v(4);
    v << 1, -2, 0.5, 3;
    KLFactor f = pivoted_cholesky(v * v.transpose(), 1e-12);
    EXPECT_EQ(f.rank(), 1);
    EXPECT_LE(f.residual_trace, 1e-12);
}

TEST(PivotedCholesky, MaternGramReconstruction)
{
    Eigen::MatrixXd C = matern_gram(60);
    KLFactor f = pivoted_cholesky(C, 1e-6 * C.trace());
    EXPECT_LE((C - f.L * f.L.transpose()).norm() / C.norm(), 1e-3);
    EXPECT_LE(f.residual_trace, f.tol);
    for (std::size_t i = 1; i < f.trace_history.size(); ++i)
        EXPECT_LE(f.trace_history[i], f.trace_history[i - 1]);
}

TEST(PivotedCholesky, IndefiniteInputRejected)
{
    Eigen::MatrixXd C(2, 2);
    C << 1, 0, 0, -1;
    EXPECT_THROW(pivoted_cholesky(C, 0.0), numeric_error);
    C << 1, 2, 2, 1;
    EXPECT_THROW(pivoted_cholesky(C, 0.0), numeric_error);
}

TEST(Law, ParseAndMoments)
{
    EXPECT_EQ(parse_law("uniform"), SampleLaw::uniform);
    EXPECT_THROW(parse_law("cauchy"), config_error);
    Eigen::VectorXd u = draw_law(42, 200000, SampleLaw::uniform);
    EXPECT_LE(u.cwiseAbs().maxCoeff(), std::sqrt(3.0));
    EXPECT_NEAR(u.squaredNorm() / u.size(), 1.0, 0.01);
    EXPECT_NE(stream_id(1, 0, 0), stream_id(1, 1, 0));
    EXPECT_NE(stream_id(1, 0, 0), stream_id(1, 0, 1));
}

TEST(Sampler, CoupledDrawIsDeterministic)
{
    Mesh c = build_mesh("unit-square", 0), f = refine_mesh(c);
    FieldSampler s = make_field_sampler(f, matern_kernel());
    SampleDraw a = draw_coupled(s, f, c.size(), 7, 3, 1), b = draw_coupled(s, f, c.size(), 7, 3, 1);
    EXPECT_EQ(a.fine, b.fine);
    EXPECT_EQ(a.coarse, b.coarse);
    EXPECT_EQ(a.coarse, restrict_to_coarse(a.fine, f, c.size()));
    EXPECT_NE(draw_coupled(s, f, c.size(), 7, 4, 1).fine, a.fine);
    EXPECT_THROW(draw_coupled(s, f, c.size(), 7, 3, 2), structure_error);
}

TEST(Sampler, ZeroCoordinatesGiveZeroField)
{
    Mesh c = build_mesh("unit-square", 0), f = refine_mesh(c);
    FieldSampler s = make_field_sampler(f, matern_kernel());
    Eigen::VectorXd z = s.sample(Eigen::VectorXd::Zero(s.kl.rank()));
    EXPECT_EQ(z.norm(), 0.0);
    EXPECT_EQ(restrict_to_coarse(z, f, c.size()).norm(), 0.0);
}

TEST(Sampler, TruncationFollowsMeshWidth)
{
    Mesh m = build_mesh("unit-square", 1);
    FieldSampler s = make_field_sampler(m, matern_kernel());
    EXPECT_NEAR(s.kl.tol, 1e-3 * 0.125, 1e-18);
    EXPECT_LE(s.kl.residual_trace, s.kl.tol);
    EXPECT_EQ(s.kl.kernel, "matern92");
}

TEST(Sampler, EmpiricalCovarianceMatchesFactor)
{
    Eigen::MatrixXd C = matern_gram(60);
    FieldSampler s;
    s.kl = pivoted_cholesky(C, 1e-8 * C.trace());
    s.inv_sqrt_area = Eigen::VectorXd::Ones(60);
    Eigen::MatrixXd S = Eigen::MatrixXd::Zero(60, 60);
    const int M = 10000;
    for (int k = 0; k < M; ++k) {
        Eigen::VectorXd z = s.draw(3, k);
        S += z * z.transpose() / M;
    }
    Eigen::MatrixXd ref = s.kl.L * s.kl.L.transpose();
    EXPECT_LT((S - ref).norm() / ref.norm(), 0.05);
}

TEST(Restrict, ConstantsAndMeans)
{
    Mesh c = build_mesh("unit-square", 0), f = refine_mesh(c);
    Eigen::VectorXd ones = Eigen::VectorXd::Constant(f.size(), 2.5);
    EXPECT_LT((restrict_to_coarse(ones, f, c.size()) - Eigen::VectorXd::Constant(c.size(), 2.5)).norm(), 1e-15);
    Eigen::VectorXd z = Eigen::VectorXd::Zero(f.size());
    int k = 0;
    for (std::size_t j = 0; j < f.size(); ++j)
        if (f.parent_of[j] == 5)
            z[j] = ++k;
    ASSERT_EQ(k, 4);
    EXPECT_DOUBLE_EQ(restrict_to_coarse(z, f, c.size())[5], 2.5);
}

TEST(Restrict, OrthogonalToCoarseIndicators)
{
    Mesh c = build_mesh("quad-sphere", 1), f = refine_mesh(c);
    Eigen::VectorXd z(f.size());
    for (std::size_t j = 0; j < f.size(); ++j)
        z[j] = std::sin(3.0 * j);
    Eigen::VectorXd zc = restrict_to_coarse(z, f, c.size());
    Eigen::VectorXd r = z - prolong_to_fine(zc, f);
    for (std::size_t p = 0; p < c.size(); ++p) {
        double ip = 0, scale = 0;
        for (std::size_t j = 0; j < f.size(); ++j)
            if (f.parent_of[j] == static_cast<int>(p)) {
                ip += f.panels[j].area * r[j];
                scale += f.panels[j].area;
            }
        EXPECT_LT(std::abs(ip), 1e-12 * scale);
    }
    // restrict o prolong = id up to the rounding of one weighted mean
    EXPECT_LT((restrict_to_coarse(prolong_to_fine(zc, f), f, c.size()) - zc).cwiseAbs().maxCoeff(),
              4 * std::numeric_limits<double>::epsilon() * zc.cwiseAbs().maxCoeff());
}

TEST(KLDump, RoundTrip)
{
    Mesh m = build_mesh("unit-square", 1);
    FieldSampler s = make_field_sampler(m, matern_kernel(), SampleLaw::uniform);
    std::stringstream bin;
    write_kl(bin, s);
    nlohmann::json hdr = kl_header(s, "splitmix64(seed, level, index) -> mt19937_64");
    EXPECT_EQ(hdr["n"], 64);
    EXPECT_EQ(hdr["r"], s.kl.rank());
    FieldSampler t = read_kl(bin, hdr);
    EXPECT_EQ(t.kl.L, s.kl.L);
    EXPECT_EQ(t.kl.pivots, s.kl.pivots);
    EXPECT_EQ(t.inv_sqrt_area, s.inv_sqrt_area);
    EXPECT_EQ(t.draw(1, 2), s.draw(1, 2));
}
