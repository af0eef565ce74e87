#ifndef H2ML_EXPERIMENT_HPP
#define H2ML_EXPERIMENT_HPP

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "h2ml/errors.hpp"
#include "h2ml/estimator.hpp"
#include "h2ml/h2.hpp"
#include "h2ml/io.hpp"
#include "h2ml/sampling.hpp"

namespace h2ml {

//
// applying a level-l kernel on a finer piecewise-constant space
//

// Leaf moments of the level-l bases against the panels of a finer level F, so the
// level-l kernel acts as a bilinear form on V_{h_F}.
struct FineTestSpace {
    const Level* level = nullptr;
    int coarse_level = 0, fine_level = 0;
    std::vector<Eigen::MatrixXd> M; // per leaf of T_l
    LeafSpace space;
    std::vector<int> anc;           // fine panel -> level-l panel
    Eigen::VectorXd area;           // fine panel areas
};

inline FineTestSpace make_fine_space(const Level& lv, const NestedHierarchy& h, int l, int F)
{
    if (l < 0 || F < l || F >= h.levels() || h.meshes[l].size() != lv.n())
        throw structure_error("make_fine_space: levels do not match the hierarchy");
    FineTestSpace fs;
    fs.level = &lv;
    fs.coarse_level = l;
    fs.fine_level = F;
    const Mesh& fine = h.meshes[F];
    fs.anc.resize(fine.size());
    std::vector<std::vector<int>> desc(lv.n());
    for (std::size_t i = 0; i < fine.size(); ++i) {
        fs.anc[i] = h.ancestor_panel(F, static_cast<int>(i), l);
        desc[fs.anc[i]].push_back(static_cast<int>(i));
    }
    fs.area.resize(static_cast<Eigen::Index>(fine.size()));
    for (std::size_t i = 0; i < fine.size(); ++i)
        fs.area[static_cast<Eigen::Index>(i)] = fine.panels[i].area;
    fs.M.resize(lv.tree.nodes.size());
    fs.space.n = fine.size();
    fs.space.M.assign(lv.tree.nodes.size(), nullptr);
    fs.space.panels.resize(lv.tree.nodes.size());
    for (int t : lv.tree.leaves) {
        std::vector<int>& ids = fs.space.panels[t];
        for (int p : lv.tree.indices(t))
            ids.insert(ids.end(), desc[p].begin(), desc[p].end());
        const TensorGrid& g = lv.ops.grid[t];
        fs.M[t] = assemble_moment_leaf(fine, g, ids, moment_quadrature_points(g.k));
    }
    for (int t : lv.tree.leaves)
        fs.space.M[t] = &fs.M[t];
    return fs;
}

// y = A x with A the Galerkin matrix of G on V_{h_F} (fine panel-id order)
inline Eigen::VectorXd fine_matvec(const H2Kernel& G, const FineTestSpace& fs, const Eigen::VectorXd& x,
                                   bool transpose = false)
{
    const Level& lv = *G.level;
    if (&lv != fs.level || static_cast<std::size_t>(x.size()) != fs.space.n)
        throw structure_error("fine_matvec: kernel, test space and vector do not match");
    std::vector<Eigen::VectorXd> q = forward_transform(lv, fs.space, x);
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
    Eigen::VectorXd y = backward_transform(lv, fs.space, std::move(v));
    // nearfield: integrals of x over coarse panels, values spread back with fine areas
    Eigen::VectorXd cx = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lv.n()));
    for (Eigen::Index i = 0; i < x.size(); ++i)
        cx[fs.anc[i]] += fs.area[i] * x[i];
    Eigen::VectorXd cy = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(lv.n()));
    const auto& near = lv.blocks.nearfield;
    for (std::size_t b = 0; b < near.size(); ++b) {
        int t = near[b].t, s = near[b].s;
        if (transpose)
            scatter_add(lv.tree, s, G.near[b].transpose() * gather(lv.tree, t, cx), cy);
        else
            scatter_add(lv.tree, t, G.near[b] * gather(lv.tree, s, cx), cy);
    }
    for (Eigen::Index i = 0; i < y.size(); ++i)
        y[i] += fs.area[i] * cy[fs.anc[i]];
    return y;
}

//
// power iteration
//

struct PowerResult {
    double value = 0.0;
    int iterations = 0;
};

// |lambda_max| of a symmetric operator as the limit of ||A x_k|| with normalized iterates.
// Stops once successive estimates differ by less than tol_abs and the geometric tail
// implied by the slowest contraction of the differences over the last few steps is also
// below tol_abs.
inline PowerResult power_iteration(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& apply, Eigen::Index n,
                                   double tol_abs = 1e-4, int max_iter = 10000, std::uint64_t seed = 0x5eed)
{
    if (!(tol_abs > 0.0))
        throw config_error("power_iteration: tol_abs must be positive");
    if (n <= 0)
        throw config_error("power_iteration: empty operator");
    constexpr std::size_t window = 10;
    Eigen::VectorXd x = draw_law(stream_id(seed, 0, 0), n, SampleLaw::normal);
    x.normalize();
    double prev = -1.0;
    std::vector<double> diffs;
    for (int it = 1; it <= max_iter; ++it) {
        Eigen::VectorXd y = apply(x);
        const double est = y.norm();
        if (est == 0.0)
            return {0.0, it};
        if (prev >= 0.0) {
            const double diff = std::abs(est - prev);
            diffs.push_back(diff);
            if (diff < tol_abs) {
                if (diff == 0.0)
                    return {est, it};
                double r = 0.0;
                const std::size_t m = diffs.size();
                for (std::size_t i = m > window ? m - window : 1; i < m; ++i)
                    if (diffs[i - 1] > 0.0)
                        r = std::max(r, diffs[i] / diffs[i - 1]);
                r = std::min(r, 0.999);
                // observed ratio creeps up towards the asymptotic one, so keep a factor 2 margin
                if (m >= 2 && 2.0 * diff / (1.0 - r) < tol_abs)
                    return {est, it};
            }
        }
        prev = est;
        x = y / est;
    }
    throw numeric_error("power_iteration: no convergence after " + std::to_string(max_iter) +
                        " iterations (last estimate " + format_double(prev) + ")");
}

// spectral norm of (reference covariance - estimate) on V_{h_F} in orthonormal coordinates,
// the estimate symmetrized as (A + A^T)/2
inline PowerResult spectral_error(const FieldSampler& ref, const H2Kernel& est, const FineTestSpace& fs,
                                  double tol_abs = 1e-4, int max_iter = 10000)
{
    if (ref.n() != static_cast<Eigen::Index>(fs.space.n))
        throw structure_error("spectral_error: reference and test space sizes differ");
    const Eigen::VectorXd& s = ref.inv_sqrt_area;
    auto apply = [&](const Eigen::VectorXd& x) {
        Eigen::VectorXd u = s.cwiseProduct(x);
        Eigen::VectorXd a = 0.5 * (fine_matvec(est, fs, u, false) + fine_matvec(est, fs, u, true));
        return Eigen::VectorXd(ref.apply_covariance(x) - s.cwiseProduct(a));
    };
    return power_iteration(apply, ref.n(), tol_abs, max_iter);
}

//
// measured tree diagnostics
//

// largest diameter ratio child/parent over the tree
inline double measured_zeta(const ClusterTree& tree)
{
    double z = 0.0;
    for (const Cluster& c : tree.nodes)
        if (c.parent >= 0) {
            const double dp = tree.nodes[c.parent].box.diam_inf();
            if (dp > 0.0)
                z = std::max(z, c.box.diam_inf() / dp);
        }
    return z;
}

// spread of leaf depths (0 for a level tree)
inline int measured_qbar(const ClusterTree& tree)
{
    int lo = tree.depth, hi = 0;
    for (int t : tree.leaves) {
        lo = std::min(lo, tree.nodes[t].level);
        hi = std::max(hi, tree.nodes[t].level);
    }
    return hi - lo;
}

//
// convergence study
//

struct RunConfig {
    std::string geometry = "unit-square";
    int lmax = 3;
    std::optional<double> eps; // overrides lmax through level_for_epsilon
    H2Params params;
    SampleLaw law = SampleLaw::normal;
    std::uint64_t seed = 1;
    double gamma = 1.0;
    double c_uni = 4.0;
    int ref_extra = 1;       // reference KL lives on level lmax + ref_extra
    int threads = 1;
    bool timing = true;      // false: time columns written as 0 (byte-identical reruns)
    bool oracle = false;     // dense cross-check of the error on small levels
    double power_tol = 1e-4;
    int power_max_iter = 10000;
    int kl_quad = 2;         // Gauss points per direction for the KL Galerkin entries
    std::size_t max_dofs = 20000;
    std::string csv_out, manifest_out, kernel_out;

    void validate() const
    {
        if (params.alpha < 0)
            throw config_error("alpha must be >= 0");
        if (params.beta < 1)
            throw config_error("beta must be >= 1");
        if (!(params.eta > 0.0))
            throw config_error("eta must be > 0");
        if (params.n_min < 1)
            throw config_error("n_min must be >= 1");
        if (!(params.delta >= 1.0))
            throw config_error("delta must be >= 1");
        if (lmax < 0)
            throw config_error("lmax must be >= 0");
        if (eps && !(*eps > 0.0 && *eps < 1.0))
            throw config_error("eps must lie in (0, 1)");
        if (ref_extra < 0)
            throw config_error("ref_extra must be >= 0");
        if (threads < 1)
            throw config_error("threads must be >= 1");
        if (geometry != "unit-square" && geometry != "quad-sphere")
            throw config_error("unknown geometry '" + geometry + "'");
        if (!(power_tol > 0.0))
            throw config_error("power tolerance must be > 0");
        if (kl_quad < 1)
            throw config_error("kl_quad must be >= 1");
    }

    int effective_lmax() const
    {
        if (!eps)
            return lmax;
        return level_for_epsilon(*eps, gamma, 2.0, c_uni); // both surfaces are two-dimensional
    }
};

struct RunResult {
    std::vector<RunRecord> records;
    std::vector<std::string> warnings;
    bool resource_capped = false;
    nlohmann::json manifest;
    std::optional<H2Kernel> last_estimate;
};

inline std::size_t dofs_on_level(const std::string& geometry, int l)
{
    std::size_t n = geometry == "quad-sphere" ? 6 : 16;
    for (int i = 0; i < l; ++i)
        n *= 4;
    return n;
}

inline RunResult run_convergence(const RunConfig& cfg, const std::function<void(const std::string&)>& log = {})
{
    cfg.validate();
    using clock = std::chrono::steady_clock;
    auto secs = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
    auto note = [&](const std::string& s) {
        if (log)
            log(s);
    };
    RunResult res;
    int lmax = cfg.effective_lmax();
    int F = lmax + cfg.ref_extra;
    // shrink the sweep until the reference level fits the cap
    while (F >= 0 && dofs_on_level(cfg.geometry, F) > cfg.max_dofs) {
        res.resource_capped = true;
        --F;
        if (lmax > F)
            lmax = F;
    }
    if (res.resource_capped) {
        std::string w = "resource cap " + std::to_string(cfg.max_dofs) + " DOFs: reference on level " +
                        std::to_string(F) + ", sweep truncated to L <= " + std::to_string(lmax);
        res.warnings.push_back(w);
        note("warning: " + w);
    }
    if (F < 0 || lmax < 0)
        throw resource_error("resource cap leaves no admissible level");

    const KernelFunction g = reference_kernel(cfg.params.delta);
    NestedHierarchy h = build_hierarchy(cfg.geometry, F, cfg.params.n_min);
    std::vector<LevelPtr> levels;
    std::vector<double> build_time;
    for (int l = 0; l <= lmax; ++l) {
        auto t0 = clock::now();
        levels.push_back(make_level(h.meshes[l], h.trees[l], cfg.params));
        build_time.push_back(secs(t0, clock::now()));
        note("level " + std::to_string(l) + ": " + std::to_string(levels.back()->n()) + " panels, depth " +
             std::to_string(levels.back()->tree.depth));
    }
    std::vector<FieldSampler> samplers;
    for (int l = 0; l <= lmax; ++l)
        samplers.push_back(make_field_sampler(h.meshes[l], g, cfg.law, cfg.kl_quad));
    FieldSampler ref = F <= lmax ? samplers[F] : make_field_sampler(h.meshes[F], g, cfg.law, cfg.kl_quad);
    note("reference KL on level " + std::to_string(F) + ": rank " + std::to_string(ref.kl.rank()));

    nlohmann::json jrecs = nlohmann::json::array();
    for (int L = 0; L <= lmax; ++L) {
        auto t0 = clock::now();
        MultilevelSetup s;
        for (int l = 0; l <= L; ++l) {
            s.hierarchy.meshes.push_back(h.meshes[l]);
            s.hierarchy.trees.push_back(h.trees[l]);
            s.hierarchy.coarse_of.push_back(h.coarse_of[l]);
            if (l < L)
                s.hierarchy.fine_of.push_back(h.fine_of[l]);
            s.levels.push_back(levels[l]);
        }
        Schedule sched = sample_schedule(L, cfg.gamma, 2.0, cfg.c_uni);
        DrawFn draw = level_draws(s, samplers, cfg.seed);
        H2Kernel est = mlsce(s, sched, draw, cfg.threads);
        double t_est = secs(t0, clock::now());
        for (int l = 0; l <= L; ++l)
            t_est += build_time[l];

        FineTestSpace fs = make_fine_space(*levels[L], h, L, F);
        PowerResult pr = spectral_error(ref, est, fs, cfg.power_tol, cfg.power_max_iter);

        RunRecord r;
        r.L = L;
        r.eps = pr.value;
        r.time_sec = cfg.timing ? t_est : 0.0;
        r.mem_bytes = memory_footprint(est).bytes();
        r.M = sched.M;
        r.sparsity = levels[L]->blocks.sparsity;
        r.depth = levels[L]->tree.depth;
        r.zeta = measured_zeta(levels[L]->tree);
        r.qbar = measured_qbar(levels[L]->tree);
        r.power_iterations = pr.iterations;
        nlohmann::json jr = {{"L", r.L},
                             {"eps", r.eps},
                             {"time_sec", r.time_sec},
                             {"mem_bytes", r.mem_bytes},
                             {"schedule", r.M},
                             {"dofs", levels[L]->n()},
                             {"diagnostics",
                              {{"sparsity", r.sparsity},
                               {"depth", r.depth},
                               {"zeta", r.zeta},
                               {"qbar", r.qbar},
                               {"power_iterations", r.power_iterations},
                               {"scalars_per_dof",
                                static_cast<double>(memory_footprint(est).scalars()) / levels[L]->n()}}}};
        if (cfg.oracle) {
            const std::size_t nF = h.meshes[F].size();
            if (nF <= default_oracle_cap) {
                Eigen::MatrixXd A(static_cast<Eigen::Index>(nF), static_cast<Eigen::Index>(nF));
                for (std::size_t j = 0; j < nF; ++j) {
                    Eigen::VectorXd e = Eigen::VectorXd::Unit(static_cast<Eigen::Index>(nF), static_cast<Eigen::Index>(j));
                    A.col(static_cast<Eigen::Index>(j)) = fine_matvec(est, fs, e);
                }
                Eigen::MatrixXd S = ref.inv_sqrt_area.asDiagonal() * (0.5 * (A + A.transpose())) *
                                    ref.inv_sqrt_area.asDiagonal();
                Eigen::MatrixXd D = ref.kl.L * ref.kl.L.transpose() - S;
                Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(D, Eigen::EigenvaluesOnly);
                jr["oracle_eps"] = es.eigenvalues().cwiseAbs().maxCoeff();
            } else {
                jr["oracle_eps"] = nullptr;
                jr["oracle_note"] = "reference level exceeds the oracle cap";
            }
        }
        note("L=" + std::to_string(L) + " eps=" + format_double(r.eps) + " time=" + format_double(t_est) +
             "s mem=" + std::to_string(r.mem_bytes) + "B");
        res.records.push_back(r);
        jrecs.push_back(jr);
        if (L == lmax)
            res.last_estimate = std::move(est);
    }
    if (res.resource_capped && !res.records.empty())
        res.records.back().warning = res.warnings.front();
    res.manifest = {{"geometry", cfg.geometry},
                    {"lmax", lmax},
                    {"lmax_requested", cfg.effective_lmax()},
                    {"reference_level", F},
                    {"reference_rank", ref.kl.rank()},
                    {"reference_tol", ref.kl.tol},
                    {"kernel", g.name},
                    {"law", law_name(cfg.law)},
                    {"seed", cfg.seed},
                    {"seed_policy", "stream = splitmix64(splitmix64(splitmix64(seed) ^ level) ^ sample_index) -> mt19937_64"},
                    {"compression",
                     {{"alpha", cfg.params.alpha},
                      {"beta", cfg.params.beta},
                      {"delta", cfg.params.delta},
                      {"eta", cfg.params.eta},
                      {"n_min", cfg.params.n_min},
                      {"near_quad", cfg.params.near_quad}}},
                    {"gamma", cfg.gamma},
                    {"c_uni", cfg.c_uni},
                    {"threads", cfg.threads},
                    {"timing", cfg.timing},
                    {"power_tol", cfg.power_tol},
                    {"records", jrecs},
                    {"warnings", res.warnings}};
    return res;
}

} // namespace h2ml

#endif
