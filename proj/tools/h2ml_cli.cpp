// Convergence study driver: runs the multilevel estimator for L = 0..lmax and writes
// CSV records, a JSON manifest and optionally the finest estimate.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "h2ml/experiment.hpp"
#include "h2ml/io.hpp"

namespace {

constexpr int exit_config = 2;
constexpr int exit_resource = 3;

bool on_off(const std::string& s) { return s == "on"; }

} // namespace

int main(int argc, char** argv)
{
    h2ml::RunConfig cfg;
    std::string law = "normal", oracle = "off", timing = "on", storage_csv;
    std::optional<double> eps;
    bool quiet = false;

    CLI::App app{"Multilevel H2 sample covariance estimation: convergence study"};
    app.add_option("--geometry", cfg.geometry, "unit-square | quad-sphere")->capture_default_str();
    app.add_option("--lmax", cfg.lmax, "finest level of the sweep")->capture_default_str();
    app.add_option("--alpha", cfg.params.alpha, "order growth per tree level")->capture_default_str();
    app.add_option("--beta", cfg.params.beta, "order offset")->capture_default_str();
    app.add_option("--eta", cfg.params.eta, "admissibility parameter")->capture_default_str();
    app.add_option("--nmin", cfg.params.n_min, "leaf size")->capture_default_str();
    app.add_option("--delta", cfg.params.delta, "Gevrey index of kernel and rank schedule")->capture_default_str();
    app.add_option("--law", law, "sample law")->check(CLI::IsMember({"normal", "uniform"}))->capture_default_str();
    app.add_option("--seed", cfg.seed, "base seed")->capture_default_str();
    app.add_option("--eps", eps, "target accuracy; sets lmax from the cost bound");
    app.add_option("--csv-out", cfg.csv_out, "CSV output path");
    app.add_option("--manifest-out", cfg.manifest_out, "JSON manifest path");
    app.add_option("--oracle", oracle, "dense cross-check of the error on small references")
        ->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    app.add_option("--threads", cfg.threads, "worker threads for the sample loops")->capture_default_str();
    app.add_option("--timing", timing, "off writes time columns as 0 for byte-identical reruns")
        ->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    app.add_option("--ref-extra", cfg.ref_extra, "reference KL level = lmax + ref-extra")->capture_default_str();
    app.add_option("--max-dofs", cfg.max_dofs, "resource cap on the reference level size")->capture_default_str();
    app.add_option("--gamma", cfg.gamma, "effective rate in the sample schedule")->capture_default_str();
    app.add_option("--kernel-out", cfg.kernel_out, "serialize the finest estimate (binary + .json sidecar)");
    app.add_option("--storage-csv", storage_csv, "per-level storage statistics");
    app.add_flag("--quiet", quiet, "no progress output");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return exit_config;
    }

    try {
        cfg.law = h2ml::parse_law(law);
        cfg.oracle = on_off(oracle);
        cfg.timing = on_off(timing);
        cfg.eps = eps;
        auto log = [quiet](const std::string& s) {
            if (!quiet)
                std::cerr << s << "\n";
        };
        h2ml::RunResult res = h2ml::run_convergence(cfg, log);

        if (!cfg.csv_out.empty()) {
            std::ofstream os(cfg.csv_out);
            if (!os)
                throw h2ml::resource_error("cannot open " + cfg.csv_out);
            h2ml::write_csv(os, res.records);
        } else {
            h2ml::write_csv(std::cout, res.records);
        }
        if (!cfg.manifest_out.empty()) {
            std::ofstream os(cfg.manifest_out);
            if (!os)
                throw h2ml::resource_error("cannot open " + cfg.manifest_out);
            os << res.manifest.dump(2) << "\n";
        }
        if (!cfg.kernel_out.empty() && res.last_estimate)
            h2ml::save_kernel(cfg.kernel_out, *res.last_estimate);
        if (!storage_csv.empty() && res.last_estimate) {
            std::ofstream os(storage_csv);
            if (!os)
                throw h2ml::resource_error("cannot open " + storage_csv);
            // same nested trees as the run
            const int top = res.last_estimate->level->mesh.level;
            h2ml::NestedHierarchy h = h2ml::build_hierarchy(cfg.geometry, top, cfg.params.n_min);
            std::vector<h2ml::LevelPtr> lv;
            for (int l = 0; l < top; ++l)
                lv.push_back(h2ml::make_level(h.meshes[l], h.trees[l], cfg.params));
            lv.push_back(res.last_estimate->level);
            h2ml::write_storage_csv(os, lv);
        }
        if (res.resource_capped) {
            for (const auto& w : res.warnings)
                std::cerr << "warning: " << w << "\n";
            return exit_resource;
        }
    } catch (const h2ml::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_config;
    } catch (const h2ml::resource_error& e) {
        std::cerr << "resource error: " << e.what() << "\n";
        return exit_resource;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
