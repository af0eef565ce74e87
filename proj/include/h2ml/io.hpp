#ifndef H2ML_IO_HPP
#define H2ML_IO_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "h2ml/errors.hpp"
#include "h2ml/h2.hpp"
#include "h2ml/sampling.hpp"

namespace h2ml {

//
// binary helpers (native little-endian layout)
//

namespace detail {

template <class T>
void put(std::ostream& os, const T& v)
{
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is)
{
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is)
        throw structure_error("unexpected end of binary stream");
    return v;
}

inline void put_matrix(std::ostream& os, const Eigen::MatrixXd& m)
{
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            put<double>(os, m(i, j));
}

inline Eigen::MatrixXd get_matrix(std::istream& is)
{
    auto r = get<std::uint32_t>(is);
    auto c = get<std::uint32_t>(is);
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            m(i, j) = get<double>(is);
    return m;
}

struct Fnv1a {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    void bytes(const void* p, std::size_t n)
    {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 0x100000001b3ULL;
        }
    }
    template <class T>
    void add(const T& v)
    {
        bytes(&v, sizeof(T));
    }
};

} // namespace detail

// hash of the index structure: permutation, cluster ranges, block lists
inline std::uint64_t tree_hash(const Level& lv)
{
    detail::Fnv1a f;
    f.add(static_cast<std::uint64_t>(lv.n()));
    for (int p : lv.tree.perm)
        f.add(p);
    for (const Cluster& c : lv.tree.nodes) {
        f.add(static_cast<std::uint64_t>(c.begin));
        f.add(static_cast<std::uint64_t>(c.end));
        f.add(static_cast<std::uint64_t>(c.children.size()));
    }
    for (const Block& b : lv.blocks.farfield) {
        f.add(b.t);
        f.add(b.s);
    }
    f.add(-1);
    for (const Block& b : lv.blocks.nearfield) {
        f.add(b.t);
        f.add(b.s);
    }
    return f.h;
}

inline constexpr char kernel_magic[8] = {'H', '2', 'M', 'L', 'K', 'R', 'N', '\0'};
inline constexpr std::uint32_t kernel_format_version = 1;

// header, farfield blocks in leaf order, nearfield blocks; each block row-major
inline void write_kernel(std::ostream& os, const H2Kernel& G)
{
    const Level& lv = *G.level;
    os.write(kernel_magic, 8);
    detail::put(os, kernel_format_version);
    detail::put(os, tree_hash(lv));
    detail::put<std::int32_t>(os, lv.params.alpha);
    detail::put<std::int32_t>(os, lv.params.beta);
    detail::put<double>(os, lv.params.delta);
    detail::put<double>(os, lv.params.eta);
    detail::put<std::int32_t>(os, lv.params.n_min);
    detail::put<std::uint64_t>(os, lv.n());
    detail::put<std::uint64_t>(os, G.far.size());
    detail::put<std::uint64_t>(os, G.near.size());
    for (const auto& m : G.far)
        detail::put_matrix(os, m);
    for (const auto& m : G.near)
        detail::put_matrix(os, m);
    if (!os)
        throw resource_error("write_kernel: stream write failed");
}

inline H2Kernel read_kernel(std::istream& is, LevelPtr lv)
{
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kernel_magic, 8) != 0)
        throw structure_error("read_kernel: not a kernel file");
    if (detail::get<std::uint32_t>(is) != kernel_format_version)
        throw structure_error("read_kernel: unsupported format version");
    if (detail::get<std::uint64_t>(is) != tree_hash(*lv))
        throw structure_error("read_kernel: tree hash does not match the level");
    const auto alpha = detail::get<std::int32_t>(is);
    const auto beta = detail::get<std::int32_t>(is);
    const auto delta = detail::get<double>(is);
    const auto eta = detail::get<double>(is);
    const auto n_min = detail::get<std::int32_t>(is);
    if (alpha != lv->params.alpha || beta != lv->params.beta || delta != lv->params.delta || eta != lv->params.eta ||
        n_min != lv->params.n_min)
        throw structure_error("read_kernel: compression parameters do not match the level");
    if (detail::get<std::uint64_t>(is) != lv->n())
        throw structure_error("read_kernel: DOF count mismatch");
    const auto nf = detail::get<std::uint64_t>(is);
    const auto nn = detail::get<std::uint64_t>(is);
    if (nf != lv->blocks.farfield.size() || nn != lv->blocks.nearfield.size())
        throw structure_error("read_kernel: block count mismatch");
    H2Kernel G = zero_kernel(lv);
    auto load = [&](Eigen::MatrixXd& dst) {
        Eigen::MatrixXd m = detail::get_matrix(is);
        if (m.rows() != dst.rows() || m.cols() != dst.cols())
            throw structure_error("read_kernel: block shape mismatch");
        dst = std::move(m);
    };
    for (auto& m : G.far)
        load(m);
    for (auto& m : G.near)
        load(m);
    return G;
}

inline nlohmann::json kernel_sidecar(const H2Kernel& G)
{
    const Level& lv = *G.level;
    Footprint f = memory_footprint(G);
    std::ostringstream hs;
    hs << std::hex << std::setw(16) << std::setfill('0') << tree_hash(lv);
    return {{"format", "h2ml-kernel"},
            {"version", kernel_format_version},
            {"tree_hash", hs.str()},
            {"geometry", lv.mesh.geometry},
            {"level", lv.mesh.level},
            {"dofs", lv.n()},
            {"alpha", lv.params.alpha},
            {"beta", lv.params.beta},
            {"delta", lv.params.delta},
            {"eta", lv.params.eta},
            {"n_min", lv.params.n_min},
            {"depth", lv.tree.depth},
            {"sparsity", lv.blocks.sparsity},
            {"farfield_blocks", lv.blocks.farfield.size()},
            {"nearfield_blocks", lv.blocks.nearfield.size()},
            {"far_scalars", f.far_scalars},
            {"near_scalars", f.near_scalars}};
}

inline void save_kernel(const std::string& path, const H2Kernel& G)
{
    std::ofstream os(path, std::ios::binary);
    if (!os)
        throw resource_error("cannot open " + path);
    write_kernel(os, G);
    std::ofstream js(path + ".json");
    if (!js)
        throw resource_error("cannot open " + path + ".json");
    js << kernel_sidecar(G).dump(2) << "\n";
}

//
// KL factor dump
//

inline constexpr char kl_magic[8] = {'H', '2', 'M', 'L', 'K', 'L', 'F', '\0'};

inline nlohmann::json kl_header(const FieldSampler& s, const std::string& seed_policy)
{
    return {{"n", s.kl.L.rows()},           {"r", s.kl.L.cols()},
            {"tol", s.kl.tol},              {"residual_trace", s.kl.residual_trace},
            {"kernel", s.kl.kernel},        {"level", s.level},
            {"law", law_name(s.law)},       {"seed_policy", seed_policy}};
}

inline void write_kl(std::ostream& bin, const FieldSampler& s)
{
    bin.write(kl_magic, 8);
    detail::put<std::int32_t>(bin, s.level);
    detail::put<double>(bin, s.kl.tol);
    detail::put<double>(bin, s.kl.residual_trace);
    detail::put<std::uint64_t>(bin, s.kl.pivots.size());
    for (int p : s.kl.pivots)
        detail::put<std::int32_t>(bin, p);
    detail::put_matrix(bin, s.kl.L);
    detail::put<std::uint64_t>(bin, static_cast<std::uint64_t>(s.inv_sqrt_area.size()));
    for (Eigen::Index i = 0; i < s.inv_sqrt_area.size(); ++i)
        detail::put<double>(bin, s.inv_sqrt_area[i]);
}

inline FieldSampler read_kl(std::istream& bin, const nlohmann::json& header)
{
    char magic[8];
    bin.read(magic, 8);
    if (!bin || std::memcmp(magic, kl_magic, 8) != 0)
        throw structure_error("read_kl: not a KL factor file");
    FieldSampler s;
    s.level = detail::get<std::int32_t>(bin);
    s.kl.tol = detail::get<double>(bin);
    s.kl.residual_trace = detail::get<double>(bin);
    auto np = detail::get<std::uint64_t>(bin);
    for (std::uint64_t i = 0; i < np; ++i)
        s.kl.pivots.push_back(detail::get<std::int32_t>(bin));
    s.kl.L = detail::get_matrix(bin);
    auto n = detail::get<std::uint64_t>(bin);
    s.inv_sqrt_area.resize(static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < n; ++i)
        s.inv_sqrt_area[static_cast<Eigen::Index>(i)] = detail::get<double>(bin);
    s.kl.kernel = header.value("kernel", std::string{});
    s.law = parse_law(header.value("law", std::string{"normal"}));
    if (header.value("n", -1L) != s.kl.L.rows() || header.value("r", -1L) != s.kl.L.cols())
        throw structure_error("read_kl: header does not match the binary factor");
    return s;
}

//
// run records as CSV: L,eps,time,mem,M0..ML
//

struct RunRecord {
    int L = 0;
    double eps = 0.0;
    double time_sec = 0.0;
    std::uint64_t mem_bytes = 0;
    std::vector<long long> M;
    // diagnostics (manifest only)
    int sparsity = 0;
    int depth = 0;
    double zeta = 0.0;
    int qbar = 0;
    int power_iterations = 0;
    std::string warning;

    bool operator==(const RunRecord& o) const
    {
        return L == o.L && eps == o.eps && time_sec == o.time_sec && mem_bytes == o.mem_bytes && M == o.M;
    }
};

inline std::string format_double(double v)
{
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_csv(std::ostream& os, const std::vector<RunRecord>& recs)
{
    std::size_t width = 0;
    for (const auto& r : recs)
        width = std::max(width, r.M.size());
    os << "L,eps,time,mem";
    for (std::size_t l = 0; l < width; ++l)
        os << ",M" << l;
    os << "\n";
    for (const auto& r : recs) {
        os << r.L << "," << format_double(r.eps) << "," << format_double(r.time_sec) << "," << r.mem_bytes;
        for (std::size_t l = 0; l < width; ++l) {
            os << ",";
            if (l < r.M.size())
                os << r.M[l];
        }
        os << "\n";
    }
}

inline std::vector<RunRecord> parse_csv(std::istream& is)
{
    std::string line;
    if (!std::getline(is, line) || line.rfind("L,eps,time,mem", 0) != 0)
        throw structure_error("parse_csv: missing header");
    std::vector<RunRecord> out;
    while (std::getline(is, line)) {
        if (line.empty())
            continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ','))
            cells.push_back(c);
        if (!line.empty() && line.back() == ',')
            cells.emplace_back();
        if (cells.size() < 4)
            throw structure_error("parse_csv: short row");
        RunRecord r;
        try {
            r.L = std::stoi(cells[0]);
            r.eps = std::stod(cells[1]);
            r.time_sec = std::stod(cells[2]);
            r.mem_bytes = std::stoull(cells[3]);
            for (std::size_t i = 4; i < cells.size(); ++i)
                if (!cells[i].empty())
                    r.M.push_back(std::stoll(cells[i]));
        } catch (const std::logic_error&) {
            throw structure_error("parse_csv: malformed number in row '" + line + "'");
        }
        out.push_back(std::move(r));
    }
    return out;
}

// per-level storage statistics
inline void write_storage_csv(std::ostream& os, const std::vector<LevelPtr>& levels)
{
    os << "level,dofs,depth,sparsity,far_blocks,near_blocks,far_scalars,near_scalars,scalars_per_dof\n";
    for (const auto& lv : levels) {
        Footprint f = layout_footprint(*lv);
        os << lv->mesh.level << "," << lv->n() << "," << lv->tree.depth << "," << lv->blocks.sparsity << ","
           << lv->blocks.farfield.size() << "," << lv->blocks.nearfield.size() << "," << f.far_scalars << ","
           << f.near_scalars << "," << format_double(static_cast<double>(f.scalars()) / lv->n()) << "\n";
    }
}

} // namespace h2ml

#endif
