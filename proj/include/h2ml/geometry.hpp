#ifndef H2ML_GEOMETRY_HPP
#define H2ML_GEOMETRY_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "h2ml/errors.hpp"
#include "h2ml/quadrature.hpp"

namespace h2ml {

using Point = std::array<double, 3>;

inline Point operator+(const Point& a, const Point& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Point operator-(const Point& a, const Point& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Point operator*(double s, const Point& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double norm2(const Point& a) { return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]); }
inline Point cross(const Point& a, const Point& b)
{
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

//
// panels and meshes
//

// flat (bilinear) quadrilateral; vertices ordered (0,0),(1,0),(1,1),(0,1) in local coords
struct Panel {
    int id = 0;
    std::array<Point, 4> vertices{};
    double area = 0.0;
    Point centroid{};
    // chart data used for refinement: chart id and parameter rectangle
    int chart = 0;
    std::array<double, 4> uv{}; // u0, u1, v0, v1
};

inline Point bilinear(const Panel& p, double a, double b)
{
    const auto& v = p.vertices;
    return ((1 - a) * (1 - b)) * v[0] + (a * (1 - b)) * v[1] + (a * b) * v[2] + ((1 - a) * b) * v[3];
}

inline double bilinear_jacobian(const Panel& p, double a, double b)
{
    const auto& v = p.vertices;
    Point da = (1 - b) * (v[1] - v[0]) + b * (v[2] - v[3]);
    Point db = (1 - a) * (v[3] - v[0]) + a * (v[2] - v[1]);
    return norm2(cross(da, db));
}

// tensor Gauss-Legendre rule on a panel: physical points and weights (incl. Jacobian)
struct PanelRule {
    std::vector<Point> pts;
    std::vector<double> w;
};

inline PanelRule panel_rule(const Panel& p, int n)
{
    const Rule1D& r = gauss_legendre(n);
    PanelRule out;
    out.pts.reserve(n * n);
    out.w.reserve(n * n);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            out.pts.push_back(bilinear(p, r.x[i], r.x[j]));
            out.w.push_back(r.w[i] * r.w[j] * bilinear_jacobian(p, r.x[i], r.x[j]));
        }
    return out;
}

struct Mesh {
    std::string geometry;
    int level = 0;
    int dim = 2;                 // dimension of bounding boxes / interpolation
    std::vector<Panel> panels;
    std::vector<int> parent_of;  // empty at level 0

    std::size_t size() const { return panels.size(); }
};

namespace detail {

inline Point chart_map(const std::string& geometry, int chart, double u, double v)
{
    if (geometry == "unit-square")
        return {u, v, 0.0};
    // quad-sphere: cube face chart projected radially
    Point c;
    switch (chart) {
    case 0: c = {1.0, u, v}; break;
    case 1: c = {-1.0, v, u}; break;
    case 2: c = {v, 1.0, u}; break;
    case 3: c = {u, -1.0, v}; break;
    case 4: c = {u, v, 1.0}; break;
    default: c = {v, u, -1.0}; break;
    }
    return (1.0 / norm2(c)) * c;
}

inline void finish_panel(const std::string& geometry, Panel& p)
{
    const double u0 = p.uv[0], u1 = p.uv[1], v0 = p.uv[2], v1 = p.uv[3];
    p.vertices = {chart_map(geometry, p.chart, u0, v0), chart_map(geometry, p.chart, u1, v0),
                  chart_map(geometry, p.chart, u1, v1), chart_map(geometry, p.chart, u0, v1)};
    PanelRule r = panel_rule(p, 8);
    double a = 0.0;
    Point c{0, 0, 0};
    for (std::size_t q = 0; q < r.w.size(); ++q) {
        a += r.w[q];
        c = c + r.w[q] * r.pts[q];
    }
    p.area = a;
    p.centroid = (1.0 / a) * c;
}

} // namespace detail

// splits every panel into 4 children (ids 4*parent + c)
inline Mesh refine_mesh(const Mesh& coarse)
{
    Mesh fine;
    fine.geometry = coarse.geometry;
    fine.level = coarse.level + 1;
    fine.dim = coarse.dim;
    fine.panels.reserve(4 * coarse.size());
    fine.parent_of.reserve(4 * coarse.size());
    for (const Panel& p : coarse.panels) {
        const double um = 0.5 * (p.uv[0] + p.uv[1]);
        const double vm = 0.5 * (p.uv[2] + p.uv[3]);
        const std::array<std::array<double, 4>, 4> rects = {{{p.uv[0], um, p.uv[2], vm},
                                                             {um, p.uv[1], p.uv[2], vm},
                                                             {p.uv[0], um, vm, p.uv[3]},
                                                             {um, p.uv[1], vm, p.uv[3]}}};
        for (const auto& rc : rects) {
            Panel c;
            c.id = static_cast<int>(fine.panels.size());
            c.chart = p.chart;
            c.uv = rc;
            detail::finish_panel(fine.geometry, c);
            fine.panels.push_back(c);
            fine.parent_of.push_back(p.id);
        }
    }
    return fine;
}

// unit-square: 4x4 base grid on [0,1]^2; quad-sphere: 6 projected cube faces
inline Mesh build_mesh(const std::string& geometry, int level)
{
    if (level < 0)
        throw config_error("build_mesh: level must be >= 0");
    Mesh m;
    m.geometry = geometry;
    if (geometry == "unit-square") {
        m.dim = 2;
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 4; ++i) {
                Panel p;
                p.id = static_cast<int>(m.panels.size());
                p.uv = {i / 4.0, (i + 1) / 4.0, j / 4.0, (j + 1) / 4.0};
                detail::finish_panel(geometry, p);
                m.panels.push_back(p);
            }
    } else if (geometry == "quad-sphere") {
        m.dim = 3;
        for (int f = 0; f < 6; ++f) {
            Panel p;
            p.id = f;
            p.chart = f;
            p.uv = {-1.0, 1.0, -1.0, 1.0};
            detail::finish_panel(geometry, p);
            m.panels.push_back(p);
        }
    } else {
        throw config_error("unknown geometry '" + geometry + "'");
    }
    for (int l = 0; l < level; ++l)
        m = refine_mesh(m);
    return m;
}

// longest edge over all panels
inline double mesh_width(const Mesh& m)
{
    double h = 0.0;
    for (const Panel& p : m.panels)
        for (int e = 0; e < 4; ++e)
            h = std::max(h, norm2(p.vertices[(e + 1) % 4] - p.vertices[e]));
    return h;
}

// plain-text dump: id v0x v0y v0z ... v3z area
inline void dump_mesh(const Mesh& m, std::ostream& os)
{
    os << std::setprecision(17);
    for (const Panel& p : m.panels) {
        os << p.id;
        for (const Point& v : p.vertices)
            os << ' ' << v[0] << ' ' << v[1] << ' ' << v[2];
        os << ' ' << p.area << '\n';
    }
}

//
// bounding boxes and admissibility
//

struct BoundingBox {
    int dim = 2;
    Point lo{0, 0, 0}, hi{0, 0, 0};

    double extent(int a) const { return hi[a] - lo[a]; }
    double diam_inf() const
    {
        double d = 0.0;
        for (int a = 0; a < dim; ++a)
            d = std::max(d, extent(a));
        return d;
    }
    int longest_axis() const
    {
        int best = 0;
        for (int a = 1; a < dim; ++a)
            if (extent(a) > extent(best))
                best = a;
        return best;
    }
    bool contains(const Point& x, double tol = 0.0) const
    {
        for (int a = 0; a < dim; ++a)
            if (x[a] < lo[a] - tol || x[a] > hi[a] + tol)
                return false;
        return true;
    }
};

// Euclidean distance between closed boxes via per-axis clamped gaps
inline double box_distance(const BoundingBox& a, const BoundingBox& b)
{
    double s = 0.0;
    for (int i = 0; i < a.dim; ++i) {
        double g = std::max({0.0, b.lo[i] - a.hi[i], a.lo[i] - b.hi[i]});
        s += g * g;
    }
    return std::sqrt(s);
}

// ties count as admissible
inline bool admissible(const BoundingBox& t, const BoundingBox& s, double eta)
{
    if (!(eta > 0.0))
        throw config_error("admissible: eta must be positive");
    return std::max(t.diam_inf(), s.diam_inf()) <= 2.0 * eta * box_distance(t, s);
}

//
// cluster trees
//

struct Cluster {
    std::size_t begin = 0, end = 0; // range into ClusterTree::perm
    BoundingBox box;
    std::vector<int> children;
    int parent = -1;
    int level = 0;

    std::size_t size() const { return end - begin; }
    bool is_leaf() const { return children.empty(); }
};

struct ClusterTree {
    int dim = 2;
    int n_min = 4;
    std::vector<Cluster> nodes; // preorder, root = 0
    std::vector<int> perm;      // storage position -> panel id
    std::vector<int> pos_of;    // panel id -> storage position
    std::vector<int> leaves;    // left-to-right
    int depth = 0;

    const Cluster& root() const { return nodes.front(); }
    std::size_t size() const { return perm.size(); }

    // panel ids of a cluster in storage order
    std::vector<int> indices(int t) const
    {
        const Cluster& c = nodes[t];
        return std::vector<int>(perm.begin() + c.begin, perm.begin() + c.end);
    }
};

namespace detail {

inline BoundingBox panel_box(const Mesh& mesh, const int* ids, std::size_t n)
{
    BoundingBox b;
    b.dim = mesh.dim;
    const double inf = std::numeric_limits<double>::infinity();
    b.lo = {inf, inf, inf};
    b.hi = {-inf, -inf, -inf};
    for (std::size_t i = 0; i < n; ++i)
        for (const Point& v : mesh.panels[ids[i]].vertices)
            for (int a = 0; a < 3; ++a) {
                b.lo[a] = std::min(b.lo[a], v[a]);
                b.hi[a] = std::max(b.hi[a], v[a]);
            }
    return b;
}

// median split along the longest axis; ties broken by remaining coordinates, then id
inline std::size_t bisect(const Mesh& mesh, std::vector<int>& perm, std::size_t b, std::size_t e, int axis)
{
    std::sort(perm.begin() + b, perm.begin() + e, [&](int i, int j) {
        const Point& ci = mesh.panels[i].centroid;
        const Point& cj = mesh.panels[j].centroid;
        for (int k = 0; k < 3; ++k) {
            int a = (axis + k) % 3;
            if (ci[a] != cj[a])
                return ci[a] < cj[a];
        }
        return i < j;
    });
    return b + (e - b) / 2;
}

inline int build_rec(const Mesh& mesh, ClusterTree& tree, std::size_t b, std::size_t e, int level, int parent)
{
    int id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    Cluster& c = tree.nodes.back();
    c.begin = b;
    c.end = e;
    c.level = level;
    c.parent = parent;
    c.box = panel_box(mesh, tree.perm.data() + b, e - b);
    if (e - b > static_cast<std::size_t>(tree.n_min)) {
        std::size_t m = bisect(mesh, tree.perm, b, e, tree.nodes[id].box.longest_axis());
        int c0 = build_rec(mesh, tree, b, m, level + 1, id);
        int c1 = build_rec(mesh, tree, m, e, level + 1, id);
        tree.nodes[id].children = {c0, c1};
    }
    return id;
}

// leaf ranges of a balanced bisection of perm[b,e)
inline void leaf_ranges(const Mesh& mesh, std::vector<int>& perm, std::size_t b, std::size_t e, int n_min,
                        std::vector<std::pair<std::size_t, std::size_t>>& out)
{
    if (e - b <= static_cast<std::size_t>(n_min)) {
        out.emplace_back(b, e);
        return;
    }
    BoundingBox box = panel_box(mesh, perm.data() + b, e - b);
    std::size_t m = bisect(mesh, perm, b, e, box.longest_axis());
    leaf_ranges(mesh, perm, b, m, n_min, out);
    leaf_ranges(mesh, perm, m, e, n_min, out);
}

inline void finalize_tree(ClusterTree& tree)
{
    tree.pos_of.assign(tree.perm.size(), -1);
    for (std::size_t i = 0; i < tree.perm.size(); ++i)
        tree.pos_of[tree.perm[i]] = static_cast<int>(i);
    tree.leaves.clear();
    tree.depth = 0;
    for (std::size_t t = 0; t < tree.nodes.size(); ++t) {
        tree.depth = std::max(tree.depth, tree.nodes[t].level);
        if (tree.nodes[t].is_leaf())
            tree.leaves.push_back(static_cast<int>(t));
    }
    // preorder numbering already lists leaves left to right
}

} // namespace detail

// binary, cardinality-balanced bisection along the longest box axis
inline ClusterTree build_cluster_tree(const Mesh& mesh, int n_min)
{
    if (n_min < 1)
        throw config_error("build_cluster_tree: n_min must be >= 1");
    if (mesh.panels.empty())
        throw structure_error("build_cluster_tree: mesh has no panels");
    ClusterTree tree;
    tree.dim = mesh.dim;
    tree.n_min = n_min;
    tree.perm.resize(mesh.size());
    std::iota(tree.perm.begin(), tree.perm.end(), 0);
    detail::build_rec(mesh, tree, 0, mesh.size(), 0, -1);
    detail::finalize_tree(tree);
    return tree;
}

// Nested refinement. Every coarse cluster gets an image with the same support;
// below an old leaf the child panels are bisected and the resulting leaves become
// the children of the image. If the child panels fit into one leaf the image stays a leaf.
struct RefinedTree {
    ClusterTree tree;
    std::vector<int> fine_of;   // coarse node -> fine node
    std::vector<int> coarse_of; // fine node -> coarse node or -1
};

inline RefinedTree refine_cluster_tree(const ClusterTree& coarse, const Mesh& fine_mesh)
{
    if (fine_mesh.parent_of.size() != fine_mesh.size() || fine_mesh.parent_of.empty())
        throw structure_error("refine_cluster_tree: fine mesh carries no parent_of data");
    std::vector<std::vector<int>> kids(coarse.size());
    for (std::size_t j = 0; j < fine_mesh.size(); ++j) {
        int p = fine_mesh.parent_of[j];
        if (p < 0 || static_cast<std::size_t>(p) >= coarse.size())
            throw structure_error("refine_cluster_tree: parent_of out of range");
        kids[p].push_back(static_cast<int>(j));
    }

    RefinedTree out;
    ClusterTree& tree = out.tree;
    tree.dim = fine_mesh.dim;
    tree.n_min = coarse.n_min;
    tree.perm.reserve(fine_mesh.size());
    out.fine_of.assign(coarse.nodes.size(), -1);

    std::function<int(int, int)> rec = [&](int ct, int parent) -> int {
        const Cluster& cc = coarse.nodes[ct];
        int id = static_cast<int>(tree.nodes.size());
        tree.nodes.emplace_back();
        out.coarse_of.push_back(ct);
        out.fine_of[ct] = id;
        tree.nodes[id].level = cc.level;
        tree.nodes[id].parent = parent;
        tree.nodes[id].begin = tree.perm.size();
        if (!cc.is_leaf()) {
            std::vector<int> ch;
            for (int c : cc.children)
                ch.push_back(rec(c, id));
            tree.nodes[id].children = ch;
        } else {
            std::size_t b = tree.perm.size();
            for (std::size_t i = cc.begin; i < cc.end; ++i)
                for (int j : kids[coarse.perm[i]])
                    tree.perm.push_back(j);
            std::size_t e = tree.perm.size();
            std::vector<std::pair<std::size_t, std::size_t>> ranges;
            detail::leaf_ranges(fine_mesh, tree.perm, b, e, tree.n_min, ranges);
            if (ranges.size() > 1) {
                std::vector<int> ch;
                for (auto [lb, le] : ranges) {
                    int cid = static_cast<int>(tree.nodes.size());
                    tree.nodes.emplace_back();
                    out.coarse_of.push_back(-1);
                    Cluster& c = tree.nodes[cid];
                    c.begin = lb;
                    c.end = le;
                    c.level = cc.level + 1;
                    c.parent = id;
                    c.box = detail::panel_box(fine_mesh, tree.perm.data() + lb, le - lb);
                    ch.push_back(cid);
                }
                tree.nodes[id].children = ch;
            }
        }
        Cluster& me = tree.nodes[id];
        me.end = tree.perm.size();
        me.box = detail::panel_box(fine_mesh, tree.perm.data() + me.begin, me.end - me.begin);
        return id;
    };
    rec(0, -1);
    detail::finalize_tree(tree);
    return out;
}

//
// block-cluster trees
//

struct Block {
    int t = 0, s = 0;
};

struct BlockClusterTree {
    double eta = 0.8;
    std::vector<Block> farfield;
    std::vector<Block> nearfield;
    int sparsity = 0; // C_sp
    std::unordered_map<std::uint64_t, int> far_index, near_index;

    static std::uint64_t key(int t, int s)
    {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) << 32) | static_cast<std::uint32_t>(s);
    }
    int find_far(int t, int s) const
    {
        auto it = far_index.find(key(t, s));
        return it == far_index.end() ? -1 : it->second;
    }
    int find_near(int t, int s) const
    {
        auto it = near_index.find(key(t, s));
        return it == near_index.end() ? -1 : it->second;
    }
};

// visits the leaves of the block recursion below (t,s); far(t,s) / near(t,s) callbacks
template <class Far, class Near>
void block_recursion(const ClusterTree& tree, int t, int s, double eta, Far&& far, Near&& near,
                     std::vector<int>* row_count = nullptr)
{
    if (row_count)
        ++(*row_count)[t];
    const Cluster& ct = tree.nodes[t];
    const Cluster& cs = tree.nodes[s];
    if (admissible(ct.box, cs.box, eta)) {
        far(t, s);
        return;
    }
    if (ct.is_leaf() || cs.is_leaf()) {
        near(t, s);
        return;
    }
    for (int a : ct.children)
        for (int b : cs.children)
            block_recursion(tree, a, b, eta, far, near, row_count);
}

inline BlockClusterTree build_block_cluster_tree(const ClusterTree& tree, double eta)
{
    if (!(eta > 0.0))
        throw config_error("build_block_cluster_tree: eta must be positive");
    BlockClusterTree bt;
    bt.eta = eta;
    std::vector<int> rows(tree.nodes.size(), 0);
    block_recursion(
        tree, 0, 0, eta,
        [&](int t, int s) {
            bt.far_index[BlockClusterTree::key(t, s)] = static_cast<int>(bt.farfield.size());
            bt.farfield.push_back({t, s});
        },
        [&](int t, int s) {
            bt.near_index[BlockClusterTree::key(t, s)] = static_cast<int>(bt.nearfield.size());
            bt.nearfield.push_back({t, s});
        },
        &rows);
    bt.sparsity = *std::max_element(rows.begin(), rows.end());
    return bt;
}

//
// nested hierarchy of meshes and trees
//

struct NestedHierarchy {
    std::vector<Mesh> meshes;
    std::vector<ClusterTree> trees;
    std::vector<std::vector<int>> fine_of;   // [l][node of T_l] -> node of T_{l+1}
    std::vector<std::vector<int>> coarse_of; // [l][node of T_l] -> node of T_{l-1} or -1 (l >= 1)

    int levels() const { return static_cast<int>(meshes.size()); }

    // image of a level-l cluster in the level-L tree
    int image(int l, int t, int L) const
    {
        for (int k = l; k < L; ++k)
            t = fine_of[k][t];
        return t;
    }

    // ancestor panel on level l of a panel on level L
    int ancestor_panel(int L, int panel, int l) const
    {
        for (int k = L; k > l; --k)
            panel = meshes[k].parent_of[panel];
        return panel;
    }
};

inline NestedHierarchy build_hierarchy(const std::string& geometry, int L, int n_min)
{
    if (L < 0)
        throw config_error("build_hierarchy: L must be >= 0");
    NestedHierarchy h;
    h.meshes.push_back(build_mesh(geometry, 0));
    h.trees.push_back(build_cluster_tree(h.meshes[0], n_min));
    h.coarse_of.emplace_back(h.trees[0].nodes.size(), -1);
    for (int l = 1; l <= L; ++l) {
        h.meshes.push_back(refine_mesh(h.meshes[l - 1]));
        RefinedTree r = refine_cluster_tree(h.trees[l - 1], h.meshes[l]);
        h.fine_of.push_back(std::move(r.fine_of));
        h.coarse_of.push_back(std::move(r.coarse_of));
        h.trees.push_back(std::move(r.tree));
    }
    return h;
}

} // namespace h2ml

#endif
