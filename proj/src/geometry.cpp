#include "craniossm/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "craniossm/error.hpp"

namespace craniossm {

namespace {

using Triplet = Eigen::Triplet<double>;

struct CellKey {
    std::int64_t x, y, z;
    bool operator==(const CellKey& o) const { return x == o.x && y == o.y && z == o.z; }
};
struct CellHash {
    size_t operator()(const CellKey& k) const {
        std::uint64_t h = 1469598103934665603ull;
        for (std::int64_t v : {k.x, k.y, k.z}) {
            h ^= static_cast<std::uint64_t>(v);
            h *= 1099511628211ull;
        }
        return static_cast<size_t>(h);
    }
};

// Representative index for every vertex; representatives are the lowest index
// of their merge group and are pairwise farther apart than tol.
std::vector<int> merge_map(const PointSet& v, double tol) {
    const auto p = static_cast<int>(v.rows());
    std::vector<int> rep(p);
    if (tol <= 0.0) {
        std::map<std::array<double, 3>, int> exact;
        for (int i = 0; i < p; ++i) {
            const auto [it, inserted] = exact.try_emplace({v(i, 0), v(i, 1), v(i, 2)}, i);
            rep[i] = it->second;
        }
        return rep;
    }
    std::unordered_map<CellKey, std::vector<int>, CellHash> grid;
    const double tol2 = tol * tol;
    for (int i = 0; i < p; ++i) {
        const CellKey key{static_cast<std::int64_t>(std::floor(v(i, 0) / tol)),
                          static_cast<std::int64_t>(std::floor(v(i, 1) / tol)),
                          static_cast<std::int64_t>(std::floor(v(i, 2) / tol))};
        int best = -1;
        for (std::int64_t dx = -1; dx <= 1; ++dx)
            for (std::int64_t dy = -1; dy <= 1; ++dy)
                for (std::int64_t dz = -1; dz <= 1; ++dz) {
                    const auto it = grid.find({key.x + dx, key.y + dy, key.z + dz});
                    if (it == grid.end()) continue;
                    for (int j : it->second)
                        if ((v.row(i) - v.row(j)).squaredNorm() <= tol2 && (best < 0 || j < best)) best = j;
                }
        if (best >= 0) {
            rep[i] = best;
        } else {
            rep[i] = i;
            grid[key].push_back(i);
        }
    }
    return rep;
}

double point_segment_distance2(const Vec3& q, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0.0 ? (q - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (a + t * ab - q).squaredNorm();
}

bool nearly_equal(double a, double b) {
    return std::abs(a - b) <= 1e-12 * std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace

TriMesh clean(const TriMesh& mesh, const CleanOptions& options) {
    const std::vector<int> rep = merge_map(mesh.vertices, options.dedup_tol);

    Eigen::Vector3d lo = mesh.vertices.colwise().minCoeff();
    Eigen::Vector3d hi = mesh.vertices.colwise().maxCoeff();
    const double area_floor = mesh.vertex_count() > 0 ? 1e-14 * (hi - lo).squaredNorm() : 0.0;

    std::vector<std::array<int, 3>> kept;
    kept.reserve(static_cast<size_t>(mesh.face_count()));
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        const std::array<int, 3> t{rep[mesh.faces(f, 0)], rep[mesh.faces(f, 1)], rep[mesh.faces(f, 2)]};
        if (t[0] == t[1] || t[1] == t[2] || t[0] == t[2]) continue;
        const Vec3 a = mesh.vertices.row(t[0]);
        const Vec3 b = mesh.vertices.row(t[1]);
        const Vec3 c = mesh.vertices.row(t[2]);
        if (0.5 * (b - a).cross(c - a).norm() <= area_floor) continue;
        kept.push_back(t);
    }

    // Connected components over the surviving faces.
    const auto p = static_cast<int>(mesh.vertex_count());
    std::vector<int> parent(p);
    std::iota(parent.begin(), parent.end(), 0);
    auto root = [&](int i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    };
    for (const auto& t : kept)
        for (int c = 1; c < 3; ++c) {
            const int a = root(t[0]);
            const int b = root(t[c]);
            if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
    std::unordered_map<int, int> faces_per_component;
    for (const auto& t : kept) ++faces_per_component[root(t[0])];
    int largest = 0;
    for (const auto& [r, n] : faces_per_component) largest = std::max(largest, n);
    const double min_faces = options.min_component_fraction * largest;

    std::vector<std::array<int, 3>> final_faces;
    for (const auto& t : kept)
        if (faces_per_component[root(t[0])] >= min_faces) final_faces.push_back(t);
    if (final_faces.empty()) throw ValidationError("clean removed every face");

    std::vector<int> new_index(p, -1);
    for (const auto& t : final_faces)
        for (int v : t) new_index[v] = 0;
    int next = 0;
    for (int i = 0; i < p; ++i)
        if (new_index[i] == 0) new_index[i] = next++;

    TriMesh out;
    out.vertices.resize(next, 3);
    if (mesh.has_uv()) out.uv.resize(next, 2);
    for (int i = 0; i < p; ++i) {
        if (new_index[i] < 0) continue;
        out.vertices.row(new_index[i]) = mesh.vertices.row(i);
        if (mesh.has_uv()) out.uv.row(new_index[i]) = mesh.uv.row(i);
    }
    out.faces.resize(static_cast<Eigen::Index>(final_faces.size()), 3);
    for (size_t f = 0; f < final_faces.size(); ++f)
        for (int c = 0; c < 3; ++c) out.faces(static_cast<Eigen::Index>(f), c) = new_index[final_faces[f][c]];
    return out;
}

VertexNormals vertex_normals(const TriMesh& mesh) {
    VertexNormals out;
    out.normals = PointSet::Zero(mesh.vertex_count(), 3);
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        const Vec3 a = mesh.vertices.row(mesh.faces(f, 0));
        const Vec3 b = mesh.vertices.row(mesh.faces(f, 1));
        const Vec3 c = mesh.vertices.row(mesh.faces(f, 2));
        const Vec3 n = (b - a).cross(c - a);  // |n| = 2 * area
        for (int k = 0; k < 3; ++k) out.normals.row(mesh.faces(f, k)) += n.transpose();
    }
    out.valid.assign(static_cast<size_t>(mesh.vertex_count()), false);
    for (Eigen::Index v = 0; v < mesh.vertex_count(); ++v) {
        const double len = out.normals.row(v).norm();
        if (len > 0.0 && std::isfinite(len)) {
            out.normals.row(v) /= len;
            out.valid[v] = true;
        } else {
            out.normals.row(v).setZero();
        }
    }
    return out;
}

PointSet face_normals(const TriMesh& mesh) {
    PointSet n(mesh.face_count(), 3);
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        const Vec3 a = mesh.vertices.row(mesh.faces(f, 0));
        const Vec3 b = mesh.vertices.row(mesh.faces(f, 1));
        const Vec3 c = mesh.vertices.row(mesh.faces(f, 2));
        const Vec3 cr = (b - a).cross(c - a);
        const double len = cr.norm();
        n.row(f) = (len > 0.0 ? Vec3(cr / len) : Vec3::Zero()).transpose();
    }
    return n;
}

double MassMatrix::diagonal_sum() const { return matrix.diagonal().sum(); }

double MassMatrix::upper_offdiagonal_sum() const {
    double s = 0.0;
    for (int k = 0; k < matrix.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(matrix, k); it; ++it)
            if (it.row() < it.col()) s += it.value();
    return s;
}

MassMatrix mass_matrix(const TriMesh& mesh) {
    const auto p = mesh.vertex_count();
    std::vector<Triplet> trip;
    trip.reserve(static_cast<size_t>(mesh.face_count()) * 3);
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        const double area = face_area(mesh, f);
        if (!(area > 0.0)) throw ValidationError("degenerate face " + std::to_string(f) + " in mass matrix");
        std::array<int, 3> idx{mesh.faces(f, 0), mesh.faces(f, 1), mesh.faces(f, 2)};
        std::array<Vec3, 3> pts;
        for (int k = 0; k < 3; ++k) pts[k] = mesh.vertices.row(idx[k]);
        const Vec3 centroid = (pts[0] + pts[1] + pts[2]) / 3.0;

        int best_v = -1;
        double best_vd = 0.0;
        for (int k = 0; k < 3; ++k) {
            const double d = (pts[k] - centroid).squaredNorm();
            if (best_v < 0 || (d < best_vd && !nearly_equal(d, best_vd)) ||
                (nearly_equal(d, best_vd) && idx[k] < best_v)) {
                best_v = idx[k];
                best_vd = d;
            }
        }

        std::pair<int, int> best_e{-1, -1};
        double best_ed = 0.0;
        for (int k = 0; k < 3; ++k) {
            const int a = idx[k];
            const int b = idx[(k + 1) % 3];
            const double d = point_segment_distance2(centroid, pts[k], pts[(k + 1) % 3]);
            const std::pair<int, int> e{std::min(a, b), std::max(a, b)};
            if (best_e.first < 0 || (d < best_ed && !nearly_equal(d, best_ed)) ||
                (nearly_equal(d, best_ed) && e < best_e)) {
                best_e = e;
                best_ed = d;
            }
        }
        trip.emplace_back(best_v, best_v, area);
        trip.emplace_back(best_e.first, best_e.second, area);
        trip.emplace_back(best_e.second, best_e.first, area);
    }
    MassMatrix m;
    m.matrix.resize(p, p);
    m.matrix.setFromTriplets(trip.begin(), trip.end());
    return m;
}

SparseMatrix expand_mass_matrix(const MassMatrix& mass) {
    const auto p = mass.size();
    std::vector<Triplet> trip;
    trip.reserve(static_cast<size_t>(mass.matrix.nonZeros()) * 3);
    for (int k = 0; k < mass.matrix.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(mass.matrix, k); it; ++it)
            for (int a = 0; a < 3; ++a)
                trip.emplace_back(3 * it.row() + a, 3 * it.col() + a, it.value());
    SparseMatrix m3(3 * p, 3 * p);
    m3.setFromTriplets(trip.begin(), trip.end());
    return m3;
}

Eigen::VectorXd apply_expanded_mass(const MassMatrix& mass, const Eigen::VectorXd& flat) {
    return flatten(PointSet(mass.matrix * unflatten(flat)));
}

Eigen::MatrixXd apply_expanded_mass(const MassMatrix& mass, const Eigen::MatrixXd& flat_columns) {
    const auto p = mass.size();
    if (flat_columns.rows() != 3 * p) throw ValidationError("mass matrix / data size mismatch");
    // Row 3i+a of column c is coordinate a of vertex i; view each column as p x 3 row-major.
    Eigen::MatrixXd out(flat_columns.rows(), flat_columns.cols());
    for (Eigen::Index c = 0; c < flat_columns.cols(); ++c) {
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>> in(
            flat_columns.col(c).data(), p, 3);
        Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>> res(out.col(c).data(), p, 3);
        res = mass.matrix * in;
    }
    return out;
}

MassMatrix restrict_mass_matrix(const MassMatrix& mass, const std::vector<int>& vertices) {
    std::vector<int> position(static_cast<size_t>(mass.size()), -1);
    for (size_t i = 0; i < vertices.size(); ++i) {
        if (vertices[i] < 0 || vertices[i] >= mass.size())
            throw ValidationError("mask vertex out of range");
        position[vertices[i]] = static_cast<int>(i);
    }
    std::vector<Triplet> trip;
    for (int k = 0; k < mass.matrix.outerSize(); ++k)
        for (SparseMatrix::InnerIterator it(mass.matrix, k); it; ++it) {
            const int r = position[it.row()];
            const int c = position[it.col()];
            if (r >= 0 && c >= 0) trip.emplace_back(r, c, it.value());
        }
    MassMatrix out;
    const auto n = static_cast<Eigen::Index>(vertices.size());
    out.matrix.resize(n, n);
    out.matrix.setFromTriplets(trip.begin(), trip.end());
    return out;
}

SparseMatrix cotangent_laplacian(const TriMesh& mesh) {
    constexpr double kClamp = 1e6;
    const auto p = mesh.vertex_count();
    std::vector<Triplet> trip;
    trip.reserve(static_cast<size_t>(mesh.face_count()) * 12);
    bool clamped = false;
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        for (int k = 0; k < 3; ++k) {
            const int o = mesh.faces(f, k);
            const int i = mesh.faces(f, (k + 1) % 3);
            const int j = mesh.faces(f, (k + 2) % 3);
            const Vec3 e1 = mesh.vertices.row(i) - mesh.vertices.row(o);
            const Vec3 e2 = mesh.vertices.row(j) - mesh.vertices.row(o);
            const double cross = e1.cross(e2).norm();
            const double dot = e1.dot(e2);
            double cot = cross > 0.0 ? dot / cross : (dot >= 0.0 ? kClamp : -kClamp);
            if (std::abs(cot) > kClamp || cross == 0.0) {
                cot = std::clamp(cot, -kClamp, kClamp);
                clamped = true;
            }
            const double w = 0.5 * cot;
            trip.emplace_back(i, j, -w);
            trip.emplace_back(j, i, -w);
            trip.emplace_back(i, i, w);
            trip.emplace_back(j, j, w);
        }
    }
    if (clamped) warn("cotangent Laplacian: degenerate angles clamped to +-1e6");
    SparseMatrix L(p, p);
    L.setFromTriplets(trip.begin(), trip.end());
    return L;
}

SparseMatrix incidence_matrix(const TriMesh& mesh) {
    const auto edges = unique_edges(mesh);
    std::vector<Triplet> trip;
    trip.reserve(edges.size() * 2);
    for (size_t r = 0; r < edges.size(); ++r) {
        trip.emplace_back(static_cast<int>(r), edges[r].first, -1.0);
        trip.emplace_back(static_cast<int>(r), edges[r].second, 1.0);
    }
    SparseMatrix m(static_cast<Eigen::Index>(edges.size()), mesh.vertex_count());
    m.setFromTriplets(trip.begin(), trip.end());
    return m;
}

}  // namespace craniossm
