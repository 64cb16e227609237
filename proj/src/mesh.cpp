#include "craniossm/mesh.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>

#include "craniossm/error.hpp"

namespace craniossm {

namespace {
std::atomic<bool> g_warnings{true};

constexpr std::array<std::string_view, kLandmarkCount> kLandmarkNames{
    "t_l", "t_r", "se", "ex_l", "ex_r", "sn", "ls", "obs_l", "obs_r", "gn"};

constexpr std::array<std::string_view, kClassCount> kClassNames{
    "control", "coronal", "sagittal", "metopic"};

int find_root(std::vector<int>& parent, int i) {
    while (parent[i] != i) {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    return i;
}
}  // namespace

void warn(const std::string& message) {
    if (g_warnings.load()) std::cerr << "warning: " << message << '\n';
}
void set_warnings_enabled(bool enabled) { g_warnings.store(enabled); }
bool warnings_enabled() { return g_warnings.load(); }

void TriMesh::validate() const {
    const auto p = vertex_count();
    if (!vertices.allFinite()) throw ValidationError("mesh has non-finite vertex coordinates");
    if (has_uv() && uv.rows() != p)
        throw ValidationError("uv row count does not match vertex count");
    for (Eigen::Index f = 0; f < face_count(); ++f) {
        for (int c = 0; c < 3; ++c) {
            const int v = faces(f, c);
            if (v < 0 || v >= p)
                throw ValidationError("face " + std::to_string(f) + " references vertex " +
                                      std::to_string(v) + " out of range");
        }
        if (faces(f, 0) == faces(f, 1) || faces(f, 1) == faces(f, 2) || faces(f, 0) == faces(f, 2))
            throw ValidationError("face " + std::to_string(f) + " repeats a vertex");
    }
}

double face_area(const TriMesh& mesh, Eigen::Index f) {
    const Vec3 a = mesh.vertices.row(mesh.faces(f, 0));
    const Vec3 b = mesh.vertices.row(mesh.faces(f, 1));
    const Vec3 c = mesh.vertices.row(mesh.faces(f, 2));
    return 0.5 * (b - a).cross(c - a).norm();
}

double surface_area(const TriMesh& mesh) {
    double total = 0.0;
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) total += face_area(mesh, f);
    return total;
}

std::vector<std::pair<int, int>> unique_edges(const TriMesh& mesh) {
    std::vector<std::pair<int, int>> edges;
    edges.reserve(static_cast<size_t>(mesh.face_count()) * 3);
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        for (int c = 0; c < 3; ++c) {
            const int a = mesh.faces(f, c);
            const int b = mesh.faces(f, (c + 1) % 3);
            edges.emplace_back(std::min(a, b), std::max(a, b));
        }
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    return edges;
}

std::vector<bool> boundary_vertices(const TriMesh& mesh) {
    std::map<std::pair<int, int>, int> use;
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        for (int c = 0; c < 3; ++c) {
            const int a = mesh.faces(f, c);
            const int b = mesh.faces(f, (c + 1) % 3);
            ++use[{std::min(a, b), std::max(a, b)}];
        }
    }
    std::vector<bool> boundary(static_cast<size_t>(mesh.vertex_count()), false);
    for (const auto& [edge, count] : use) {
        if (count == 1) {
            boundary[edge.first] = true;
            boundary[edge.second] = true;
        }
    }
    return boundary;
}

TriMesh flip_winding(const TriMesh& mesh) {
    TriMesh out = mesh;
    out.faces.col(1).swap(out.faces.col(2));
    return out;
}

int connected_components(const TriMesh& mesh) {
    const int p = static_cast<int>(mesh.vertex_count());
    std::vector<int> parent(p);
    std::iota(parent.begin(), parent.end(), 0);
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        for (int c = 1; c < 3; ++c) {
            const int a = find_root(parent, mesh.faces(f, 0));
            const int b = find_root(parent, mesh.faces(f, c));
            if (a != b) parent[std::max(a, b)] = std::min(a, b);
        }
    }
    int count = 0;
    for (int i = 0; i < p; ++i) count += (find_root(parent, i) == i);
    return count;
}

Eigen::VectorXd flatten(const PointSet& points) {
    Eigen::VectorXd flat(points.rows() * 3);
    for (Eigen::Index i = 0; i < points.rows(); ++i) flat.segment<3>(3 * i) = points.row(i).transpose();
    return flat;
}

PointSet unflatten(const Eigen::VectorXd& flat) {
    if (flat.size() % 3 != 0) throw ValidationError("flattened point set length is not a multiple of 3");
    PointSet points(flat.size() / 3, 3);
    for (Eigen::Index i = 0; i < points.rows(); ++i) points.row(i) = flat.segment<3>(3 * i).transpose();
    return points;
}

std::string_view landmark_name(Landmark lm) { return kLandmarkNames[static_cast<int>(lm)]; }

std::optional<Landmark> landmark_from_name(std::string_view name) {
    for (int i = 0; i < kLandmarkCount; ++i)
        if (kLandmarkNames[i] == name) return static_cast<Landmark>(i);
    return std::nullopt;
}

Eigen::Matrix<double, kLandmarkCount, 3> LandmarkSet::as_matrix() const {
    Eigen::Matrix<double, kLandmarkCount, 3> m;
    for (int i = 0; i < kLandmarkCount; ++i) m.row(i) = points_[i].transpose();
    return m;
}

LandmarkSet LandmarkSet::from_matrix(const Eigen::Ref<const Eigen::MatrixX3d>& m) {
    if (m.rows() != kLandmarkCount) throw ValidationError("landmark matrix must have 10 rows");
    LandmarkSet set;
    for (int i = 0; i < kLandmarkCount; ++i) set.points_[i] = m.row(i).transpose();
    return set;
}

bool LandmarkSet::all_finite() const {
    return std::all_of(points_.begin(), points_.end(), [](const Vec3& p) { return p.allFinite(); });
}

LandmarkIndices landmark_vertex_indices(const TriMesh& mesh, const LandmarkSet& lms) {
    if (mesh.vertex_count() == 0) throw ValidationError("cannot map landmarks onto an empty mesh");
    LandmarkIndices idx{};
    for (int l = 0; l < kLandmarkCount; ++l) {
        double best = std::numeric_limits<double>::infinity();
        for (Eigen::Index v = 0; v < mesh.vertex_count(); ++v) {
            const double d = (mesh.vertices.row(v).transpose() - lms.at(l)).squaredNorm();
            if (d < best) {
                best = d;
                idx[l] = static_cast<int>(v);
            }
        }
    }
    return idx;
}

std::string_view class_name(DiagnosisClass c) { return kClassNames[static_cast<int>(c)]; }

DiagnosisClass class_from_name(std::string_view name) {
    std::string lower(name);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
    for (int i = 0; i < kClassCount; ++i)
        if (kClassNames[i] == lower) return static_cast<DiagnosisClass>(i);
    throw ValidationError("unknown diagnosis class '" + std::string(name) + "'");
}

}  // namespace craniossm
