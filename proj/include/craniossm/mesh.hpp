#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace craniossm {

using Vec3 = Eigen::Vector3d;
using PointSet = Eigen::MatrixX3d;  // p x 3, millimeters
using FaceArray = Eigen::Matrix<int, Eigen::Dynamic, 3>;

/// Triangle surface. Faces are counter-clockwise when seen from outside.
struct TriMesh {
    PointSet vertices;
    FaceArray faces;
    Eigen::MatrixX2d uv;  // empty, or one row per vertex

    Eigen::Index vertex_count() const { return vertices.rows(); }
    Eigen::Index face_count() const { return faces.rows(); }
    bool has_uv() const { return uv.rows() > 0; }

    /// Throws ValidationError on out-of-range indices, repeated corners or
    /// non-finite coordinates.
    void validate() const;
};

double face_area(const TriMesh& mesh, Eigen::Index face);
double surface_area(const TriMesh& mesh);

/// Undirected edges (i < j), sorted lexicographically.
std::vector<std::pair<int, int>> unique_edges(const TriMesh& mesh);

/// Per-vertex flag: vertex touches an edge used by exactly one face.
std::vector<bool> boundary_vertices(const TriMesh& mesh);

/// Mesh with every face's winding reversed.
TriMesh flip_winding(const TriMesh& mesh);

/// Number of connected components of the vertex graph (isolated vertices count).
int connected_components(const TriMesh& mesh);

// Flattened 3p layout: [x0 y0 z0 x1 y1 z1 ...].
Eigen::VectorXd flatten(const PointSet& points);
PointSet unflatten(const Eigen::VectorXd& flat);

// ---------------------------------------------------------------------------
// Landmarks

enum class Landmark : int { TL = 0, TR, SE, EXL, EXR, SN, LS, OBSL, OBSR, GN };
inline constexpr int kLandmarkCount = 10;

std::string_view landmark_name(Landmark lm);
std::optional<Landmark> landmark_from_name(std::string_view name);

/// Left/right pairs that swap names under mirroring.
inline constexpr std::array<std::pair<Landmark, Landmark>, 3> kPairedLandmarks{{
    {Landmark::TL, Landmark::TR},
    {Landmark::EXL, Landmark::EXR},
    {Landmark::OBSL, Landmark::OBSR},
}};
inline constexpr std::array<Landmark, 4> kMidlineLandmarks{
    Landmark::SE, Landmark::SN, Landmark::LS, Landmark::GN};

/// All ten cranial/facial landmarks. Complete by construction.
class LandmarkSet {
public:
    LandmarkSet() { points_.fill(Vec3::Zero()); }

    const Vec3& operator[](Landmark lm) const { return points_[static_cast<int>(lm)]; }
    Vec3& operator[](Landmark lm) { return points_[static_cast<int>(lm)]; }
    const Vec3& at(int i) const { return points_.at(i); }
    Vec3& at(int i) { return points_.at(i); }

    /// 10 x 3 in canonical order.
    Eigen::Matrix<double, kLandmarkCount, 3> as_matrix() const;
    static LandmarkSet from_matrix(const Eigen::Ref<const Eigen::MatrixX3d>& m);

    bool all_finite() const;

private:
    std::array<Vec3, kLandmarkCount> points_;
};

using LandmarkIndices = std::array<int, kLandmarkCount>;

/// Nearest mesh vertex for each landmark (ties: lowest index).
LandmarkIndices landmark_vertex_indices(const TriMesh& mesh, const LandmarkSet& lms);

// ---------------------------------------------------------------------------
// Scans

enum class DiagnosisClass : int { Control = 0, Coronal = 1, Sagittal = 2, Metopic = 3 };
inline constexpr int kClassCount = 4;
inline constexpr std::array<DiagnosisClass, kClassCount> kAllClasses{
    DiagnosisClass::Control, DiagnosisClass::Coronal, DiagnosisClass::Sagittal,
    DiagnosisClass::Metopic};

std::string_view class_name(DiagnosisClass c);
DiagnosisClass class_from_name(std::string_view name);  // throws ValidationError

struct Scan {
    TriMesh mesh;
    LandmarkSet landmarks;
    DiagnosisClass diagnosis = DiagnosisClass::Control;
    int age_days = 0;
    std::string subject_id;
    bool mirrored = false;
    std::optional<std::string> twin_id;
};

}  // namespace craniossm
