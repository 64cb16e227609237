#pragma once

#include <vector>

#include <Eigen/Core>

#include "craniossm/mesh.hpp"

namespace craniossm {

/// x -> scale * R x + t
struct SimilarityTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Vec3 translation = Vec3::Zero();
    double scale = 1.0;

    Vec3 apply(const Vec3& x) const { return scale * (rotation * x) + translation; }
    PointSet apply(const PointSet& points) const;
    SimilarityTransform inverse() const;
    /// (this * other)(x) == this->apply(other.apply(x))
    SimilarityTransform operator*(const SimilarityTransform& other) const;
};

/// x -> R x + t
struct RigidTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
    PointSet apply(const PointSet& points) const;
};

/// Least-squares similarity mapping src onto dst (Umeyama). Throws on
/// collinear or otherwise degenerate configurations.
SimilarityTransform procrustes_similarity(const PointSet& src, const PointSet& dst);
SimilarityTransform procrustes_similarity(const LandmarkSet& src, const LandmarkSet& dst);

/// Least-squares rigid transform mapping src onto dst (Kabsch, reflection guarded).
RigidTransform kabsch(const PointSet& src, const PointSet& dst);

TriMesh apply_similarity(const SimilarityTransform& t, const TriMesh& mesh);
LandmarkSet apply_similarity(const SimilarityTransform& t, const LandmarkSet& lms);

struct Plane {
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::UnitX();  // unit
};

/// Total-least-squares midsagittal plane through the midpoints of the paired
/// landmarks and the midline landmarks; normal oriented along t_l -> t_r.
Plane midsagittal_plane(const LandmarkSet& lms);

/// Reflects a scan across its midsagittal plane: winding flipped, paired
/// landmark names swapped, mirrored flag toggled and twin link set.
Scan mirror_scan(const Scan& scan);

struct GpaOptions {
    double tol = 1e-6;  // mean per-vertex movement of the mean shape, mm
    int max_iter = 50;
};

struct GpaResult {
    std::vector<PointSet> aligned;
    PointSet mean;
    std::vector<RigidTransform> transforms;  // aligned[i] = transforms[i].apply(shapes[i])
    int iterations = 0;
    bool converged = false;
    std::vector<double> objective;  // sum_i ||x_i - mean||^2 after each iteration
};

/// Rigid generalized Procrustes analysis (rotation + translation only; scale kept).
GpaResult gpa(const std::vector<PointSet>& shapes, const GpaOptions& options = {});

}  // namespace craniossm
