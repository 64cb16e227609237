#include "craniossm/align.hpp"

#include <cmath>

#include <Eigen/SVD>

#include "craniossm/error.hpp"

namespace craniossm {

namespace {

struct UmeyamaResult {
    Eigen::Matrix3d rotation;
    Vec3 translation;
    double scale;
};

UmeyamaResult umeyama(const PointSet& src, const PointSet& dst, bool with_scale) {
    if (src.rows() != dst.rows()) throw ValidationError("point sets differ in size");
    if (src.rows() < 3) throw ValidationError("alignment needs at least 3 points");
    const Vec3 mu_src = src.colwise().mean();
    const Vec3 mu_dst = dst.colwise().mean();
    const PointSet a = src.rowwise() - mu_src.transpose();
    const PointSet b = dst.rowwise() - mu_dst.transpose();

    // Degenerate when the source spread is (numerically) one-dimensional.
    Eigen::JacobiSVD<Eigen::MatrixXd> spread(a);
    const auto sv = spread.singularValues();
    if (!(sv(0) > 0.0) || sv(1) <= 1e-10 * sv(0))
        throw NumericalError("degenerate point configuration (collinear or coincident points)");

    const Eigen::Matrix3d cov = b.transpose() * a;  // sum dst_i src_i^T
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Vector3d s = Eigen::Vector3d::Ones();
    if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) s(2) = -1.0;
    UmeyamaResult r;
    r.rotation = svd.matrixU() * s.asDiagonal() * svd.matrixV().transpose();
    r.scale = 1.0;
    if (with_scale) {
        const double var_src = a.squaredNorm();
        r.scale = svd.singularValues().dot(s) / var_src;
    }
    r.translation = mu_dst - r.scale * r.rotation * mu_src;
    return r;
}

PointSet transform_rows(const Eigen::Matrix3d& linear, const Vec3& t, const PointSet& points) {
    PointSet out = points * linear.transpose();
    out.rowwise() += t.transpose();
    return out;
}

}  // namespace

PointSet SimilarityTransform::apply(const PointSet& points) const {
    return transform_rows(scale * rotation, translation, points);
}

SimilarityTransform SimilarityTransform::inverse() const {
    SimilarityTransform inv;
    inv.rotation = rotation.transpose();
    inv.scale = 1.0 / scale;
    inv.translation = -inv.scale * (inv.rotation * translation);
    return inv;
}

SimilarityTransform SimilarityTransform::operator*(const SimilarityTransform& other) const {
    SimilarityTransform out;
    out.rotation = rotation * other.rotation;
    out.scale = scale * other.scale;
    out.translation = scale * (rotation * other.translation) + translation;
    return out;
}

PointSet RigidTransform::apply(const PointSet& points) const { return transform_rows(rotation, translation, points); }

SimilarityTransform procrustes_similarity(const PointSet& src, const PointSet& dst) {
    const auto r = umeyama(src, dst, true);
    return {r.rotation, r.translation, r.scale};
}

SimilarityTransform procrustes_similarity(const LandmarkSet& src, const LandmarkSet& dst) {
    return procrustes_similarity(PointSet(src.as_matrix()), PointSet(dst.as_matrix()));
}

RigidTransform kabsch(const PointSet& src, const PointSet& dst) {
    const auto r = umeyama(src, dst, false);
    return {r.rotation, r.translation};
}

TriMesh apply_similarity(const SimilarityTransform& t, const TriMesh& mesh) {
    TriMesh out = mesh;
    if (t.scale == 1.0 && t.rotation == Eigen::Matrix3d::Identity() && t.translation.isZero()) return out;
    out.vertices = t.apply(mesh.vertices);
    return out;
}

LandmarkSet apply_similarity(const SimilarityTransform& t, const LandmarkSet& lms) {
    return LandmarkSet::from_matrix(t.apply(PointSet(lms.as_matrix())));
}

Plane midsagittal_plane(const LandmarkSet& lms) {
    Eigen::Matrix<double, 7, 3> pts;
    int row = 0;
    for (const auto& [l, r] : kPairedLandmarks) pts.row(row++) = (0.5 * (lms[l] + lms[r])).transpose();
    for (Landmark m : kMidlineLandmarks) pts.row(row++) = lms[m].transpose();
    Plane plane;
    plane.point = pts.colwise().mean().transpose();
    const Eigen::Matrix<double, 7, 3> centered = pts.rowwise() - plane.point.transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeFullV);
    const auto sv = svd.singularValues();
    if (!(sv(0) > 0.0) || sv(1) <= 1e-9 * sv(0))
        throw NumericalError("midsagittal plane fit is rank deficient");
    plane.normal = svd.matrixV().col(2).normalized();
    if (plane.normal.dot(lms[Landmark::TR] - lms[Landmark::TL]) < 0.0) plane.normal = -plane.normal;
    return plane;
}

Scan mirror_scan(const Scan& scan) {
    const Plane plane = midsagittal_plane(scan.landmarks);
    const Vec3 n = plane.normal;
    auto reflect = [&](const Vec3& v) -> Vec3 { return v - 2.0 * (v - plane.point).dot(n) * n; };

    Scan out = scan;
    for (Eigen::Index i = 0; i < out.mesh.vertex_count(); ++i)
        out.mesh.vertices.row(i) = reflect(scan.mesh.vertices.row(i).transpose()).transpose();
    out.mesh = flip_winding(out.mesh);
    for (int i = 0; i < kLandmarkCount; ++i) out.landmarks.at(i) = reflect(scan.landmarks.at(i));
    for (const auto& [l, r] : kPairedLandmarks) std::swap(out.landmarks[l], out.landmarks[r]);

    out.mirrored = !scan.mirrored;
    out.twin_id = scan.subject_id;
    out.subject_id = scan.mirrored && scan.twin_id ? *scan.twin_id : scan.subject_id + "_mirror";
    return out;
}

GpaResult gpa(const std::vector<PointSet>& shapes, const GpaOptions& options) {
    if (shapes.size() < 2) throw ValidationError("GPA needs at least two shapes");
    const auto p = shapes.front().rows();
    for (const auto& s : shapes) {
        if (s.rows() != p) throw ValidationError("GPA shapes differ in vertex count");
        if (!s.allFinite()) throw ValidationError("GPA shape has non-finite coordinates");
    }
    const size_t n = shapes.size();

    auto centered = [](const PointSet& s) -> PointSet { return s.rowwise() - s.colwise().mean(); };

    PointSet mean = centered(shapes.front());
    // An input that is already a GPA fixed point keeps its own mean as reference.
    {
        PointSet avg = PointSet::Zero(p, 3);
        for (const auto& s : shapes) avg += centered(s);
        avg /= static_cast<double>(n);
        bool fixed_point = true;
        for (const auto& s : shapes) {
            const auto t = kabsch(s, avg);
            if ((t.rotation - Eigen::Matrix3d::Identity()).norm() > 1e-9) {
                fixed_point = false;
                break;
            }
        }
        if (fixed_point) mean = avg;
    }

    GpaResult result;
    result.aligned.resize(n);
    result.transforms.resize(n);
    for (int iter = 1; iter <= options.max_iter; ++iter) {
        for (size_t i = 0; i < n; ++i) {
            result.transforms[i] = kabsch(shapes[i], mean);
            result.aligned[i] = result.transforms[i].apply(shapes[i]);
        }
        PointSet next = PointSet::Zero(p, 3);
        for (const auto& a : result.aligned) next += a;
        next /= static_cast<double>(n);
        // Remove round-off drift of the centroid.
        next = centered(next);

        double objective = 0.0;
        for (const auto& a : result.aligned) objective += (a - next).squaredNorm();
        result.objective.push_back(objective);

        const double movement = (next - mean).rowwise().norm().mean();
        mean = next;
        result.iterations = iter;
        if (movement < options.tol) {
            result.converged = true;
            break;
        }
    }
    if (!result.converged) warn("GPA did not converge within " + std::to_string(options.max_iter) + " iterations");
    result.mean = mean;
    return result;
}

}  // namespace craniossm
