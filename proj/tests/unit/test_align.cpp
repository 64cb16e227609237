#include <random>

#include "doctest.h"
#include "support.hpp"

#include "craniossm/align.hpp"
#include "craniossm/error.hpp"
#include "craniossm/geometry.hpp"
#include "craniossm/synth.hpp"

using namespace craniossm;

namespace {

LandmarkSet random_landmarks(std::mt19937_64& rng) {
    return LandmarkSet::from_matrix(50.0 * testing::random_matrix(rng, kLandmarkCount, 3));
}

double centroid_size(const PointSet& p) {
    return std::sqrt((p.rowwise() - p.colwise().mean()).squaredNorm());
}

// Signed left/right imbalance of the frontal surface: area-weighted mean x of
// faces whose centroid lies in the anterior half.
double frontal_asymmetry(const TriMesh& m) {
    double sx = 0.0, sa = 0.0;
    for (Eigen::Index f = 0; f < m.face_count(); ++f) {
        const Vec3 c = (m.vertices.row(m.faces(f, 0)) + m.vertices.row(m.faces(f, 1)) + m.vertices.row(m.faces(f, 2))) / 3.0;
        if (c.y() <= 0.0) continue;
        const double a = face_area(m, f);
        sx += a * c.x();
        sa += a;
    }
    return sx / sa;
}

}  // namespace

TEST_SUITE("align") {

TEST_CASE("similarity of identical sets is the identity") {
    std::mt19937_64 rng(1);
    const LandmarkSet a = random_landmarks(rng);
    const SimilarityTransform t = procrustes_similarity(a, a);
    CHECK((t.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-12);
    CHECK(t.translation.norm() < 1e-10);
    CHECK(t.scale == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("constructed scale and translation are recovered") {
    std::mt19937_64 rng(2);
    const PointSet src = testing::random_matrix(rng, 10, 3);
    const PointSet dst = (2.0 * src).rowwise() + Eigen::RowVector3d(1, 0, 0);
    const SimilarityTransform t = procrustes_similarity(src, dst);
    CHECK(t.scale == doctest::Approx(2.0).epsilon(1e-12));
    CHECK((t.translation - Vec3(1, 0, 0)).norm() < 1e-12);
    CHECK((t.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-12);
}

TEST_CASE("random rotations are recovered") {
    std::mt19937_64 rng(3);
    for (int k = 0; k < 20; ++k) {
        const PointSet src = testing::random_matrix(rng, 10, 3);
        const Eigen::Matrix3d R = testing::random_rotation(rng);
        const PointSet dst = src * R.transpose();
        const SimilarityTransform t = procrustes_similarity(src, dst);
        REQUIRE((t.rotation - R).norm() < 1e-9);
        REQUIRE(std::abs(t.rotation.determinant() - 1.0) < 1e-12);
    }
}

TEST_CASE("reflection is guarded") {
    std::mt19937_64 rng(4);
    const PointSet src = testing::random_matrix(rng, 10, 3);
    PointSet dst = src;
    dst.col(0) *= -1.0;
    const SimilarityTransform t = procrustes_similarity(src, dst);
    CHECK(t.rotation.determinant() == doctest::Approx(1.0));
    CHECK(((t.rotation.transpose() * t.rotation) - Eigen::Matrix3d::Identity()).norm() < 1e-10);
}

TEST_CASE("procrustes composes consistently with a pre-transform") {
    std::mt19937_64 rng(5);
    const PointSet src = testing::random_matrix(rng, 10, 3);
    const PointSet dst = testing::random_matrix(rng, 10, 3);
    SimilarityTransform S;
    S.rotation = testing::random_rotation(rng);
    S.translation = Vec3(3, -2, 1);
    S.scale = 1.7;
    const SimilarityTransform T = procrustes_similarity(src, dst);
    const SimilarityTransform T2 = procrustes_similarity(S.apply(src), dst);
    const SimilarityTransform composed = T2 * S;
    CHECK((composed.apply(src) - T.apply(src)).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("collinear landmarks are rejected") {
    PointSet line(5, 3);
    for (int i = 0; i < 5; ++i) line.row(i) << i, 2.0 * i, 0;
    CHECK_THROWS_AS(procrustes_similarity(line, line), NumericalError);
    CHECK_THROWS_AS(procrustes_similarity(PointSet(2, 3), PointSet(2, 3)), ValidationError);
}

TEST_CASE("applying a similarity and its inverse") {
    PhantomSpec spec;
    spec.resolution = 5;
    const TriMesh mesh = generate_phantom(spec).mesh;
    const SimilarityTransform id;
    CHECK(apply_similarity(id, mesh).vertices == mesh.vertices);

    std::mt19937_64 rng(6);
    SimilarityTransform t;
    t.rotation = testing::random_rotation(rng);
    t.translation = Vec3(10, 20, -5);
    t.scale = 1.3;
    const TriMesh moved = apply_similarity(t, mesh);
    CHECK(moved.faces == mesh.faces);
    CHECK((apply_similarity(t.inverse(), moved).vertices - mesh.vertices).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(surface_area(moved) == doctest::Approx(1.69 * surface_area(mesh)).epsilon(1e-12));
}

TEST_CASE("mirroring is an involution and preserves area") {
    PhantomSpec spec;
    spec.resolution = 6;
    spec.diagnosis = DiagnosisClass::Coronal;
    spec.severity = 0.8;
    spec.seed = 21;
    Scan s = generate_phantom(spec);
    s.subject_id = "x";
    const Scan m = mirror_scan(s);
    CHECK(m.mirrored);
    CHECK(m.twin_id == std::optional<std::string>("x"));
    CHECK(m.subject_id != s.subject_id);
    CHECK(surface_area(m.mesh) == doctest::Approx(surface_area(s.mesh)).epsilon(1e-9));
    const Scan mm = mirror_scan(m);
    CHECK_FALSE(mm.mirrored);
    CHECK((mm.mesh.vertices - s.mesh.vertices).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(mm.mesh.faces == s.mesh.faces);
    CHECK((mm.landmarks.as_matrix() - s.landmarks.as_matrix()).cwiseAbs().maxCoeff() < 1e-9);
    // Paired names swap: mirrored t_l sits at the reflection of the original t_r.
    const Plane plane = midsagittal_plane(s.landmarks);
    const Vec3 tr = s.landmarks[Landmark::TR];
    const Vec3 reflected = tr - 2.0 * plane.normal.dot(tr - plane.point) * plane.normal;
    CHECK((m.landmarks[Landmark::TL] - reflected).norm() < 1e-9);
}

TEST_CASE("mirroring a symmetric phantom keeps its landmarks") {
    PhantomSpec spec;
    spec.resolution = 6;
    spec.variation = 0.0;
    const Scan s = generate_phantom(spec);
    const Scan m = mirror_scan(s);
    CHECK((m.landmarks.as_matrix() - s.landmarks.as_matrix()).cwiseAbs().maxCoeff() < 1e-6);
    // Normal runs from t_l (patient left, +x) towards t_r.
    CHECK(midsagittal_plane(s.landmarks).normal.dot(-Vec3::UnitX()) > 1.0 - 1e-9);
}

TEST_CASE("mirroring swaps the flattened side of a coronal phantom") {
    PhantomSpec spec;
    spec.resolution = 10;
    spec.variation = 0.0;
    spec.diagnosis = DiagnosisClass::Coronal;
    spec.severity = 1.0;
    const Scan s = generate_phantom(spec);
    const double before = frontal_asymmetry(s.mesh);
    const double after = frontal_asymmetry(mirror_scan(s).mesh);
    // The deformed landmarks tilt the plane slightly, so only sign and rough size carry over.
    CHECK(std::abs(before) > 0.5);
    CHECK(before * after < 0.0);
    CHECK(std::abs(after) == doctest::Approx(std::abs(before)).epsilon(0.25));
}

TEST_CASE("GPA of two rigid copies") {
    std::mt19937_64 rng(7);
    const PointSet x = 20.0 * testing::random_matrix(rng, 15, 3);
    RigidTransform t;
    t.rotation = testing::random_rotation(rng);
    t.translation = Vec3(5, -3, 8);
    const GpaResult r = gpa({x, t.apply(x)});
    CHECK((r.aligned[0] - r.aligned[1]).cwiseAbs().maxCoeff() < 1e-8);
    CHECK(std::abs(centroid_size(r.mean) - centroid_size(x)) < 1e-8);
    CHECK(r.mean.colwise().mean().norm() < 1e-9);
    for (int i = 0; i < 2; ++i) CHECK((r.transforms[i].apply(i == 0 ? x : t.apply(x)) - r.aligned[i]).norm() < 1e-9);
}

TEST_CASE("GPA fixed point and scale preservation") {
    std::mt19937_64 rng(8);
    const PointSet base = 20.0 * testing::random_matrix(rng, 15, 3);
    std::vector<PointSet> shapes;
    for (int i = 0; i < 5; ++i) {
        PointSet s = base + 0.5 * testing::random_matrix(rng, 15, 3);
        s *= 1.0 + 0.2 * i;
        RigidTransform t;
        t.rotation = testing::random_rotation(rng);
        t.translation = Vec3(i, 2 * i, -i);
        shapes.push_back(t.apply(s));
    }
    const GpaResult r = gpa(shapes);
    CHECK(r.converged);
    CHECK(r.mean.colwise().mean().norm() < 1e-9);
    for (size_t i = 0; i < shapes.size(); ++i)
        CHECK(centroid_size(r.aligned[i]) == doctest::Approx(centroid_size(shapes[i])).epsilon(1e-12));
    for (size_t k = 1; k < r.objective.size(); ++k) CHECK(r.objective[k] <= r.objective[k - 1] * (1.0 + 1e-12));

    const GpaResult again = gpa(r.aligned);
    CHECK(again.iterations == 1);
    for (const auto& t : again.transforms) {
        CHECK((t.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-6);
        CHECK(t.translation.norm() < 1e-6);
    }
}

TEST_CASE("GPA input checks") {
    CHECK_THROWS_AS(gpa({PointSet::Zero(4, 3)}), ValidationError);
    CHECK_THROWS_AS(gpa({PointSet::Zero(4, 3), PointSet::Zero(5, 3)}), ValidationError);
}

}  // TEST_SUITE
