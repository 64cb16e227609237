#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "support.hpp"

#include "craniossm/edit.hpp"
#include "craniossm/error.hpp"
#include "craniossm/geometry.hpp"
#include "craniossm/synth.hpp"

using namespace craniossm;

namespace {

ClassMeanCoefficients random_means(std::mt19937_64& rng, Eigen::Index k) {
    ClassMeanCoefficients means;
    for (DiagnosisClass c : kAllClasses) means[c] = testing::random_matrix(rng, k, 1);
    return means;
}

// Corresponded phantoms: one shared triangulation, per-subject shape draws.
std::vector<Scan> corresponded_corpus(int per_class, int resolution, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> severity(0.4, 1.0);
    std::vector<Scan> out;
    for (DiagnosisClass c : kAllClasses)
        for (int i = 0; i < per_class; ++i) {
            PhantomSpec spec;
            spec.diagnosis = c;
            spec.severity = severity(rng);
            spec.resolution = resolution;
            spec.seed = rng();
            spec.mesh_seed = 1;
            out.push_back(generate_phantom(spec));
        }
    return out;
}

std::vector<PointSet> vertices_of(const std::vector<Scan>& scans) {
    std::vector<PointSet> v;
    for (const auto& s : scans) v.push_back(s.mesh.vertices);
    return v;
}

MassMatrix identity_mass(Eigen::Index p) {
    MassMatrix m;
    m.matrix.resize(p, p);
    m.matrix.setIdentity();
    return m;
}

double region_rms(const Eigen::VectorXd& disp, const std::vector<bool>& fixed, bool want_fixed) {
    double sum = 0.0;
    int n = 0;
    for (size_t v = 0; v < fixed.size(); ++v)
        if (fixed[v] == want_fixed) {
            sum += disp.segment(3 * static_cast<Eigen::Index>(v), 3).squaredNorm();
            ++n;
        }
    return std::sqrt(sum / n);
}

}  // namespace

TEST_SUITE("edit") {

TEST_CASE("pathology transfer identities") {
    std::mt19937_64 rng(1);
    const ClassMeanCoefficients means = random_means(rng, 12);
    const Eigen::VectorXd alpha = testing::random_matrix(rng, 12, 1);

    CHECK(pathology_transfer(alpha, means, DiagnosisClass::Metopic, DiagnosisClass::Metopic) == alpha);
    CHECK(pathology_transfer(means.at(DiagnosisClass::Sagittal), means, DiagnosisClass::Sagittal,
                             DiagnosisClass::Control) == means.at(DiagnosisClass::Control));
    const Eigen::VectorXd there = pathology_transfer(alpha, means, DiagnosisClass::Coronal, DiagnosisClass::Control);
    const Eigen::VectorXd back = pathology_transfer(there, means, DiagnosisClass::Control, DiagnosisClass::Coronal);
    CHECK((back - alpha).cwiseAbs().maxCoeff() <= 1e-12);

    // Only differences of class means matter.
    ClassMeanCoefficients shifted = means;
    const Eigen::VectorXd offset = testing::random_matrix(rng, 12, 1);
    for (auto& [c, m] : shifted) m += offset;
    CHECK((pathology_transfer(alpha, shifted, DiagnosisClass::Coronal, DiagnosisClass::Control) - there)
              .cwiseAbs()
              .maxCoeff() < 1e-12);

    CHECK_THROWS_AS(pathology_transfer(Eigen::VectorXd::Zero(5), means, DiagnosisClass::Coronal,
                                       DiagnosisClass::Control),
                    ValidationError);
    ClassMeanCoefficients partial = means;
    partial.erase(DiagnosisClass::Metopic);
    CHECK_THROWS_AS(pathology_transfer(alpha, partial, DiagnosisClass::Metopic, DiagnosisClass::Control),
                    ValidationError);
}

TEST_CASE("class means of training coefficients are centred") {
    const auto scans = corresponded_corpus(3, 4, 2);
    BuildOptions opts;
    opts.align = false;
    const TriMesh& templ = scans.front().mesh;
    const ShapeModel model = build_model(vertices_of(scans), templ.faces, mass_matrix(templ), opts);

    FeatureSet features;
    for (const auto& s : scans) features.push_back({project(model, s.mesh.vertices), s.diagnosis, s.subject_id});
    const ClassMeanCoefficients means = class_mean_coefficients(model, features);
    Eigen::VectorXd grand = Eigen::VectorXd::Zero(model.component_count());
    for (const auto& [c, m] : means) grand += 3.0 * m;
    CHECK(grand.cwiseAbs().maxCoeff() / 12.0 < 1e-9);
    CHECK(project(model, model.mean_shape()).cwiseAbs().maxCoeff() < 1e-9);

    FeatureSet single = features;
    single.erase(single.begin() + 1, single.begin() + 3);  // control keeps one member
    CHECK(class_mean_coefficients(model, single).at(DiagnosisClass::Control) == features.front().alpha);

    FeatureSet missing;
    for (const auto& f : features)
        if (f.label != DiagnosisClass::Coronal) missing.push_back(f);
    CHECK_THROWS_AS(class_mean_coefficients(model, missing), ValidationError);
    FeatureSet short_alpha = features;
    short_alpha[0].alpha = Eigen::VectorXd::Zero(2);
    CHECK_THROWS_AS(class_mean_coefficients(model, short_alpha), ValidationError);
}

TEST_CASE("phantom class means separate linearly") {
    const auto scans = corresponded_corpus(10, 5, 3);
    const TriMesh& templ = scans.front().mesh;
    const ShapeModel model = build_model(vertices_of(scans), templ.faces, mass_matrix(templ));
    FeatureSet features;
    for (const auto& s : scans)
        features.push_back({project(model, align_to_model(model, s.mesh.vertices)), s.diagnosis, s.subject_id});
    const ClassMeanCoefficients means = class_mean_coefficients(model, features);

    // Spread of each class along the line joining a pair of class means.
    for (int a = 0; a < kClassCount; ++a)
        for (int b = a + 1; b < kClassCount; ++b) {
            const auto ca = static_cast<DiagnosisClass>(a), cb = static_cast<DiagnosisClass>(b);
            const Eigen::VectorXd diff = means.at(ca) - means.at(cb);
            const Eigen::VectorXd u = diff.normalized();
            double spread = 0.0;
            for (auto c : {ca, cb}) {
                double ss = 0.0;
                int n = 0;
                for (const auto& f : features)
                    if (f.label == c) {
                        ss += std::pow(u.dot(f.alpha - means.at(c)), 2);
                        ++n;
                    }
                spread = std::max(spread, std::sqrt(ss / (n - 1)));
            }
            CAPTURE(a);
            CAPTURE(b);
            CHECK(diff.norm() > 3.0 * spread);
        }
}

TEST_CASE("flexibility with nothing fixed gives the principal axes") {
    std::mt19937_64 rng(4);
    const Eigen::Index p = 10;
    std::vector<PointSet> shapes;
    for (int i = 0; i < 8; ++i) shapes.push_back(testing::random_matrix(rng, p, 3));
    BuildOptions opts;
    opts.align = false;
    const ShapeModel model = build_model(shapes, FaceArray(), identity_mass(p), opts);
    const auto k = static_cast<int>(model.component_count());
    const FlexibilityBasis basis = flexibility_modes(model, {}, k, 1e-6);
    const double reg = 1e-6 * model.eigenvalues.sum() / k;
    for (int j = 0; j < k; ++j) {
        Eigen::Index arg = 0;
        basis.modes.col(j).cwiseAbs().maxCoeff(&arg);
        CHECK(arg == j);
        CHECK(std::abs(basis.modes(j, j)) == doctest::Approx(basis.modes.col(j).norm()).epsilon(1e-9));
        CHECK(basis.ratios(j) == doctest::Approx(model.eigenvalues(j) / reg).epsilon(1e-9));
    }
}

TEST_CASE("flexibility input checks") {
    std::mt19937_64 rng(5);
    std::vector<PointSet> shapes;
    for (int i = 0; i < 5; ++i) shapes.push_back(testing::random_matrix(rng, 6, 3));
    const ShapeModel model = build_model(shapes, FaceArray(), identity_mass(6));
    CHECK_THROWS_AS(flexibility_modes(model, {0, 1, 2, 3, 4, 5}, 1), ValidationError);
    CHECK_THROWS_AS(flexibility_modes(model, {0}, 0), ValidationError);
    CHECK_THROWS_AS(flexibility_modes(model, {0}, static_cast<int>(model.component_count()) + 1), ValidationError);
    CHECK_THROWS_AS(flexibility_modes(model, {0}, 1, 0.0), ValidationError);
    CHECK_THROWS_AS(flexibility_modes(model, {6}, 1), ValidationError);
    CHECK_THROWS_AS(mode_displacement(model, Eigen::VectorXd::Zero(1)), ValidationError);
}

TEST_CASE("flexibility modes on a phantom model with the cranium fixed") {
    const auto scans = corresponded_corpus(5, 5, 6);
    const TriMesh& templ = scans.front().mesh;
    const ShapeModel model = build_model(vertices_of(scans), templ.faces, mass_matrix(templ));
    const auto fixed = cranial_mask(scans.front().mesh, scans.front().landmarks);
    const FlexibilityBasis basis = flexibility_modes(model, fixed, 5);
    REQUIRE(basis.modes.cols() == 5);

    std::vector<bool> is_fixed(static_cast<size_t>(model.vertex_count()), false);
    for (int v : fixed) is_fixed[v] = true;
    const Eigen::Index k = model.component_count();

    // Recompute the two Gram matrices independently from mode displacements.
    Eigen::MatrixXd D(3 * model.vertex_count(), k);
    for (Eigen::Index j = 0; j < k; ++j) D.col(j) = mode_displacement(model, Eigen::VectorXd::Unit(k, j));
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(k, k), B = A;
    for (Eigen::Index v = 0; v < model.vertex_count(); ++v) {
        const Eigen::MatrixXd rows = D.middleRows(3 * v, 3);
        (is_fixed[v] ? B : A) += rows.transpose() * rows;
    }
    Eigen::MatrixXd Breg = B;
    Breg.diagonal().array() += 1e-6 * B.trace() / static_cast<double>(k);

    const Eigen::MatrixXd G = basis.modes.transpose() * Breg * basis.modes;
    for (int i = 0; i < 5; ++i) {
        const Eigen::VectorXd c = basis.modes.col(i);
        CHECK((A * c - basis.ratios(i) * Breg * c).norm() <= 1e-8 * (A * c).norm());
        const Eigen::VectorXd disp = mode_displacement(model, c);
        CHECK(region_rms(disp, is_fixed, false) == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(region_rms(disp, is_fixed, true) < region_rms(disp, is_fixed, false));
        if (i > 0) CHECK(basis.ratios(i) <= basis.ratios(i - 1));
        CHECK(basis.ratios(i) >= 0.0);
        for (int j = 0; j < i; ++j) CHECK(std::abs(G(i, j)) <= 1e-8 * std::sqrt(G(i, i) * G(j, j)));
    }
}

TEST_CASE("flexibility overlay round trip") {
    std::mt19937_64 rng(7);
    std::vector<PointSet> shapes;
    for (int i = 0; i < 6; ++i) shapes.push_back(testing::random_matrix(rng, 8, 3));
    const ShapeModel model = build_model(shapes, FaceArray(), identity_mass(8));
    const FlexibilityBasis basis = flexibility_modes(model, {5, 1, 3}, 3);
    CHECK(basis.fixed == std::vector<int>{1, 3, 5});

    testing::TempDir dir("flex");
    save_flexibility(basis, dir.path());
    const FlexibilityBasis loaded = load_flexibility(dir.path());
    CHECK(loaded.modes == basis.modes);
    CHECK(loaded.ratios == basis.ratios);
    CHECK(loaded.fixed == basis.fixed);

    {
        std::fstream f(dir / "flex_ratios.f64", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(3);
        f.put('\x7f');
    }
    CHECK_THROWS_AS(load_flexibility(dir.path()), IoError);
}

}  // TEST_SUITE
