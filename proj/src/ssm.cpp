#include "craniossm/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>

#include "craniossm/error.hpp"
#include "craniossm/parallel.hpp"

namespace craniossm {

namespace {

constexpr double kDropRelative = 1e-12;

void check_shapes(const std::vector<PointSet>& shapes, Eigen::Index min_count) {
    if (static_cast<Eigen::Index>(shapes.size()) < min_count)
        throw ValidationError("model building needs at least " + std::to_string(min_count) + " shapes, got " +
                              std::to_string(shapes.size()));
    const auto p = shapes.front().rows();
    if (p == 0) throw ValidationError("shapes have no vertices");
    for (const auto& s : shapes) {
        if (s.rows() != p) throw ValidationError("shapes differ in vertex count");
        if (!s.allFinite()) throw ValidationError("shape has non-finite coordinates");
    }
}

void check_mask(const std::vector<int>& mask, Eigen::Index p) {
    if (mask.empty()) throw ValidationError("vertex mask is empty");
    std::vector<bool> seen(static_cast<size_t>(p), false);
    for (int v : mask) {
        if (v < 0 || v >= p) throw ValidationError("mask vertex " + std::to_string(v) + " out of range");
        if (seen[v]) throw ValidationError("mask vertex " + std::to_string(v) + " repeated");
        seen[v] = true;
    }
}

PointSet select_rows(const PointSet& shape, const std::vector<int>& rows) {
    PointSet out(static_cast<Eigen::Index>(rows.size()), 3);
    for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = shape.row(rows[i]);
    return out;
}

double mean_vertex_distance(const PointSet& a, const PointSet& b) { return (a - b).rowwise().norm().mean(); }

// Largest-magnitude entry of every column made positive (first index on ties).
void fix_signs(Eigen::MatrixXd& V) {
    for (Eigen::Index j = 0; j < V.cols(); ++j) {
        Eigen::Index arg = 0;
        V.col(j).cwiseAbs().maxCoeff(&arg);
        if (V(arg, j) < 0.0) V.col(j) = -V.col(j);
    }
}

}  // namespace

TriMesh ShapeModel::mean_mesh() const {
    TriMesh m;
    m.vertices = mean_shape();
    m.faces = faces;
    return m;
}

FaceArray restrict_faces(const FaceArray& faces, const std::vector<int>& mask, Eigen::Index template_vertices) {
    std::vector<int> position(static_cast<size_t>(template_vertices), -1);
    for (size_t i = 0; i < mask.size(); ++i) position.at(mask[i]) = static_cast<int>(i);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index f = 0; f < faces.rows(); ++f) {
        bool inside = true;
        for (int c = 0; c < 3; ++c) inside = inside && position.at(faces(f, c)) >= 0;
        if (inside) keep.push_back(f);
    }
    FaceArray out(static_cast<Eigen::Index>(keep.size()), 3);
    for (size_t i = 0; i < keep.size(); ++i)
        for (int c = 0; c < 3; ++c) out(static_cast<Eigen::Index>(i), c) = position[faces(keep[i], c)];
    return out;
}

ShapeModel build_model(const std::vector<PointSet>& input, const FaceArray& faces, const MassMatrix& mass,
                       const BuildOptions& options) {
    check_shapes(input, 2);
    const Eigen::Index p_full = input.front().rows();
    if (faces.size() > 0 && (faces.minCoeff() < 0 || faces.maxCoeff() >= p_full))
        throw ValidationError("face index out of range for the shapes");

    ShapeModel model;
    model.class_label = options.class_label;
    std::vector<PointSet> shapes;
    if (options.mask) {
        check_mask(*options.mask, p_full);
        if (mass.size() != p_full) throw ValidationError("mass matrix size does not match the shapes");
        for (const auto& s : input) shapes.push_back(select_rows(s, *options.mask));
        model.mass = restrict_mass_matrix(mass, *options.mask);
        model.faces = restrict_faces(faces, *options.mask, p_full);
        model.vertex_mask = options.mask;
    } else {
        if (mass.size() != p_full) throw ValidationError("mass matrix size does not match the shapes");
        shapes = input;
        model.mass = mass;
        model.faces = faces;
    }
    if (options.align) shapes = gpa(shapes, options.gpa).aligned;

    const auto n = static_cast<Eigen::Index>(shapes.size());
    const Eigen::Index p = shapes.front().rows();
    Eigen::MatrixXd X(3 * p, n);
    for (Eigen::Index i = 0; i < n; ++i) X.col(i) = flatten(shapes[i]);
    model.mean = X.rowwise().mean();
    X.colwise() -= model.mean;

    Eigen::MatrixXd G = X.transpose() * apply_expanded_mass(model.mass, X);
    G = 0.5 * (G + G.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(G);
    if (eig.info() != Eigen::Success) throw NumericalError("Gram matrix eigendecomposition failed");
    const Eigen::VectorXd evals = eig.eigenvalues().reverse();
    const Eigen::MatrixXd evecs = eig.eigenvectors().rowwise().reverse();

    const double largest = evals.size() ? evals(0) : 0.0;
    Eigen::Index k = 0;
    if (largest > 0.0)
        while (k < n && evals(k) > kDropRelative * largest) ++k;
    if (largest > 0.0 && evals(n - 1) < -kDropRelative * largest)
        warn("Gram matrix has negative eigenvalues (smallest " + std::to_string(evals(n - 1)) +
             "); the mass matrix is not positive semidefinite on this data, those directions are dropped");

    const Eigen::VectorXd lg = evals.head(k);
    model.components = X * evecs.leftCols(k) * lg.cwiseSqrt().cwiseInverse().asDiagonal();
    fix_signs(model.components);
    model.eigenvalues = lg / static_cast<double>(n - 1);
    model.n_train = static_cast<int>(n);

    if (options.keep_components) model = truncate(model, std::min<Eigen::Index>(*options.keep_components, k));
    if (options.keep_variance) model = truncate_variance(model, *options.keep_variance);
    return model;
}

PointSet reconstruct(const ShapeModel& model, const Eigen::VectorXd& alpha) {
    const Eigen::Index m = alpha.size();
    if (m > model.component_count())
        throw ValidationError("coefficient vector has " + std::to_string(m) + " entries, model has " +
                              std::to_string(model.component_count()));
    Eigen::VectorXd x = model.mean;
    if (m > 0)
        x += model.components.leftCols(m) * (model.eigenvalues.head(m).cwiseSqrt().cwiseProduct(alpha));
    return unflatten(x);
}

Eigen::VectorXd project(const ShapeModel& model, const PointSet& shape) {
    if (shape.rows() != model.vertex_count()) throw ValidationError("shape does not match the model's vertex count");
    if (model.component_count() > 0 && !(model.eigenvalues.minCoeff() > 0.0))
        throw NumericalError("model retains a zero eigenvalue; truncate it before projecting");
    const Eigen::VectorXd d = flatten(shape) - model.mean;
    const Eigen::VectorXd md = apply_expanded_mass(model.mass, d);
    return (model.components.transpose() * md).cwiseQuotient(model.eigenvalues.cwiseSqrt());
}

std::pair<Eigen::VectorXd, PointSet> sample(const ShapeModel& model, std::uint64_t seed, double clamp_sigma,
                                            std::optional<Eigen::Index> components) {
    const Eigen::Index m = components.value_or(model.component_count());
    if (m < 0 || m > model.component_count()) throw ValidationError("sample component count exceeds the model");
    if (!(clamp_sigma > 0.0)) throw ValidationError("clamp must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal;
    Eigen::VectorXd alpha(m);
    for (Eigen::Index i = 0; i < m; ++i) alpha(i) = std::clamp(normal(rng), -clamp_sigma, clamp_sigma);
    return {alpha, reconstruct(model, alpha)};
}

ShapeModel truncate(const ShapeModel& model, Eigen::Index k_new) {
    if (k_new <= 0) throw ValidationError("truncation needs a positive component count");
    if (k_new > model.component_count())
        throw ValidationError("cannot truncate to " + std::to_string(k_new) + " components, model has " +
                              std::to_string(model.component_count()));
    ShapeModel out = model;
    out.components = model.components.leftCols(k_new);
    out.eigenvalues = model.eigenvalues.head(k_new);
    return out;
}

ShapeModel truncate_variance(const ShapeModel& model, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("variance fraction must lie in (0, 1]");
    for (Eigen::Index j = 1; j <= model.component_count(); ++j)
        if (compactness(model, j) >= fraction - 1e-12) return truncate(model, j);
    return model;
}

PointSet restrict_to_model(const ShapeModel& model, const PointSet& shape) {
    if (shape.rows() == model.vertex_count()) return shape;
    if (model.vertex_mask) {
        for (int v : *model.vertex_mask)
            if (v >= shape.rows()) throw ValidationError("shape is smaller than the model's template");
        return select_rows(shape, *model.vertex_mask);
    }
    throw ValidationError("shape has " + std::to_string(shape.rows()) + " vertices, model has " +
                          std::to_string(model.vertex_count()));
}

PointSet align_to_model(const ShapeModel& model, const PointSet& shape) {
    const PointSet restricted = restrict_to_model(model, shape);
    return kabsch(restricted, model.mean_shape()).apply(restricted);
}

int release_component_count(std::optional<DiagnosisClass> label) {
    if (!label) return 100;
    switch (*label) {
        case DiagnosisClass::Control: return 30;
        case DiagnosisClass::Sagittal: return 30;
        case DiagnosisClass::Metopic: return 25;
        case DiagnosisClass::Coronal: return 15;
    }
    return 100;
}

std::vector<int> cranial_mask(const TriMesh& templ, const LandmarkSet& lms, double offset_mm) {
    const Vec3 tl = lms[Landmark::TL];
    const Vec3 n_raw = (lms[Landmark::SE] - tl).cross(lms[Landmark::TR] - tl);
    if (!(n_raw.norm() > 0.0)) throw NumericalError("cranial plane landmarks are collinear");
    const Vec3 n = n_raw.normalized();
    std::vector<int> mask;
    for (Eigen::Index i = 0; i < templ.vertex_count(); ++i)
        if ((templ.vertices.row(i).transpose() - tl).dot(n) > offset_mm) mask.push_back(static_cast<int>(i));
    if (mask.empty()) throw ValidationError("cranial mask selects no vertices");
    return mask;
}

double compactness(const ShapeModel& model, Eigen::Index j) {
    if (j < 0 || j > model.component_count()) throw ValidationError("compactness index out of range");
    const double total = model.eigenvalues.sum();
    if (!(total > 0.0)) return 1.0;
    if (j == model.component_count()) return 1.0;
    return model.eigenvalues.head(j).sum() / total;
}

std::vector<double> generalization_curve(const std::vector<PointSet>& shapes, const FaceArray& faces,
                                         const MassMatrix& mass, Eigen::Index max_j, const BuildOptions& options,
                                         int jobs) {
    check_shapes(shapes, 3);
    if (max_j < 1) throw ValidationError("generalization needs at least one component");
    BuildOptions loo_opts = options;
    loo_opts.keep_components.reset();
    loo_opts.keep_variance.reset();
    const size_t n = shapes.size();
    std::vector<std::vector<double>> errors(n);
    parallel_for(n, jobs, [&](size_t i) {
        std::vector<PointSet> rest;
        rest.reserve(n - 1);
        for (size_t t = 0; t < n; ++t)
            if (t != i) rest.push_back(shapes[t]);
        const ShapeModel loo = build_model(rest, faces, mass, loo_opts);
        const PointSet held = options.align ? align_to_model(loo, shapes[i]) : restrict_to_model(loo, shapes[i]);
        const Eigen::VectorXd alpha = project(loo, held);
        const Eigen::VectorXd target = flatten(held);
        Eigen::VectorXd recon = loo.mean;
        errors[i].resize(static_cast<size_t>(max_j));
        for (Eigen::Index j = 1; j <= max_j; ++j) {
            if (j <= loo.component_count())
                recon += loo.components.col(j - 1) * (std::sqrt(loo.eigenvalues(j - 1)) * alpha(j - 1));
            errors[i][j - 1] = mean_vertex_distance(unflatten(recon), unflatten(target));
        }
    });
    std::vector<double> curve(static_cast<size_t>(max_j), 0.0);
    for (const auto& e : errors)
        for (size_t j = 0; j < e.size(); ++j) curve[j] += e[j];
    for (double& c : curve) c /= static_cast<double>(n);
    return curve;
}

double generalization(const std::vector<PointSet>& shapes, const FaceArray& faces, const MassMatrix& mass,
                      Eigen::Index j, const BuildOptions& options, int jobs) {
    return generalization_curve(shapes, faces, mass, j, options, jobs).back();
}

double specificity(const ShapeModel& model, const std::vector<PointSet>& shapes, Eigen::Index j, int n_samples,
                   std::uint64_t seed) {
    if (shapes.empty()) throw ValidationError("specificity needs training shapes");
    if (n_samples <= 0) throw ValidationError("specificity needs a positive sample count");
    if (j < 0 || j > model.component_count()) throw ValidationError("specificity component count out of range");
    std::vector<PointSet> train;
    train.reserve(shapes.size());
    for (const auto& s : shapes) train.push_back(align_to_model(model, s));
    std::mt19937_64 seeder(seed);
    double total = 0.0;
    for (int s = 0; s < n_samples; ++s) {
        const PointSet x = sample(model, seeder(), 3.0, j).second;
        double best = INFINITY;
        for (const auto& t : train) best = std::min(best, mean_vertex_distance(x, t));
        total += best;
    }
    return total / n_samples;
}

}  // namespace craniossm
