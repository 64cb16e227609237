#include "craniossm/register.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "craniossm/align.hpp"
#include "craniossm/error.hpp"

namespace craniossm {

namespace {

using Triplet = Eigen::Triplet<double>;

constexpr double kMonotoneRelTol = 1e-9;

double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

bool energy_increased(double before, double after) {
    // Absolute floor covers objectives that are zero up to round-off.
    return after > before * (1.0 + kMonotoneRelTol) + 1e-18;
}

// Translation-only unknowns T (p x 3); deformed = V + T.
class TranslationProblem {
public:
    TranslationProblem(const TriMesh& templ, const LandmarkIndices& lm)
        : vertices_(templ.vertices), lm_(lm), edges_(unique_edges(templ)) {}

    AffineTerms energy(const PointSet& T, const CorrespondenceSet& corr, const LandmarkSet& target_lms,
                       double alpha, double beta) const {
        AffineTerms e;
        for (const auto& [i, j] : edges_) e.stiffness += (T.row(j) - T.row(i)).squaredNorm();
        e.stiffness *= alpha * alpha;
        for (Eigen::Index i = 0; i < T.rows(); ++i)
            e.data += corr.weights(i) * (vertices_.row(i) + T.row(i) - corr.targets.row(i)).squaredNorm();
        for (int l = 0; l < kLandmarkCount; ++l) {
            const int v = lm_[l];
            e.landmark += (vertices_.row(v) + T.row(v) - target_lms.at(l).transpose()).squaredNorm();
        }
        e.landmark *= beta * beta;
        return e;
    }

    PointSet solve(const CorrespondenceSet& corr, const LandmarkSet& target_lms, double alpha, double beta) {
        const auto p = vertices_.rows();
        const double a2 = alpha * alpha;
        const double b2 = beta * beta;
        if (corr.weights.sum() + b2 * kLandmarkCount <= 0.0)
            throw NumericalError("singular normal equations: no valid correspondences and no landmark term");
        std::vector<Eigen::MatrixXd> blocks(static_cast<size_t>(p), Eigen::MatrixXd::Zero(1, 1));
        Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(p, 3);
        for (Eigen::Index i = 0; i < p; ++i) {
            blocks[i](0, 0) = corr.weights(i);
            rhs.row(i) = corr.weights(i) * (corr.targets.row(i) - vertices_.row(i));
        }
        for (int l = 0; l < kLandmarkCount; ++l) {
            const int v = lm_[l];
            blocks[v](0, 0) += b2;
            rhs.row(v) += b2 * (target_lms.at(l).transpose() - vertices_.row(v));
        }
        return solver_.solve(p, 1, edges_, Eigen::VectorXd::Constant(1, a2), blocks, rhs);
    }

    const PointSet& vertices() const { return vertices_; }

private:
    PointSet vertices_;
    LandmarkIndices lm_;
    std::vector<std::pair<int, int>> edges_;
    StiffBlockSolver solver_;
};

TriMesh with_vertices(const TriMesh& topology, PointSet vertices) {
    TriMesh out = topology;
    out.vertices = std::move(vertices);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------

TargetSurface::TargetSurface(const TriMesh& target) : tree_(target), face_normals_(face_normals(target)) {
    boundary_vertex_.assign(static_cast<size_t>(target.vertex_count()), false);
    std::vector<std::pair<int, int>> all;
    all.reserve(static_cast<size_t>(target.face_count()) * 3);
    for (Eigen::Index f = 0; f < target.face_count(); ++f)
        for (int c = 0; c < 3; ++c) {
            const int a = target.faces(f, c);
            const int b = target.faces(f, (c + 1) % 3);
            all.emplace_back(std::min(a, b), std::max(a, b));
        }
    std::sort(all.begin(), all.end());
    for (size_t i = 0; i < all.size();) {
        size_t j = i;
        while (j < all.size() && all[j] == all[i]) ++j;
        if (j - i == 1) {
            boundary_edges_.push_back(all[i]);
            boundary_vertex_[all[i].first] = true;
            boundary_vertex_[all[i].second] = true;
        }
        i = j;
    }
}

bool TargetSurface::on_boundary(const SurfaceHit& hit) const {
    switch (hit.feature) {
        case HitFeature::Face: return false;
        case HitFeature::Vertex: return boundary_vertex_[hit.feature_vertices[0]];
        case HitFeature::Edge: {
            const std::pair<int, int> e{std::min(hit.feature_vertices[0], hit.feature_vertices[1]),
                                        std::max(hit.feature_vertices[0], hit.feature_vertices[1])};
            return std::binary_search(boundary_edges_.begin(), boundary_edges_.end(), e);
        }
    }
    return false;
}

CorrespondenceSet find_correspondences(const TriMesh& morphed, const TargetSurface& target, double max_angle_deg) {
    const auto normals = vertex_normals(morphed);
    const double cos_max = std::cos(deg_to_rad(max_angle_deg));
    CorrespondenceSet corr;
    const auto p = morphed.vertex_count();
    corr.targets.resize(p, 3);
    corr.weights.resize(p);
    for (Eigen::Index i = 0; i < p; ++i) {
        const SurfaceHit hit = target.closest(morphed.vertices.row(i).transpose());
        corr.targets.row(i) = hit.point.transpose();
        bool ok = normals.valid[i] && !target.on_boundary(hit);
        if (ok) {
            const Vec3 tn = target.face_normal(hit.face);
            ok = tn.squaredNorm() > 0.0 && normals.normals.row(i).dot(tn) >= cos_max;
        }
        corr.weights(i) = ok ? 1.0 : 0.0;
    }
    return corr;
}

CorrespondenceSet find_correspondences(const TriMesh& morphed, const TriMesh& target, double max_angle_deg) {
    return find_correspondences(morphed, TargetSurface(target), max_angle_deg);
}

double NicpConfig::alpha(int n) const { return alpha_initial * std::pow(alpha_decay, n); }

void NicpConfig::validate() const {
    if (n_iters <= 0 || alpha_initial <= 0 || alpha_decay <= 0 || inner_exit_eps <= 0 ||
        normal_compat_max_deg <= 0 || gamma <= 0 || max_inner <= 0)
        throw ValidationError("NICP configuration values must be positive");
}

void LbrpConfig::validate() const {
    if (!(lambda1 > 0) || !(lambda2 > 0)) throw ValidationError("LBRP stiffness values must be positive");
    if (!(lambda1 > lambda2)) throw ValidationError("LBRP requires lambda1 > lambda2");
}

// ---------------------------------------------------------------------------

AffineProblem::AffineProblem(const TriMesh& templ, const LandmarkIndices& landmark_vertices, double gamma)
    : vertices_(templ.vertices), lm_(landmark_vertices), gamma_(gamma), edges_(unique_edges(templ)) {}

Eigen::MatrixXd AffineProblem::identity(Eigen::Index p) {
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(4 * p, 3);
    for (Eigen::Index i = 0; i < p; ++i) X.block<3, 3>(4 * i, 0).setIdentity();
    return X;
}

PointSet AffineProblem::deform(const Eigen::MatrixXd& X) const {
    PointSet out(vertices_.rows(), 3);
    for (Eigen::Index i = 0; i < vertices_.rows(); ++i)
        out.row(i) = vertices_.row(i) * X.block<3, 3>(4 * i, 0) + X.row(4 * i + 3);
    return out;
}

AffineTerms AffineProblem::energy(const Eigen::MatrixXd& X, const CorrespondenceSet& corr,
                                  const LandmarkSet& target_lms, double alpha, double beta) const {
    AffineTerms e;
    const double g2 = gamma_ * gamma_;
    for (const auto& [i, j] : edges_) {
        const Eigen::Matrix<double, 4, 3> d = X.block<4, 3>(4 * j, 0) - X.block<4, 3>(4 * i, 0);
        e.stiffness += d.topRows<3>().squaredNorm() + g2 * d.row(3).squaredNorm();
    }
    e.stiffness *= alpha * alpha;
    const PointSet deformed = deform(X);
    for (Eigen::Index i = 0; i < deformed.rows(); ++i)
        e.data += corr.weights(i) * (deformed.row(i) - corr.targets.row(i)).squaredNorm();
    for (int l = 0; l < kLandmarkCount; ++l)
        e.landmark += (deformed.row(lm_[l]) - target_lms.at(l).transpose()).squaredNorm();
    e.landmark *= beta * beta;
    return e;
}

Eigen::MatrixXd AffineProblem::solve(const CorrespondenceSet& corr, const LandmarkSet& target_lms, double alpha,
                                     double beta) {
    const auto p = vertices_.rows();
    const double a2 = alpha * alpha;
    const double b2 = beta * beta;
    const std::array<double, 4> g2{1.0, 1.0, 1.0, gamma_ * gamma_};

    auto homogeneous = [&](Eigen::Index i) {
        Eigen::Vector4d d;
        d << vertices_.row(i).transpose(), 1.0;
        return d;
    };

    // Per-vertex 4x4 data blocks and the right-hand side.
    std::vector<Eigen::Matrix4d> blocks(static_cast<size_t>(p), Eigen::Matrix4d::Zero());
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(4 * p, 3);
    Eigen::Matrix4d global = Eigen::Matrix4d::Zero();
    for (Eigen::Index i = 0; i < p; ++i) {
        const double w = corr.weights(i);
        if (w == 0.0) continue;
        const Eigen::Vector4d d = homogeneous(i);
        blocks[i] += w * d * d.transpose();
        rhs.block<4, 3>(4 * i, 0) += w * d * corr.targets.row(i);
    }
    for (int l = 0; l < kLandmarkCount && b2 > 0.0; ++l) {
        const Eigen::Vector4d d = homogeneous(lm_[l]);
        blocks[lm_[l]] += b2 * d * d.transpose();
        rhs.block<4, 3>(4 * lm_[l], 0) += b2 * d * target_lms.at(l).transpose();
    }
    for (const auto& b : blocks) global += b;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> ges(global);
    if (!(ges.eigenvalues()(3) > 0.0) || ges.eigenvalues()(0) <= 1e-12 * ges.eigenvalues()(3))
        throw NumericalError("singular normal equations: data and landmark terms do not constrain an affine map");

    std::vector<Eigen::MatrixXd> dyn_blocks(blocks.begin(), blocks.end());
    const Eigen::VectorXd stiffness = a2 * Eigen::Map<const Eigen::Vector4d>(g2.data());
    return solver_.solve(p, 4, edges_, stiffness, dyn_blocks, rhs);
}

// ---------------------------------------------------------------------------

MorphResult nicp_affine(const TriMesh& templ, const TriMesh& target, const LandmarkSet& template_lms,
                        const LandmarkSet& target_lms, const NicpConfig& cfg) {
    cfg.validate();
    templ.validate();
    const TargetSurface surface(target);
    const LandmarkIndices lm = landmark_vertex_indices(templ, template_lms);
    AffineProblem problem(templ, lm, cfg.gamma);

    MorphResult result;
    Eigen::MatrixXd X = AffineProblem::identity(templ.vertex_count());
    TriMesh current = templ;
    for (int n = 0; n < cfg.n_iters; ++n) {
        const double alpha = cfg.alpha(n);
        const double beta = cfg.beta(n);
        for (int inner = 0; inner < cfg.max_inner; ++inner) {
            const CorrespondenceSet corr = find_correspondences(current, surface, cfg.normal_compat_max_deg);
            const double before = problem.energy(X, corr, target_lms, alpha, beta).total();
            Eigen::MatrixXd next;
            try {
                next = problem.solve(corr, target_lms, alpha, beta);
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " (NICP-A iteration " + std::to_string(n) + ")");
            }
            const AffineTerms after = problem.energy(next, corr, target_lms, alpha, beta);
            if (energy_increased(before, after.total())) ++result.monotonicity_violations;

            IterationRecord rec;
            rec.outer = n;
            rec.inner = inner;
            rec.alpha = alpha;
            rec.beta = beta;
            rec.stiffness = after.stiffness;
            rec.data = after.data;
            rec.landmark = after.landmark;
            rec.energy_before = before;
            rec.energy_after = after.total();
            rec.change = (next - X).norm();
            rec.validity_ratio = corr.validity_ratio();
            result.iterations.push_back(rec);

            X = std::move(next);
            current.vertices = problem.deform(X);
            if (rec.change < cfg.inner_exit_eps) break;
        }
    }
    result.morphed = std::move(current);
    return result;
}

MorphResult nicp_translation(const TriMesh& templ, const TriMesh& target, const LandmarkSet& template_lms,
                             const LandmarkSet& target_lms, const NicpConfig& cfg) {
    cfg.validate();
    templ.validate();
    const TargetSurface surface(target);
    const LandmarkIndices lm = landmark_vertex_indices(templ, template_lms);
    TranslationProblem problem(templ, lm);

    MorphResult result;
    PointSet T = PointSet::Zero(templ.vertex_count(), 3);
    TriMesh current = templ;
    for (int n = 0; n < cfg.n_iters; ++n) {
        const double alpha = cfg.alpha(n);
        const double beta = cfg.beta(n);
        for (int inner = 0; inner < cfg.max_inner; ++inner) {
            const CorrespondenceSet corr = find_correspondences(current, surface, cfg.normal_compat_max_deg);
            const double before = problem.energy(T, corr, target_lms, alpha, beta).total();
            PointSet next;
            try {
                next = problem.solve(corr, target_lms, alpha, beta);
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " (NICP-T iteration " + std::to_string(n) + ")");
            }
            const AffineTerms after = problem.energy(next, corr, target_lms, alpha, beta);
            if (energy_increased(before, after.total())) ++result.monotonicity_violations;

            IterationRecord rec;
            rec.outer = n;
            rec.inner = inner;
            rec.alpha = alpha;
            rec.beta = beta;
            rec.stiffness = after.stiffness;
            rec.data = after.data;
            rec.landmark = after.landmark;
            rec.energy_before = before;
            rec.energy_after = after.total();
            rec.change = (next - T).norm();
            rec.validity_ratio = corr.validity_ratio();
            result.iterations.push_back(rec);

            T = std::move(next);
            current.vertices = problem.vertices() + T;
            if (rec.change < cfg.inner_exit_eps) break;
        }
    }
    result.morphed = std::move(current);
    return result;
}

TriMesh lbrp_project(const TriMesh& templ, const SparseMatrix& L0, double lambda, const CorrespondenceSet& corr) {
    const auto p = templ.vertex_count();
    if (L0.rows() != p || L0.cols() != p) throw ValidationError("Laplacian size does not match the template");
    if (corr.targets.rows() != p) throw ValidationError("correspondence count does not match the template");
    if (corr.valid_count() == 0) throw NumericalError("LBRP projection without any valid correspondence");
    if (!(lambda > 0.0)) throw ValidationError("LBRP stiffness must be positive");

    // Solve for the displacement D = X - X0: [lambda L0; S] D = [0; S (Y - X0)].
    const double l2 = lambda * lambda;
    SparseMatrix H = l2 * SparseMatrix(L0.transpose() * L0);
    SparseMatrix S(p, p);
    {
        std::vector<Triplet> trip;
        for (Eigen::Index i = 0; i < p; ++i) trip.emplace_back(i, i, corr.weights(i));
        S.setFromTriplets(trip.begin(), trip.end());
    }
    H += S;
    Eigen::MatrixXd rhs(p, 3);
    for (Eigen::Index i = 0; i < p; ++i) rhs.row(i) = corr.weights(i) * (corr.targets.row(i) - templ.vertices.row(i));

    NormalEquationSolver solver;
    solver.factorize(H);
    auto apply = [&](const Eigen::MatrixXd& D) -> Eigen::MatrixXd {
        const Eigen::MatrixXd LD = L0 * D;
        return l2 * (L0.transpose() * LD) + corr.weights.asDiagonal() * D;
    };
    const Eigen::MatrixXd D = solver.solve(rhs, apply);
    return with_vertices(templ, templ.vertices + D);
}

MorphResult two_stage_lbrp(const TriMesh& templ, const TriMesh& target, const LbrpConfig& cfg) {
    cfg.validate();
    templ.validate();
    const TargetSurface surface(target);
    const SparseMatrix L0 = cotangent_laplacian(templ);
    MorphResult result;
    TriMesh current = templ;
    int stage = 0;
    for (double lambda : {cfg.lambda1, cfg.lambda2}) {
        const CorrespondenceSet corr = find_correspondences(current, surface, cfg.normal_compat_max_deg);
        current = lbrp_project(templ, L0, lambda, corr);
        IterationRecord rec;
        rec.outer = stage++;
        rec.alpha = lambda;
        rec.validity_ratio = corr.validity_ratio();
        double data = 0.0;
        for (Eigen::Index i = 0; i < current.vertex_count(); ++i)
            data += corr.weights(i) * (current.vertices.row(i) - corr.targets.row(i)).squaredNorm();
        rec.data = data;
        rec.stiffness = lambda * lambda * (L0 * (current.vertices - templ.vertices)).squaredNorm();
        rec.energy_after = rec.data + rec.stiffness;
        result.iterations.push_back(rec);
    }
    result.morphed = std::move(current);
    return result;
}

// ---------------------------------------------------------------------------

double landmark_error(const TriMesh& morphed, const LandmarkIndices& idx, const LandmarkSet& target_lms) {
    double sum = 0.0;
    for (int l = 0; l < kLandmarkCount; ++l) {
        if (idx[l] < 0 || idx[l] >= morphed.vertex_count())
            throw ValidationError("missing landmark vertex for '" +
                                  std::string(landmark_name(static_cast<Landmark>(l))) + "'");
        sum += (morphed.vertices.row(idx[l]).transpose() - target_lms.at(l)).norm();
    }
    return sum / kLandmarkCount;
}

double v2nn_distance(const TriMesh& morphed, const TargetSurface& target) {
    if (morphed.vertex_count() == 0) return 0.0;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < morphed.vertex_count(); ++i)
        sum += std::sqrt(target.closest(morphed.vertices.row(i).transpose()).distance2);
    return sum / static_cast<double>(morphed.vertex_count());
}

double v2nn_distance(const TriMesh& morphed, const TriMesh& target) {
    return v2nn_distance(morphed, TargetSurface(target));
}

double normal_deviation_aligned(const std::vector<TriMesh>& meshes) {
    if (meshes.size() < 2) throw ValidationError("normal deviation needs at least two meshes");
    const auto p = meshes.front().vertex_count();
    std::vector<VertexNormals> normals;
    normals.reserve(meshes.size());
    for (const auto& m : meshes) {
        if (m.vertex_count() != p) throw ValidationError("normal deviation meshes differ in vertex count");
        normals.push_back(vertex_normals(m));
    }
    double total = 0.0;
    Eigen::Index counted = 0;
    for (Eigen::Index v = 0; v < p; ++v) {
        Vec3 mean = Vec3::Zero();
        int members = 0;
        for (const auto& n : normals)
            if (n.valid[v]) {
                mean += n.normals.row(v).transpose();
                ++members;
            }
        if (members == 0 || mean.norm() == 0.0) continue;
        mean.normalize();
        double angle_sum = 0.0;
        for (const auto& n : normals)
            if (n.valid[v]) {
                const Vec3 u = n.normals.row(v).transpose();
                angle_sum += std::atan2(u.cross(mean).norm(), u.dot(mean));  // accurate near 0
            }
        total += angle_sum / members;
        ++counted;
    }
    return counted ? total / static_cast<double>(counted) * 180.0 / std::numbers::pi : 0.0;
}

NormalDeviation surface_normal_deviation(const std::map<DiagnosisClass, std::vector<TriMesh>>& morphs_by_class) {
    NormalDeviation out;
    double weighted = 0.0;
    size_t members = 0;
    for (const auto& [cls, meshes] : morphs_by_class) {
        if (meshes.size() < 2) {
            warn("normal deviation: class '" + std::string(class_name(cls)) + "' has fewer than 2 morphs, skipped");
            continue;
        }
        std::vector<PointSet> shapes;
        shapes.reserve(meshes.size());
        for (const auto& m : meshes) shapes.push_back(m.vertices);
        const GpaResult aligned = gpa(shapes);
        std::vector<TriMesh> aligned_meshes;
        aligned_meshes.reserve(meshes.size());
        for (size_t i = 0; i < meshes.size(); ++i) aligned_meshes.push_back(with_vertices(meshes[i], aligned.aligned[i]));
        const double score = normal_deviation_aligned(aligned_meshes);
        out.per_class_deg[cls] = score;
        weighted += score * static_cast<double>(meshes.size());
        members += meshes.size();
    }
    out.overall_deg = members ? weighted / static_cast<double>(members) : 0.0;
    return out;
}

nlohmann::json morph_diagnostics_json(const MorphResult& result) {
    nlohmann::json iters = nlohmann::json::array();
    for (const auto& r : result.iterations) {
        iters.push_back({{"outer", r.outer},
                         {"inner", r.inner},
                         {"alpha", r.alpha},
                         {"beta", r.beta},
                         {"stiffness", r.stiffness},
                         {"data", r.data},
                         {"landmark", r.landmark},
                         {"energy_before", r.energy_before},
                         {"energy_after", r.energy_after},
                         {"change", r.change},
                         {"validity_ratio", r.validity_ratio}});
    }
    nlohmann::json doc;
    doc["iterations"] = result.iterations.size();
    doc["monotonicity_violations"] = result.monotonicity_violations;
    if (!result.iterations.empty()) {
        const auto& last = result.iterations.back();
        doc["final_cost_terms"] = {{"stiffness", last.stiffness}, {"data", last.data}, {"landmark", last.landmark}};
        doc["validity_ratio"] = last.validity_ratio;
    }
    doc["trace"] = iters;
    return doc;
}

}  // namespace craniossm
