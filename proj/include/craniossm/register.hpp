#pragma once

#include <map>
#include <vector>

#include "json.hpp"

#include "craniossm/geometry.hpp"
#include "craniossm/mesh.hpp"
#include "craniossm/spatial_index.hpp"
#include "craniossm/sparse_solve.hpp"

namespace craniossm {

/// Target mesh prepared for repeated closest-point queries.
class TargetSurface {
public:
    explicit TargetSurface(const TriMesh& target);

    const TriMesh& mesh() const { return tree_.mesh(); }
    SurfaceHit closest(const Vec3& q) const { return tree_.closest(q); }
    const Vec3 face_normal(int f) const { return face_normals_.row(f).transpose(); }
    /// True when the hit lies on a boundary edge or boundary vertex.
    bool on_boundary(const SurfaceHit& hit) const;

private:
    AabbTree tree_;
    PointSet face_normals_;
    std::vector<bool> boundary_vertex_;
    std::vector<std::pair<int, int>> boundary_edges_;  // sorted
};

/// One target point per template vertex; weight 0 marks an invalid match.
struct CorrespondenceSet {
    PointSet targets;
    Eigen::VectorXd weights;

    double validity_ratio() const { return weights.size() ? weights.mean() : 0.0; }
    Eigen::Index valid_count() const { return static_cast<Eigen::Index>(weights.sum()); }
};

/// Closest point on the target surface for every vertex. A match is invalid when
/// the angle between the vertex normal and the hit triangle's normal exceeds
/// max_angle_deg, or when the hit lies on the target's boundary.
CorrespondenceSet find_correspondences(const TriMesh& morphed, const TargetSurface& target, double max_angle_deg);
CorrespondenceSet find_correspondences(const TriMesh& morphed, const TriMesh& target, double max_angle_deg);

struct NicpConfig {
    int n_iters = 80;
    double alpha_initial = 1e8;
    double alpha_decay = 0.8;
    int landmark_cutoff = 51;       // beta_n = 1 while n < cutoff, else 0
    double inner_exit_eps = 100.0;  // Frobenius norm of the parameter change
    double normal_compat_max_deg = 45.0;
    double gamma = 1.0;
    int max_inner = 20;

    double alpha(int n) const;
    double beta(int n) const { return n < landmark_cutoff ? 1.0 : 0.0; }
    void validate() const;
};

struct LbrpConfig {
    double lambda1 = 10.0;
    double lambda2 = 0.1;
    double normal_compat_max_deg = 45.0;
    void validate() const;
};

struct IterationRecord {
    int outer = 0;
    int inner = 0;
    double alpha = 0.0;
    double beta = 0.0;
    double stiffness = 0.0;   // weighted stiffness term after the solve
    double data = 0.0;
    double landmark = 0.0;
    double energy_before = 0.0;  // full objective at the previous parameters
    double energy_after = 0.0;
    double change = 0.0;
    double validity_ratio = 0.0;
};

struct MorphResult {
    TriMesh morphed;
    std::vector<IterationRecord> iterations;
    int monotonicity_violations = 0;
};

/// Optimal-step non-rigid ICP with per-vertex affine transforms. Template and
/// target are expected to be pre-aligned.
MorphResult nicp_affine(const TriMesh& templ, const TriMesh& target, const LandmarkSet& template_lms,
                        const LandmarkSet& target_lms, const NicpConfig& cfg = {});

/// Translation-only variant.
MorphResult nicp_translation(const TriMesh& templ, const TriMesh& target, const LandmarkSet& template_lms,
                             const LandmarkSet& target_lms, const NicpConfig& cfg = {});

/// Laplace-Beltrami regularized projection: least-squares solution of
/// [lambda L0; S_X] X = [lambda L0 X0; S_Y Y] over the valid correspondences.
TriMesh lbrp_project(const TriMesh& templ, const SparseMatrix& L0, double lambda, const CorrespondenceSet& corr);

/// Two projections: lambda1 to adapt, then lambda2 to refine.
MorphResult two_stage_lbrp(const TriMesh& templ, const TriMesh& target, const LbrpConfig& cfg = {});

// --- single solves, exposed for verification -------------------------------

struct AffineTerms {
    double stiffness = 0.0;  // alpha^2 ||(M kron G) X||^2
    double data = 0.0;       // ||W (D X - U)||^2
    double landmark = 0.0;   // beta^2 ||D_L X - U_L||^2
    double total() const { return stiffness + data + landmark; }
};

/// Per-vertex affine unknowns X (4p x 3) for the given template.
class AffineProblem {
public:
    AffineProblem(const TriMesh& templ, const LandmarkIndices& landmark_vertices, double gamma);

    static Eigen::MatrixXd identity(Eigen::Index p);
    PointSet deform(const Eigen::MatrixXd& X) const;
    AffineTerms energy(const Eigen::MatrixXd& X, const CorrespondenceSet& corr, const LandmarkSet& target_lms,
                       double alpha, double beta) const;
    /// Exact minimizer of the objective for fixed correspondences and weights.
    Eigen::MatrixXd solve(const CorrespondenceSet& corr, const LandmarkSet& target_lms, double alpha, double beta);

private:
    PointSet vertices_;
    LandmarkIndices lm_;
    double gamma_;
    std::vector<std::pair<int, int>> edges_;
    StiffBlockSolver solver_;
};

// --- morph quality metrics ---------------------------------------------------

/// Mean Euclidean distance between morphed landmark vertices and target landmarks.
double landmark_error(const TriMesh& morphed, const LandmarkIndices& template_lm_indices,
                      const LandmarkSet& target_lms);

/// Mean distance from morphed vertices to the nearest point of the target surface.
double v2nn_distance(const TriMesh& morphed, const TargetSurface& target);
double v2nn_distance(const TriMesh& morphed, const TriMesh& target);

struct NormalDeviation {
    double overall_deg = 0.0;  // sample-size weighted over classes
    std::map<DiagnosisClass, double> per_class_deg;
};

/// Mean angle between each mesh's vertex normals and the per-vertex mean normal,
/// for meshes that are already aligned and share topology.
double normal_deviation_aligned(const std::vector<TriMesh>& meshes);

/// Per class: rigid GPA of the morphs, then normal_deviation_aligned.
/// Classes with fewer than two members are skipped with a warning.
NormalDeviation surface_normal_deviation(const std::map<DiagnosisClass, std::vector<TriMesh>>& morphs_by_class);

nlohmann::json morph_diagnostics_json(const MorphResult& result);

}  // namespace craniossm
