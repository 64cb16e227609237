#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "craniossm/align.hpp"
#include "craniossm/geometry.hpp"
#include "craniossm/mesh.hpp"

namespace craniossm {

/// Point distribution model x = mean + V diag(sqrt(lambda)) alpha.
///
/// Components are orthonormal in the mass-weighted inner product,
/// V^T M3 V = I, where M3 expands the stored p x p mass matrix onto coordinates.
struct ShapeModel {
    Eigen::VectorXd mean;         // 3p, interleaved x y z
    Eigen::MatrixXd components;   // 3p x k
    Eigen::VectorXd eigenvalues;  // k, descending, mm^2
    MassMatrix mass;              // p x p over the model's vertices
    std::optional<std::vector<int>> vertex_mask;  // template vertex of each model vertex
    FaceArray faces;              // model topology (indices into model vertices)
    std::optional<DiagnosisClass> class_label;
    int n_train = 0;

    Eigen::Index vertex_count() const { return mean.size() / 3; }
    Eigen::Index component_count() const { return eigenvalues.size(); }
    PointSet mean_shape() const { return unflatten(mean); }
    TriMesh mean_mesh() const;
};

struct BuildOptions {
    std::optional<std::vector<int>> mask;   // restrict to these template vertices
    std::optional<int> keep_components;     // leading components to keep
    std::optional<double> keep_variance;    // smallest j with compactness(j) >= fraction
    bool align = true;                      // rigid GPA of the (masked) shapes
    GpaOptions gpa;
    std::optional<DiagnosisClass> class_label;
};

/// Weighted PCA through the n x n Gram matrix G = X^T M3 X of the centered data.
/// Eigenvalues are G's eigenvalues divided by (n - 1); directions with
/// eigenvalue below 1e-12 of the largest are dropped.
ShapeModel build_model(const std::vector<PointSet>& shapes, const FaceArray& faces, const MassMatrix& mass,
                       const BuildOptions& options = {});

/// mean + V diag(sqrt(lambda)) alpha; alpha shorter than k is zero padded.
PointSet reconstruct(const ShapeModel& model, const Eigen::VectorXd& alpha);

/// diag(lambda)^(-1/2) V^T M3 (x - mean), the mass-weighted least-squares coefficients.
Eigen::VectorXd project(const ShapeModel& model, const PointSet& shape);

/// Standard normal coefficients clamped to +-clamp_sigma. The optional
/// component count limits sampling to the leading directions.
std::pair<Eigen::VectorXd, PointSet> sample(const ShapeModel& model, std::uint64_t seed, double clamp_sigma = 3.0,
                                            std::optional<Eigen::Index> components = std::nullopt);

ShapeModel truncate(const ShapeModel& model, Eigen::Index k_new);
ShapeModel truncate_variance(const ShapeModel& model, double fraction);

/// Restricts a template-sized shape to the model's vertices (no-op when sizes
/// already match) and aligns it rigidly to the model mean.
PointSet align_to_model(const ShapeModel& model, const PointSet& shape);

/// Restricts a template-sized shape to the model's vertices.
PointSet restrict_to_model(const ShapeModel& model, const PointSet& shape);

/// Component counts of the published model set: full model 100, control 30,
/// sagittal 30, metopic 25, coronal 15.
int release_component_count(std::optional<DiagnosisClass> label);

/// Vertices strictly above the plane through t_l, t_r and se, shifted by
/// offset_mm along the superior normal (se - t_l) x (t_r - t_l).
std::vector<int> cranial_mask(const TriMesh& templ, const LandmarkSet& lms, double offset_mm = 10.0);

/// Faces whose three corners are all in the mask, reindexed to mask order.
FaceArray restrict_faces(const FaceArray& faces, const std::vector<int>& mask, Eigen::Index template_vertices);

// --- model metrics -----------------------------------------------------------

/// sum_{i<=j} lambda_i / sum lambda_i (1 for an empty or zero-variance model).
double compactness(const ShapeModel& model, Eigen::Index j);

/// Leave-one-out: build on n-1 shapes, project+reconstruct the held-out shape
/// with j components, mean per-vertex Euclidean error; averaged over shapes.
double generalization(const std::vector<PointSet>& shapes, const FaceArray& faces, const MassMatrix& mass,
                      Eigen::Index j, const BuildOptions& options = {}, int jobs = 1);
/// Same for every j = 1..max_j in one pass over the leave-one-out models.
std::vector<double> generalization_curve(const std::vector<PointSet>& shapes, const FaceArray& faces,
                                         const MassMatrix& mass, Eigen::Index max_j,
                                         const BuildOptions& options = {}, int jobs = 1);

/// Mean over samples (j leading components) of the smallest mean per-vertex
/// distance to any training shape. Training shapes are aligned to the model.
double specificity(const ShapeModel& model, const std::vector<PointSet>& shapes, Eigen::Index j, int n_samples,
                   std::uint64_t seed);

// --- persistence ---------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

/// Directory container: manifest.json plus raw little-endian binaries.
void save_model(const ShapeModel& model, const std::filesystem::path& dir);
ShapeModel load_model(const std::filesystem::path& dir);

/// Lower-case hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

}  // namespace craniossm
