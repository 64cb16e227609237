#pragma once

#include <vector>

#include <Eigen/SparseCore>

#include "craniossm/mesh.hpp"

namespace craniossm {

using SparseMatrix = Eigen::SparseMatrix<double>;

struct CleanOptions {
    double dedup_tol = 1e-6;               // mm
    double min_component_fraction = 0.05;  // of the largest component's face count
};

/// Merges coincident vertices, drops degenerate faces and small isolated parts,
/// then removes unreferenced vertices. Idempotent.
TriMesh clean(const TriMesh& mesh, const CleanOptions& options = {});

struct VertexNormals {
    PointSet normals;         // unit rows, zero where invalid
    std::vector<bool> valid;  // false for vertices without incident area
};

/// Area-weighted vertex normals.
VertexNormals vertex_normals(const TriMesh& mesh);

/// Unit face normals (zero for degenerate faces).
PointSet face_normals(const TriMesh& mesh);

/// Per-vertex and per-edge area weights (mm^2), symmetric p x p.
///
/// Each face hands its full area to the vertex nearest its centroid (diagonal)
/// and to the edge nearest its centroid (both symmetric off-diagonal slots).
/// Ties go to the lowest vertex index / lexicographically smallest edge.
struct MassMatrix {
    SparseMatrix matrix;

    Eigen::Index size() const { return matrix.rows(); }
    double diagonal_sum() const;
    double upper_offdiagonal_sum() const;
};

MassMatrix mass_matrix(const TriMesh& mesh);

/// Block replication onto coordinates: M3[3i+a, 3j+b] = M[i,j] if a == b.
SparseMatrix expand_mass_matrix(const MassMatrix& mass);

/// M3 * x for a flattened 3p vector, without forming M3.
Eigen::VectorXd apply_expanded_mass(const MassMatrix& mass, const Eigen::VectorXd& flat);
/// M3 * X column-wise for a 3p x n matrix.
Eigen::MatrixXd apply_expanded_mass(const MassMatrix& mass, const Eigen::MatrixXd& flat_columns);

/// Restriction of M to the given vertex subset (rows and columns, in order).
MassMatrix restrict_mass_matrix(const MassMatrix& mass, const std::vector<int>& vertices);

/// Cotangent Laplace-Beltrami operator, L[i,j] = -(cot a + cot b)/2, rows sum to 0.
/// Cotangents are clamped to +-1e6 (warning emitted when that happens).
SparseMatrix cotangent_laplacian(const TriMesh& mesh);

/// Node-arc incidence matrix: one row per undirected edge (i<j) with -1 at i, +1 at j.
SparseMatrix incidence_matrix(const TriMesh& mesh);

}  // namespace craniossm
