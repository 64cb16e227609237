#pragma once

#include <functional>
#include <utility>
#include <vector>

#include <Eigen/SparseCholesky>

namespace craniossm {

/// Symmetric sparse solve for least-squares normal equations H X = B.
///
/// H is Jacobi-scaled and factored with LDL^T; the solution is then refined
/// against an exact operator `apply` (x -> H x evaluated from the factored
/// least-squares form, e.g. via edge differences) so that large stiffness
/// weights do not swamp the weakly constrained directions.
class NormalEquationSolver {
public:
    using Operator = std::function<Eigen::MatrixXd(const Eigen::MatrixXd&)>;

    /// Analyzes and factors H. Reuses the symbolic analysis when the sparsity
    /// pattern (nonzero count and size) matches the previous call.
    void factorize(const Eigen::SparseMatrix<double>& H);

    Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs, const Operator& apply, int max_refinements = 10) const;

private:
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt_;
    Eigen::VectorXd scale_;
    Eigen::Index analyzed_rows_ = -1;
    Eigen::Index analyzed_nnz_ = -1;
};

/// Sparse Cholesky factorization of a symmetric positive definite matrix made
/// of dense B x B blocks. The block graph is ordered by approximate minimum
/// degree; the last block can be pinned last (useful for a dense coupling
/// block). Unknowns are Jacobi-scaled before factoring.
template <int B>
class BlockCholesky {
public:
    using Block = Eigen::Matrix<double, B, B>;

    /// Symbolic analysis. `pairs` lists the off-diagonal blocks (i, j), i != j;
    /// the block (j, i) is implied as the transpose. Duplicates add up.
    void analyze(int n_blocks, const std::vector<std::pair<int, int>>& pairs, bool pin_last);

    /// Numeric factorization. `diag` has one block per block row, `off` one
    /// block A(i, j) per analyzed pair. Throws NumericalError when the matrix is
    /// not positive definite.
    void factorize(const std::vector<Block>& diag, const std::vector<Block>& off);

    /// Solves A X = R for R with n_blocks * B rows.
    Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;

    int block_count() const { return n_; }
    /// Stored off-diagonal blocks of the factor.
    size_t factor_blocks() const { return rows_.size(); }

private:
    struct Entry {
        int row;      // permuted block row, < column
        int pair;     // index into the pair list
        bool transposed;
    };

    int n_ = 0;
    std::vector<int> perm_;                // new index of each original block
    std::vector<std::vector<Entry>> cols_; // upper part of A, by permuted column
    std::vector<int> parent_;              // elimination tree
    std::vector<int> col_start_;           // factor column offsets
    std::vector<int> rows_;                // factor row indices
    std::vector<Block> values_;            // factor blocks L(row, col)
    std::vector<Block> diag_inv_;          // inverse of the diagonal factor blocks
    std::vector<Eigen::Matrix<double, B, 1>> scale_;  // Jacobi scaling, original order
};

extern template class BlockCholesky<1>;
extern template class BlockCholesky<4>;

/// Solves (K + D) X = R where K couples b unknowns per vertex through edge
/// differences, K = sum_e sum_k s_k (x_jk - x_ik)^2, and D is block diagonal
/// with one b x b block per vertex. b must be 1 or 4.
///
/// With very large s_k the constant mode of K (one common value per component)
/// is only pinned by D and the plain normal matrix is numerically singular.
/// The system is therefore solved in the basis x_i = c + y_i with y_0 = 0,
/// which separates the constant mode c exactly, and refined against the exact
/// operator.
class StiffBlockSolver {
public:
    Eigen::MatrixXd solve(Eigen::Index p, int b, const std::vector<std::pair<int, int>>& edges,
                          const Eigen::VectorXd& stiffness, const std::vector<Eigen::MatrixXd>& blocks,
                          const Eigen::MatrixXd& rhs);

private:
    template <int B>
    Eigen::MatrixXd solve_fixed(BlockCholesky<B>& chol, Eigen::Index p, const std::vector<std::pair<int, int>>& edges,
                                const Eigen::VectorXd& stiffness, const std::vector<Eigen::MatrixXd>& blocks,
                                const Eigen::MatrixXd& rhs);

    BlockCholesky<1> chol1_;
    BlockCholesky<4> chol4_;
    std::vector<std::pair<int, int>> analyzed_edges_;
    Eigen::Index analyzed_p_ = -1;
    int analyzed_b_ = 0;
};

}  // namespace craniossm
