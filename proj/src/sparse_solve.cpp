#include "craniossm/sparse_solve.hpp"

#include <cmath>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/OrderingMethods>

#include "craniossm/error.hpp"

namespace craniossm {

void NormalEquationSolver::factorize(const Eigen::SparseMatrix<double>& H) {
    if (H.rows() != H.cols()) throw NumericalError("normal matrix is not square");
    scale_.resize(H.rows());
    const Eigen::VectorXd diag = H.diagonal();
    for (Eigen::Index i = 0; i < H.rows(); ++i) {
        if (!(diag(i) > 0.0) || !std::isfinite(diag(i)))
            throw NumericalError("singular normal equations (unconstrained unknown " + std::to_string(i) + ")");
        scale_(i) = 1.0 / std::sqrt(diag(i));
    }
    Eigen::SparseMatrix<double> scaled = scale_.asDiagonal() * H * scale_.asDiagonal();
    if (analyzed_rows_ != scaled.rows() || analyzed_nnz_ != scaled.nonZeros()) {
        ldlt_.analyzePattern(scaled);
        analyzed_rows_ = scaled.rows();
        analyzed_nnz_ = scaled.nonZeros();
    }
    ldlt_.factorize(scaled);
    if (ldlt_.info() != Eigen::Success) throw NumericalError("sparse LDL^T factorization failed");
}

Eigen::MatrixXd NormalEquationSolver::solve(const Eigen::MatrixXd& rhs, const Operator& apply,
                                            int max_refinements) const {
    auto raw_solve = [&](const Eigen::MatrixXd& b) -> Eigen::MatrixXd {
        Eigen::MatrixXd y = ldlt_.solve(scale_.asDiagonal() * b);
        return scale_.asDiagonal() * y;
    };
    Eigen::MatrixXd x = raw_solve(rhs);
    if (!x.allFinite()) throw NumericalError("non-finite solution of normal equations");
    Eigen::MatrixXd r = rhs - apply(x);
    double rnorm = r.norm();
    const double target = 1e-15 * rhs.norm();
    for (int it = 0; it < max_refinements && rnorm > target; ++it) {
        const Eigen::MatrixXd candidate = x + raw_solve(r);
        const Eigen::MatrixXd r_new = rhs - apply(candidate);
        const double n_new = r_new.norm();
        if (!(n_new < rnorm)) break;
        x = candidate;
        r = r_new;
        rnorm = n_new;
    }
    if (!x.allFinite()) throw NumericalError("non-finite solution of normal equations");
    return x;
}

template <int B>
void BlockCholesky<B>::analyze(int n_blocks, const std::vector<std::pair<int, int>>& pairs, bool pin_last) {
    if (n_blocks < 1) throw NumericalError("block system has no unknowns");
    n_ = n_blocks;
    const int m = pin_last ? n_ - 1 : n_;

    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(2 * pairs.size() + static_cast<size_t>(n_));
    for (const auto& [a, b] : pairs) {
        if (a < 0 || b < 0 || a >= n_ || b >= n_ || a == b) throw NumericalError("invalid block pair");
        if (a < m && b < m) {
            trip.emplace_back(a, b, 1.0);
            trip.emplace_back(b, a, 1.0);
        }
    }
    // The ordering expects a full symmetric pattern with its diagonal.
    for (int i = 0; i < m; ++i) trip.emplace_back(i, i, 1.0);
    perm_.assign(static_cast<size_t>(n_), n_ - 1);
    if (m > 0) {
        Eigen::SparseMatrix<double> pattern(m, m);
        pattern.setFromTriplets(trip.begin(), trip.end());
        Eigen::PermutationMatrix<Eigen::Dynamic, Eigen::Dynamic, int> order;
        Eigen::AMDOrdering<int>()(pattern, order);
        for (int k = 0; k < m; ++k) perm_[order.indices()(k)] = k;
    }

    cols_.assign(static_cast<size_t>(n_), {});
    for (size_t e = 0; e < pairs.size(); ++e) {
        const int i = perm_[pairs[e].first];
        const int j = perm_[pairs[e].second];
        if (i < j) cols_[j].push_back({i, static_cast<int>(e), false});
        else cols_[i].push_back({j, static_cast<int>(e), true});
    }

    parent_.assign(static_cast<size_t>(n_), -1);
    std::vector<int> ancestor(static_cast<size_t>(n_), -1);
    for (int k = 0; k < n_; ++k)
        for (const Entry& en : cols_[k])
            for (int i = en.row; i != -1 && i < k;) {
                const int next = ancestor[i];
                ancestor[i] = k;
                if (next == -1) parent_[i] = k;
                i = next;
            }

    std::vector<int> count(static_cast<size_t>(n_), 0), flag(static_cast<size_t>(n_), -1);
    for (int k = 0; k < n_; ++k) {
        flag[k] = k;
        for (const Entry& en : cols_[k])
            for (int i = en.row; flag[i] != k; i = parent_[i]) {
                ++count[i];
                flag[i] = k;
            }
    }
    col_start_.assign(static_cast<size_t>(n_) + 1, 0);
    for (int k = 0; k < n_; ++k) col_start_[k + 1] = col_start_[k] + count[k];
    rows_.assign(static_cast<size_t>(col_start_[n_]), 0);
    values_.assign(static_cast<size_t>(col_start_[n_]), Block::Zero());
    diag_inv_.assign(static_cast<size_t>(n_), Block::Zero());
}

template <int B>
void BlockCholesky<B>::factorize(const std::vector<Block>& diag, const std::vector<Block>& off) {
    if (static_cast<int>(diag.size()) != n_) throw NumericalError("block factorization: wrong diagonal count");
    using Vec = Eigen::Matrix<double, B, 1>;
    scale_.assign(static_cast<size_t>(n_), Vec::Zero());
    std::vector<Vec> pscale(static_cast<size_t>(n_));
    std::vector<Block> pdiag(static_cast<size_t>(n_));
    for (int a = 0; a < n_; ++a) {
        const Vec d = diag[a].diagonal();
        for (int r = 0; r < B; ++r)
            if (!(d(r) > 0.0) || !std::isfinite(d(r)))
                throw NumericalError("singular normal equations (unconstrained unknown " +
                                     std::to_string(B * a + r) + ")");
        scale_[a] = d.cwiseSqrt().cwiseInverse();
        pscale[perm_[a]] = scale_[a];
        pdiag[perm_[a]] = scale_[a].asDiagonal() * diag[a] * scale_[a].asDiagonal();
    }

    std::vector<Block> y(static_cast<size_t>(n_), Block::Zero());
    std::vector<int> flag(static_cast<size_t>(n_), -1), pattern(static_cast<size_t>(n_)),
        filled(static_cast<size_t>(n_), 0);
    for (int k = 0; k < n_; ++k) {
        flag[k] = k;
        int top = n_;
        for (const Entry& en : cols_[k]) {
            if (en.pair >= static_cast<int>(off.size())) throw NumericalError("block factorization: missing block");
            const Block& raw = off[en.pair];
            y[en.row] += pscale[en.row].asDiagonal() * (en.transposed ? Block(raw.transpose()) : raw) *
                         pscale[k].asDiagonal();
            int len = 0;
            for (int i = en.row; flag[i] != k; i = parent_[i]) {
                pattern[len++] = i;
                flag[i] = k;
            }
            while (len > 0) pattern[--top] = pattern[--len];
        }
        Block d = pdiag[k];
        for (; top < n_; ++top) {
            const int i = pattern[top];
            const Block z = diag_inv_[i] * y[i];
            y[i].setZero();
            for (int p = col_start_[i]; p < col_start_[i] + filled[i]; ++p) y[rows_[p]].noalias() -= values_[p] * z;
            d.noalias() -= z.transpose() * z;
            const int pos = col_start_[i] + filled[i]++;
            rows_[pos] = k;
            values_[pos] = z.transpose();
        }
        const Eigen::LLT<Block> llt(d);
        if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().minCoeff() > 1e-150))
            throw NumericalError("block Cholesky factorization failed: matrix is not positive definite");
        diag_inv_[k] = llt.matrixL().solve(Block::Identity());
    }
}

template <int B>
Eigen::MatrixXd BlockCholesky<B>::solve(const Eigen::MatrixXd& rhs) const {
    if (rhs.rows() != static_cast<Eigen::Index>(B) * n_) throw NumericalError("block solve: wrong right-hand side");
    const Eigen::Index m = rhs.cols();
    Eigen::MatrixXd x(rhs.rows(), m);
    for (int a = 0; a < n_; ++a)
        x.middleRows<B>(B * perm_[a]) = scale_[a].asDiagonal() * rhs.middleRows<B>(B * a);
    for (int k = 0; k < n_; ++k) {
        const Eigen::Matrix<double, B, Eigen::Dynamic> w = diag_inv_[k] * x.middleRows<B>(B * k);
        x.middleRows<B>(B * k) = w;
        for (int p = col_start_[k]; p < col_start_[k + 1]; ++p)
            x.middleRows<B>(B * rows_[p]).noalias() -= values_[p] * w;
    }
    for (int k = n_ - 1; k >= 0; --k) {
        Eigen::Matrix<double, B, Eigen::Dynamic> acc = x.middleRows<B>(B * k);
        for (int p = col_start_[k]; p < col_start_[k + 1]; ++p)
            acc.noalias() -= values_[p].transpose() * x.middleRows<B>(B * rows_[p]);
        x.middleRows<B>(B * k) = diag_inv_[k].transpose() * acc;
    }
    Eigen::MatrixXd out(rhs.rows(), m);
    for (int a = 0; a < n_; ++a)
        out.middleRows<B>(B * a) = scale_[a].asDiagonal() * x.middleRows<B>(B * perm_[a]);
    return out;
}

template class BlockCholesky<1>;
template class BlockCholesky<4>;

Eigen::MatrixXd StiffBlockSolver::solve(Eigen::Index p, int b, const std::vector<std::pair<int, int>>& edges,
                                        const Eigen::VectorXd& stiffness, const std::vector<Eigen::MatrixXd>& blocks,
                                        const Eigen::MatrixXd& rhs) {
    if (p < 1 || stiffness.size() != b || static_cast<Eigen::Index>(blocks.size()) != p || rhs.rows() != b * p)
        throw NumericalError("stiff block system has inconsistent sizes");
    if (b == 1) return solve_fixed(chol1_, p, edges, stiffness, blocks, rhs);
    if (b == 4) return solve_fixed(chol4_, p, edges, stiffness, blocks, rhs);
    throw NumericalError("stiff block solver supports 1 or 4 unknowns per vertex");
}

template <int B>
Eigen::MatrixXd StiffBlockSolver::solve_fixed(BlockCholesky<B>& chol, Eigen::Index p,
                                              const std::vector<std::pair<int, int>>& edges,
                                              const Eigen::VectorXd& stiffness,
                                              const std::vector<Eigen::MatrixXd>& blocks,
                                              const Eigen::MatrixXd& rhs) {
    using Block = typename BlockCholesky<B>::Block;
    const int np = static_cast<int>(p);
    // Block unknowns: y_i at i - 1 for i >= 1, the constant c last.
    const int c = np - 1;
    for (const auto& [i, j] : edges)
        if (i < 0 || j < 0 || i >= np || j >= np || i == j) throw NumericalError("invalid edge in stiff block system");

    std::vector<std::pair<int, int>> pairs;
    for (const auto& [i, j] : edges)
        if (i != 0 && j != 0) pairs.emplace_back(i - 1, j - 1);
    for (int i = 1; i < np; ++i) pairs.emplace_back(i - 1, c);
    if (analyzed_b_ != B || analyzed_p_ != p || analyzed_edges_ != edges) {
        chol.analyze(np, pairs, true);
        analyzed_b_ = B;
        analyzed_p_ = p;
        analyzed_edges_ = edges;
    }

    const Eigen::Matrix<double, B, 1> s = stiffness;
    std::vector<Block> fixed(static_cast<size_t>(np));
    for (int i = 0; i < np; ++i) fixed[i] = blocks[i];
    std::vector<Block> diag(static_cast<size_t>(np), Block::Zero());
    std::vector<Block> off;
    off.reserve(pairs.size());
    diag[c] = Block::Zero();
    for (int i = 0; i < np; ++i) {
        diag[c] += fixed[i];
        if (i != 0) diag[i - 1] += fixed[i];
    }
    for (const auto& [i, j] : edges) {
        if (i != 0) diag[i - 1].diagonal() += s;
        if (j != 0) diag[j - 1].diagonal() += s;
        if (i != 0 && j != 0) off.push_back(Block((-s).asDiagonal()));
    }
    for (int i = 1; i < np; ++i) off.push_back(fixed[i]);
    chol.factorize(diag, off);

    const Eigen::Index m = rhs.cols();
    Eigen::MatrixXd rhs_z = Eigen::MatrixXd::Zero(B * np, m);
    for (int i = 0; i < np; ++i) {
        rhs_z.middleRows<B>(B * c) += rhs.middleRows<B>(B * i);
        if (i != 0) rhs_z.middleRows<B>(B * (i - 1)) = rhs.middleRows<B>(B * i);
    }

    // Exact operator in the deflated basis.
    auto apply = [&](const Eigen::MatrixXd& z) {
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(z.rows(), m);
        Eigen::Matrix<double, B, Eigen::Dynamic> d(B, m);
        for (const auto& [i, j] : edges) {
            d.setZero();
            if (j != 0) d += z.middleRows<B>(B * (j - 1));
            if (i != 0) d -= z.middleRows<B>(B * (i - 1));
            d = s.asDiagonal() * d;
            if (i != 0) out.middleRows<B>(B * (i - 1)) -= d;
            if (j != 0) out.middleRows<B>(B * (j - 1)) += d;
        }
        for (int i = 0; i < np; ++i) {
            Eigen::Matrix<double, B, Eigen::Dynamic> x = z.middleRows<B>(B * c);
            if (i != 0) x += z.middleRows<B>(B * (i - 1));
            d.noalias() = fixed[i] * x;
            out.middleRows<B>(B * c) += d;
            if (i != 0) out.middleRows<B>(B * (i - 1)) += d;
        }
        return out;
    };

    Eigen::MatrixXd z = chol.solve(rhs_z);
    if (!z.allFinite()) throw NumericalError("non-finite solution of normal equations");
    Eigen::MatrixXd r = rhs_z - apply(z);
    double rnorm = r.norm();
    const double target = 1e-15 * rhs_z.norm();
    for (int it = 0; it < 10 && rnorm > target; ++it) {
        Eigen::MatrixXd candidate = z + chol.solve(r);
        Eigen::MatrixXd r_new = rhs_z - apply(candidate);
        const double n_new = r_new.norm();
        if (!(n_new < rnorm)) break;
        z = std::move(candidate);
        r = std::move(r_new);
        rnorm = n_new;
    }

    Eigen::MatrixXd x(B * np, m);
    for (int i = 0; i < np; ++i) {
        x.middleRows<B>(B * i) = z.middleRows<B>(B * c);
        if (i != 0) x.middleRows<B>(B * i) += z.middleRows<B>(B * (i - 1));
    }
    return x;
}

}  // namespace craniossm
