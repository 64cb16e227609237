#include <random>

#include "doctest.h"
#include "support.hpp"

#include "craniossm/error.hpp"
#include "craniossm/geometry.hpp"
#include "craniossm/sparse_solve.hpp"
#include "craniossm/spatial_index.hpp"
#include "craniossm/synth.hpp"

using namespace craniossm;

namespace {

// Independent closest point: plane projection when inside, else nearest edge point.
Vec3 closest_oracle(const Vec3& q, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 n = (b - a).cross(c - a).normalized();
    const Vec3 proj = q - n.dot(q - a) * n;
    auto inside = [&](const Vec3& p) {
        return (b - a).cross(p - a).dot(n) >= 0 && (c - b).cross(p - b).dot(n) >= 0 && (a - c).cross(p - c).dot(n) >= 0;
    };
    if (inside(proj)) return proj;
    Vec3 best = a;
    double best_d = 1e300;
    for (auto [u, v] : {std::pair{a, b}, std::pair{b, c}, std::pair{c, a}}) {
        const double t = std::clamp((q - u).dot(v - u) / (v - u).squaredNorm(), 0.0, 1.0);
        const Vec3 p = u + t * (v - u);
        if ((q - p).norm() < best_d) {
            best_d = (q - p).norm();
            best = p;
        }
    }
    return best;
}

// Random SPD matrix with the block sparsity of a mesh graph.
template <int B>
void random_block_system(std::mt19937_64& rng, const std::vector<std::pair<int, int>>& pairs, int n,
                         std::vector<typename BlockCholesky<B>::Block>& diag,
                         std::vector<typename BlockCholesky<B>::Block>& off, Eigen::MatrixXd& dense) {
    using Block = typename BlockCholesky<B>::Block;
    dense = Eigen::MatrixXd::Zero(B * n, B * n);
    off.clear();
    for (const auto& [i, j] : pairs) {
        Block blk = testing::random_matrix(rng, B, B);
        off.push_back(blk);
        dense.block<B, B>(B * i, B * j) += blk;
        dense.block<B, B>(B * j, B * i) += blk.transpose();
    }
    // Diagonal dominance keeps the matrix positive definite.
    diag.assign(n, Block::Zero());
    for (int i = 0; i < n; ++i) {
        Block r = testing::random_matrix(rng, B, B);
        const double row = dense.middleRows(B * i, B).cwiseAbs().sum();
        diag[i] = r * r.transpose() + (row + 1.0) * Block::Identity();
        dense.block<B, B>(B * i, B * i) = diag[i];
    }
}

template <int B>
void check_block_cholesky(bool pin_last) {
    std::mt19937_64 rng(B * 10 + pin_last);
    PhantomSpec spec;
    spec.resolution = 3;
    const TriMesh mesh = generate_phantom(spec).mesh;
    const int n = static_cast<int>(mesh.vertex_count());
    std::vector<std::pair<int, int>> pairs = unique_edges(mesh);
    for (int i = 0; i + 1 < n; i += 5) pairs.emplace_back(i, n - 1);  // dense coupling to the last block
    std::vector<typename BlockCholesky<B>::Block> diag, off;
    Eigen::MatrixXd dense;
    random_block_system<B>(rng, pairs, n, diag, off, dense);

    BlockCholesky<B> chol;
    chol.analyze(n, pairs, pin_last);
    chol.factorize(diag, off);
    const Eigen::MatrixXd rhs = testing::random_matrix(rng, B * n, 3);
    const Eigen::MatrixXd x = chol.solve(rhs);
    const Eigen::MatrixXd oracle = dense.llt().solve(rhs);
    CHECK((x - oracle).norm() < 1e-10 * oracle.norm());
    CHECK(chol.block_count() == n);
    CHECK(chol.factor_blocks() >= pairs.size() - n / 5);

    // Refactoring with new values on the same pattern.
    for (auto& d : diag) d *= 2.0;
    for (auto& o : off) o *= 2.0;
    chol.factorize(diag, off);
    CHECK((chol.solve(rhs) - 0.5 * oracle).norm() < 1e-10 * oracle.norm());
}

// Dense K + D for the stiff block system.
Eigen::MatrixXd stiff_dense(Eigen::Index p, int b, const std::vector<std::pair<int, int>>& edges,
                            const Eigen::VectorXd& s, const std::vector<Eigen::MatrixXd>& blocks) {
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(b * p, b * p);
    for (const auto& [i, j] : edges)
        for (int k = 0; k < b; ++k) {
            A(b * i + k, b * i + k) += s(k);
            A(b * j + k, b * j + k) += s(k);
            A(b * i + k, b * j + k) -= s(k);
            A(b * j + k, b * i + k) -= s(k);
        }
    for (Eigen::Index i = 0; i < p; ++i) A.block(b * i, b * i, b, b) += blocks[i];
    return A;
}

void check_stiff(int b, double stiffness, double tol) {
    std::mt19937_64 rng(b * 100 + static_cast<int>(std::log10(stiffness)));
    const TriMesh mesh = testing::grid_patch(5);
    const Eigen::Index p = mesh.vertex_count();
    const auto edges = unique_edges(mesh);
    Eigen::VectorXd s = Eigen::VectorXd::Constant(b, stiffness);
    s(b - 1) *= 0.5;
    std::vector<Eigen::MatrixXd> blocks(p);
    for (Eigen::Index i = 0; i < p; ++i) {
        // Rank one data blocks on a few vertices only, like sparse correspondences.
        Eigen::VectorXd d = testing::random_matrix(rng, b, 1);
        blocks[i] = (i % 3 == 0) ? Eigen::MatrixXd(d * d.transpose()) : Eigen::MatrixXd::Zero(b, b);
    }
    blocks[1] += Eigen::MatrixXd::Identity(b, b);
    const Eigen::MatrixXd A = stiff_dense(p, b, edges, s, blocks);
    const Eigen::MatrixXd x_true = testing::random_matrix(rng, b * p, 3);
    const Eigen::MatrixXd rhs = A * x_true;

    StiffBlockSolver solver;
    const Eigen::MatrixXd x = solver.solve(p, b, edges, s, blocks, rhs);
    const Eigen::MatrixXd residual = A * x - rhs;
    CHECK(residual.norm() <= tol * rhs.norm());
    if (stiffness <= 1.0) CHECK((x - x_true).norm() < 1e-8 * x_true.norm());
    // A second solve reuses the analysis.
    const Eigen::MatrixXd again = solver.solve(p, b, edges, s, blocks, rhs);
    CHECK(again == x);
}

}  // namespace

TEST_SUITE("spatial") {

TEST_CASE("closest point on triangle matches an independent projection") {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 2000; ++t) {
        const Eigen::MatrixXd v = testing::random_matrix(rng, 3, 4);
        const Vec3 a = v.col(0), b = v.col(1), c = v.col(2), q = 2.0 * v.col(3);
        const TriangleClosest got = closest_point_on_triangle(q, a, b, c);
        const Vec3 oracle = closest_oracle(q, a, b, c);
        REQUIRE(std::abs((q - got.point).norm() - (q - oracle).norm()) < 1e-10);
    }
}

TEST_CASE("closest point features: face, edge and vertex") {
    const Vec3 a(0, 0, 0), b(1, 0, 0), c(0, 1, 0);
    CHECK(closest_point_on_triangle(Vec3(0.2, 0.2, 1), a, b, c).feature == HitFeature::Face);
    const auto edge = closest_point_on_triangle(Vec3(0.5, -1, 0), a, b, c);
    CHECK(edge.feature == HitFeature::Edge);
    CHECK((edge.point - Vec3(0.5, 0, 0)).norm() < 1e-15);
    const auto vertex = closest_point_on_triangle(Vec3(-1, -1, 0), a, b, c);
    CHECK(vertex.feature == HitFeature::Vertex);
    CHECK(vertex.point == a);
}

TEST_CASE("AABB tree agrees with a brute-force scan") {
    PhantomSpec spec;
    spec.resolution = 6;
    spec.diagnosis = DiagnosisClass::Sagittal;
    spec.severity = 1.0;
    const TriMesh mesh = generate_phantom(spec).mesh;
    const AabbTree tree(mesh);
    std::mt19937_64 rng(5);
    for (int t = 0; t < 300; ++t) {
        const Vec3 q = 90.0 * Vec3(testing::random_matrix(rng, 3, 1));
        double best = 1e300;
        for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
            const Vec3 p = closest_oracle(q, mesh.vertices.row(mesh.faces(f, 0)), mesh.vertices.row(mesh.faces(f, 1)),
                                          mesh.vertices.row(mesh.faces(f, 2)));
            best = std::min(best, (q - p).norm());
        }
        const SurfaceHit hit = tree.closest(q);
        REQUIRE(std::abs(std::sqrt(hit.distance2) - best) < 1e-9);
        REQUIRE(std::abs((hit.point - q).norm() - best) < 1e-9);
    }
}

TEST_CASE("AABB tree over an empty mesh is rejected") {
    CHECK_THROWS_AS(AabbTree(TriMesh{}), ValidationError);
}

}  // TEST_SUITE

TEST_SUITE("sparse-solve") {

TEST_CASE("block Cholesky matches a dense factorization") {
    check_block_cholesky<1>(false);
    check_block_cholesky<1>(true);
    check_block_cholesky<4>(false);
    check_block_cholesky<4>(true);
}

TEST_CASE("block Cholesky rejects an indefinite matrix") {
    BlockCholesky<1> chol;
    chol.analyze(2, {{0, 1}}, false);
    using B1 = BlockCholesky<1>::Block;
    CHECK_THROWS_AS(chol.factorize({B1::Constant(1.0), B1::Constant(1.0)}, {B1::Constant(2.0)}), NumericalError);
}

TEST_CASE("stiff block solver against the dense system") {
    check_stiff(1, 1.0, 1e-12);
    check_stiff(4, 1.0, 1e-12);
    check_stiff(1, 1e8, 1e-12);
    check_stiff(4, 1e8, 1e-12);
}

TEST_CASE("stiff block solver recovers the constant mode under huge stiffness") {
    // Data pins only vertex 1; stiffness ties the whole patch to its value.
    const TriMesh mesh = testing::grid_patch(3);
    const Eigen::Index p = mesh.vertex_count();
    std::vector<Eigen::MatrixXd> blocks(p, Eigen::MatrixXd::Zero(1, 1));
    blocks[1](0, 0) = 1.0;
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(p, 1);
    rhs(1, 0) = 7.0;
    StiffBlockSolver solver;
    const Eigen::MatrixXd x = solver.solve(p, 1, unique_edges(mesh), Eigen::VectorXd::Constant(1, 1e12), blocks, rhs);
    CHECK((x.array() - 7.0).abs().maxCoeff() < 1e-9);
}

TEST_CASE("stiff block solver input checks") {
    StiffBlockSolver solver;
    std::vector<Eigen::MatrixXd> blocks(3, Eigen::MatrixXd::Identity(2, 2));
    CHECK_THROWS_AS(solver.solve(3, 2, {{0, 1}}, Eigen::VectorXd::Ones(2), blocks, Eigen::MatrixXd::Zero(6, 1)),
                    NumericalError);
    std::vector<Eigen::MatrixXd> one(3, Eigen::MatrixXd::Identity(1, 1));
    CHECK_THROWS_AS(solver.solve(3, 1, {{0, 3}}, Eigen::VectorXd::Ones(1), one, Eigen::MatrixXd::Zero(3, 1)),
                    NumericalError);
}

TEST_CASE("normal equation solver with refinement") {
    std::mt19937_64 rng(9);
    const Eigen::MatrixXd J = testing::random_matrix(rng, 30, 10);
    const Eigen::MatrixXd H = J.transpose() * J;
    const Eigen::MatrixXd rhs = testing::random_matrix(rng, 10, 2);
    NormalEquationSolver solver;
    solver.factorize(H.sparseView());
    const Eigen::MatrixXd x = solver.solve(rhs, [&](const Eigen::MatrixXd& v) { return Eigen::MatrixXd(J.transpose() * (J * v)); });
    CHECK((x - H.ldlt().solve(rhs)).norm() < 1e-10 * x.norm());
    Eigen::MatrixXd singular = H;
    singular.row(3).setZero();
    singular.col(3).setZero();
    CHECK_THROWS_AS(solver.factorize(singular.sparseView()), NumericalError);
}

}  // TEST_SUITE
