#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>

#include "craniossm/mesh.hpp"

namespace testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("craniossm_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

/// n x n grid of unit squares in z = 0, two CCW triangles per square.
inline craniossm::TriMesh grid_patch(int n, double spacing = 1.0) {
    craniossm::TriMesh m;
    m.vertices.resize((n + 1) * (n + 1), 3);
    for (int j = 0; j <= n; ++j)
        for (int i = 0; i <= n; ++i) m.vertices.row(j * (n + 1) + i) << i * spacing, j * spacing, 0.0;
    m.faces.resize(2 * n * n, 3);
    int f = 0;
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) {
            const int a = j * (n + 1) + i, b = a + 1, c = a + n + 1, d = c + 1;
            m.faces.row(f++) << a, b, d;
            m.faces.row(f++) << a, d, c;
        }
    return m;
}

inline craniossm::TriMesh unit_cube() {
    craniossm::TriMesh m;
    m.vertices.resize(8, 3);
    for (int i = 0; i < 8; ++i) m.vertices.row(i) << (i & 1), (i >> 1) & 1, (i >> 2) & 1;
    m.faces.resize(12, 3);
    m.faces << 0, 2, 1, 1, 2, 3,  // z = 0
        4, 5, 6, 5, 7, 6,         // z = 1
        0, 1, 4, 1, 5, 4,         // y = 0
        2, 6, 3, 3, 6, 7,         // y = 1
        0, 4, 2, 2, 4, 6,         // x = 0
        1, 3, 5, 3, 7, 5;         // x = 1
    return m;
}

inline Eigen::MatrixXd random_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
    return m;
}

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
    Eigen::Quaterniond q(Eigen::Vector4d(random_matrix(rng, 4, 1)));
    return q.normalized().toRotationMatrix();
}

/// Largest principal angle (radians) between the column spans of A and B,
/// from the part of B's basis orthogonal to A (accurate for tiny angles).
inline double principal_angle(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    const Eigen::MatrixXd qa = Eigen::HouseholderQR<Eigen::MatrixXd>(A).householderQ() *
                               Eigen::MatrixXd::Identity(A.rows(), A.cols());
    const Eigen::MatrixXd qb = Eigen::HouseholderQR<Eigen::MatrixXd>(B).householderQ() *
                               Eigen::MatrixXd::Identity(B.rows(), B.cols());
    const Eigen::MatrixXd residual = qb - qa * (qa.transpose() * qb);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(residual);
    return std::asin(std::min(1.0, svd.singularValues()(0)));
}

}  // namespace testing
