#pragma once

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "craniossm/error.hpp"

namespace craniossm {

// Raw little-endian blobs (the host is little-endian; mesh_io checks this).

template <class T>
std::string to_bytes(const std::vector<T>& values) {
    std::string out(values.size() * sizeof(T), '\0');
    if (!values.empty()) std::memcpy(out.data(), values.data(), out.size());
    return out;
}

template <class T>
std::vector<T> from_bytes(const std::string& bytes, const std::string& name) {
    if (bytes.size() % sizeof(T) != 0) throw ValidationError(name + ": size is not a multiple of the element size");
    std::vector<T> out(bytes.size() / sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

/// Matrix entries in row-major order.
inline std::vector<double> row_major(const Eigen::MatrixXd& m) {
    std::vector<double> out(static_cast<size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) out[static_cast<size_t>(r * m.cols() + c)] = m(r, c);
    return out;
}

std::string read_binary_file(const std::filesystem::path& path);
void write_binary_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace craniossm
