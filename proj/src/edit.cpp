#include "craniossm/edit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include <Eigen/Eigenvalues>

#include "json.hpp"

#include "craniossm/binary_io.hpp"
#include "craniossm/error.hpp"
#include "craniossm/mesh_io.hpp"

namespace craniossm {

namespace fs = std::filesystem;

Eigen::VectorXd pathology_transfer(const Eigen::VectorXd& alpha, const ClassMeanCoefficients& means,
                                   DiagnosisClass from, DiagnosisClass to) {
    const auto f = means.find(from);
    const auto t = means.find(to);
    if (f == means.end() || t == means.end())
        throw ValidationError("no class mean for '" + std::string(class_name(f == means.end() ? from : to)) + "'");
    if (f->second.size() != alpha.size() || t->second.size() != alpha.size())
        throw ValidationError("coefficient vector length does not match the class means");
    if (from == to) return alpha;
    // Subtract first so that alpha == mean_from lands exactly on mean_to.
    return (alpha - f->second) + t->second;
}

ClassMeanCoefficients class_mean_coefficients(const ShapeModel& model, const FeatureSet& features) {
    const Eigen::Index k = model.component_count();
    std::map<DiagnosisClass, std::pair<Eigen::VectorXd, int>> sums;
    for (const auto& s : features) {
        if (s.alpha.size() != k)
            throw ValidationError("sample '" + s.subject_id + "' has " + std::to_string(s.alpha.size()) +
                                  " coefficients, the model has " + std::to_string(k));
        auto [it, inserted] = sums.try_emplace(s.label, Eigen::VectorXd::Zero(k), 0);
        it->second.first += s.alpha;
        ++it->second.second;
    }
    ClassMeanCoefficients means;
    for (DiagnosisClass c : kAllClasses) {
        const auto it = sums.find(c);
        if (it == sums.end()) throw ValidationError("class '" + std::string(class_name(c)) + "' has no samples");
        means[c] = it->second.first / it->second.second;
    }
    return means;
}

Eigen::VectorXd mode_displacement(const ShapeModel& model, const Eigen::VectorXd& c) {
    if (c.size() != model.component_count()) throw ValidationError("mode length does not match the model");
    return model.components * model.eigenvalues.cwiseSqrt().cwiseProduct(c);
}

FlexibilityBasis flexibility_modes(const ShapeModel& model, const std::vector<int>& fixed_vertices, int m,
                                   double eps) {
    const Eigen::Index k = model.component_count();
    const Eigen::Index p = model.vertex_count();
    if (m < 1 || m > k)
        throw ValidationError("requested " + std::to_string(m) + " flexibility modes, model has " + std::to_string(k));
    if (!(eps > 0.0)) throw ValidationError("flexibility regularizer must be positive");
    std::vector<bool> fixed(static_cast<size_t>(p), false);
    for (int v : fixed_vertices) {
        if (v < 0 || v >= p) throw ValidationError("fixed vertex " + std::to_string(v) + " out of range");
        fixed[v] = true;
    }
    const auto n_fixed = static_cast<Eigen::Index>(std::count(fixed.begin(), fixed.end(), true));
    if (n_fixed == p) throw ValidationError("flexibility modes need at least one free vertex");

    const Eigen::MatrixXd W = model.components * model.eigenvalues.cwiseSqrt().asDiagonal();
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(k, k);
    Eigen::MatrixXd B = Eigen::MatrixXd::Zero(k, k);
    for (Eigen::Index v = 0; v < p; ++v) {
        const auto rows = W.middleRows(3 * v, 3);
        (fixed[v] ? B : A).noalias() += rows.transpose() * rows;
    }
    // With nothing fixed B vanishes; the ridge then scales with A instead.
    const double scale = B.trace() > 0.0 ? B.trace() : A.trace();
    Eigen::MatrixXd Breg = B;
    Breg.diagonal().array() += eps * scale / static_cast<double>(k);

    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> ges(A, Breg);
    if (ges.info() != Eigen::Success) throw NumericalError("generalized eigenproblem failed");

    FlexibilityBasis basis;
    basis.fixed = fixed_vertices;
    std::sort(basis.fixed.begin(), basis.fixed.end());
    basis.modes.resize(k, m);
    basis.ratios.resize(m);
    const Eigen::Index n_free = p - n_fixed;
    for (int j = 0; j < m; ++j) {
        const Eigen::Index src = k - 1 - j;
        Eigen::VectorXd c = ges.eigenvectors().col(src);
        const double free_rms = std::sqrt(c.dot(A * c) / static_cast<double>(n_free));
        if (!(free_rms > 0.0)) throw NumericalError("flexibility mode does not move the free region");
        c /= free_rms;
        Eigen::Index arg = 0;
        c.cwiseAbs().maxCoeff(&arg);
        if (c(arg) < 0.0) c = -c;
        basis.modes.col(j) = c;
        basis.ratios(j) = std::max(0.0, ges.eigenvalues()(src));
    }
    return basis;
}

void save_flexibility(const FlexibilityBasis& basis, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    const std::vector<std::pair<std::string, std::string>> files{
        {"flex_modes.f64", to_bytes(row_major(basis.modes))},
        {"flex_ratios.f64", to_bytes(std::vector<double>(basis.ratios.data(), basis.ratios.data() + basis.ratios.size()))},
        {"flex_fixed.u32", to_bytes(std::vector<std::uint32_t>(basis.fixed.begin(), basis.fixed.end()))}};
    nlohmann::ordered_json doc;
    doc["k"] = basis.modes.rows();
    doc["m"] = basis.modes.cols();
    doc["fixed_count"] = basis.fixed.size();
    nlohmann::ordered_json sums = nlohmann::ordered_json::object();
    for (const auto& [name, bytes] : files) {
        write_binary_file(dir / name, bytes);
        sums[name] = sha256_hex(bytes);
    }
    doc["sha256"] = sums;
    write_text_file(dir / "flex.json", doc.dump(2) + "\n");
}

FlexibilityBasis load_flexibility(const fs::path& dir) {
    const nlohmann::json doc = read_json_file(dir / "flex.json");
    try {
        const auto k = doc.at("k").get<Eigen::Index>();
        const auto m = doc.at("m").get<Eigen::Index>();
        const auto n_fixed = doc.at("fixed_count").get<size_t>();
        auto load = [&](const std::string& name) {
            std::string bytes = read_binary_file(dir / name);
            if (sha256_hex(bytes) != doc.at("sha256").at(name).get<std::string>())
                throw IoError("checksum mismatch for " + (dir / name).string());
            return bytes;
        };
        const auto modes = from_bytes<double>(load("flex_modes.f64"), "flex_modes.f64");
        const auto ratios = from_bytes<double>(load("flex_ratios.f64"), "flex_ratios.f64");
        const auto fixed = from_bytes<std::uint32_t>(load("flex_fixed.u32"), "flex_fixed.u32");
        if (static_cast<Eigen::Index>(modes.size()) != k * m || static_cast<Eigen::Index>(ratios.size()) != m ||
            fixed.size() != n_fixed)
            throw ValidationError("flexibility overlay sizes do not match flex.json");
        FlexibilityBasis basis;
        basis.modes =
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(modes.data(), k, m);
        basis.ratios = Eigen::Map<const Eigen::VectorXd>(ratios.data(), m);
        basis.fixed.assign(fixed.begin(), fixed.end());
        return basis;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed flex.json in " + dir.string() + ": " + e.what());
    }
}

}  // namespace craniossm
