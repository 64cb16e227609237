#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <tuple>

#include <openssl/evp.h>

#include "json.hpp"

#include "craniossm/binary_io.hpp"
#include "craniossm/error.hpp"
#include "craniossm/mesh_io.hpp"
#include "craniossm/ssm.hpp"

namespace craniossm {

namespace fs = std::filesystem;

std::string read_binary_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_binary_file(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw IoError("SHA-256 computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 15]);
    }
    return out;
}

void save_model(const ShapeModel& model, const fs::path& dir) {
    const Eigen::Index p = model.vertex_count();
    const Eigen::Index k = model.component_count();
    if (model.components.rows() != 3 * p || model.components.cols() != k || model.mass.size() != p)
        throw ValidationError("inconsistent model dimensions");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    std::vector<std::pair<std::string, std::string>> files;
    files.emplace_back("mean.f64", to_bytes(std::vector<double>(model.mean.data(), model.mean.data() + model.mean.size())));
    files.emplace_back("components.f64", to_bytes(row_major(model.components)));
    files.emplace_back("eigenvalues.f64", to_bytes(std::vector<double>(model.eigenvalues.data(),
                                                                      model.eigenvalues.data() + k)));

    std::vector<double> diag(static_cast<size_t>(p), 0.0);
    std::vector<std::tuple<std::uint32_t, std::uint32_t, double>> upper;
    for (int c = 0; c < model.mass.matrix.outerSize(); ++c)
        for (SparseMatrix::InnerIterator it(model.mass.matrix, c); it; ++it) {
            if (it.row() == it.col()) diag[it.row()] += it.value();
            else if (it.row() < it.col())
                upper.emplace_back(static_cast<std::uint32_t>(it.row()), static_cast<std::uint32_t>(it.col()),
                                   it.value());
        }
    std::sort(upper.begin(), upper.end());
    std::vector<std::uint32_t> idx;
    std::vector<double> off;
    for (const auto& [i, j, v] : upper) {
        idx.push_back(i);
        idx.push_back(j);
        off.push_back(v);
    }
    files.emplace_back("mass_diag.f64", to_bytes(diag));
    files.emplace_back("mass_offdiag.idx", to_bytes(idx));
    files.emplace_back("mass_offdiag.f64", to_bytes(off));

    std::vector<std::uint32_t> faces;
    for (Eigen::Index f = 0; f < model.faces.rows(); ++f)
        for (int c = 0; c < 3; ++c) faces.push_back(static_cast<std::uint32_t>(model.faces(f, c)));
    files.emplace_back("faces.u32", to_bytes(faces));
    if (model.vertex_mask) {
        std::vector<std::uint32_t> mask(model.vertex_mask->begin(), model.vertex_mask->end());
        files.emplace_back("mask.u32", to_bytes(mask));
    }

    nlohmann::ordered_json manifest;
    manifest["format_version"] = kModelFormatVersion;
    manifest["p"] = p;
    manifest["k"] = k;
    manifest["n_train"] = model.n_train;
    manifest["class_label"] = model.class_label ? nlohmann::ordered_json(std::string(class_name(*model.class_label)))
                                                : nlohmann::ordered_json(nullptr);
    manifest["has_mask"] = model.vertex_mask.has_value();
    manifest["face_count"] = model.faces.rows();
    nlohmann::ordered_json sums = nlohmann::ordered_json::object();
    for (const auto& [name, bytes] : files) {
        write_binary_file(dir / name, bytes);
        sums[name] = sha256_hex(bytes);
    }
    manifest["sha256"] = sums;
    write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

ShapeModel load_model(const fs::path& dir) {
    const nlohmann::json manifest = read_json_file(dir / "manifest.json");
    try {
        const int version = manifest.at("format_version").get<int>();
        if (version != kModelFormatVersion)
            throw ValidationError("model format version " + std::to_string(version) + " is not supported (expected " +
                                  std::to_string(kModelFormatVersion) + ")");
        const auto p = manifest.at("p").get<Eigen::Index>();
        const auto k = manifest.at("k").get<Eigen::Index>();
        const auto n_faces = manifest.at("face_count").get<Eigen::Index>();
        const bool has_mask = manifest.at("has_mask").get<bool>();
        const auto& sums = manifest.at("sha256");

        auto load = [&](const std::string& name) {
            if (!sums.contains(name)) throw ValidationError("manifest has no checksum for " + name);
            std::string bytes = read_binary_file(dir / name);
            if (sha256_hex(bytes) != sums.at(name).get<std::string>())
                throw IoError("checksum mismatch for " + (dir / name).string());
            return bytes;
        };
        auto expect = [](size_t got, Eigen::Index want, const std::string& name) {
            if (static_cast<Eigen::Index>(got) != want)
                throw ValidationError(name + " has " + std::to_string(got) + " values, expected " +
                                      std::to_string(want));
        };

        ShapeModel model;
        model.n_train = manifest.at("n_train").get<int>();
        if (!manifest.at("class_label").is_null())
            model.class_label = class_from_name(manifest.at("class_label").get<std::string>());

        const auto mean = from_bytes<double>(load("mean.f64"), "mean.f64");
        expect(mean.size(), 3 * p, "mean.f64");
        model.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), 3 * p);

        const auto comps = from_bytes<double>(load("components.f64"), "components.f64");
        expect(comps.size(), 3 * p * k, "components.f64");
        model.components =
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(comps.data(),
                                                                                                    3 * p, k);
        const auto evals = from_bytes<double>(load("eigenvalues.f64"), "eigenvalues.f64");
        expect(evals.size(), k, "eigenvalues.f64");
        model.eigenvalues = Eigen::Map<const Eigen::VectorXd>(evals.data(), k);

        const auto diag = from_bytes<double>(load("mass_diag.f64"), "mass_diag.f64");
        expect(diag.size(), p, "mass_diag.f64");
        const auto idx = from_bytes<std::uint32_t>(load("mass_offdiag.idx"), "mass_offdiag.idx");
        const auto off = from_bytes<double>(load("mass_offdiag.f64"), "mass_offdiag.f64");
        expect(idx.size(), 2 * static_cast<Eigen::Index>(off.size()), "mass_offdiag.idx");
        std::vector<Eigen::Triplet<double>> trip;
        for (Eigen::Index i = 0; i < p; ++i) trip.emplace_back(i, i, diag[i]);
        for (size_t e = 0; e < off.size(); ++e) {
            const auto i = static_cast<Eigen::Index>(idx[2 * e]);
            const auto j = static_cast<Eigen::Index>(idx[2 * e + 1]);
            if (i >= j || j >= p) throw ValidationError("mass_offdiag.idx has an invalid pair");
            trip.emplace_back(i, j, off[e]);
            trip.emplace_back(j, i, off[e]);
        }
        model.mass.matrix.resize(p, p);
        model.mass.matrix.setFromTriplets(trip.begin(), trip.end());

        const auto faces = from_bytes<std::uint32_t>(load("faces.u32"), "faces.u32");
        expect(faces.size(), 3 * n_faces, "faces.u32");
        model.faces.resize(n_faces, 3);
        for (Eigen::Index f = 0; f < n_faces; ++f)
            for (int c = 0; c < 3; ++c) {
                const auto v = faces[static_cast<size_t>(3 * f + c)];
                if (static_cast<Eigen::Index>(v) >= p) throw ValidationError("faces.u32 index out of range");
                model.faces(f, c) = static_cast<int>(v);
            }
        if (has_mask) {
            const auto mask = from_bytes<std::uint32_t>(load("mask.u32"), "mask.u32");
            expect(mask.size(), p, "mask.u32");
            model.vertex_mask = std::vector<int>(mask.begin(), mask.end());
        }
        return model;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("malformed model manifest in " + dir.string() + ": " + e.what());
    }
}

}  // namespace craniossm
