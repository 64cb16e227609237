#include "craniossm/mesh_io.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "craniossm/error.hpp"

namespace craniossm {

static_assert(std::endian::native == std::endian::little, "binary PLY I/O assumes a little-endian host");

namespace {

std::string lower_ext(const std::filesystem::path& path) {
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

TriMesh assemble(std::vector<double>&& coords, std::vector<int>&& tri,
                 const std::vector<double>& uv_values) {
    TriMesh mesh;
    const auto p = static_cast<Eigen::Index>(coords.size() / 3);
    mesh.vertices.resize(p, 3);
    for (Eigen::Index i = 0; i < p; ++i)
        for (int c = 0; c < 3; ++c) mesh.vertices(i, c) = coords[3 * i + c];
    const auto f = static_cast<Eigen::Index>(tri.size() / 3);
    mesh.faces.resize(f, 3);
    for (Eigen::Index i = 0; i < f; ++i)
        for (int c = 0; c < 3; ++c) mesh.faces(i, c) = tri[3 * i + c];
    if (!uv_values.empty()) {
        mesh.uv.resize(p, 2);
        for (Eigen::Index i = 0; i < p; ++i) {
            mesh.uv(i, 0) = uv_values[2 * i];
            mesh.uv(i, 1) = uv_values[2 * i + 1];
        }
    }
    mesh.validate();
    return mesh;
}

// ---- PLY -------------------------------------------------------------------

enum class PlyType { Int8, UInt8, Int16, UInt16, Int32, UInt32, Float32, Float64 };

PlyType parse_ply_type(const std::string& name) {
    if (name == "char" || name == "int8") return PlyType::Int8;
    if (name == "uchar" || name == "uint8") return PlyType::UInt8;
    if (name == "short" || name == "int16") return PlyType::Int16;
    if (name == "ushort" || name == "uint16") return PlyType::UInt16;
    if (name == "int" || name == "int32") return PlyType::Int32;
    if (name == "uint" || name == "uint32") return PlyType::UInt32;
    if (name == "float" || name == "float32") return PlyType::Float32;
    if (name == "double" || name == "float64") return PlyType::Float64;
    throw IoError("PLY: unknown property type '" + name + "'");
}

size_t ply_type_size(PlyType t) {
    switch (t) {
        case PlyType::Int8:
        case PlyType::UInt8: return 1;
        case PlyType::Int16:
        case PlyType::UInt16: return 2;
        case PlyType::Int32:
        case PlyType::UInt32:
        case PlyType::Float32: return 4;
        case PlyType::Float64: return 8;
    }
    return 0;
}

struct PlyProperty {
    std::string name;
    PlyType type = PlyType::Float32;
    bool is_list = false;
    PlyType count_type = PlyType::UInt8;
};

struct PlyElement {
    std::string name;
    size_t count = 0;
    std::vector<PlyProperty> properties;
};

class PlyValueReader {
public:
    PlyValueReader(std::istream& in, bool binary) : in_(in), binary_(binary) {}

    double read(PlyType t) {
        if (!binary_) {
            std::string tok;
            if (!(in_ >> tok)) fail("unexpected end of ASCII data");
            try {
                size_t used = 0;
                const double v = std::stod(tok, &used);
                if (used != tok.size()) fail("malformed number '" + tok + "'");
                return v;
            } catch (const std::logic_error&) {
                fail("malformed number '" + tok + "'");
            }
        }
        unsigned char buf[8];
        const size_t n = ply_type_size(t);
        if (!in_.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(n)))
            fail("unexpected end of binary data");
        switch (t) {
            case PlyType::Int8: return static_cast<double>(static_cast<std::int8_t>(buf[0]));
            case PlyType::UInt8: return static_cast<double>(buf[0]);
            case PlyType::Int16: return copy_as<std::int16_t>(buf);
            case PlyType::UInt16: return copy_as<std::uint16_t>(buf);
            case PlyType::Int32: return copy_as<std::int32_t>(buf);
            case PlyType::UInt32: return copy_as<std::uint32_t>(buf);
            case PlyType::Float32: return copy_as<float>(buf);
            case PlyType::Float64: return copy_as<double>(buf);
        }
        return 0.0;
    }

    [[noreturn]] void fail(const std::string& what) {
        const auto pos = in_ ? static_cast<long long>(in_.tellg()) : -1LL;
        throw IoError("PLY: " + what + " (byte offset " + std::to_string(pos) + ")");
    }

private:
    template <typename T>
    static double copy_as(const unsigned char* buf) {
        T v;
        std::memcpy(&v, buf, sizeof(T));
        return static_cast<double>(v);
    }

    std::istream& in_;
    bool binary_;
};

}  // namespace

TriMesh read_obj(std::istream& in) {
    std::vector<double> coords;
    std::vector<double> tex;
    std::vector<int> tri;
    std::vector<std::pair<int, int>> corner_uv;  // (vertex, texcoord)
    size_t non_triangular = 0;
    std::string line;
    size_t line_no = 0;
    auto fail = [&](const std::string& what) {
        throw IoError("OBJ line " + std::to_string(line_no) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tag;
        if (!(ls >> tag) || tag[0] == '#') continue;
        if (tag == "v") {
            double x, y, z;
            if (!(ls >> x >> y >> z)) fail("malformed vertex record");
            coords.insert(coords.end(), {x, y, z});
        } else if (tag == "vt") {
            double u, v;
            if (!(ls >> u >> v)) fail("malformed texture coordinate record");
            tex.insert(tex.end(), {u, v});
        } else if (tag == "f") {
            std::vector<std::pair<int, int>> corners;
            std::string tok;
            while (ls >> tok) {
                const auto slash = tok.find('/');
                int vi = 0, ti = 0;
                try {
                    vi = std::stoi(tok.substr(0, slash));
                    if (slash != std::string::npos) {
                        const auto rest = tok.substr(slash + 1);
                        const auto slash2 = rest.find('/');
                        const auto tpart = rest.substr(0, slash2);
                        if (!tpart.empty()) ti = std::stoi(tpart);
                    }
                } catch (const std::logic_error&) {
                    fail("malformed face index '" + tok + "'");
                }
                const int nv = static_cast<int>(coords.size() / 3);
                const int nt = static_cast<int>(tex.size() / 2);
                if (vi < 0) vi = nv + vi + 1;
                if (ti < 0) ti = nt + ti + 1;
                if (vi < 1 || vi > nv) fail("face index " + tok + " out of range");
                if (ti > nt) fail("texture index " + tok + " out of range");
                corners.emplace_back(vi - 1, ti - 1);
            }
            if (corners.size() < 3) fail("face with fewer than 3 corners");
            if (corners.size() != 3) {
                ++non_triangular;
                continue;
            }
            for (const auto& [v, t] : corners) {
                tri.push_back(v);
                if (t >= 0) corner_uv.emplace_back(v, t);
            }
        }
    }
    if (non_triangular > 0)
        throw ValidationError("non-triangular face: " + std::to_string(non_triangular) +
                              " face(s) with more than 3 corners");
    std::vector<double> uv;
    if (!corner_uv.empty()) {
        uv.assign(coords.size() / 3 * 2, 0.0);
        for (const auto& [v, t] : corner_uv) {
            uv[2 * v] = tex[2 * t];
            uv[2 * v + 1] = tex[2 * t + 1];
        }
    }
    return assemble(std::move(coords), std::move(tri), uv);
}

TriMesh read_ply(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw IoError("PLY: missing 'ply' magic");
    bool binary = false;
    std::vector<PlyElement> elements;
    size_t line_no = 1;
    bool header_done = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "format") {
            std::string fmt, version;
            ls >> fmt >> version;
            if (fmt == "ascii") binary = false;
            else if (fmt == "binary_little_endian") binary = true;
            else throw IoError("PLY header line " + std::to_string(line_no) + ": unsupported format '" + fmt + "'");
        } else if (tag == "element") {
            PlyElement e;
            if (!(ls >> e.name >> e.count))
                throw IoError("PLY header line " + std::to_string(line_no) + ": malformed element");
            elements.push_back(e);
        } else if (tag == "property") {
            if (elements.empty())
                throw IoError("PLY header line " + std::to_string(line_no) + ": property before element");
            PlyProperty prop;
            std::string type;
            ls >> type;
            if (type == "list") {
                std::string count_type, item_type;
                ls >> count_type >> item_type >> prop.name;
                prop.is_list = true;
                prop.count_type = parse_ply_type(count_type);
                prop.type = parse_ply_type(item_type);
            } else {
                prop.type = parse_ply_type(type);
                ls >> prop.name;
            }
            elements.back().properties.push_back(prop);
        } else if (tag == "end_header") {
            header_done = true;
            break;
        }
    }
    if (!header_done) throw IoError("PLY: header not terminated by end_header");

    PlyValueReader reader(in, binary);
    std::vector<double> coords;
    std::vector<double> uv;
    std::vector<int> tri;
    size_t non_triangular = 0;
    for (const auto& e : elements) {
        const bool is_vertex = e.name == "vertex";
        const bool is_face = e.name == "face";
        int ix = -1, iy = -1, iz = -1, iu = -1, iv = -1, iface = -1;
        for (int k = 0; k < static_cast<int>(e.properties.size()); ++k) {
            const auto& n = e.properties[k].name;
            if (n == "x") ix = k;
            else if (n == "y") iy = k;
            else if (n == "z") iz = k;
            else if (n == "u" || n == "s" || n == "texture_u") iu = k;
            else if (n == "v" || n == "t" || n == "texture_v") iv = k;
            else if (n == "vertex_indices" || n == "vertex_index") iface = k;
        }
        if (is_vertex && (ix < 0 || iy < 0 || iz < 0)) throw IoError("PLY: vertex element lacks x/y/z");
        if (is_face && iface < 0) throw IoError("PLY: face element lacks vertex_indices");
        const bool with_uv = is_vertex && iu >= 0 && iv >= 0;
        std::vector<double> values(e.properties.size());
        for (size_t row = 0; row < e.count; ++row) {
            for (size_t k = 0; k < e.properties.size(); ++k) {
                const auto& prop = e.properties[k];
                if (!prop.is_list) {
                    values[k] = reader.read(prop.type);
                    continue;
                }
                const double n = reader.read(prop.count_type);
                if (n < 0 || n != std::floor(n)) reader.fail("invalid list length");
                const auto count = static_cast<size_t>(n);
                std::vector<int> items(count);
                for (size_t c = 0; c < count; ++c) items[c] = static_cast<int>(reader.read(prop.type));
                if (is_face && static_cast<int>(k) == iface) {
                    if (count != 3) {
                        ++non_triangular;
                    } else {
                        tri.insert(tri.end(), items.begin(), items.end());
                    }
                }
            }
            if (is_vertex) {
                coords.insert(coords.end(), {values[ix], values[iy], values[iz]});
                if (with_uv) uv.insert(uv.end(), {values[iu], values[iv]});
            }
        }
    }
    if (non_triangular > 0)
        throw ValidationError("non-triangular face: " + std::to_string(non_triangular) +
                              " face(s) with more than 3 corners");
    for (int v : tri)
        if (v < 0 || v >= static_cast<int>(coords.size() / 3))
            throw IoError("PLY: face index " + std::to_string(v) + " out of range");
    return assemble(std::move(coords), std::move(tri), uv);
}

TriMesh load_mesh(const std::filesystem::path& path) {
    const auto ext = lower_ext(path);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open mesh file " + path.string());
    if (ext == ".obj") return read_obj(in);
    if (ext == ".ply") return read_ply(in);
    throw IoError("unsupported mesh extension '" + ext + "' (" + path.string() + ")");
}

void write_ply(std::ostream& out, const TriMesh& mesh, PlyEncoding encoding) {
    const bool binary = encoding == PlyEncoding::BinaryLittleEndian;
    out << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
    out << "element vertex " << mesh.vertex_count() << "\n";
    out << "property double x\nproperty double y\nproperty double z\n";
    if (mesh.has_uv()) out << "property double u\nproperty double v\n";
    out << "element face " << mesh.face_count() << "\n";
    out << "property list uchar int vertex_indices\nend_header\n";
    if (binary) {
        for (Eigen::Index i = 0; i < mesh.vertex_count(); ++i) {
            for (int c = 0; c < 3; ++c) {
                const double v = mesh.vertices(i, c);
                out.write(reinterpret_cast<const char*>(&v), sizeof v);
            }
            if (mesh.has_uv())
                for (int c = 0; c < 2; ++c) {
                    const double v = mesh.uv(i, c);
                    out.write(reinterpret_cast<const char*>(&v), sizeof v);
                }
        }
        for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
            const unsigned char n = 3;
            out.write(reinterpret_cast<const char*>(&n), 1);
            for (int c = 0; c < 3; ++c) {
                const std::int32_t v = mesh.faces(f, c);
                out.write(reinterpret_cast<const char*>(&v), sizeof v);
            }
        }
    } else {
        out << std::setprecision(17);
        for (Eigen::Index i = 0; i < mesh.vertex_count(); ++i) {
            out << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' ' << mesh.vertices(i, 2);
            if (mesh.has_uv()) out << ' ' << mesh.uv(i, 0) << ' ' << mesh.uv(i, 1);
            out << '\n';
        }
        for (Eigen::Index f = 0; f < mesh.face_count(); ++f)
            out << "3 " << mesh.faces(f, 0) << ' ' << mesh.faces(f, 1) << ' ' << mesh.faces(f, 2) << '\n';
    }
}

void write_obj(std::ostream& out, const TriMesh& mesh) {
    out << std::setprecision(17);
    for (Eigen::Index i = 0; i < mesh.vertex_count(); ++i)
        out << "v " << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' ' << mesh.vertices(i, 2) << '\n';
    for (Eigen::Index i = 0; i < mesh.uv.rows(); ++i) out << "vt " << mesh.uv(i, 0) << ' ' << mesh.uv(i, 1) << '\n';
    for (Eigen::Index f = 0; f < mesh.face_count(); ++f) {
        out << 'f';
        for (int c = 0; c < 3; ++c) {
            const int v = mesh.faces(f, c) + 1;
            out << ' ' << v;
            if (mesh.has_uv()) out << '/' << v;
        }
        out << '\n';
    }
}

void save_mesh(const std::filesystem::path& path, const TriMesh& mesh, PlyEncoding encoding) {
    const auto ext = lower_ext(path);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write mesh file " + path.string());
    if (ext == ".obj") write_obj(out, mesh);
    else if (ext == ".ply") write_ply(out, mesh, encoding);
    else throw IoError("unsupported mesh extension '" + ext + "' (" + path.string() + ")");
    if (!out) throw IoError("write failed for " + path.string());
}

LandmarkSet landmarks_from_json(const nlohmann::json& doc) {
    if (!doc.is_object() || !doc.contains("landmarks") || !doc["landmarks"].is_object())
        throw ValidationError("landmark JSON must contain a 'landmarks' object");
    const auto& obj = doc["landmarks"];
    LandmarkSet set;
    std::array<bool, kLandmarkCount> seen{};
    for (const auto& [name, value] : obj.items()) {
        const auto lm = landmark_from_name(name);
        if (!lm) throw ValidationError("unknown landmark name '" + name + "'");
        if (!value.is_array() || value.size() != 3)
            throw ValidationError("landmark '" + name + "' must be [x, y, z]");
        for (int c = 0; c < 3; ++c) set[*lm](c) = value[c].get<double>();
        seen[static_cast<int>(*lm)] = true;
    }
    for (int i = 0; i < kLandmarkCount; ++i)
        if (!seen[i])
            throw ValidationError("missing landmark '" + std::string(landmark_name(static_cast<Landmark>(i))) + "'");
    if (!set.all_finite()) throw ValidationError("landmarks must be finite");
    return set;
}

nlohmann::json landmarks_to_json(const LandmarkSet& lms) {
    nlohmann::json obj = nlohmann::json::object();
    for (int i = 0; i < kLandmarkCount; ++i) {
        const Vec3& p = lms.at(i);
        obj[std::string(landmark_name(static_cast<Landmark>(i)))] = {p.x(), p.y(), p.z()};
    }
    return nlohmann::json{{"landmarks", obj}};
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

void write_text_file(const std::filesystem::path& path, const std::string& contents) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << contents;
    if (!out) throw IoError("write failed for " + path.string());
}

LandmarkSet load_landmarks(const std::filesystem::path& path) { return landmarks_from_json(read_json_file(path)); }

void save_landmarks(const std::filesystem::path& path, const LandmarkSet& lms) {
    write_text_file(path, landmarks_to_json(lms).dump(2) + "\n");
}

Scan load_scan(const std::filesystem::path& mesh_path) {
    Scan scan;
    scan.mesh = load_mesh(mesh_path);
    auto meta_path = mesh_path;
    meta_path.replace_extension(".json");
    const auto doc = read_json_file(meta_path);
    scan.landmarks = landmarks_from_json(doc);
    scan.subject_id = doc.value("subject_id", mesh_path.stem().string());
    scan.diagnosis = class_from_name(doc.value("diagnosis", std::string("control")));
    scan.age_days = doc.value("age_days", 0);
    if (scan.age_days < 0) throw ValidationError("age_days must be >= 0");
    scan.mirrored = doc.value("mirrored", false);
    if (doc.contains("twin_id") && doc["twin_id"].is_string()) scan.twin_id = doc["twin_id"].get<std::string>();
    if (scan.mirrored && !scan.twin_id) throw ValidationError("mirrored scan " + scan.subject_id + " lacks twin_id");
    return scan;
}

void save_scan(const std::filesystem::path& directory, const Scan& scan) {
    std::filesystem::create_directories(directory);
    save_mesh(directory / (scan.subject_id + ".ply"), scan.mesh);
    auto doc = landmarks_to_json(scan.landmarks);
    doc["subject_id"] = scan.subject_id;
    doc["diagnosis"] = std::string(class_name(scan.diagnosis));
    doc["age_days"] = scan.age_days;
    doc["mirrored"] = scan.mirrored;
    doc["twin_id"] = scan.twin_id ? nlohmann::json(*scan.twin_id) : nlohmann::json(nullptr);
    write_text_file(directory / (scan.subject_id + ".json"), doc.dump(2) + "\n");
}

}  // namespace craniossm
