#pragma once

#include <filesystem>

#include "json.hpp"

#include "craniossm/mesh.hpp"

namespace craniossm {

enum class PlyEncoding { Ascii, BinaryLittleEndian };

/// Reads OBJ (ASCII) or PLY (ASCII / binary little-endian), chosen by extension.
TriMesh load_mesh(const std::filesystem::path& path);

TriMesh read_obj(std::istream& in);
TriMesh read_ply(std::istream& in);

/// PLY output always uses float64 vertex properties so binary round-trips are exact.
void save_mesh(const std::filesystem::path& path, const TriMesh& mesh,
               PlyEncoding encoding = PlyEncoding::BinaryLittleEndian);
void write_ply(std::ostream& out, const TriMesh& mesh, PlyEncoding encoding);
void write_obj(std::ostream& out, const TriMesh& mesh);

// Landmark / scan metadata JSON: {"landmarks": {name: [x,y,z]}, ...metadata}
LandmarkSet landmarks_from_json(const nlohmann::json& doc);
nlohmann::json landmarks_to_json(const LandmarkSet& lms);
LandmarkSet load_landmarks(const std::filesystem::path& path);
void save_landmarks(const std::filesystem::path& path, const LandmarkSet& lms);

/// A scan on disk is `<stem>.ply` + `<stem>.json` (landmarks plus metadata).
Scan load_scan(const std::filesystem::path& mesh_path);
void save_scan(const std::filesystem::path& directory, const Scan& scan);

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace craniossm
