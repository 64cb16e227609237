#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "craniossm/mesh.hpp"

namespace craniossm {

/// Parameters of one synthetic head.
///
/// Axes: +x patient left, +y anterior, +z superior. The surface is star-shaped
/// around the origin, so every phantom is a closed genus-0 mesh.
struct PhantomSpec {
    DiagnosisClass diagnosis = DiagnosisClass::Control;
    double severity = 0.0;  // [0, 1]
    double size_mm = 140.0;  // head length
    int resolution = 14;     // geodesic frequency: 10 f^2 + 2 vertices
    double jitter_mm = 0.0;  // radial surface noise on non-landmark vertices
    double variation = 1.0;  // scale of the per-subject shape variation
    std::uint64_t seed = 0;  // subject identity (shape variation, coronal side)
    std::optional<std::uint64_t> mesh_seed;  // triangulation; defaults to seed

    void validate() const;
};

/// Closed, outward-oriented phantom with all ten landmarks placed exactly on
/// mesh vertices.
Scan generate_phantom(const PhantomSpec& spec);

/// Sampling ranges for a corpus.
struct CorpusOptions {
    std::map<DiagnosisClass, int> per_class;
    double severity_min = 0.4;
    double severity_max = 1.0;
    double size_min_mm = 130.0;
    double size_max_mm = 150.0;
    double jitter_mm = 0.05;
    double variation = 1.0;
    int resolution = 14;
    std::uint64_t seed = 0;
    int jobs = 1;
};

/// Deterministic labeled corpus. Subject ids are "<class>_<index>"; each
/// subject's draws come from a seed derived from the root seed and its id.
std::vector<Scan> generate_corpus(const CorpusOptions& options);

/// Width over length of the cranial vault: x extent divided by y extent of the
/// vertices in the upper 45% of the head height.
double cephalic_index(const TriMesh& mesh);

/// Unit direction of a landmark on the phantom surface.
Vec3 phantom_landmark_direction(Landmark lm);

/// Closed geodesic sphere (unit radius) of the given frequency.
TriMesh geodesic_sphere(int frequency);

}  // namespace craniossm
