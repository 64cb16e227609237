#include "craniossm/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>

#include <Eigen/Geometry>

#include "craniossm/error.hpp"
#include "craniossm/parallel.hpp"
#include "craniossm/seed.hpp"

namespace craniossm {

namespace {

Vec3 unit(double x, double y, double z) { return Vec3(x, y, z).normalized(); }

// Smooth bump on the sphere of directions; width is roughly the angular radius.
double bump(const Vec3& d, const Vec3& center, double width) {
    return std::exp(-(1.0 - d.dot(center)) / (width * width));
}

double smoothstep(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
}

double positive(double v) { return v > 0.0 ? v : 0.0; }

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
    std::normal_distribution<double> normal;
    Eigen::Quaterniond q;
    do {
        q.coeffs() << normal(rng), normal(rng), normal(rng), normal(rng);
    } while (q.norm() < 1e-6);
    return q.normalized().toRotationMatrix();
}

// Per-subject draws, made in a fixed order for every class so that the class
// never shifts the random stream.
struct Subject {
    Vec3 axes;
    double nose = 1.0;
    double chin = 1.0;
    double ear = 1.0;
    double lips = 1.0;
    double socket = 1.0;
    std::array<double, 2> ear_side{1.0, 1.0};  // right, left
    double side = 1.0;          // coronal: +1 left-sided, -1 right-sided
    double control_side = 1.0;  // positional flattening side
};

Subject draw_subject(const PhantomSpec& spec) {
    auto rng = make_rng(spec.seed, 1);
    std::normal_distribution<double> normal;
    const double v = spec.variation;
    Subject s;
    s.axes = spec.size_mm * Vec3(0.40, 0.50, 0.46);
    for (int a = 0; a < 3; ++a) s.axes(a) *= 1.0 + v * 0.04 * std::clamp(normal(rng), -2.5, 2.5);
    s.nose = 1.0 + v * 0.15 * std::clamp(normal(rng), -2.5, 2.5);
    s.chin = 1.0 + v * 0.15 * std::clamp(normal(rng), -2.5, 2.5);
    s.ear = 1.0 + v * 0.15 * std::clamp(normal(rng), -2.5, 2.5);
    s.side = (rng() & 1u) ? 1.0 : -1.0;
    s.control_side = (rng() & 1u) ? 1.0 : -1.0;
    // Facial detail that varies independently of the vault.
    s.lips = 1.0 + v * 0.2 * std::clamp(normal(rng), -2.5, 2.5);
    s.socket = 1.0 + v * 0.2 * std::clamp(normal(rng), -2.5, 2.5);
    for (double& e : s.ear_side) e = 1.0 + v * 0.1 * std::clamp(normal(rng), -2.5, 2.5);
    return s;
}

// Radius of the head surface along unit direction d.
double head_radius(const Vec3& d, const PhantomSpec& spec, const Subject& s) {
    constexpr double e = 2.2;
    const double base =
        1.0 / std::pow(std::pow(std::abs(d.x() / s.axes.x()), e) + std::pow(std::abs(d.y() / s.axes.y()), e) +
                           std::pow(std::abs(d.z() / s.axes.z()), e),
                       1.0 / e);

    const double cranial = smoothstep((d.z() + 0.15) / 0.45);
    const double sev = spec.severity;
    double shape = 0.0;
    switch (spec.diagnosis) {
        case DiagnosisClass::Sagittal:
            shape = cranial * (0.14 * d.y() * d.y() - 0.14 * d.x() * d.x());
            break;
        case DiagnosisClass::Metopic: {
            const double front = positive(d.y());
            shape = cranial * (0.08 * std::exp(-d.x() * d.x() / 0.04) * front * front -
                               0.16 * d.x() * d.x() * front * front);
            break;
        }
        case DiagnosisClass::Coronal:
            shape = cranial * (-0.12 * bump(d, unit(s.side * 0.55, 0.65, 0.5), 0.5) +
                               0.07 * bump(d, unit(-s.side * 0.55, 0.65, 0.5), 0.5));
            break;
        case DiagnosisClass::Control:
            shape = -0.05 * cranial * bump(d, unit(s.control_side * 0.5, -0.85, 0.15), 0.5);
            break;
    }

    const double L = spec.size_mm;
    double features = 0.0;
    features += 0.10 * L * s.nose * bump(d, unit(0.0, 0.96, -0.22), 0.14);
    features += 0.03 * L * s.lips * bump(d, unit(0.0, 0.90, -0.48), 0.10);
    features += 0.05 * L * s.chin * bump(d, unit(0.0, 0.78, -0.62), 0.20);
    for (int i = 0; i < 2; ++i) {
        const double side = i == 0 ? -1.0 : 1.0;
        features += 0.035 * L * s.ear * s.ear_side[i] * bump(d, unit(side, 0.0, -0.1), 0.12);
        features -= 0.02 * L * s.socket * bump(d, unit(side * 0.32, 0.94, 0.0), 0.12);
    }
    return base * (1.0 + sev * shape) + features;
}

}  // namespace

void PhantomSpec::validate() const {
    if (!(severity >= 0.0 && severity <= 1.0)) throw ValidationError("phantom severity must lie in [0, 1]");
    if (resolution < 2) throw ValidationError("phantom resolution must be at least 2");
    if (!(size_mm > 0.0)) throw ValidationError("phantom size must be positive");
    if (!(jitter_mm >= 0.0)) throw ValidationError("phantom jitter must be non-negative");
    if (!(variation >= 0.0)) throw ValidationError("phantom variation must be non-negative");
}

Vec3 phantom_landmark_direction(Landmark lm) {
    switch (lm) {
        case Landmark::TL: return unit(0.99, 0.06, -0.12);
        case Landmark::TR: return unit(-0.99, 0.06, -0.12);
        case Landmark::SE: return unit(0.0, 1.0, 0.02);
        case Landmark::EXL: return unit(0.5, 0.86, -0.02);
        case Landmark::EXR: return unit(-0.5, 0.86, -0.02);
        case Landmark::SN: return unit(0.0, 0.95, -0.36);
        case Landmark::LS: return unit(0.0, 0.90, -0.48);
        case Landmark::OBSL: return unit(0.97, -0.02, -0.02);
        case Landmark::OBSR: return unit(-0.97, -0.02, -0.02);
        case Landmark::GN: return unit(0.0, 0.80, -0.72);
    }
    return Vec3::UnitY();
}

TriMesh geodesic_sphere(int frequency) {
    if (frequency < 1) throw ValidationError("geodesic frequency must be positive");
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    const std::array<Vec3, 12> ico{Vec3(-1, t, 0), Vec3(1, t, 0),  Vec3(-1, -t, 0), Vec3(1, -t, 0),
                                   Vec3(0, -1, t), Vec3(0, 1, t),  Vec3(0, -1, -t), Vec3(0, 1, -t),
                                   Vec3(t, 0, -1), Vec3(t, 0, 1),  Vec3(-t, 0, -1), Vec3(-t, 0, 1)};
    std::array<std::array<int, 3>, 20> faces{{{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                              {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                              {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                              {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}}};
    for (auto& f : faces) {
        const Vec3 n = (ico[f[1]] - ico[f[0]]).cross(ico[f[2]] - ico[f[0]]);
        if (n.dot(ico[f[0]] + ico[f[1]] + ico[f[2]]) < 0.0) std::swap(f[1], f[2]);
    }

    // A subdivision point is identified by its integer weights on icosahedron
    // corners, so points on shared edges are created once and bit-identical.
    using Key = std::array<int, 6>;
    std::map<Key, int> index;
    std::vector<Vec3> points;
    const int fq = frequency;
    auto vertex = [&](const std::array<int, 3>& f, int i, int j) {
        std::array<std::pair<int, int>, 3> w{{{f[0], fq - i - j}, {f[1], i}, {f[2], j}}};
        std::sort(w.begin(), w.end());
        Key key{-1, 0, -1, 0, -1, 0};
        int k = 0;
        for (const auto& [v, weight] : w)
            if (weight > 0) {
                key[2 * k] = v;
                key[2 * k + 1] = weight;
                ++k;
            }
        auto [it, inserted] = index.emplace(key, static_cast<int>(points.size()));
        if (inserted) {
            Vec3 p = Vec3::Zero();
            for (int m = 0; m < k; ++m) p += key[2 * m + 1] * ico[key[2 * m]];
            points.push_back(p.normalized());
        }
        return it->second;
    };

    std::vector<std::array<int, 3>> tris;
    tris.reserve(20 * static_cast<size_t>(fq * fq));
    for (const auto& f : faces)
        for (int i = 0; i < fq; ++i)
            for (int j = 0; i + j < fq; ++j) {
                tris.push_back({vertex(f, i, j), vertex(f, i + 1, j), vertex(f, i, j + 1)});
                if (i + j + 2 <= fq) tris.push_back({vertex(f, i + 1, j), vertex(f, i + 1, j + 1), vertex(f, i, j + 1)});
            }

    TriMesh mesh;
    mesh.vertices.resize(static_cast<Eigen::Index>(points.size()), 3);
    for (size_t i = 0; i < points.size(); ++i) mesh.vertices.row(static_cast<Eigen::Index>(i)) = points[i].transpose();
    mesh.faces.resize(static_cast<Eigen::Index>(tris.size()), 3);
    for (size_t i = 0; i < tris.size(); ++i)
        mesh.faces.row(static_cast<Eigen::Index>(i)) << tris[i][0], tris[i][1], tris[i][2];
    return mesh;
}

Scan generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const Subject subject = draw_subject(spec);
    auto mesh_rng = make_rng(spec.mesh_seed.value_or(spec.seed), 2);
    std::normal_distribution<double> normal;

    TriMesh mesh = geodesic_sphere(spec.resolution);
    const Eigen::Matrix3d rot = random_rotation(mesh_rng);
    const auto p = mesh.vertex_count();
    const double tangential = 0.15 / spec.resolution;
    PointSet dirs(p, 3);
    for (Eigen::Index i = 0; i < p; ++i) {
        Vec3 d = rot * mesh.vertices.row(i).transpose();
        Vec3 n(normal(mesh_rng), normal(mesh_rng), normal(mesh_rng));
        n -= n.dot(d) * d;
        dirs.row(i) = (d + tangential * n).normalized().transpose();
    }

    // Snap the nearest free vertex onto each landmark direction.
    std::vector<bool> is_landmark(static_cast<size_t>(p), false);
    LandmarkIndices lm_vertex{};
    for (int l = 0; l < kLandmarkCount; ++l) {
        const Vec3 target = phantom_landmark_direction(static_cast<Landmark>(l));
        Eigen::Index best = -1;
        double best_dot = -2.0;
        for (Eigen::Index i = 0; i < p; ++i) {
            if (is_landmark[i]) continue;
            const double c = dirs.row(i).dot(target);
            if (c > best_dot) {
                best_dot = c;
                best = i;
            }
        }
        is_landmark[best] = true;
        lm_vertex[l] = static_cast<int>(best);
        dirs.row(best) = target.transpose();
    }

    for (Eigen::Index i = 0; i < p; ++i) {
        const Vec3 d = dirs.row(i).transpose();
        double r = head_radius(d, spec, subject);
        const double noise = normal(mesh_rng);
        if (!is_landmark[i]) r += spec.jitter_mm * noise;
        mesh.vertices.row(i) = (r * d).transpose();
    }

    Scan scan;
    scan.mesh = std::move(mesh);
    for (int l = 0; l < kLandmarkCount; ++l) scan.landmarks.at(l) = scan.mesh.vertices.row(lm_vertex[l]).transpose();
    scan.diagnosis = spec.diagnosis;
    char id[64];
    std::snprintf(id, sizeof id, "%s_s%016llx", std::string(class_name(spec.diagnosis)).c_str(),
                  static_cast<unsigned long long>(spec.seed));
    scan.subject_id = id;
    return scan;
}

std::vector<Scan> generate_corpus(const CorpusOptions& options) {
    if (options.severity_min < 0.0 || options.severity_max > 1.0 || options.severity_min > options.severity_max)
        throw ValidationError("corpus severity range must lie within [0, 1]");
    if (!(options.size_min_mm > 0.0) || options.size_min_mm > options.size_max_mm)
        throw ValidationError("corpus size range is invalid");
    std::vector<PhantomSpec> specs;
    std::vector<std::string> ids;
    for (DiagnosisClass c : kAllClasses) {
        const auto it = options.per_class.find(c);
        const int count = it == options.per_class.end() ? 0 : it->second;
        if (count < 0) throw ValidationError("negative class count in corpus request");
        for (int i = 0; i < count; ++i) {
            char id[64];
            std::snprintf(id, sizeof id, "%s_%03d", std::string(class_name(c)).c_str(), i);
            auto rng = make_rng(derive_seed(options.seed, id), 3);
            std::uniform_real_distribution<double> uniform(0.0, 1.0);
            PhantomSpec spec;
            spec.diagnosis = c;
            spec.severity = options.severity_min + (options.severity_max - options.severity_min) * uniform(rng);
            spec.size_mm = options.size_min_mm + (options.size_max_mm - options.size_min_mm) * uniform(rng);
            spec.resolution = options.resolution;
            spec.jitter_mm = options.jitter_mm;
            spec.variation = options.variation;
            spec.seed = rng();
            specs.push_back(spec);
            ids.emplace_back(id);
        }
    }
    std::vector<Scan> corpus(specs.size());
    parallel_for(specs.size(), options.jobs, [&](size_t i) {
        corpus[i] = generate_phantom(specs[i]);
        corpus[i].subject_id = ids[i];
    });
    return corpus;
}

double cephalic_index(const TriMesh& mesh) {
    if (mesh.vertex_count() == 0) throw ValidationError("cephalic index of an empty mesh");
    const double zmin = mesh.vertices.col(2).minCoeff();
    const double zmax = mesh.vertices.col(2).maxCoeff();
    const double cut = zmin + 0.55 * (zmax - zmin);
    double xlo = INFINITY, xhi = -INFINITY, ylo = INFINITY, yhi = -INFINITY;
    for (Eigen::Index i = 0; i < mesh.vertex_count(); ++i) {
        if (mesh.vertices(i, 2) <= cut) continue;
        xlo = std::min(xlo, mesh.vertices(i, 0));
        xhi = std::max(xhi, mesh.vertices(i, 0));
        ylo = std::min(ylo, mesh.vertices(i, 1));
        yhi = std::max(yhi, mesh.vertices(i, 1));
    }
    if (!(yhi > ylo)) throw NumericalError("cephalic index: degenerate vault");
    return (xhi - xlo) / (yhi - ylo);
}

}  // namespace craniossm
