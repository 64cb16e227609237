#pragma once

#include <vector>

#include <Eigen/Geometry>

#include "craniossm/mesh.hpp"

namespace craniossm {

/// Which part of the triangle the closest point landed on.
enum class HitFeature { Face, Edge, Vertex };

struct SurfaceHit {
    Vec3 point = Vec3::Zero();
    double distance2 = 0.0;
    int face = -1;
    HitFeature feature = HitFeature::Face;
    // For Edge hits: the two mesh vertices of the edge. For Vertex hits: vertex in [0].
    std::array<int, 2> feature_vertices{-1, -1};
};

/// Closest point on triangle (a, b, c) to q, with the feature it lies on
/// (local corner indices in `corner`).
struct TriangleClosest {
    Vec3 point;
    HitFeature feature;
    std::array<int, 2> corner;
};
TriangleClosest closest_point_on_triangle(const Vec3& q, const Vec3& a, const Vec3& b, const Vec3& c);

/// Bounding-volume hierarchy over a mesh's triangles for closest-point queries.
/// Holds a copy of the mesh geometry; immutable after construction.
class AabbTree {
public:
    explicit AabbTree(const TriMesh& mesh);

    SurfaceHit closest(const Vec3& q) const;
    const TriMesh& mesh() const { return mesh_; }

private:
    struct Node {
        Eigen::AlignedBox3d box;
        int left = -1;   // child node or -1
        int right = -1;
        int first = 0;   // leaf triangle range into order_
        int count = 0;
    };

    int build(int first, int count, std::vector<Vec3>& centroids);

    TriMesh mesh_;
    std::vector<Node> nodes_;
    std::vector<int> order_;
};

}  // namespace craniossm
