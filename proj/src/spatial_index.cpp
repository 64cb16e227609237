#include "craniossm/spatial_index.hpp"

#include <algorithm>
#include <limits>

#include "craniossm/error.hpp"

namespace craniossm {

// Region classification after Ericson, "Real-Time Collision Detection", 5.1.5.
TriangleClosest closest_point_on_triangle(const Vec3& q, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a;
    const Vec3 ac = c - a;
    const Vec3 ap = q - a;
    const double d1 = ab.dot(ap);
    const double d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return {a, HitFeature::Vertex, {0, -1}};

    const Vec3 bp = q - b;
    const double d3 = ab.dot(bp);
    const double d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return {b, HitFeature::Vertex, {1, -1}};

    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        const double v = d1 / (d1 - d3);
        return {a + v * ab, HitFeature::Edge, {0, 1}};
    }

    const Vec3 cp = q - c;
    const double d5 = ab.dot(cp);
    const double d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return {c, HitFeature::Vertex, {2, -1}};

    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        const double w = d2 / (d2 - d6);
        return {a + w * ac, HitFeature::Edge, {0, 2}};
    }

    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return {b + w * (c - b), HitFeature::Edge, {1, 2}};
    }

    const double denom = 1.0 / (va + vb + vc);
    const double v = vb * denom;
    const double w = vc * denom;
    return {a + ab * v + ac * w, HitFeature::Face, {-1, -1}};
}

AabbTree::AabbTree(const TriMesh& mesh) : mesh_(mesh) {
    if (mesh_.face_count() == 0) throw ValidationError("spatial index over an empty mesh");
    const auto nf = static_cast<int>(mesh_.face_count());
    order_.resize(nf);
    std::vector<Vec3> centroids(nf);
    for (int f = 0; f < nf; ++f) {
        order_[f] = f;
        centroids[f] = (mesh_.vertices.row(mesh_.faces(f, 0)) + mesh_.vertices.row(mesh_.faces(f, 1)) +
                        mesh_.vertices.row(mesh_.faces(f, 2)))
                           .transpose() /
                       3.0;
    }
    nodes_.reserve(2 * static_cast<size_t>(nf));
    build(0, nf, centroids);
}

int AabbTree::build(int first, int count, std::vector<Vec3>& centroids) {
    const int index = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    Eigen::AlignedBox3d box;
    Eigen::AlignedBox3d centroid_box;
    for (int i = first; i < first + count; ++i) {
        const int f = order_[i];
        for (int c = 0; c < 3; ++c) box.extend(mesh_.vertices.row(mesh_.faces(f, c)).transpose());
        centroid_box.extend(centroids[f]);
    }
    nodes_[index].box = box;
    constexpr int kLeafSize = 4;
    if (count <= kLeafSize) {
        nodes_[index].first = first;
        nodes_[index].count = count;
        return index;
    }
    int axis = 0;
    centroid_box.sizes().maxCoeff(&axis);
    const int mid = first + count / 2;
    std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                     [&](int x, int y) {
                         if (centroids[x](axis) != centroids[y](axis)) return centroids[x](axis) < centroids[y](axis);
                         return x < y;
                     });
    const int left = build(first, mid - first, centroids);
    const int right = build(mid, first + count - mid, centroids);
    nodes_[index].left = left;
    nodes_[index].right = right;
    return index;
}

SurfaceHit AabbTree::closest(const Vec3& q) const {
    SurfaceHit best;
    best.distance2 = std::numeric_limits<double>::infinity();
    int stack[128];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
        const Node& node = nodes_[stack[--top]];
        if (node.box.squaredExteriorDistance(q) > best.distance2) continue;
        if (node.left < 0) {
            for (int i = node.first; i < node.first + node.count; ++i) {
                const int f = order_[i];
                const std::array<int, 3> idx{mesh_.faces(f, 0), mesh_.faces(f, 1), mesh_.faces(f, 2)};
                const auto tc = closest_point_on_triangle(q, mesh_.vertices.row(idx[0]).transpose(),
                                                          mesh_.vertices.row(idx[1]).transpose(),
                                                          mesh_.vertices.row(idx[2]).transpose());
                const double d2 = (tc.point - q).squaredNorm();
                if (d2 < best.distance2 || (d2 == best.distance2 && f < best.face)) {
                    best.point = tc.point;
                    best.distance2 = d2;
                    best.face = f;
                    best.feature = tc.feature;
                    best.feature_vertices = {tc.corner[0] >= 0 ? idx[tc.corner[0]] : -1,
                                             tc.corner[1] >= 0 ? idx[tc.corner[1]] : -1};
                }
            }
            continue;
        }
        const double dl = nodes_[node.left].box.squaredExteriorDistance(q);
        const double dr = nodes_[node.right].box.squaredExteriorDistance(q);
        // Push the farther child first so the nearer one is explored first.
        if (dl < dr) {
            stack[top++] = node.right;
            stack[top++] = node.left;
        } else {
            stack[top++] = node.left;
            stack[top++] = node.right;
        }
    }
    return best;
}

}  // namespace craniossm
