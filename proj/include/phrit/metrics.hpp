#pragma once

#include <span>
#include <vector>

#include "phrit/geom.hpp"

namespace phrit::metrics {

// Exact nearest-neighbor queries over a uniform grid index.
class PointGrid {
 public:
  explicit PointGrid(std::span<const Vec3> points);

  struct Hit {
    std::size_t index;
    double dist;
  };
  Hit nearest(const Vec3& q) const;

 private:
  std::vector<Vec3> points_;
  std::vector<std::vector<uint32_t>> cells_;
  geom::Aabb bounds_;
  double cell_ = 1;
  int nx_ = 1, ny_ = 1, nz_ = 1;

  int cell_of(double v, double lo, int n) const;
};

// Nearest point on a triangle mesh (exact closest point on triangle, grid
// accelerated over triangle bounding boxes).
class TriGrid {
 public:
  explicit TriGrid(const geom::TriMesh& mesh);

  struct Hit {
    std::size_t face;
    Vec3 point;
    double dist;
  };
  Hit nearest(const Vec3& q) const;

 private:
  const geom::TriMesh& mesh_;
  std::vector<std::vector<uint32_t>> cells_;
  geom::Aabb bounds_;
  double cell_ = 1;
  int nx_ = 1, ny_ = 1, nz_ = 1;
};

// Symmetric mean nearest-neighbor distance, 0.5 * each direction (mm).
double chamfer_l1(const geom::PointCloud& a, const geom::PointCloud& b);

// Mean |cos| between each point's normal and its nearest neighbor's normal,
// averaged over both directions. Requires normals on both clouds.
double normal_consistency(const geom::PointCloud& a, const geom::PointCloud& b);

// Voxel IoU over the union AABB via parity ray casting at res^3 centers.
double iou_voxel(const geom::TriMesh& a, const geom::TriMesh& b, int res = 128);

// Directional distances from each point of `from` to `to` (mean, mm).
double v2v(std::span<const Vec3> from, std::span<const Vec3> to);
double v2s(std::span<const Vec3> from, const geom::TriMesh& to);

}  // namespace phrit::metrics
