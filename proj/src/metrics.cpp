#include "phrit/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "phrit/errors.hpp"

namespace phrit::metrics {

namespace {

geom::Aabb bounds_of(std::span<const Vec3> pts) {
  geom::Aabb b{pts[0], pts[0]};
  for (const auto& p : pts) b.expand(p);
  return b;
}

}  // namespace

// ---- PointGrid ----

PointGrid::PointGrid(std::span<const Vec3> points)
    : points_(points.begin(), points.end()) {
  if (points_.empty()) throw EmptyCloud("PointGrid over empty point set");
  bounds_ = bounds_of(points_);
  const Vec3 ext = bounds_.extent();
  const double longest = std::max({ext.x, ext.y, ext.z, 1e-6});
  const double vol = std::max(ext.x, 1e-9) * std::max(ext.y, 1e-9) * std::max(ext.z, 1e-9);
  // Flat or degenerate clouds must not explode the grid resolution.
  cell_ = std::max({std::cbrt(vol / double(points_.size())), longest / 128.0, 1e-9});
  nx_ = std::max(1, int(ext.x / cell_) + 1);
  ny_ = std::max(1, int(ext.y / cell_) + 1);
  nz_ = std::max(1, int(ext.z / cell_) + 1);
  cells_.resize(size_t(nx_) * ny_ * nz_);
  for (std::size_t i = 0; i < points_.size(); ++i) {
    const int cx = cell_of(points_[i].x, bounds_.min.x, nx_);
    const int cy = cell_of(points_[i].y, bounds_.min.y, ny_);
    const int cz = cell_of(points_[i].z, bounds_.min.z, nz_);
    cells_[(size_t(cz) * ny_ + cy) * nx_ + cx].push_back(uint32_t(i));
  }
}

int PointGrid::cell_of(double v, double lo, int n) const {
  int c = int((v - lo) / cell_);
  return c < 0 ? 0 : (c >= n ? n - 1 : c);
}

PointGrid::Hit PointGrid::nearest(const Vec3& q) const {
  const int cx = cell_of(q.x, bounds_.min.x, nx_);
  const int cy = cell_of(q.y, bounds_.min.y, ny_);
  const int cz = cell_of(q.z, bounds_.min.z, nz_);
  Hit best{0, 1e300};
  // Expand rings until the closed ring bound exceeds the best distance.
  const int max_ring = std::max({nx_, ny_, nz_});
  for (int ring = 0; ring <= max_ring; ++ring) {
    // Once a hit exists, stop when even the nearest possible point of the
    // next ring cannot beat it.
    if (best.dist < 1e300) {
      const double ring_min = (ring - 1) * cell_;
      // Conservative: query may sit anywhere inside its cell.
      if (ring_min - cell_ > best.dist) break;
    }
    bool any_cell = false;
    for (int dz = -ring; dz <= ring; ++dz) {
      for (int dy = -ring; dy <= ring; ++dy) {
        for (int dx = -ring; dx <= ring; ++dx) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          const int x = cx + dx, y = cy + dy, z = cz + dz;
          if (x < 0 || y < 0 || z < 0 || x >= nx_ || y >= ny_ || z >= nz_) continue;
          any_cell = true;
          for (const uint32_t i : cells_[(size_t(z) * ny_ + y) * nx_ + x]) {
            const double d = norm(points_[i] - q);
            if (d < best.dist) best = {i, d};
          }
        }
      }
    }
    if (!any_cell && ring > 0 && best.dist < 1e300) break;
  }
  return best;
}

// ---- TriGrid ----

TriGrid::TriGrid(const geom::TriMesh& mesh) : mesh_(mesh) {
  if (mesh.faces.empty()) throw EmptyMesh("TriGrid over empty mesh");
  bounds_ = bounds_of(mesh.vertices);
  const Vec3 ext = bounds_.extent();
  const double longest = std::max({ext.x, ext.y, ext.z, 1e-6});
  const double vol = std::max(ext.x, 1e-9) * std::max(ext.y, 1e-9) * std::max(ext.z, 1e-9);
  cell_ = std::max({std::cbrt(vol / double(mesh.faces.size())) * 2.0, longest / 128.0, 1e-9});
  nx_ = std::max(1, int(ext.x / cell_) + 1);
  ny_ = std::max(1, int(ext.y / cell_) + 1);
  nz_ = std::max(1, int(ext.z / cell_) + 1);
  cells_.resize(size_t(nx_) * ny_ * nz_);
  auto clampc = [&](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    geom::Aabb fb{mesh.vertices[size_t(mesh.faces[f][0])], mesh.vertices[size_t(mesh.faces[f][0])]};
    fb.expand(mesh.vertices[size_t(mesh.faces[f][1])]);
    fb.expand(mesh.vertices[size_t(mesh.faces[f][2])]);
    const int x0 = clampc(int((fb.min.x - bounds_.min.x) / cell_), nx_);
    const int x1 = clampc(int((fb.max.x - bounds_.min.x) / cell_), nx_);
    const int y0 = clampc(int((fb.min.y - bounds_.min.y) / cell_), ny_);
    const int y1 = clampc(int((fb.max.y - bounds_.min.y) / cell_), ny_);
    const int z0 = clampc(int((fb.min.z - bounds_.min.z) / cell_), nz_);
    const int z1 = clampc(int((fb.max.z - bounds_.min.z) / cell_), nz_);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
          cells_[(size_t(z) * ny_ + y) * nx_ + x].push_back(uint32_t(f));
  }
}

TriGrid::Hit TriGrid::nearest(const Vec3& q) const {
  auto clampc = [&](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
  const int cx = clampc(int((q.x - bounds_.min.x) / cell_), nx_);
  const int cy = clampc(int((q.y - bounds_.min.y) / cell_), ny_);
  const int cz = clampc(int((q.z - bounds_.min.z) / cell_), nz_);
  Hit best{0, {0, 0, 0}, 1e300};
  const int max_ring = std::max({nx_, ny_, nz_});
  for (int ring = 0; ring <= max_ring; ++ring) {
    if (best.dist < 1e300 && (ring - 1) * cell_ - cell_ > best.dist) break;
    bool any_cell = false;
    for (int dz = -ring; dz <= ring; ++dz) {
      for (int dy = -ring; dy <= ring; ++dy) {
        for (int dx = -ring; dx <= ring; ++dx) {
          if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
          const int x = cx + dx, y = cy + dy, z = cz + dz;
          if (x < 0 || y < 0 || z < 0 || x >= nx_ || y >= ny_ || z >= nz_) continue;
          any_cell = true;
          for (const uint32_t f : cells_[(size_t(z) * ny_ + y) * nx_ + x]) {
            const auto& face = mesh_.faces[f];
            const Vec3 p = geom::closest_point_on_triangle(
                q, mesh_.vertices[size_t(face[0])], mesh_.vertices[size_t(face[1])],
                mesh_.vertices[size_t(face[2])]);
            const double d = norm(p - q);
            if (d < best.dist) best = {f, p, d};
          }
        }
      }
    }
    if (!any_cell && ring > 0 && best.dist < 1e300) break;
  }
  return best;
}

// ---- Metrics ----

double chamfer_l1(const geom::PointCloud& a, const geom::PointCloud& b) {
  if (a.points.empty() || b.points.empty()) throw EmptyCloud("chamfer_l1 on empty cloud");
  const PointGrid ga(a.points), gb(b.points);
  double ab = 0, ba = 0;
  for (const auto& p : a.points) ab += gb.nearest(p).dist;
  for (const auto& p : b.points) ba += ga.nearest(p).dist;
  return 0.5 * ab / double(a.points.size()) + 0.5 * ba / double(b.points.size());
}

double normal_consistency(const geom::PointCloud& a, const geom::PointCloud& b) {
  if (a.points.empty() || b.points.empty()) throw EmptyCloud("normal_consistency on empty cloud");
  if (!a.has_normals() || !b.has_normals())
    throw EmptyCloud("normal_consistency requires normals on both clouds");
  const PointGrid ga(a.points), gb(b.points);
  double ab = 0, ba = 0;
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    const auto hit = gb.nearest(a.points[i]);
    ab += std::abs(dot(a.normals[i], b.normals[hit.index]));
  }
  for (std::size_t i = 0; i < b.points.size(); ++i) {
    const auto hit = ga.nearest(b.points[i]);
    ba += std::abs(dot(b.normals[i], a.normals[hit.index]));
  }
  return 0.5 * ab / double(a.points.size()) + 0.5 * ba / double(b.points.size());
}

namespace {

// Occupancy by parity ray casting along +x; rows of voxel centers gather the
// crossing parameters of candidate triangles binned by (y,z).
std::vector<uint8_t> voxelize(const geom::TriMesh& m, const geom::Aabb& box, int res) {
  std::vector<uint8_t> occ(size_t(res) * res * res, 0);
  const Vec3 ext = box.extent();
  const double hx = ext.x / res, hy = ext.y / res, hz = ext.z / res;
  // Deterministic sub-cell jitter keeps rays away from edges and vertices.
  const double jy = 0.137 * hy, jz = 0.211 * hz;

  // Bin triangles by the rows their (y,z) bounding box covers.
  std::vector<std::vector<uint32_t>> rows(size_t(res) * res);
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const Vec3& a = m.vertices[size_t(m.faces[f][0])];
    const Vec3& b = m.vertices[size_t(m.faces[f][1])];
    const Vec3& c = m.vertices[size_t(m.faces[f][2])];
    const double ylo = std::min({a.y, b.y, c.y}), yhi = std::max({a.y, b.y, c.y});
    const double zlo = std::min({a.z, b.z, c.z}), zhi = std::max({a.z, b.z, c.z});
    int j0 = int((ylo - box.min.y - jy) / hy - 1), j1 = int((yhi - box.min.y - jy) / hy + 1);
    int k0 = int((zlo - box.min.z - jz) / hz - 1), k1 = int((zhi - box.min.z - jz) / hz + 1);
    j0 = std::max(j0, 0); j1 = std::min(j1, res - 1);
    k0 = std::max(k0, 0); k1 = std::min(k1, res - 1);
    for (int k = k0; k <= k1; ++k)
      for (int j = j0; j <= j1; ++j) rows[size_t(k) * res + j].push_back(uint32_t(f));
  }

  std::vector<double> crossings;
  for (int k = 0; k < res; ++k) {
    for (int j = 0; j < res; ++j) {
      const double y = box.min.y + (j + 0.5) * hy + jy;
      const double z = box.min.z + (k + 0.5) * hz + jz;
      crossings.clear();
      for (const uint32_t f : rows[size_t(k) * res + j]) {
        const Vec3& a = m.vertices[size_t(m.faces[f][0])];
        const Vec3& b = m.vertices[size_t(m.faces[f][1])];
        const Vec3& c = m.vertices[size_t(m.faces[f][2])];
        // Intersection of the ray (t, y, z) with the triangle's plane,
        // restricted by 2D point-in-triangle in (y,z).
        const double d1 = (b.y - a.y) * (z - a.z) - (b.z - a.z) * (y - a.y);
        const double d2 = (c.y - b.y) * (z - b.z) - (c.z - b.z) * (y - b.y);
        const double d3 = (a.y - c.y) * (z - c.z) - (a.z - c.z) * (y - c.y);
        const bool has_neg = (d1 < 0) || (d2 < 0) || (d3 < 0);
        const bool has_pos = (d1 > 0) || (d2 > 0) || (d3 > 0);
        if (has_neg && has_pos) continue;
        const double denom = d1 + d2 + d3;
        if (denom == 0) continue;
        // Barycentric interpolation of x at (y,z).
        const double x = (d2 * a.x + d3 * b.x + d1 * c.x) / denom;
        crossings.push_back(x);
      }
      std::sort(crossings.begin(), crossings.end());
      std::size_t idx = 0;
      int parity = 0;
      for (int i = 0; i < res; ++i) {
        const double x = box.min.x + (i + 0.5) * hx;
        while (idx < crossings.size() && crossings[idx] < x) {
          parity ^= 1;
          ++idx;
        }
        occ[(size_t(k) * res + j) * res + i] = uint8_t(parity);
      }
    }
  }
  return occ;
}

}  // namespace

double iou_voxel(const geom::TriMesh& a, const geom::TriMesh& b, int res) {
  if (a.vertices.empty() || b.vertices.empty()) throw EmptyMesh("iou_voxel on empty mesh");
  geom::Aabb box = geom::Aabb::of(a.vertices);
  for (const auto& v : b.vertices) box.expand(v);
  box = box.inflated(0.02);
  const auto oa = voxelize(a, box, res);
  const auto ob = voxelize(b, box, res);
  long long inter = 0, uni = 0;
  for (std::size_t i = 0; i < oa.size(); ++i) {
    inter += (oa[i] & ob[i]);
    uni += (oa[i] | ob[i]);
  }
  return uni == 0 ? 0.0 : double(inter) / double(uni);
}

double v2v(std::span<const Vec3> from, std::span<const Vec3> to) {
  if (from.empty() || to.empty()) throw EmptyCloud("v2v on empty set");
  const PointGrid g(to);
  double acc = 0;
  for (const auto& p : from) acc += g.nearest(p).dist;
  return acc / double(from.size());
}

double v2s(std::span<const Vec3> from, const geom::TriMesh& to) {
  if (from.empty()) throw EmptyCloud("v2s on empty set");
  const TriGrid g(to);
  double acc = 0;
  for (const auto& p : from) acc += g.nearest(p).dist;
  return acc / double(from.size());
}

}  // namespace phrit::metrics
