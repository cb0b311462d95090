#pragma once

#include <cstdint>
#include <functional>

#include "phrit/geom.hpp"

namespace phrit::mc {

struct GridSpec {
  geom::Aabb bounds;
  int nx = 2, ny = 2, nz = 2;  // node counts per axis, >= 2

  Vec3 cell() const {
    const Vec3 e = bounds.extent();
    return {e.x / (nx - 1), e.y / (ny - 1), e.z / (nz - 1)};
  }
  Vec3 node(int i, int j, int k) const {
    const Vec3 c = cell();
    return {bounds.min.x + c.x * i, bounds.min.y + c.y * j, bounds.min.z + c.z * k};
  }
  static GridSpec cube(const geom::Aabb& b, int res) { return {b, res, res, res}; }
};

// Isosurface extraction with the classic 256-case table and linear edge
// interpolation. Vertices shared across cells are welded by global edge key;
// triangles are wound so normals point toward increasing field values.
// Output ordering is deterministic (cells marched in index order). Field
// evaluation over grid nodes is parallelized by slab when threads > 1.
// Throws EmptySurface when no cell straddles the iso value.
geom::TriMesh marching_cubes(const std::function<double(const Vec3&)>& field,
                             const GridSpec& grid, double iso = 0.0, int threads = 1);

// Instrumentation for the one-time-extraction contract.
uint64_t invocation_count();
void reset_invocation_count();

}  // namespace phrit::mc
