#include "phrit/mc.hpp"

#include <atomic>
#include <cmath>
#include <unordered_map>

#include "phrit/errors.hpp"
#include "phrit/parallel.hpp"

namespace phrit::mc {

extern const int kEdgeTable[256];
extern const int kTriTable[256][16];

namespace {

std::atomic<uint64_t> g_invocations{0};

// Bourke cube corner offsets (x,y,z) and the corner pair of each edge.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                               {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdgeCorners[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                     {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

uint64_t invocation_count() { return g_invocations.load(); }
void reset_invocation_count() { g_invocations.store(0); }

geom::TriMesh marching_cubes(const std::function<double(const Vec3&)>& field,
                             const GridSpec& grid, double iso, int threads) {
  g_invocations.fetch_add(1);
  const int nx = grid.nx, ny = grid.ny, nz = grid.nz;
  if (nx < 2 || ny < 2 || nz < 2) throw ConfigError("marching_cubes: resolution must be >= 2");

  std::vector<double> values(size_t(nx) * ny * nz);
  auto node_index = [&](int i, int j, int k) -> size_t {
    return (size_t(k) * ny + size_t(j)) * size_t(nx) + size_t(i);
  };
  parallel_for(size_t(nz), threads, [&](std::size_t k) {
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i)
        values[node_index(i, j, int(k))] = field(grid.node(i, j, int(k)));
  });
  for (const double v : values)
    if (!std::isfinite(v)) throw DataError("marching_cubes: non-finite field value");

  geom::TriMesh mesh;
  // Global edge key: 3*node + axis, axis 0/1/2 for edges along x/y/z from the
  // lower node. First-use assignment keeps vertex order deterministic.
  std::unordered_map<int64_t, int> edge_vertex;
  edge_vertex.reserve(size_t(nx) * ny);

  auto edge_key = [&](int i, int j, int k, int corner_a, int corner_b) -> int64_t {
    int ax = i + kCorner[corner_a][0], ay = j + kCorner[corner_a][1], az = k + kCorner[corner_a][2];
    int bx = i + kCorner[corner_b][0], by = j + kCorner[corner_b][1], bz = k + kCorner[corner_b][2];
    if (std::tie(az, ay, ax) > std::tie(bz, by, bx)) {
      std::swap(ax, bx);
      std::swap(ay, by);
      std::swap(az, bz);
    }
    const int axis = (bx > ax) ? 0 : (by > ay ? 1 : 2);
    return 3 * int64_t(node_index(ax, ay, az)) + axis;
  };

  double corner_val[8];
  Vec3 corner_pos[8];
  int edge_vid[12];

  for (int k = 0; k + 1 < nz; ++k) {
    for (int j = 0; j + 1 < ny; ++j) {
      for (int i = 0; i + 1 < nx; ++i) {
        int cube_index = 0;
        for (int c = 0; c < 8; ++c) {
          corner_val[c] = values[node_index(i + kCorner[c][0], j + kCorner[c][1],
                                            k + kCorner[c][2])];
          corner_pos[c] = grid.node(i + kCorner[c][0], j + kCorner[c][1], k + kCorner[c][2]);
          if (corner_val[c] < iso) cube_index |= 1 << c;
        }
        const int edges = kEdgeTable[cube_index];
        if (edges == 0) continue;

        for (int e = 0; e < 12; ++e) {
          if (!(edges & (1 << e))) continue;
          const int64_t key = edge_key(i, j, k, kEdgeCorners[e][0], kEdgeCorners[e][1]);
          auto it = edge_vertex.find(key);
          if (it != edge_vertex.end()) {
            edge_vid[e] = it->second;
            continue;
          }
          const int a = kEdgeCorners[e][0], b = kEdgeCorners[e][1];
          const double va = corner_val[a], vb = corner_val[b];
          double t = (iso - va) / (vb - va);
          t = t < 0 ? 0 : (t > 1 ? 1 : t);
          const Vec3 p = corner_pos[a] + (corner_pos[b] - corner_pos[a]) * t;
          const int vid = int(mesh.vertices.size());
          mesh.vertices.push_back(p);
          edge_vertex.emplace(key, vid);
          edge_vid[e] = vid;
        }

        const int* tris = kTriTable[cube_index];
        for (int t = 0; tris[t] != -1; t += 3) {
          // Swapped winding so triangle normals point toward increasing field
          // (outward for a signed distance field).
          mesh.faces.push_back({edge_vid[tris[t]], edge_vid[tris[t + 2]], edge_vid[tris[t + 1]]});
        }
      }
    }
  }

  if (mesh.faces.empty()) throw EmptySurface("marching_cubes: no sign change in grid");
  return mesh;
}

}  // namespace phrit::mc
