#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "phrit/mc.hpp"

using namespace phrit;
using namespace phrit::mc;

namespace {
double sphere_field(const Vec3& p) { return norm(p) - 1.0; }
}  // namespace

TEST_CASE("marching cubes sphere") {
  GridSpec grid = GridSpec::cube({{-1.2, -1.2, -1.2}, {1.2, 1.2, 1.2}}, 64);
  geom::TriMesh m = marching_cubes(sphere_field, grid);
  REQUIRE(!m.vertices.empty());

  const double cell_diag = norm(grid.cell());
  for (const auto& v : m.vertices) CHECK(std::abs(norm(v) - 1.0) <= cell_diag);

  // Closed surface: Euler characteristic 2, every edge shared by 2 faces.
  std::map<std::pair<int, int>, int> edge_count;
  for (const auto& f : m.faces) {
    for (int e = 0; e < 3; ++e) {
      int a = f[size_t(e)], b = f[size_t((e + 1) % 3)];
      if (a > b) std::swap(a, b);
      edge_count[{a, b}]++;
    }
  }
  for (const auto& [edge, count] : edge_count) CHECK(count == 2);
  const long long V = (long long)m.vertices.size();
  const long long E = (long long)edge_count.size();
  const long long F = (long long)m.faces.size();
  CHECK(V - E + F == 2);

  // Outward orientation: face normal points along increasing field (radially out).
  const auto fg = geom::face_normals_and_areas(m);
  for (std::size_t f = 0; f < m.faces.size(); ++f) {
    const Vec3 c = (m.vertices[size_t(m.faces[f][0])] + m.vertices[size_t(m.faces[f][1])] +
                    m.vertices[size_t(m.faces[f][2])]) /
                   3.0;
    CHECK(dot(fg.normals[f], normalized(c)) > 0.0);
  }
}

TEST_CASE("marching cubes empty surface") {
  GridSpec grid = GridSpec::cube({{-1, -1, -1}, {1, 1, 1}}, 8);
  CHECK_THROWS_AS(marching_cubes([](const Vec3&) { return 1.0; }, grid), EmptySurface);
}

TEST_CASE("marching cubes convergence with resolution") {
  auto max_err = [&](int res) {
    GridSpec grid = GridSpec::cube({{-1.3, -1.3, -1.3}, {1.3, 1.3, 1.3}}, res);
    geom::TriMesh m = marching_cubes(sphere_field, grid);
    double err = 0;
    for (const auto& v : m.vertices) err = std::max(err, std::abs(norm(v) - 1.0));
    return err;
  };
  CHECK(max_err(64) < max_err(32));
}

TEST_CASE("marching cubes vertices lie on grid edges") {
  GridSpec grid = GridSpec::cube({{-1.1, -1.1, -1.1}, {1.1, 1.1, 1.1}}, 16);
  geom::TriMesh m = marching_cubes(sphere_field, grid);
  const Vec3 cell = grid.cell();
  for (const auto& v : m.vertices) {
    // At least two coordinates must sit exactly on grid planes.
    int on_plane = 0;
    for (int a = 0; a < 3; ++a) {
      const double f = (v[a] - grid.bounds.min[a]) / cell[a];
      if (std::abs(f - std::round(f)) < 1e-9) ++on_plane;
    }
    CHECK(on_plane >= 2);
  }
}

TEST_CASE("invocation counter") {
  reset_invocation_count();
  GridSpec grid = GridSpec::cube({{-1.2, -1.2, -1.2}, {1.2, 1.2, 1.2}}, 8);
  marching_cubes(sphere_field, grid);
  marching_cubes(sphere_field, grid);
  CHECK(invocation_count() == 2);
  reset_invocation_count();
  CHECK(invocation_count() == 0);
}

TEST_CASE("threaded extraction is deterministic") {
  GridSpec grid = GridSpec::cube({{-1.2, -1.2, -1.2}, {1.2, 1.2, 1.2}}, 24);
  geom::TriMesh a = marching_cubes(sphere_field, grid, 0.0, 1);
  geom::TriMesh b = marching_cubes(sphere_field, grid, 0.0, 4);
  REQUIRE(a.vertices.size() == b.vertices.size());
  REQUIRE(a.faces.size() == b.faces.size());
  for (std::size_t i = 0; i < a.vertices.size(); ++i) {
    CHECK(a.vertices[i].x == b.vertices[i].x);
    CHECK(a.vertices[i].y == b.vertices[i].y);
    CHECK(a.vertices[i].z == b.vertices[i].z);
  }
}
