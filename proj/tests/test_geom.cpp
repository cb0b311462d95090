#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "phrit/geom.hpp"
#include "phrit/rng.hpp"
#include "testutil.hpp"

using namespace phrit;
using namespace phrit::geom;

namespace {
const double kPi = 3.14159265358979323846;

Rigid rot_z(double angle) {
  Rigid g;
  g.R = rotation_about_axis({0, 0, 1}, angle);
  return g;
}

Rigid translate(double x, double y, double z) {
  Rigid g;
  g.t = {x, y, z};
  return g;
}
}  // namespace

TEST_CASE("compose basics") {
  Rigid id;
  Rigid r = compose(id, id);
  CHECK(orthonormality_error(r.R) < 1e-12);
  CHECK(norm(r.t) == 0.0);

  Rng rng(11);
  for (int i = 0; i < 20; ++i) {
    Rigid t = testutil::random_rigid(rng);
    Rigid should_be_id = compose(invert(t), t);
    CHECK(orthonormality_error(should_be_id.R) < 1e-9);
    for (int k = 0; k < 9; ++k)
      CHECK(std::abs(should_be_id.R.m[size_t(k)] - Mat3::identity().m[size_t(k)]) < 1e-9);
    CHECK(norm(should_be_id.t) < 1e-9);
  }

  // Rz(90) after translate(1,0,0) sends the origin to (0,1,0).
  Rigid g = compose(rot_z(kPi / 2), translate(1, 0, 0));
  Vec3 p = g.apply({0, 0, 0});
  CHECK(std::abs(p.x - 0) < 1e-12);
  CHECK(std::abs(p.y - 1) < 1e-12);
  CHECK(std::abs(p.z - 0) < 1e-12);
}

TEST_CASE("invert basics") {
  Rigid id;
  Rigid inv = invert(id);
  CHECK(norm(inv.t) == 0.0);

  Rigid tr = translate(1, 2, 3);
  Rigid itr = invert(tr);
  CHECK(itr.t.x == -1.0);
  CHECK(itr.t.y == -2.0);
  CHECK(itr.t.z == -3.0);
}

TEST_CASE("rigid transforms preserve distances and compose associatively") {
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    Rigid t = testutil::random_rigid(rng);
    Vec3 p = {rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50)};
    Vec3 q = {rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50)};
    CHECK(std::abs(norm(t.apply(p) - t.apply(q)) - norm(p - q)) < 1e-9);
  }
  for (int i = 0; i < 50; ++i) {
    Rigid a = testutil::random_rigid(rng);
    Rigid b = testutil::random_rigid(rng);
    Rigid c = testutil::random_rigid(rng);
    Rigid left = compose(compose(a, b), c);
    Rigid right = compose(a, compose(b, c));
    for (int k = 0; k < 9; ++k)
      CHECK(std::abs(left.R.m[size_t(k)] - right.R.m[size_t(k)]) < 1e-9);
    CHECK(norm(left.t - right.t) < 1e-9);
  }
}

TEST_CASE("face normals and areas") {
  TriMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  m.faces = {{0, 1, 2}};
  FaceGeometry fg = face_normals_and_areas(m);
  CHECK(fg.areas[0] == doctest::Approx(0.5));
  CHECK(fg.normals[0].z == doctest::Approx(1.0));

  m.faces = {{0, 2, 1}};
  fg = face_normals_and_areas(m);
  CHECK(fg.normals[0].z == doctest::Approx(-1.0));

  TriMesh degenerate;
  degenerate.vertices = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  degenerate.faces = {{0, 1, 2}};
  CHECK_THROWS_AS(face_normals_and_areas(degenerate), DegenerateFace);

  // Icosphere area approaches the analytic sphere area.
  TriMesh sphere = testutil::icosphere(10.0, 3);
  fg = face_normals_and_areas(sphere);
  double total = 0;
  for (double a : fg.areas) total += a;
  const double analytic = 4.0 * kPi * 100.0;
  CHECK(std::abs(total - analytic) / analytic < 0.01);
}

TEST_CASE("sample_surface") {
  TriMesh tri;
  tri.vertices = {{0, 0, 0}, {2, 0, 0}, {0, 2, 0}};
  tri.faces = {{0, 1, 2}};
  PointCloud pc = sample_surface(tri, 1000, 42);
  for (const auto& p : pc.points) {
    CHECK(p.x >= -1e-12);
    CHECK(p.y >= -1e-12);
    CHECK(p.x + p.y <= 2 + 1e-12);
    CHECK(p.z == 0.0);
  }

  PointCloud again = sample_surface(tri, 1000, 42);
  for (std::size_t i = 0; i < pc.points.size(); ++i) {
    CHECK(pc.points[i].x == again.points[i].x);
    CHECK(pc.points[i].y == again.points[i].y);
    CHECK(pc.points[i].z == again.points[i].z);
  }

  TriMesh sphere = testutil::icosphere(10.0, 3);
  PointCloud sp = sample_surface(sphere, 10000, 7);
  double mean_r = 0;
  for (const auto& p : sp.points) mean_r += norm(p);
  mean_r /= double(sp.points.size());
  CHECK(std::abs(mean_r - 10.0) / 10.0 < 0.005);

  TriMesh empty;
  CHECK_THROWS_AS(sample_surface(empty, 10, 1), EmptyMesh);
}

TEST_CASE("sample_surface per-face counts match area weights") {
  // Two triangles with areas 1:3; multinomial 3-sigma band at n = 1e5.
  TriMesh m;
  m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 2, 0}, {3, 0, 0}, {0, 0, 2}};
  m.faces = {{0, 1, 2}, {0, 3, 4}};
  FaceGeometry fg = face_normals_and_areas(m);
  const double total = fg.areas[0] + fg.areas[1];
  const std::size_t n = 100000;
  PointCloud pc = sample_surface(m, n, 3);
  std::size_t on_first = 0;
  for (const auto& p : pc.points)
    if (p.z == 0.0) ++on_first;
  const double expected = double(n) * fg.areas[0] / total;
  const double sigma = std::sqrt(double(n) * (fg.areas[0] / total) * (fg.areas[1] / total));
  CHECK(std::abs(double(on_first) - expected) < 3.0 * sigma);
}

TEST_CASE("obj round trip") {
  TriMesh sphere = testutil::icosphere(5.0, 1);
  const std::string path = (std::filesystem::temp_directory_path() / "phrit_test_sphere.obj").string();
  save_obj(sphere, path);
  TriMesh back = load_obj(path);
  REQUIRE(back.vertices.size() == sphere.vertices.size());
  REQUIRE(back.faces.size() == sphere.faces.size());
  CHECK(back.has_normals());
  for (std::size_t i = 0; i < back.vertices.size(); ++i)
    CHECK(norm(back.vertices[i] - sphere.vertices[i]) < 1e-6);
  std::remove(path.c_str());
}

TEST_CASE("closest point on triangle") {
  const Vec3 a{0, 0, 0}, b{4, 0, 0}, c{0, 4, 0};
  CHECK(norm(closest_point_on_triangle({1, 1, 5}, a, b, c) - Vec3{1, 1, 0}) < 1e-12);
  CHECK(norm(closest_point_on_triangle({-1, -1, 0}, a, b, c) - a) < 1e-12);
  CHECK(norm(closest_point_on_triangle({5, 5, 0}, a, b, c) - Vec3{2, 2, 0}) < 1e-12);
}
