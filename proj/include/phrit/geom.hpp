#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "phrit/errors.hpp"
#include "phrit/vec.hpp"

namespace phrit::geom {

using Rigid = RigidT<double>;

// Axis-aligned box, min <= max componentwise.
struct Aabb {
  Vec3 min{0, 0, 0};
  Vec3 max{0, 0, 0};

  Vec3 center() const { return (min + max) * 0.5; }
  Vec3 extent() const { return max - min; }
  Aabb inflated(double factor) const {
    Vec3 c = center(), h = extent() * (0.5 * (1.0 + factor));
    return {c - h, c + h};
  }
  void expand(const Vec3& p) {
    min.x = p.x < min.x ? p.x : min.x;
    min.y = p.y < min.y ? p.y : min.y;
    min.z = p.z < min.z ? p.z : min.z;
    max.x = p.x > max.x ? p.x : max.x;
    max.y = p.y > max.y ? p.y : max.y;
    max.z = p.z > max.z ? p.z : max.z;
  }
  bool contains(const Vec3& p) const {
    return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y &&
           p.z >= min.z && p.z <= max.z;
  }
  static Aabb of(const std::vector<Vec3>& pts);
};

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> normals;  // per-vertex, unit; empty when absent

  bool has_normals() const { return !normals.empty(); }
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // aligned by index; empty when absent

  bool has_normals() const { return !normals.empty(); }
};

// ---- Rigid transform operations ----

// Applies b first, then a. Re-orthonormalizes if drift exceeds 1e-7.
Rigid compose(const Rigid& a, const Rigid& b);
Rigid invert(const Rigid& t);

// max |R^T R - I| plus |det(R) - 1|-style orthonormality residual.
double orthonormality_error(const Mat3& R);
// Nearest rotation via Higham's polar-decomposition iteration.
Mat3 orthonormalize(const Mat3& R);
bool is_rigid(const Rigid& t, double tol = 1e-9);

Mat3 rotation_about_axis(const Vec3& unit_axis, double angle_rad);

// ---- Mesh operations ----

struct FaceGeometry {
  std::vector<Vec3> normals;  // unit
  std::vector<double> areas;  // mm^2
};

// Throws DegenerateFace for triangles with area <= 1e-12 mm^2.
FaceGeometry face_normals_and_areas(const TriMesh& m);

// Area-weighted uniform surface sampling, deterministic per seed. Normals are
// taken from the sampled face. Throws EmptyMesh if there is no usable face.
PointCloud sample_surface(const TriMesh& m, std::size_t n, uint64_t seed);

// Closest point on triangle (a,b,c) to p.
Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

// ---- Mesh / point-cloud I/O ----

// ASCII OBJ with v/vn/f records, 1-based indices.
void save_obj(const TriMesh& m, const std::string& path);
TriMesh load_obj(const std::string& path);

// OBJ (v records) or PLY (ascii or binary little-endian) point data. For PLY
// meshes the faces are ignored; vertex normals are kept when present.
PointCloud load_point_cloud(const std::string& path);
TriMesh load_mesh(const std::string& path);  // OBJ or PLY

}  // namespace phrit::geom
