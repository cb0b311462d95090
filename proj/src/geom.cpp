#include "phrit/geom.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "phrit/rng.hpp"

namespace phrit::geom {

Aabb Aabb::of(const std::vector<Vec3>& pts) {
  if (pts.empty()) return {};
  Aabb b{pts[0], pts[0]};
  for (const auto& p : pts) b.expand(p);
  return b;
}

double orthonormality_error(const Mat3& R) {
  Mat3 g = R.transposed() * R;
  double err = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) err = std::max(err, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  const double det = R(0, 0) * (R(1, 1) * R(2, 2) - R(1, 2) * R(2, 1)) -
                     R(0, 1) * (R(1, 0) * R(2, 2) - R(1, 2) * R(2, 0)) +
                     R(0, 2) * (R(1, 0) * R(2, 1) - R(1, 1) * R(2, 0));
  return std::max(err, std::abs(det - 1.0));
}

static Mat3 inverse3(const Mat3& A) {
  const double a = A(0, 0), b = A(0, 1), c = A(0, 2);
  const double d = A(1, 0), e = A(1, 1), f = A(1, 2);
  const double g = A(2, 0), h = A(2, 1), i = A(2, 2);
  const double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
  Mat3 r;
  r(0, 0) = (e * i - f * h) / det;
  r(0, 1) = (c * h - b * i) / det;
  r(0, 2) = (b * f - c * e) / det;
  r(1, 0) = (f * g - d * i) / det;
  r(1, 1) = (a * i - c * g) / det;
  r(1, 2) = (c * d - a * f) / det;
  r(2, 0) = (d * h - e * g) / det;
  r(2, 1) = (b * g - a * h) / det;
  r(2, 2) = (a * e - b * d) / det;
  return r;
}

Mat3 orthonormalize(const Mat3& R) {
  // Higham iteration X <- (X + X^-T)/2 converges to the polar factor.
  Mat3 X = R;
  for (int it = 0; it < 32; ++it) {
    Mat3 Xinv_t = inverse3(X).transposed();
    Mat3 next;
    for (int k = 0; k < 9; ++k) next.m[size_t(k)] = 0.5 * (X.m[size_t(k)] + Xinv_t.m[size_t(k)]);
    double delta = 0;
    for (int k = 0; k < 9; ++k) delta = std::max(delta, std::abs(next.m[size_t(k)] - X.m[size_t(k)]));
    X = next;
    if (delta < 1e-15) break;
  }
  return X;
}

bool is_rigid(const Rigid& t, double tol) {
  return orthonormality_error(t.R) <= tol && finite(t.t);
}

Rigid compose(const Rigid& a, const Rigid& b) {
  Rigid r;
  r.R = a.R * b.R;
  r.t = a.R * b.t + a.t;
  if (orthonormality_error(r.R) > 1e-7) r.R = orthonormalize(r.R);
  return r;
}

Rigid invert(const Rigid& t) {
  Rigid r;
  r.R = t.R.transposed();
  r.t = -(r.R * t.t);
  return r;
}

Mat3 rotation_about_axis(const Vec3& u, double angle) {
  const double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
  Mat3 R;
  R(0, 0) = c + u.x * u.x * t;
  R(0, 1) = u.x * u.y * t - u.z * s;
  R(0, 2) = u.x * u.z * t + u.y * s;
  R(1, 0) = u.y * u.x * t + u.z * s;
  R(1, 1) = c + u.y * u.y * t;
  R(1, 2) = u.y * u.z * t - u.x * s;
  R(2, 0) = u.z * u.x * t - u.y * s;
  R(2, 1) = u.z * u.y * t + u.x * s;
  R(2, 2) = c + u.z * u.z * t;
  return R;
}

FaceGeometry face_normals_and_areas(const TriMesh& m) {
  FaceGeometry out;
  out.normals.reserve(m.faces.size());
  out.areas.reserve(m.faces.size());
  for (const auto& f : m.faces) {
    const Vec3& a = m.vertices[size_t(f[0])];
    const Vec3& b = m.vertices[size_t(f[1])];
    const Vec3& c = m.vertices[size_t(f[2])];
    const Vec3 n = cross(b - a, c - a);
    const double twice_area = norm(n);
    if (!(twice_area * 0.5 > 1e-12))
      throw DegenerateFace("zero-area triangle in face_normals_and_areas");
    out.normals.push_back(n / twice_area);
    out.areas.push_back(0.5 * twice_area);
  }
  return out;
}

PointCloud sample_surface(const TriMesh& m, std::size_t n, uint64_t seed) {
  if (m.faces.empty()) throw EmptyMesh("sample_surface: mesh has no faces");
  FaceGeometry fg = face_normals_and_areas(m);
  std::vector<double> cdf(fg.areas.size());
  double acc = 0;
  for (std::size_t i = 0; i < fg.areas.size(); ++i) {
    acc += fg.areas[i];
    cdf[i] = acc;
  }
  if (!(acc > 0)) throw EmptyMesh("sample_surface: total area is zero");

  Rng rng(seed);
  PointCloud out;
  out.points.reserve(n);
  out.normals.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double r = rng.uniform() * acc;
    const std::size_t fi =
        size_t(std::lower_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
    const std::size_t f = std::min(fi, cdf.size() - 1);
    const auto& face = m.faces[f];
    double u = rng.uniform(), v = rng.uniform();
    if (u + v > 1.0) {
      u = 1.0 - u;
      v = 1.0 - v;
    }
    const Vec3& a = m.vertices[size_t(face[0])];
    const Vec3& b = m.vertices[size_t(face[1])];
    const Vec3& c = m.vertices[size_t(face[2])];
    out.points.push_back(a + (b - a) * u + (c - a) * v);
    out.normals.push_back(fg.normals[f]);
  }
  return out;
}

Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  // Ericson, Real-Time Collision Detection, 5.1.5.
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = dot(ab, ap), d2 = dot(ac, ap);
  if (d1 <= 0 && d2 <= 0) return a;

  const Vec3 bp = p - b;
  const double d3 = dot(ab, bp), d4 = dot(ac, bp);
  if (d3 >= 0 && d4 <= d3) return b;

  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) {
    const double v = d1 / (d1 - d3);
    return a + ab * v;
  }

  const Vec3 cp = p - c;
  const double d5 = dot(ab, cp), d6 = dot(ac, cp);
  if (d6 >= 0 && d5 <= d6) return c;

  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) {
    const double w = d2 / (d2 - d6);
    return a + ac * w;
  }

  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return b + (c - b) * w;
  }

  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return a + ab * v + ac * w;
}

// ---------------- I/O ----------------

void save_obj(const TriMesh& m, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.precision(9);
  for (const auto& v : m.vertices) f << "v " << v.x << " " << v.y << " " << v.z << "\n";
  for (const auto& n : m.normals) f << "vn " << n.x << " " << n.y << " " << n.z << "\n";
  const bool vn = m.has_normals();
  for (const auto& face : m.faces) {
    if (vn)
      f << "f " << face[0] + 1 << "//" << face[0] + 1 << " " << face[1] + 1 << "//"
        << face[1] + 1 << " " << face[2] + 1 << "//" << face[2] + 1 << "\n";
    else
      f << "f " << face[0] + 1 << " " << face[1] + 1 << " " << face[2] + 1 << "\n";
  }
  if (!f) throw DataError("write failed: " + path);
}

static int parse_obj_index(const std::string& tok, std::size_t n_vertices) {
  // "v", "v/vt", "v//vn", "v/vt/vn" forms; 1-based positive indices only.
  const std::size_t slash = tok.find('/');
  const std::string head = slash == std::string::npos ? tok : tok.substr(0, slash);
  long idx = 0;
  try {
    idx = std::stol(head);
  } catch (...) {
    throw DataError("bad OBJ face index: " + tok);
  }
  if (idx < 1 || size_t(idx) > n_vertices)
    throw DataError("OBJ face index out of range: " + tok);
  return int(idx - 1);
}

TriMesh load_obj(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open " + path);
  TriMesh m;
  std::vector<Vec3> file_normals;
  std::string line;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tag;
    if (!(ss >> tag)) continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ss >> v.x >> v.y >> v.z)) throw DataError("bad OBJ vertex line: " + line);
      m.vertices.push_back(v);
    } else if (tag == "vn") {
      Vec3 n;
      if (!(ss >> n.x >> n.y >> n.z)) throw DataError("bad OBJ normal line: " + line);
      file_normals.push_back(n);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ss >> tok) idx.push_back(parse_obj_index(tok, m.vertices.size()));
      if (idx.size() < 3) throw DataError("OBJ face with fewer than 3 vertices");
      for (std::size_t i = 1; i + 1 < idx.size(); ++i)
        m.faces.push_back({idx[0], idx[i], idx[i + 1]});
    }
  }
  if (file_normals.size() == m.vertices.size()) m.normals = std::move(file_normals);
  return m;
}

namespace {

struct PlyProperty {
  std::string type;
  std::string name;
  bool is_list = false;
  std::string count_type, item_type;
};

struct PlyElement {
  std::string name;
  std::size_t count = 0;
  std::vector<PlyProperty> props;
};

std::size_t scalar_size(const std::string& t) {
  if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
  if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
  if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" ||
      t == "float32")
    return 4;
  if (t == "double" || t == "float64") return 8;
  throw DataError("unsupported PLY type: " + t);
}

double read_scalar(std::ifstream& f, const std::string& t) {
  unsigned char buf[8];
  const std::size_t n = scalar_size(t);
  f.read(reinterpret_cast<char*>(buf), std::streamsize(n));
  if (!f) throw DataError("truncated PLY payload");
  // Little-endian payload, little-endian host assumed.
  if (t == "float" || t == "float32") {
    float v;
    std::memcpy(&v, buf, 4);
    return double(v);
  }
  if (t == "double" || t == "float64") {
    double v;
    std::memcpy(&v, buf, 8);
    return v;
  }
  long long v = 0;
  std::memcpy(&v, buf, n);
  if ((t == "char" || t == "int8") && (v & 0x80)) v -= 0x100;
  if ((t == "short" || t == "int16") && (v & 0x8000)) v -= 0x10000;
  if ((t == "int" || t == "int32") && (v & 0x80000000LL)) v -= 0x100000000LL;
  return double(v);
}

struct PlyData {
  std::vector<Vec3> vertices, normals;
  std::vector<std::array<int, 3>> faces;
  bool has_normals = false;
};

PlyData load_ply(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line.substr(0, 3) != "ply") throw DataError("not a PLY file");
  std::string format;
  std::vector<PlyElement> elements;
  while (std::getline(f, line)) {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag;
    if (tag == "comment") continue;
    if (tag == "format") {
      ss >> format;
      if (format != "ascii" && format != "binary_little_endian")
        throw DataError("unsupported PLY format: " + format);
    } else if (tag == "element") {
      PlyElement e;
      ss >> e.name >> e.count;
      elements.push_back(e);
    } else if (tag == "property") {
      if (elements.empty()) throw DataError("PLY property before element");
      PlyProperty p;
      ss >> p.type;
      if (p.type == "list") {
        p.is_list = true;
        ss >> p.count_type >> p.item_type >> p.name;
      } else {
        ss >> p.name;
      }
      elements.back().props.push_back(p);
    } else if (tag == "end_header") {
      break;
    }
  }

  PlyData out;
  const bool ascii = format == "ascii";
  for (const auto& e : elements) {
    if (e.name == "vertex") {
      int ix = -1, iy = -1, iz = -1, inx = -1, iny = -1, inz = -1;
      for (std::size_t i = 0; i < e.props.size(); ++i) {
        const auto& nm = e.props[i].name;
        if (nm == "x") ix = int(i);
        if (nm == "y") iy = int(i);
        if (nm == "z") iz = int(i);
        if (nm == "nx") inx = int(i);
        if (nm == "ny") iny = int(i);
        if (nm == "nz") inz = int(i);
      }
      if (ix < 0 || iy < 0 || iz < 0) throw DataError("PLY vertex element lacks x/y/z");
      out.has_normals = inx >= 0 && iny >= 0 && inz >= 0;
      std::vector<double> vals(e.props.size());
      for (std::size_t v = 0; v < e.count; ++v) {
        if (ascii) {
          for (auto& d : vals) {
            if (!(f >> d)) throw DataError("truncated PLY vertex data");
          }
        } else {
          for (std::size_t i = 0; i < e.props.size(); ++i) {
            if (e.props[i].is_list) throw DataError("list property on PLY vertex");
            vals[i] = read_scalar(f, e.props[i].type);
          }
        }
        out.vertices.push_back({vals[size_t(ix)], vals[size_t(iy)], vals[size_t(iz)]});
        if (out.has_normals)
          out.normals.push_back({vals[size_t(inx)], vals[size_t(iny)], vals[size_t(inz)]});
      }
    } else if (e.name == "face") {
      for (std::size_t k = 0; k < e.count; ++k) {
        std::size_t cnt = 0;
        std::vector<int> idx;
        if (ascii) {
          if (!(f >> cnt)) throw DataError("truncated PLY face data");
          idx.resize(cnt);
          for (auto& i : idx)
            if (!(f >> i)) throw DataError("truncated PLY face data");
        } else {
          const auto& p = e.props.at(0);
          if (!p.is_list) throw DataError("PLY face without list property");
          cnt = size_t(read_scalar(f, p.count_type));
          idx.resize(cnt);
          for (auto& i : idx) i = int(read_scalar(f, p.item_type));
        }
        if (cnt < 3) continue;
        for (std::size_t i = 1; i + 1 < cnt; ++i)
          out.faces.push_back({idx[0], idx[i], idx[i + 1]});
      }
    } else {
      if (ascii) {
        for (std::size_t k = 0; k < e.count; ++k)
          for (std::size_t i = 0; i < e.props.size(); ++i) {
            double d;
            f >> d;
          }
      } else {
        for (std::size_t k = 0; k < e.count; ++k)
          for (const auto& p : e.props) {
            if (p.is_list) {
              const std::size_t cnt = size_t(read_scalar(f, p.count_type));
              for (std::size_t i = 0; i < cnt; ++i) read_scalar(f, p.item_type);
            } else {
              read_scalar(f, p.type);
            }
          }
      }
    }
  }
  return out;
}

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

}  // namespace

PointCloud load_point_cloud(const std::string& path) {
  PointCloud pc;
  if (ends_with(path, ".ply")) {
    PlyData d = load_ply(path);
    pc.points = std::move(d.vertices);
    if (d.has_normals) pc.normals = std::move(d.normals);
  } else {
    TriMesh m = load_obj(path);
    pc.points = std::move(m.vertices);
    pc.normals = std::move(m.normals);
  }
  if (pc.points.empty()) throw DataError("no points in " + path);
  return pc;
}

TriMesh load_mesh(const std::string& path) {
  if (ends_with(path, ".ply")) {
    PlyData d = load_ply(path);
    TriMesh m;
    m.vertices = std::move(d.vertices);
    m.faces = std::move(d.faces);
    if (d.has_normals) m.normals = std::move(d.normals);
    return m;
  }
  return load_obj(path);
}

}  // namespace phrit::geom
