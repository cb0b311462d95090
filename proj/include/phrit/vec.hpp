#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace phrit {

// Pulled into the phrit namespace so that templated geometry code can call
// these unqualified for double while ADL picks up the ad::Scalar overloads.
using std::abs;
using std::acos;
using std::atan2;
using std::cos;
using std::exp;
using std::log;
using std::sin;
using std::sqrt;

inline double clamp1(double v, double lo, double hi) {
  return v < lo ? lo : (v > hi ? hi : v);
}

// Primal (plain double) view of a scalar; identity for double, overloaded for
// autodiff scalars. Branching in templated code goes through this.
inline double primal(double v) { return v; }

template <class T>
struct V3 {
  T x{}, y{}, z{};

  V3() = default;
  V3(T xx, T yy, T zz) : x(xx), y(yy), z(zz) {}

  V3 operator+(const V3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  V3 operator-(const V3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  V3 operator-() const { return {-x, -y, -z}; }
  V3 operator*(double s) const { return {x * s, y * s, z * s}; }
  V3 operator/(double s) const { return {x / s, y / s, z / s}; }
  V3& operator+=(const V3& o) { x = x + o.x; y = y + o.y; z = z + o.z; return *this; }
  V3& operator-=(const V3& o) { x = x - o.x; y = y - o.y; z = z - o.z; return *this; }

  T& operator[](int i) { return i == 0 ? x : (i == 1 ? y : z); }
  const T& operator[](int i) const { return i == 0 ? x : (i == 1 ? y : z); }
};

template <class T>
V3<T> operator*(const T& s, const V3<T>& v) { return {s * v.x, s * v.y, s * v.z}; }

template <class T>
T dot(const V3<T>& a, const V3<T>& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

template <class T>
V3<T> cross(const V3<T>& a, const V3<T>& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

template <class T>
T norm2(const V3<T>& v) { return dot(v, v); }

template <class T>
T norm(const V3<T>& v) { return sqrt(dot(v, v)); }

template <class T>
V3<T> normalized(const V3<T>& v) {
  T n = norm(v);
  return {v.x / n, v.y / n, v.z / n};
}

using Vec3 = V3<double>;
using Point3 = Vec3;  // positions in millimeters

inline bool finite(const Vec3& v) {
  return std::isfinite(v.x) && std::isfinite(v.y) && std::isfinite(v.z);
}

// Row-major 3x3 matrix.
template <class T>
struct M3 {
  std::array<T, 9> m{};

  static M3 identity() {
    M3 r;
    r.m = {T(1), T(0), T(0), T(0), T(1), T(0), T(0), T(0), T(1)};
    return r;
  }
  // Columns are the frame axes.
  static M3 from_cols(const V3<T>& c0, const V3<T>& c1, const V3<T>& c2) {
    M3 r;
    r.m = {c0.x, c1.x, c2.x, c0.y, c1.y, c2.y, c0.z, c1.z, c2.z};
    return r;
  }

  T& operator()(int r, int c) { return m[size_t(3 * r + c)]; }
  const T& operator()(int r, int c) const { return m[size_t(3 * r + c)]; }

  V3<T> col(int c) const { return {m[size_t(c)], m[size_t(3 + c)], m[size_t(6 + c)]}; }
  V3<T> row(int r) const { return {m[size_t(3 * r)], m[size_t(3 * r + 1)], m[size_t(3 * r + 2)]}; }

  M3 transposed() const {
    M3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }

  V3<T> operator*(const V3<T>& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }

  M3 operator*(const M3& o) const {
    M3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        r(i, j) = (*this)(i, 0) * o(0, j) + (*this)(i, 1) * o(1, j) + (*this)(i, 2) * o(2, j);
      }
    return r;
  }

  // Multiply the transpose of this matrix by v (cheaper than transposed()*v).
  V3<T> tmul(const V3<T>& v) const {
    return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
            m[1] * v.x + m[4] * v.y + m[7] * v.z,
            m[2] * v.x + m[5] * v.y + m[8] * v.z};
  }
};

using Mat3 = M3<double>;

// Rigid transform p -> R p + t. R's columns are the local frame axes
// expressed in the parent frame, so apply() maps local to world.
template <class T>
struct RigidT {
  M3<T> R = M3<T>::identity();
  V3<T> t{};

  V3<T> apply(const V3<T>& p) const { return R * p + t; }
  V3<T> apply_inverse(const V3<T>& p) const { return R.tmul(p - t); }
};

}  // namespace phrit
