#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "phrit/errors.hpp"
#include "phrit/vec.hpp"

// Reverse-mode tape over vector-valued nodes, with enough structure for
// forward-over-reverse nesting: spatial gradients are built by pushing dual
// tangents (3 canonical directions) through the graph as ordinary nodes, so
// losses on those gradients stay differentiable with respect to parameters.
// Everything is double precision; a tape is single-threaded and reusable via
// clear(). Parameters live outside the tape in a flat ParamVector; affine
// nodes reference them by offset and backward() accumulates their gradients
// into a caller-provided buffer.
namespace phrit::ad {

struct Val {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : uint8_t {
  Input, Param, Const,
  Add, Sub, Mul, Div, Neg, Scale, AddC,
  Exp, Log, Sqrt, Sin, Cos, Abs, Clamp, Softplus, Sigmoid, Acos, Atan2,
  Affine, Linear, LinearCols, ConstAffine,
  Dot, Norm, Sum, Index, Pack, Concat, SMul,
};

class Tape {
 public:
  Tape() = default;

  void bind(const double* params, std::size_t n) { params_ = params; nparams_ = n; }
  void clear();
  std::size_t size() const { return nodes_.size(); }

  // Leaves.
  Val input(std::span<const double> v) { return leaf(Op::Input, v); }
  Val input1(double v) { return leaf(Op::Input, std::span<const double>(&v, 1)); }
  Val constant(std::span<const double> v) { return leaf(Op::Const, v); }
  Val constant1(double v) { return leaf(Op::Const, std::span<const double>(&v, 1)); }
  Val zeros(int len);
  Val param(int64_t offset, int32_t len);

  // Elementwise arithmetic; operands must agree in length.
  Val add(Val a, Val b);
  Val sub(Val a, Val b);
  Val mul(Val a, Val b);
  Val div(Val a, Val b);
  Val neg(Val a);
  Val scale(Val a, double c);
  Val add_const(Val a, double c);

  // Elementwise functions.
  Val exp_(Val a);
  Val log_(Val a);
  Val sqrt_(Val a);
  Val sin_(Val a);
  Val cos_(Val a);
  Val abs_(Val a);
  Val clamp(Val a, double lo, double hi);
  Val softplus(Val a, double beta);   // max(x,0) + log1p(exp(-beta|x|))/beta
  Val sigmoid(Val a, double beta);    // 1/(1+exp(-beta x))
  Val acos_(Val a);                   // input expected in [-1, 1]
  Val atan2_(Val y, Val x);

  // Parameterized affine maps; W row-major (rows x cols) at w_off, bias at
  // b_off. Linear shares W but has no bias (used for tangent propagation).
  Val affine(int64_t w_off, int64_t b_off, int rows, int cols, Val x);
  Val linear(int64_t w_off, int rows, int cols, Val x);
  // Uses only the first len(x) columns of a row-major W with the given row
  // stride (tangent propagation through a layer whose remaining inputs are
  // constant).
  Val linear_cols(int64_t w_off, int rows, int row_stride, Val x);
  // Affine with constant coefficients (rigid maps): out = M x + c.
  Val const_affine(const Mat3& M, const Vec3& c, Val x3);

  // Reductions and shape ops.
  Val dot(Val a, Val b);
  Val norm(Val a);
  Val sum(Val a);
  Val index(Val a, int i);
  Val pack(std::span<const Val> scalars);
  Val concat(Val a, Val b);
  Val smul(Val s, Val v);  // scalar * vector

  // Values.
  int len(Val v) const { return nodes_[size_t(v.id)].len; }
  std::span<const double> value(Val v) const;
  double value1(Val v) const;
  V3<double> value3(Val v) const;

  // Reverse pass from a scalar loss. Gradients w.r.t. parameters are
  // accumulated into param_grad when non-empty (must match bound size).
  // Adjoints of Input leaves are readable afterwards via adjoint().
  void backward(Val loss, std::span<double> param_grad = {});
  std::span<const double> adjoint(Val v) const;
  double adjoint1(Val v) const;

 private:
  struct Node {
    Op op;
    int32_t a = -1, b = -1;
    int32_t val = 0;   // offset into vals_
    int32_t len = 1;
    int32_t aux = 0;   // Index: component; Pack: args offset; Affine: cols; ConstAffine: aux_d offset
    int32_t aux2 = 0;  // Pack: arg count
    int64_t poff = -1, poff2 = -1;  // Affine/Linear/Param offsets
    double c = 0, c2 = 0;
  };

  Val leaf(Op op, std::span<const double> v);
  Val unary(Op op, Val a, double c = 0, double c2 = 0);
  Val binary(Op op, Val a, Val b);
  Node& make(Op op, int32_t len);
  double* slot(const Node& n) { return vals_.data() + n.val; }
  const double* slot(const Node& n) const { return vals_.data() + n.val; }

  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<double> adj_;
  std::vector<int32_t> args_;
  std::vector<double> aux_d_;
  const double* params_ = nullptr;
  std::size_t nparams_ = 0;
};

// Scalar handle with constant folding: a Scalar without a tape is a plain
// double, so templated geometry code can use numeric literals freely.
class Scalar {
 public:
  Scalar() = default;
  Scalar(double c) : c_(c) {}
  Scalar(Tape* t, Val v) : t_(t), v_(v) {}

  bool is_const() const { return t_ == nullptr; }
  double value() const;
  Tape* tape() const { return t_; }
  Val val() const { return v_; }
  // Materialize as a tape node (constants become Const leaves).
  Val materialize(Tape& t) const;

 private:
  Tape* t_ = nullptr;
  Val v_{};
  double c_ = 0;
};

inline double primal(const Scalar& s) { return s.value(); }

Scalar operator+(const Scalar& a, const Scalar& b);
Scalar operator-(const Scalar& a, const Scalar& b);
Scalar operator*(const Scalar& a, const Scalar& b);
Scalar operator/(const Scalar& a, const Scalar& b);
Scalar operator-(const Scalar& a);
Scalar sqrt(const Scalar& a);
Scalar abs(const Scalar& a);
Scalar acos(const Scalar& a);
Scalar atan2(const Scalar& y, const Scalar& x);
Scalar clamp1(const Scalar& v, double lo, double hi);

using SVec3 = V3<Scalar>;

inline SVec3 make_svec3(Tape& t, const Vec3& v) {
  return {Scalar(&t, t.input1(v.x)), Scalar(&t, t.input1(v.y)), Scalar(&t, t.input1(v.z))};
}
inline SVec3 const_svec3(const Vec3& v) { return {Scalar(v.x), Scalar(v.y), Scalar(v.z)}; }
Val pack3(Tape& t, const SVec3& v);
SVec3 unpack3(Tape& t, Val v3);

// Dual bundle for forward-over-reverse: a primal node plus tangents along
// three seed directions, all living on the same tape.
struct Dual3 {
  Val p;
  std::array<Val, 3> t;
};

// Seeds canonical directions at x. eval must map a Dual3 (length-3 vector
// node) to a Dual3 whose primal is scalar. Returns value and entries of the
// spatial gradient as tape nodes.
struct SpatialGrad {
  Val value;
  std::array<Val, 3> grad;
};

template <class F>
SpatialGrad spatial_gradient(Tape& tape, Val x3, F&& eval) {
  Dual3 x;
  x.p = x3;
  const double e0[3] = {1, 0, 0}, e1[3] = {0, 1, 0}, e2[3] = {0, 0, 1};
  x.t[0] = tape.constant(std::span<const double>(e0, 3));
  x.t[1] = tape.constant(std::span<const double>(e1, 3));
  x.t[2] = tape.constant(std::span<const double>(e2, 3));
  Dual3 y = eval(x);
  if (tape.len(y.p) != 1) throw NonScalarLoss("spatial_gradient needs a scalar-valued map");
  return {y.p, y.t};
}

// ---- Parameters and optimizer ----

struct ParamSegment {
  std::string name;
  int64_t offset = 0;
  int64_t size = 0;
};

// Flat parameter array with a named layout map. Segments must be contiguous,
// non-overlapping and cover the array.
struct ParamVector {
  std::vector<double> data;
  std::vector<ParamSegment> segments;

  void validate() const;
  const ParamSegment& find(const std::string& name) const;
  std::string layout_string() const;
  uint64_t layout_hash() const;
};

struct AdamState {
  std::vector<double> m, v;
  int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}
};

// Standard Adam update with bias correction; deterministic.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr);

uint64_t fnv1a64(const void* data, std::size_t n, uint64_t h = 1469598103934665603ULL);

}  // namespace phrit::ad
