#include "phrit/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace phrit::ad {

void Tape::clear() {
  nodes_.clear();
  vals_.clear();
  adj_.clear();
  args_.clear();
  aux_d_.clear();
}

Tape::Node& Tape::make(Op op, int32_t len) {
  Node n;
  n.op = op;
  n.len = len;
  n.val = int32_t(vals_.size());
  vals_.resize(vals_.size() + size_t(len), 0.0);
  nodes_.push_back(n);
  return nodes_.back();
}

Val Tape::leaf(Op op, std::span<const double> v) {
  Node& n = make(op, int32_t(v.size()));
  std::memcpy(slot(n), v.data(), v.size() * sizeof(double));
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::zeros(int len) {
  make(Op::Const, len);
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::param(int64_t offset, int32_t len) {
  if (!params_ || offset < 0 || size_t(offset + len) > nparams_)
    throw ShapeMismatch("param slice out of range");
  Node& n = make(Op::Param, len);
  n.poff = offset;
  std::memcpy(slot(n), params_ + offset, size_t(len) * sizeof(double));
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::unary(Op op, Val a, double c, double c2) {
  const Node& na = nodes_[size_t(a.id)];
  const int alen = na.len;
  Node& n = make(op, alen);
  n.a = a.id;
  n.c = c;
  n.c2 = c2;
  const double* x = vals_.data() + nodes_[size_t(a.id)].val;
  double* y = slot(n);
  switch (op) {
    case Op::Neg: for (int i = 0; i < alen; ++i) y[i] = -x[i]; break;
    case Op::Scale: for (int i = 0; i < alen; ++i) y[i] = c * x[i]; break;
    case Op::AddC: for (int i = 0; i < alen; ++i) y[i] = x[i] + c; break;
    case Op::Exp: for (int i = 0; i < alen; ++i) y[i] = std::exp(x[i]); break;
    case Op::Log: for (int i = 0; i < alen; ++i) y[i] = std::log(x[i]); break;
    case Op::Sqrt: for (int i = 0; i < alen; ++i) y[i] = std::sqrt(x[i]); break;
    case Op::Sin: for (int i = 0; i < alen; ++i) y[i] = std::sin(x[i]); break;
    case Op::Cos: for (int i = 0; i < alen; ++i) y[i] = std::cos(x[i]); break;
    case Op::Abs: for (int i = 0; i < alen; ++i) y[i] = std::abs(x[i]); break;
    case Op::Clamp:
      for (int i = 0; i < alen; ++i) y[i] = x[i] < c ? c : (x[i] > c2 ? c2 : x[i]);
      break;
    case Op::Softplus:
      for (int i = 0; i < alen; ++i)
        y[i] = std::max(x[i], 0.0) + std::log1p(std::exp(-c * std::abs(x[i]))) / c;
      break;
    case Op::Sigmoid:
      for (int i = 0; i < alen; ++i)
        y[i] = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-c * x[i]))
                         : std::exp(c * x[i]) / (1.0 + std::exp(c * x[i]));
      break;
    case Op::Acos:
      for (int i = 0; i < alen; ++i) y[i] = std::acos(std::min(1.0, std::max(-1.0, x[i])));
      break;
    default: throw ShapeMismatch("unary: bad op");
  }
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::binary(Op op, Val a, Val b) {
  const int alen = nodes_[size_t(a.id)].len;
  const int blen = nodes_[size_t(b.id)].len;
  if (alen != blen) throw ShapeMismatch("elementwise op on mismatched lengths");
  Node& n = make(op, alen);
  n.a = a.id;
  n.b = b.id;
  const double* x = vals_.data() + nodes_[size_t(a.id)].val;
  const double* y = vals_.data() + nodes_[size_t(b.id)].val;
  double* z = slot(n);
  switch (op) {
    case Op::Add: for (int i = 0; i < alen; ++i) z[i] = x[i] + y[i]; break;
    case Op::Sub: for (int i = 0; i < alen; ++i) z[i] = x[i] - y[i]; break;
    case Op::Mul: for (int i = 0; i < alen; ++i) z[i] = x[i] * y[i]; break;
    case Op::Div: for (int i = 0; i < alen; ++i) z[i] = x[i] / y[i]; break;
    case Op::Atan2: for (int i = 0; i < alen; ++i) z[i] = std::atan2(x[i], y[i]); break;
    default: throw ShapeMismatch("binary: bad op");
  }
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::add(Val a, Val b) { return binary(Op::Add, a, b); }
Val Tape::sub(Val a, Val b) { return binary(Op::Sub, a, b); }
Val Tape::mul(Val a, Val b) { return binary(Op::Mul, a, b); }
Val Tape::div(Val a, Val b) { return binary(Op::Div, a, b); }
Val Tape::atan2_(Val y, Val x) { return binary(Op::Atan2, y, x); }
Val Tape::neg(Val a) { return unary(Op::Neg, a); }
Val Tape::scale(Val a, double c) { return unary(Op::Scale, a, c); }
Val Tape::add_const(Val a, double c) { return unary(Op::AddC, a, c); }
Val Tape::exp_(Val a) { return unary(Op::Exp, a); }
Val Tape::log_(Val a) { return unary(Op::Log, a); }
Val Tape::sqrt_(Val a) { return unary(Op::Sqrt, a); }
Val Tape::sin_(Val a) { return unary(Op::Sin, a); }
Val Tape::cos_(Val a) { return unary(Op::Cos, a); }
Val Tape::abs_(Val a) { return unary(Op::Abs, a); }
Val Tape::clamp(Val a, double lo, double hi) { return unary(Op::Clamp, a, lo, hi); }
Val Tape::softplus(Val a, double beta) { return unary(Op::Softplus, a, beta); }
Val Tape::sigmoid(Val a, double beta) { return unary(Op::Sigmoid, a, beta); }
Val Tape::acos_(Val a) { return unary(Op::Acos, a); }

Val Tape::affine(int64_t w_off, int64_t b_off, int rows, int cols, Val x) {
  if (!params_) throw ShapeMismatch("affine: no parameters bound");
  if (nodes_[size_t(x.id)].len != cols) throw ShapeMismatch("affine: input length != cols");
  if (size_t(w_off + int64_t(rows) * cols) > nparams_ ||
      (b_off >= 0 && size_t(b_off + rows) > nparams_))
    throw ShapeMismatch("affine: parameter slice out of range");
  Node& n = make(Op::Affine, rows);
  n.a = x.id;
  n.poff = w_off;
  n.poff2 = b_off;
  n.aux = cols;
  const double* in = vals_.data() + nodes_[size_t(x.id)].val;
  const double* W = params_ + w_off;
  double* out = slot(n);
  for (int r = 0; r < rows; ++r) {
    double acc = b_off >= 0 ? params_[b_off + r] : 0.0;
    const double* wr = W + int64_t(r) * cols;
    for (int c = 0; c < cols; ++c) acc += wr[c] * in[c];
    out[r] = acc;
  }
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::linear(int64_t w_off, int rows, int cols, Val x) {
  Val v = affine(w_off, -1, rows, cols, x);
  nodes_[size_t(v.id)].op = Op::Linear;
  return v;
}

Val Tape::linear_cols(int64_t w_off, int rows, int row_stride, Val x) {
  if (!params_) throw ShapeMismatch("linear_cols: no parameters bound");
  const int used = nodes_[size_t(x.id)].len;
  if (used > row_stride) throw ShapeMismatch("linear_cols: input wider than the row stride");
  if (size_t(w_off + int64_t(rows - 1) * row_stride + used) > nparams_)
    throw ShapeMismatch("linear_cols: parameter slice out of range");
  Node& n = make(Op::LinearCols, rows);
  n.a = x.id;
  n.poff = w_off;
  n.aux = row_stride;
  n.aux2 = used;
  const double* in = vals_.data() + nodes_[size_t(x.id)].val;
  const double* W = params_ + w_off;
  double* out = slot(n);
  for (int r = 0; r < rows; ++r) {
    double acc = 0;
    const double* wr = W + int64_t(r) * row_stride;
    for (int c = 0; c < used; ++c) acc += wr[c] * in[c];
    out[r] = acc;
  }
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::const_affine(const Mat3& M, const Vec3& c, Val x3) {
  if (nodes_[size_t(x3.id)].len != 3) throw ShapeMismatch("const_affine expects length 3");
  Node& n = make(Op::ConstAffine, 3);
  n.a = x3.id;
  n.aux = int32_t(aux_d_.size());
  for (int k = 0; k < 9; ++k) aux_d_.push_back(M.m[size_t(k)]);
  aux_d_.push_back(c.x);
  aux_d_.push_back(c.y);
  aux_d_.push_back(c.z);
  const double* x = vals_.data() + nodes_[size_t(x3.id)].val;
  const double* md = aux_d_.data() + nodes_.back().aux;
  double* out = slot(nodes_.back());
  for (int r = 0; r < 3; ++r)
    out[r] = md[3 * r] * x[0] + md[3 * r + 1] * x[1] + md[3 * r + 2] * x[2] + md[9 + r];
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::dot(Val a, Val b) {
  const int alen = nodes_[size_t(a.id)].len;
  if (alen != nodes_[size_t(b.id)].len) throw ShapeMismatch("dot: mismatched lengths");
  Node& n = make(Op::Dot, 1);
  n.a = a.id;
  n.b = b.id;
  const double* x = vals_.data() + nodes_[size_t(a.id)].val;
  const double* y = vals_.data() + nodes_[size_t(b.id)].val;
  double acc = 0;
  for (int i = 0; i < alen; ++i) acc += x[i] * y[i];
  *slot(n) = acc;
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::norm(Val a) {
  Node& n = make(Op::Norm, 1);
  n.a = a.id;
  const Node& na = nodes_[size_t(a.id)];
  const double* x = vals_.data() + na.val;
  double acc = 0;
  for (int i = 0; i < na.len; ++i) acc += x[i] * x[i];
  *slot(n) = std::sqrt(acc);
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::sum(Val a) {
  Node& n = make(Op::Sum, 1);
  n.a = a.id;
  const Node& na = nodes_[size_t(a.id)];
  const double* x = vals_.data() + na.val;
  double acc = 0;
  for (int i = 0; i < na.len; ++i) acc += x[i];
  *slot(n) = acc;
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::index(Val a, int i) {
  if (i < 0 || i >= nodes_[size_t(a.id)].len) throw ShapeMismatch("index out of range");
  Node& n = make(Op::Index, 1);
  n.a = a.id;
  n.aux = i;
  *slot(n) = vals_[size_t(nodes_[size_t(a.id)].val + i)];
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::pack(std::span<const Val> scalars) {
  Node& n = make(Op::Pack, int32_t(scalars.size()));
  n.aux = int32_t(args_.size());
  n.aux2 = int32_t(scalars.size());
  for (const Val& s : scalars) {
    if (nodes_[size_t(s.id)].len != 1) throw ShapeMismatch("pack expects scalars");
    args_.push_back(s.id);
  }
  double* out = slot(nodes_.back());
  for (std::size_t i = 0; i < scalars.size(); ++i)
    out[i] = vals_[size_t(nodes_[size_t(scalars[i].id)].val)];
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::concat(Val a, Val b) {
  // make() may reallocate nodes_, so copy the operand lengths first.
  const int alen = nodes_[size_t(a.id)].len;
  const int blen = nodes_[size_t(b.id)].len;
  Node& n = make(Op::Concat, alen + blen);
  n.a = a.id;
  n.b = b.id;
  double* out = slot(n);
  std::memcpy(out, vals_.data() + nodes_[size_t(a.id)].val, size_t(alen) * sizeof(double));
  std::memcpy(out + alen, vals_.data() + nodes_[size_t(b.id)].val,
              size_t(blen) * sizeof(double));
  return {int32_t(nodes_.size() - 1)};
}

Val Tape::smul(Val s, Val v) {
  if (nodes_[size_t(s.id)].len != 1) throw ShapeMismatch("smul: scalar operand expected");
  Node& n = make(Op::SMul, nodes_[size_t(v.id)].len);
  n.a = s.id;
  n.b = v.id;
  const double sv = vals_[size_t(nodes_[size_t(s.id)].val)];
  const double* x = vals_.data() + nodes_[size_t(v.id)].val;
  double* out = slot(n);
  for (int i = 0; i < n.len; ++i) out[i] = sv * x[i];
  return {int32_t(nodes_.size() - 1)};
}

std::span<const double> Tape::value(Val v) const {
  const Node& n = nodes_[size_t(v.id)];
  return {vals_.data() + n.val, size_t(n.len)};
}

double Tape::value1(Val v) const {
  const Node& n = nodes_[size_t(v.id)];
  if (n.len != 1) throw ShapeMismatch("value1 on non-scalar");
  return vals_[size_t(n.val)];
}

V3<double> Tape::value3(Val v) const {
  const Node& n = nodes_[size_t(v.id)];
  if (n.len != 3) throw ShapeMismatch("value3 on non-vec3");
  const double* x = vals_.data() + n.val;
  return {x[0], x[1], x[2]};
}

std::span<const double> Tape::adjoint(Val v) const {
  const Node& n = nodes_[size_t(v.id)];
  return {adj_.data() + n.val, size_t(n.len)};
}

double Tape::adjoint1(Val v) const { return adjoint(v)[0]; }

void Tape::backward(Val loss, std::span<double> param_grad) {
  const Node& ln = nodes_[size_t(loss.id)];
  if (ln.len != 1) throw NonScalarLoss("backward requires a scalar loss");
  if (!param_grad.empty() && param_grad.size() != nparams_)
    throw ShapeMismatch("param_grad size mismatch");

  adj_.assign(vals_.size(), 0.0);
  adj_[size_t(ln.val)] = 1.0;

  for (int32_t id = loss.id; id >= 0; --id) {
    const Node& n = nodes_[size_t(id)];
    const double* g = adj_.data() + n.val;
    bool any = false;
    for (int i = 0; i < n.len; ++i)
      if (g[i] != 0.0) { any = true; break; }
    if (!any) continue;

    double* ga = n.a >= 0 ? adj_.data() + nodes_[size_t(n.a)].val : nullptr;
    double* gb = n.b >= 0 ? adj_.data() + nodes_[size_t(n.b)].val : nullptr;
    const double* va = n.a >= 0 ? vals_.data() + nodes_[size_t(n.a)].val : nullptr;
    const double* vb = n.b >= 0 ? vals_.data() + nodes_[size_t(n.b)].val : nullptr;
    const double* vo = vals_.data() + n.val;

    switch (n.op) {
      case Op::Input:
      case Op::Const:
        break;
      case Op::Param:
        if (!param_grad.empty())
          for (int i = 0; i < n.len; ++i) param_grad[size_t(n.poff + i)] += g[i];
        break;
      case Op::Add:
        for (int i = 0; i < n.len; ++i) { ga[i] += g[i]; gb[i] += g[i]; }
        break;
      case Op::Sub:
        for (int i = 0; i < n.len; ++i) { ga[i] += g[i]; gb[i] -= g[i]; }
        break;
      case Op::Mul:
        for (int i = 0; i < n.len; ++i) { ga[i] += g[i] * vb[i]; gb[i] += g[i] * va[i]; }
        break;
      case Op::Div:
        for (int i = 0; i < n.len; ++i) {
          ga[i] += g[i] / vb[i];
          gb[i] -= g[i] * vo[i] / vb[i];
        }
        break;
      case Op::Neg:
        for (int i = 0; i < n.len; ++i) ga[i] -= g[i];
        break;
      case Op::Scale:
        for (int i = 0; i < n.len; ++i) ga[i] += n.c * g[i];
        break;
      case Op::AddC:
        for (int i = 0; i < n.len; ++i) ga[i] += g[i];
        break;
      case Op::Exp:
        for (int i = 0; i < n.len; ++i) ga[i] += g[i] * vo[i];
        break;
      case Op::Log:
        for (int i = 0; i < n.len; ++i) ga[i] += g[i] / va[i];
        break;
      case Op::Sqrt:
        for (int i = 0; i < n.len; ++i)
          if (vo[i] > 1e-300) ga[i] += g[i] * 0.5 / vo[i];
        break;
      case Op::Sin:
        for (int i = 0; i < n.len; ++i) ga[i] += g[i] * std::cos(va[i]);
        break;
      case Op::Cos:
        for (int i = 0; i < n.len; ++i) ga[i] -= g[i] * std::sin(va[i]);
        break;
      case Op::Abs:
        for (int i = 0; i < n.len; ++i)
          ga[i] += g[i] * (va[i] > 0 ? 1.0 : (va[i] < 0 ? -1.0 : 0.0));
        break;
      case Op::Clamp:
        for (int i = 0; i < n.len; ++i)
          if (va[i] > n.c && va[i] < n.c2) ga[i] += g[i];
        break;
      case Op::Softplus:
        for (int i = 0; i < n.len; ++i) {
          const double x = n.c * va[i];
          const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
          ga[i] += g[i] * s;
        }
        break;
      case Op::Sigmoid:
        for (int i = 0; i < n.len; ++i) ga[i] += g[i] * n.c * vo[i] * (1.0 - vo[i]);
        break;
      case Op::Acos:
        for (int i = 0; i < n.len; ++i) {
          const double d = std::max(1.0 - va[i] * va[i], 1e-12);
          ga[i] -= g[i] / std::sqrt(d);
        }
        break;
      case Op::Atan2:
        for (int i = 0; i < n.len; ++i) {
          const double d = va[i] * va[i] + vb[i] * vb[i];
          ga[i] += g[i] * vb[i] / d;
          gb[i] -= g[i] * va[i] / d;
        }
        break;
      case Op::LinearCols: {
        const int stride = n.aux, used = n.aux2;
        const double* W = params_ + n.poff;
        for (int r = 0; r < n.len; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          const double* wr = W + int64_t(r) * stride;
          for (int c = 0; c < used; ++c) ga[c] += wr[c] * gr;
        }
        if (!param_grad.empty()) {
          double* gw = param_grad.data() + n.poff;
          for (int r = 0; r < n.len; ++r) {
            const double gr = g[r];
            if (gr == 0.0) continue;
            double* gwr = gw + int64_t(r) * stride;
            for (int c = 0; c < used; ++c) gwr[c] += gr * va[c];
          }
        }
        break;
      }
      case Op::Affine:
      case Op::Linear: {
        const int cols = n.aux;
        const double* W = params_ + n.poff;
        for (int r = 0; r < n.len; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          const double* wr = W + int64_t(r) * cols;
          for (int c = 0; c < cols; ++c) ga[c] += wr[c] * gr;
        }
        if (!param_grad.empty()) {
          double* gw = param_grad.data() + n.poff;
          for (int r = 0; r < n.len; ++r) {
            const double gr = g[r];
            if (gr == 0.0) continue;
            double* gwr = gw + int64_t(r) * cols;
            for (int c = 0; c < cols; ++c) gwr[c] += gr * va[c];
          }
          if (n.op == Op::Affine && n.poff2 >= 0) {
            double* gbias = param_grad.data() + n.poff2;
            for (int r = 0; r < n.len; ++r) gbias[r] += g[r];
          }
        }
        break;
      }
      case Op::ConstAffine: {
        const double* md = aux_d_.data() + n.aux;
        for (int r = 0; r < 3; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          ga[0] += md[3 * r] * gr;
          ga[1] += md[3 * r + 1] * gr;
          ga[2] += md[3 * r + 2] * gr;
        }
        break;
      }
      case Op::Dot: {
        const double g0 = g[0];
        const int alen = nodes_[size_t(n.a)].len;
        for (int i = 0; i < alen; ++i) { ga[i] += g0 * vb[i]; gb[i] += g0 * va[i]; }
        break;
      }
      case Op::Norm: {
        const double g0 = g[0];
        const int alen = nodes_[size_t(n.a)].len;
        if (vo[0] > 1e-12)
          for (int i = 0; i < alen; ++i) ga[i] += g0 * va[i] / vo[0];
        break;
      }
      case Op::Sum: {
        const double g0 = g[0];
        const int alen = nodes_[size_t(n.a)].len;
        for (int i = 0; i < alen; ++i) ga[i] += g0;
        break;
      }
      case Op::Index:
        ga[n.aux] += g[0];
        break;
      case Op::Pack:
        for (int i = 0; i < n.aux2; ++i) {
          const int32_t arg = args_[size_t(n.aux + i)];
          adj_[size_t(nodes_[size_t(arg)].val)] += g[i];
        }
        break;
      case Op::Concat: {
        const int alen = nodes_[size_t(n.a)].len;
        for (int i = 0; i < alen; ++i) ga[i] += g[i];
        for (int i = 0; i < n.len - alen; ++i) gb[i] += g[alen + i];
        break;
      }
      case Op::SMul: {
        const double sv = va[0];
        double gs = 0;
        for (int i = 0; i < n.len; ++i) {
          gs += g[i] * vb[i];
          gb[i] += g[i] * sv;
        }
        ga[0] += gs;
        break;
      }
    }
  }
}

// ---- Scalar ----

double Scalar::value() const { return t_ ? t_->value1(v_) : c_; }

Val Scalar::materialize(Tape& t) const {
  if (t_) return v_;
  return t.constant1(c_);
}

namespace {
Tape* tape_of(const Scalar& a, const Scalar& b) {
  Tape* t = a.tape() ? a.tape() : b.tape();
  return t;
}
}  // namespace

Scalar operator+(const Scalar& a, const Scalar& b) {
  Tape* t = tape_of(a, b);
  if (!t) return Scalar(a.value() + b.value());
  if (a.is_const()) return Scalar(t, t->add_const(b.val(), a.value()));
  if (b.is_const()) return Scalar(t, t->add_const(a.val(), b.value()));
  return Scalar(t, t->add(a.val(), b.val()));
}

Scalar operator-(const Scalar& a, const Scalar& b) {
  Tape* t = tape_of(a, b);
  if (!t) return Scalar(a.value() - b.value());
  if (b.is_const()) return Scalar(t, t->add_const(a.val(), -b.value()));
  if (a.is_const()) return Scalar(t, t->add_const(t->neg(b.val()), a.value()));
  return Scalar(t, t->sub(a.val(), b.val()));
}

Scalar operator*(const Scalar& a, const Scalar& b) {
  Tape* t = tape_of(a, b);
  if (!t) return Scalar(a.value() * b.value());
  if (a.is_const()) return Scalar(t, t->scale(b.val(), a.value()));
  if (b.is_const()) return Scalar(t, t->scale(a.val(), b.value()));
  return Scalar(t, t->mul(a.val(), b.val()));
}

Scalar operator/(const Scalar& a, const Scalar& b) {
  Tape* t = tape_of(a, b);
  if (!t) return Scalar(a.value() / b.value());
  if (b.is_const()) return Scalar(t, t->scale(a.val(), 1.0 / b.value()));
  Val av = a.materialize(*t);
  return Scalar(t, t->div(av, b.val()));
}

Scalar operator-(const Scalar& a) {
  if (a.is_const()) return Scalar(-a.value());
  return Scalar(a.tape(), a.tape()->neg(a.val()));
}

Scalar sqrt(const Scalar& a) {
  if (a.is_const()) return Scalar(std::sqrt(a.value()));
  return Scalar(a.tape(), a.tape()->sqrt_(a.val()));
}

Scalar abs(const Scalar& a) {
  if (a.is_const()) return Scalar(std::abs(a.value()));
  return Scalar(a.tape(), a.tape()->abs_(a.val()));
}

Scalar acos(const Scalar& a) {
  if (a.is_const()) return Scalar(std::acos(std::min(1.0, std::max(-1.0, a.value()))));
  return Scalar(a.tape(), a.tape()->acos_(a.val()));
}

Scalar atan2(const Scalar& y, const Scalar& x) {
  Tape* t = tape_of(y, x);
  if (!t) return Scalar(std::atan2(y.value(), x.value()));
  return Scalar(t, t->atan2_(y.materialize(*t), x.materialize(*t)));
}

Scalar clamp1(const Scalar& v, double lo, double hi) {
  if (v.is_const()) return Scalar(phrit::clamp1(v.value(), lo, hi));
  return Scalar(v.tape(), v.tape()->clamp(v.val(), lo, hi));
}

Val pack3(Tape& t, const SVec3& v) {
  const std::array<Val, 3> vals = {v.x.materialize(t), v.y.materialize(t),
                                   v.z.materialize(t)};
  return t.pack(vals);
}

SVec3 unpack3(Tape& t, Val v3) {
  return {Scalar(&t, t.index(v3, 0)), Scalar(&t, t.index(v3, 1)), Scalar(&t, t.index(v3, 2))};
}

// ---- ParamVector / Adam ----

void ParamVector::validate() const {
  int64_t expect = 0;
  for (const auto& s : segments) {
    if (s.offset != expect || s.size < 0)
      throw ShapeMismatch("parameter layout not contiguous at " + s.name);
    expect += s.size;
  }
  if (expect != int64_t(data.size()))
    throw ShapeMismatch("parameter layout does not cover the array");
}

const ParamSegment& ParamVector::find(const std::string& name) const {
  for (const auto& s : segments)
    if (s.name == name) return s;
  throw ShapeMismatch("no parameter segment named " + name);
}

std::string ParamVector::layout_string() const {
  std::string out;
  for (const auto& s : segments)
    out += s.name + ":" + std::to_string(s.offset) + ":" + std::to_string(s.size) + ";";
  return out;
}

uint64_t ParamVector::layout_hash() const {
  const std::string s = layout_string();
  return fnv1a64(s.data(), s.size());
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeMismatch("adam_step: size mismatch");
  state.step += 1;
  const double b1t = 1.0 - std::pow(state.beta1, double(state.step));
  const double b2t = 1.0 - std::pow(state.beta2, double(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / b1t;
    const double vhat = state.v[i] / b2t;
    params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

uint64_t fnv1a64(const void* data, std::size_t n, uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace phrit::ad
