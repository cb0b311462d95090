#include "phrit/nets.hpp"

#include <algorithm>
#include <cmath>

#include "phrit/rng.hpp"

namespace phrit::nets {

Activation activation_from_string(const std::string& s) {
  if (s == "softplus") return Activation::Softplus;
  if (s == "sine") return Activation::Sine;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation: " + s);
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::Softplus: return "softplus";
    case Activation::Sine: return "sine";
    case Activation::Relu: return "relu";
  }
  return "softplus";
}

std::vector<int> NetConfig::stage_hidden() const {
  if (!holistic) return deform_hidden;
  // Holistic variant: one stage carrying the layers of all N+1 stages.
  std::vector<int> h;
  for (int s = 0; s < skip_stages + 1; ++s)
    h.insert(h.end(), deform_hidden.begin(), deform_hidden.end());
  return h;
}

namespace {

// Appends layer segments for an MLP to the layout under construction.
MlpLayout add_mlp(ad::ParamVector& pv, const std::string& name, int input,
                  const std::vector<int>& hidden, int output) {
  MlpLayout L;
  int in = input;
  std::vector<int> widths = hidden;
  widths.push_back(output);
  for (std::size_t li = 0; li < widths.size(); ++li) {
    const int out = widths[li];
    LayerLayout lay;
    lay.rows = out;
    lay.cols = in;
    lay.w = int64_t(pv.data.size());
    pv.segments.push_back({name + ".L" + std::to_string(li) + ".w", lay.w,
                           int64_t(out) * in});
    pv.data.resize(pv.data.size() + size_t(out) * size_t(in), 0.0);
    lay.b = int64_t(pv.data.size());
    pv.segments.push_back({name + ".L" + std::to_string(li) + ".b", lay.b, out});
    pv.data.resize(pv.data.size() + size_t(out), 0.0);
    L.layers.push_back(lay);
    in = out;
  }
  return L;
}

void init_mlp_standard(ad::ParamVector& pv, const MlpLayout& L, Activation act,
                       double omega, Rng rng, bool zero_last) {
  for (std::size_t li = 0; li < L.layers.size(); ++li) {
    const auto& lay = L.layers[li];
    const bool last = li + 1 == L.layers.size();
    double* W = pv.data.data() + lay.w;
    double* B = pv.data.data() + lay.b;
    if (last && zero_last) {
      std::fill(W, W + int64_t(lay.rows) * lay.cols, 0.0);
      std::fill(B, B + lay.rows, 0.0);
      continue;
    }
    if (act == Activation::Sine) {
      const double bound = li == 0 ? 1.0 / lay.cols
                                   : std::sqrt(6.0 / lay.cols) / omega;
      for (int64_t k = 0; k < int64_t(lay.rows) * lay.cols; ++k)
        W[k] = rng.uniform(-bound, bound);
      for (int r = 0; r < lay.rows; ++r) B[r] = 0.0;
    } else {
      const double std_dev = std::sqrt(2.0 / lay.cols);
      for (int64_t k = 0; k < int64_t(lay.rows) * lay.cols; ++k)
        W[k] = rng.normal(0.0, std_dev);
      for (int r = 0; r < lay.rows; ++r) B[r] = 0.0;
    }
  }
}

// Sphere-like start: f(x) ~ |x - center| - r in the scaled input coordinates.
// Hidden layers N(0, sqrt(2/out)), final layer around sqrt(pi)/sqrt(fan_in),
// then a deterministic calibration pass: probe fixed directions at two radii,
// rescale the last layer so the radial slope is one, and set its bias so the
// mean over the r-sphere is zero. At small widths the raw recipe alone has
// large direction-dependent error.
void init_refnet_geometric(ad::ParamVector& pv, const MlpLayout& L, const NetConfig& cfg,
                           Rng rng) {
  const double radius_scaled = cfg.geo_init_radius * cfg.input_scale;
  for (std::size_t li = 0; li < L.layers.size(); ++li) {
    const auto& lay = L.layers[li];
    const bool last = li + 1 == L.layers.size();
    double* W = pv.data.data() + lay.w;
    double* B = pv.data.data() + lay.b;
    // Off-path units keep a full-scale random init so gradients flow
    // everywhere; unit 0 of each layer carries an explicit sphere.
    const double he = std::sqrt(2.0) / std::sqrt(double(lay.rows));
    for (int64_t k = 0; k < int64_t(lay.rows) * lay.cols; ++k) W[k] = rng.normal(0.0, he);
    for (int r = 0; r < lay.rows; ++r) B[r] = 0.0;
    if (li == 0 && !last) {
      // Pairs softplus(d.u) + softplus(-d.u) ~ |d.u| over Fibonacci-sphere
      // directions; the next layer averages them into ~|u| (E|d.u| = |u|/2).
      const int npairs = lay.rows / 2;
      const double golden = 2.39996322972865332;
      for (int i = 0; i < npairs; ++i) {
        const double z = 1.0 - 2.0 * (i + 0.5) / npairs;
        const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * i;
        const double d[3] = {rxy * std::cos(phi), rxy * std::sin(phi), z};
        for (int c = 0; c < 3; ++c) {
          W[int64_t(2 * i) * lay.cols + c] = d[c];
          W[int64_t(2 * i + 1) * lay.cols + c] = -d[c];
        }
      }
    } else if (li == 1 && !last) {
      const int npairs = L.layers[0].rows / 2;
      for (int c = 0; c < lay.cols; ++c) W[c] = c < 2 * npairs ? 2.0 / double(npairs) : 0.0;
    } else if (!last) {
      for (int c = 0; c < lay.cols; ++c) W[c] = c == 0 ? 1.0 : 0.0;
    } else {
      // Zero-initialized head except the sphere channel; random features
      // wake up through their nonzero activations.
      for (int c = 0; c < lay.cols; ++c) W[c] = c == 0 ? 1.0 : 0.0;
      B[0] = -radius_scaled;
    }
  }

  // Raw net evaluation in the scaled coordinates (bias currently zero).
  auto eval_scaled = [&](const V3<double>& u) {
    std::vector<double> h = {u.x, u.y, u.z}, hn;
    for (std::size_t li = 0; li < L.layers.size(); ++li) {
      const auto& lay = L.layers[li];
      const double* W = pv.data.data() + lay.w;
      const double* B = pv.data.data() + lay.b;
      const bool last = li + 1 == L.layers.size();
      hn.assign(size_t(lay.rows), 0.0);
      for (int r = 0; r < lay.rows; ++r) {
        double acc = B[r];
        for (int c = 0; c < lay.cols; ++c) acc += W[int64_t(r) * lay.cols + c] * h[size_t(c)];
        if (!last)
          acc = std::max(acc, 0.0) +
                std::log1p(std::exp(-cfg.softplus_beta * std::abs(acc))) / cfg.softplus_beta;
        hn[size_t(r)] = acc;
      }
      h.swap(hn);
    }
    return h[0];
  };

  Rng prng = rng.split(4242);
  std::vector<V3<double>> dirs;
  for (int i = 0; i < 48; ++i) {
    const double z = prng.uniform(-1.0, 1.0);
    const double phi = prng.uniform(0.0, 6.283185307179586);
    const double rr = std::sqrt(std::max(0.0, 1.0 - z * z));
    dirs.push_back({rr * std::cos(phi), rr * std::sin(phi), z});
  }
  auto mean_at = [&](double radius) {
    double acc = 0;
    for (const auto& d : dirs) acc += eval_scaled(d * radius);
    return acc / double(dirs.size());
  };
  const double ra = 0.5 * radius_scaled, rb = 1.5 * radius_scaled;
  const double slope = std::max((mean_at(rb) - mean_at(ra)) / (rb - ra), 0.05);

  const auto& last_lay = L.layers.back();
  double* Wl = pv.data.data() + last_lay.w;
  for (int64_t k = 0; k < int64_t(last_lay.rows) * last_lay.cols; ++k) Wl[k] /= slope;
  double* Bl = pv.data.data() + last_lay.b;
  Bl[0] = 0.0;
  Bl[0] = -mean_at(radius_scaled);
}

}  // namespace

NetworkBundle init_networks(const NetConfig& cfg, std::span<const uint64_t> identity_ids,
                            uint64_t seed) {
  NetworkBundle b;
  b.cfg = cfg;
  b.identity_ids.assign(identity_ids.begin(), identity_ids.end());

  b.refnet = add_mlp(b.params, "refnet", 3, cfg.refnet_hidden, 1);
  b.encoder = add_mlp(b.params, "encoder", skel::kBones, cfg.encoder_hidden, 16);
  const std::vector<int> stage_h = cfg.stage_hidden();
  for (int p = 0; p < skel::kParts; ++p) {
    auto& pl = b.parts[size_t(p)];
    const int in = 3 + cfg.cond_dim(p);
    for (int s = 0; s < cfg.stage_count(); ++s) {
      pl.fwd.push_back(add_mlp(b.params,
                               "part" + std::to_string(p) + ".fwd.s" + std::to_string(s),
                               in, stage_h, 3));
    }
    for (int s = 0; s < cfg.stage_count(); ++s) {
      pl.inv.push_back(add_mlp(b.params,
                               "part" + std::to_string(p) + ".inv.s" + std::to_string(s),
                               in, stage_h, 3));
    }
  }
  b.gamma_off = int64_t(b.params.data.size());
  b.params.segments.push_back(
      {"gamma", b.gamma_off, int64_t(identity_ids.size()) * cfg.dgamma});
  b.params.data.resize(b.params.data.size() + identity_ids.size() * size_t(cfg.dgamma), 0.0);
  b.params.validate();

  Rng root(seed);
  if (cfg.refnet_act == Activation::Softplus)
    init_refnet_geometric(b.params, b.refnet, cfg, root.split(1));
  else
    init_mlp_standard(b.params, b.refnet, cfg.refnet_act, cfg.sine_omega, root.split(1), false);
  init_mlp_standard(b.params, b.encoder, cfg.act, cfg.sine_omega, root.split(2), false);
  for (int p = 0; p < skel::kParts; ++p) {
    for (int s = 0; s < cfg.stage_count(); ++s) {
      init_mlp_standard(b.params, b.parts[size_t(p)].fwd[size_t(s)], cfg.act, cfg.sine_omega,
                        root.split(uint64_t(100 + p * 16 + s)), true);
      init_mlp_standard(b.params, b.parts[size_t(p)].inv[size_t(s)], cfg.act, cfg.sine_omega,
                        root.split(uint64_t(1100 + p * 16 + s)), true);
    }
  }
  Rng grng = root.split(7);
  for (std::size_t k = 0; k < identity_ids.size() * size_t(cfg.dgamma); ++k)
    b.params.data[size_t(b.gamma_off) + k] = grng.normal(0.0, cfg.gamma_init_std);
  return b;
}

int NetworkBundle::gamma_row(uint64_t id) const {
  for (std::size_t i = 0; i < identity_ids.size(); ++i)
    if (identity_ids[i] == id) return int(i);
  return -1;
}

std::span<const double> NetworkBundle::gamma(int row) const {
  return {params.data.data() + gamma_off + int64_t(row) * cfg.dgamma, size_t(cfg.dgamma)};
}

std::vector<double> NetworkBundle::mean_gamma() const {
  std::vector<double> g(size_t(cfg.dgamma), 0.0);
  if (identity_ids.empty()) return g;
  for (std::size_t r = 0; r < identity_ids.size(); ++r) {
    auto row = gamma(int(r));
    for (int k = 0; k < cfg.dgamma; ++k) g[size_t(k)] += row[size_t(k)];
  }
  for (auto& v : g) v /= double(identity_ids.size());
  return g;
}

uint64_t NetworkBundle::param_hash() const {
  uint64_t h = params.layout_hash();
  std::vector<float> f(params.data.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = float(params.data[i]);
  return ad::fnv1a64(f.data(), f.size() * sizeof(float), h);
}

// ---- Tape evaluation ----

namespace {

ad::Val activate(ad::Tape& t, const NetConfig& cfg, Activation act, ad::Val h) {
  switch (act) {
    case Activation::Softplus: return t.softplus(h, cfg.softplus_beta);
    case Activation::Sine: return t.sin_(t.scale(h, cfg.sine_omega));
    case Activation::Relu: return t.clamp(h, 0.0, 1e300);
  }
  return h;
}

// Tangent rule for the activation given its pre-activation node.
ad::Val activate_tangent(ad::Tape& t, const NetConfig& cfg, Activation act, ad::Val pre,
                         ad::Val tangent) {
  switch (act) {
    case Activation::Softplus:
      return t.mul(t.sigmoid(pre, cfg.softplus_beta), tangent);
    case Activation::Sine:
      return t.mul(t.scale(t.cos_(t.scale(pre, cfg.sine_omega)), cfg.sine_omega), tangent);
    case Activation::Relu:
      throw UnsupportedActivation("relu has no second derivative for nested gradients");
  }
  return tangent;
}

}  // namespace

ad::Val mlp_eval(ad::Tape& t, const NetworkBundle& b, const MlpLayout& L, ad::Val x,
                 Activation act) {
  ad::Val h = x;
  for (std::size_t li = 0; li < L.layers.size(); ++li) {
    const auto& lay = L.layers[li];
    h = t.affine(lay.w, lay.b, lay.rows, lay.cols, h);
    if (li + 1 < L.layers.size()) h = activate(t, b.cfg, act, h);
  }
  return h;
}

ad::Val mlp_eval(ad::Tape& t, const NetworkBundle& b, const MlpLayout& L, ad::Val x) {
  return mlp_eval(t, b, L, x, b.cfg.act);
}

DualVec mlp_eval_dual(ad::Tape& t, const NetworkBundle& b, const MlpLayout& L, DualVec x,
                      Activation act) {
  DualVec h = x;
  for (std::size_t li = 0; li < L.layers.size(); ++li) {
    const auto& lay = L.layers[li];
    const ad::Val pre = t.affine(lay.w, lay.b, lay.rows, lay.cols, h.p);
    for (int k = 0; k < 3; ++k) h.t[size_t(k)] = t.linear(lay.w, lay.rows, lay.cols, h.t[size_t(k)]);
    if (li + 1 < L.layers.size()) {
      h.p = activate(t, b.cfg, act, pre);
      for (int k = 0; k < 3; ++k)
        h.t[size_t(k)] = activate_tangent(t, b.cfg, act, pre, h.t[size_t(k)]);
    } else {
      h.p = pre;
    }
  }
  return h;
}

DualVec mlp_eval_dual(ad::Tape& t, const NetworkBundle& b, const MlpLayout& L, DualVec x) {
  return mlp_eval_dual(t, b, L, x, b.cfg.act);
}

ad::Val refnet_eval(ad::Tape& t, const NetworkBundle& b, ad::Val x3) {
  const double s = b.cfg.input_scale;
  Mat3 S = Mat3::identity();
  S(0, 0) = S(1, 1) = S(2, 2) = s;
  const Vec3 c = -b.cfg.input_center * s;
  ad::Val u = t.const_affine(S, c, x3);
  ad::Val out = mlp_eval(t, b, b.refnet, u, b.cfg.refnet_act);
  return t.scale(out, 1.0 / s);
}

DualVec refnet_eval_dual(ad::Tape& t, const NetworkBundle& b, DualVec x3) {
  const double s = b.cfg.input_scale;
  Mat3 S = Mat3::identity();
  S(0, 0) = S(1, 1) = S(2, 2) = s;
  DualVec u;
  u.p = t.const_affine(S, -b.cfg.input_center * s, x3.p);
  for (int k = 0; k < 3; ++k) u.t[size_t(k)] = t.scale(x3.t[size_t(k)], s);
  DualVec out = mlp_eval_dual(t, b, b.refnet, u, b.cfg.refnet_act);
  out.p = t.scale(out.p, 1.0 / s);
  for (int k = 0; k < 3; ++k) out.t[size_t(k)] = t.scale(out.t[size_t(k)], 1.0 / s);
  return out;
}

ad::Val deform_eval(ad::Tape& t, const NetworkBundle& b, int part, bool inverse, ad::Val x3,
                    ad::Val cond) {
  if (part < 0 || part >= skel::kParts) throw BadPartIndex("part index out of range");
  if (t.len(cond) != b.cfg.cond_dim(part))
    throw DimMismatch("conditioning length " + std::to_string(t.len(cond)) +
                      " != " + std::to_string(b.cfg.cond_dim(part)) + " for part " +
                      std::to_string(part));
  const auto& stages = inverse ? b.parts[size_t(part)].inv : b.parts[size_t(part)].fwd;
  ad::Val y = x3;
  for (const auto& st : stages) {
    ad::Val in = t.concat(t.scale(y, b.cfg.deform_input_scale), cond);
    ad::Val res = mlp_eval(t, b, st, in);
    y = t.add(y, res);
  }
  return y;
}

DualVec deform_eval_dual(ad::Tape& t, const NetworkBundle& b, int part, bool inverse,
                         DualVec x3, ad::Val cond) {
  if (part < 0 || part >= skel::kParts) throw BadPartIndex("part index out of range");
  if (t.len(cond) != b.cfg.cond_dim(part))
    throw DimMismatch("conditioning length mismatch for part " + std::to_string(part));
  const auto& stages = inverse ? b.parts[size_t(part)].inv : b.parts[size_t(part)].fwd;
  DualVec y = x3;
  for (const auto& st : stages) {
    // The conditioning block is constant, so tangents enter the first layer
    // through its three point columns only.
    const auto& L0 = st.layers.front();
    DualVec res;
    res.p = t.affine(L0.w, L0.b, L0.rows, L0.cols,
                     t.concat(t.scale(y.p, b.cfg.deform_input_scale), cond));
    for (int k = 0; k < 3; ++k)
      res.t[size_t(k)] = t.linear_cols(L0.w, L0.rows, L0.cols,
                                       t.scale(y.t[size_t(k)], b.cfg.deform_input_scale));
    for (std::size_t li = 1; li < st.layers.size(); ++li) {
      const ad::Val pre = res.p;
      res.p = activate(t, b.cfg, b.cfg.act, pre);
      for (int k = 0; k < 3; ++k)
        res.t[size_t(k)] = activate_tangent(t, b.cfg, b.cfg.act, pre, res.t[size_t(k)]);
      const auto& lay = st.layers[li];
      res.p = t.affine(lay.w, lay.b, lay.rows, lay.cols, res.p);
      for (int k = 0; k < 3; ++k)
        res.t[size_t(k)] = t.linear(lay.w, lay.rows, lay.cols, res.t[size_t(k)]);
    }
    y.p = t.add(y.p, res.p);
    for (int k = 0; k < 3; ++k) y.t[size_t(k)] = t.add(y.t[size_t(k)], res.t[size_t(k)]);
  }
  return y;
}

ad::Val encoder_eval(ad::Tape& t, const NetworkBundle& b, ad::Val lengths20) {
  if (t.len(lengths20) != skel::kBones) throw DimMismatch("encoder expects 20 lengths");
  return mlp_eval(t, b, b.encoder, t.scale(lengths20, b.cfg.length_scale));
}

// ---- Plain-double fast paths ----

namespace {

double activate_d(const NetConfig& cfg, Activation act, double x) {
  switch (act) {
    case Activation::Softplus:
      return std::max(x, 0.0) + std::log1p(std::exp(-cfg.softplus_beta * std::abs(x))) /
                                    cfg.softplus_beta;
    case Activation::Sine: return std::sin(cfg.sine_omega * x);
    case Activation::Relu: return x > 0 ? x : 0.0;
  }
  return x;
}

double activate_deriv_d(const NetConfig& cfg, Activation act, double x) {
  switch (act) {
    case Activation::Softplus: {
      const double t = cfg.softplus_beta * x;
      return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
    }
    case Activation::Sine: return cfg.sine_omega * std::cos(cfg.sine_omega * x);
    case Activation::Relu: return x > 0 ? 1.0 : 0.0;
  }
  return 1.0;
}

void mlp_eval_d(const NetworkBundle& b, const MlpLayout& L, Activation act, const double* in,
                double* out, std::vector<double>& buf_a, std::vector<double>& buf_b) {
  const double* x = in;
  double* cur = buf_a.data();
  double* nxt = buf_b.data();
  for (std::size_t li = 0; li < L.layers.size(); ++li) {
    const auto& lay = L.layers[li];
    const double* W = b.params.data.data() + lay.w;
    const double* B = b.params.data.data() + lay.b;
    const bool last = li + 1 == L.layers.size();
    double* dst = last ? out : nxt;
    for (int r = 0; r < lay.rows; ++r) {
      double acc = B[r];
      const double* wr = W + int64_t(r) * lay.cols;
      for (int c = 0; c < lay.cols; ++c) acc += wr[c] * x[c];
      dst[r] = last ? acc : activate_d(b.cfg, act, acc);
    }
    x = dst;
    std::swap(cur, nxt);
  }
}

}  // namespace

double refnet_eval_d(const NetworkBundle& b, const Vec3& x) {
  const double s = b.cfg.input_scale;
  double in[3] = {(x.x - b.cfg.input_center.x) * s, (x.y - b.cfg.input_center.y) * s,
                  (x.z - b.cfg.input_center.z) * s};
  int maxw = 3;
  for (const auto& lay : b.refnet.layers) maxw = std::max(maxw, lay.rows);
  std::vector<double> a(static_cast<std::size_t>(maxw)), c(static_cast<std::size_t>(maxw));
  double out = 0;
  mlp_eval_d(b, b.refnet, b.cfg.refnet_act, in, &out, a, c);
  return out / s;
}

ValueGrad refnet_grad_d(const NetworkBundle& b, const Vec3& x) {
  // Forward-mode duals with 3 tangents, double precision.
  const double s = b.cfg.input_scale;
  int maxw = 3;
  for (const auto& lay : b.refnet.layers) maxw = std::max(maxw, lay.rows);
  std::vector<double> p(static_cast<std::size_t>(maxw)), pn(static_cast<std::size_t>(maxw));
  std::vector<std::array<double, 3>> tg(static_cast<std::size_t>(maxw)), tgn(static_cast<std::size_t>(maxw));

  p[0] = (x.x - b.cfg.input_center.x) * s;
  p[1] = (x.y - b.cfg.input_center.y) * s;
  p[2] = (x.z - b.cfg.input_center.z) * s;
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) tg[size_t(i)][size_t(k)] = (i == k) ? s : 0.0;

  int width = 3;
  for (std::size_t li = 0; li < b.refnet.layers.size(); ++li) {
    const auto& lay = b.refnet.layers[li];
    const double* W = b.params.data.data() + lay.w;
    const double* B = b.params.data.data() + lay.b;
    const bool last = li + 1 == b.refnet.layers.size();
    for (int r = 0; r < lay.rows; ++r) {
      double acc = B[r];
      std::array<double, 3> tacc{0, 0, 0};
      const double* wr = W + int64_t(r) * lay.cols;
      for (int c = 0; c < lay.cols; ++c) {
        acc += wr[c] * p[size_t(c)];
        for (int k = 0; k < 3; ++k) tacc[size_t(k)] += wr[c] * tg[size_t(c)][size_t(k)];
      }
      if (!last) {
        const double d = activate_deriv_d(b.cfg, b.cfg.refnet_act, acc);
        pn[size_t(r)] = activate_d(b.cfg, b.cfg.refnet_act, acc);
        for (int k = 0; k < 3; ++k) tgn[size_t(r)][size_t(k)] = d * tacc[size_t(k)];
      } else {
        pn[size_t(r)] = acc;
        tgn[size_t(r)] = tacc;
      }
    }
    std::swap(p, pn);
    std::swap(tg, tgn);
    width = lay.rows;
  }
  (void)width;
  ValueGrad vg;
  vg.value = p[0] / s;
  vg.grad = {tg[0][0] / s, tg[0][1] / s, tg[0][2] / s};
  return vg;
}

std::array<double, 16> encoder_eval_d(const NetworkBundle& b,
                                      const std::array<double, 20>& lengths) {
  double in[20];
  for (int i = 0; i < 20; ++i) in[i] = lengths[size_t(i)] * b.cfg.length_scale;
  int maxw = 20;
  for (const auto& lay : b.encoder.layers) maxw = std::max(maxw, lay.rows);
  std::vector<double> a(static_cast<std::size_t>(maxw)), c(static_cast<std::size_t>(maxw));
  std::array<double, 16> out{};
  mlp_eval_d(b, b.encoder, b.cfg.act, in, out.data(), a, c);
  return out;
}

std::vector<double> make_cond(const NetworkBundle& b, int part,
                              const std::vector<double>& theta,
                              std::span<const double> gamma,
                              const std::array<double, 16>& fg,
                              const skel::BoneLengths& lengths) {
  if (part < 0 || part >= skel::kParts) throw BadPartIndex("part index out of range");
  if (int(theta.size()) != skel::theta_dim(part))
    throw DimMismatch("theta size mismatch for part " + std::to_string(part));
  if (int(gamma.size()) != b.cfg.dgamma) throw DimMismatch("gamma size mismatch");
  std::vector<double> cond;
  cond.reserve(size_t(b.cfg.cond_dim(part)));
  cond.insert(cond.end(), theta.begin(), theta.end());
  cond.insert(cond.end(), gamma.begin(), gamma.end());
  cond.insert(cond.end(), fg.begin(), fg.end());
  if (part == 0) {
    const auto palmar = lengths.palmar();
    cond.insert(cond.end(), palmar.begin(), palmar.end());
  } else {
    cond.push_back(lengths.part_length(part));
  }
  return cond;
}

DeformCache make_deform_cache(const NetworkBundle& b, int part, bool inverse,
                              std::span<const double> cond) {
  if (part < 0 || part >= skel::kParts) throw BadPartIndex("part index out of range");
  if (int(cond.size()) != b.cfg.cond_dim(part))
    throw DimMismatch("conditioning length mismatch for part " + std::to_string(part));
  const auto& stages = inverse ? b.parts[size_t(part)].inv : b.parts[size_t(part)].fwd;
  DeformCache cache;
  cache.part = part;
  cache.inverse = inverse;
  for (const auto& st : stages) {
    const auto& lay = st.layers.front();
    const double* W = b.params.data.data() + lay.w;
    const double* B = b.params.data.data() + lay.b;
    std::vector<double> eff(size_t(lay.rows));
    for (int r = 0; r < lay.rows; ++r) {
      double acc = B[r];
      const double* wr = W + int64_t(r) * lay.cols;
      for (std::size_t c = 0; c < cond.size(); ++c) acc += wr[3 + c] * cond[c];
      eff[size_t(r)] = acc;
    }
    cache.stage_bias.push_back(std::move(eff));
  }
  return cache;
}

Vec3 deform_point_d(const NetworkBundle& b, const DeformCache& cache, const Vec3& x) {
  const auto& stages =
      cache.inverse ? b.parts[size_t(cache.part)].inv : b.parts[size_t(cache.part)].fwd;
  int maxw = 3;
  for (const auto& st : stages)
    for (const auto& lay : st.layers) maxw = std::max(maxw, lay.rows);
  std::vector<double> h(static_cast<std::size_t>(maxw)), hn(static_cast<std::size_t>(maxw));

  Vec3 y = x;
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const auto& st = stages[si];
    // First layer: only the 3 point columns vary; conditioning is baked in.
    {
      const auto& lay = st.layers.front();
      const double* W = b.params.data.data() + lay.w;
      const double sx = y.x * b.cfg.deform_input_scale;
      const double sy = y.y * b.cfg.deform_input_scale;
      const double sz = y.z * b.cfg.deform_input_scale;
      const auto& eff = cache.stage_bias[si];
      const bool only = st.layers.size() == 1;
      for (int r = 0; r < lay.rows; ++r) {
        const double* wr = W + int64_t(r) * lay.cols;
        const double acc = eff[size_t(r)] + wr[0] * sx + wr[1] * sy + wr[2] * sz;
        h[size_t(r)] = only ? acc : activate_d(b.cfg, b.cfg.act, acc);
      }
    }
    for (std::size_t li = 1; li < st.layers.size(); ++li) {
      const auto& lay = st.layers[li];
      const double* W = b.params.data.data() + lay.w;
      const double* B = b.params.data.data() + lay.b;
      const bool last = li + 1 == st.layers.size();
      for (int r = 0; r < lay.rows; ++r) {
        double acc = B[r];
        const double* wr = W + int64_t(r) * lay.cols;
        for (int c = 0; c < lay.cols; ++c) acc += wr[c] * h[size_t(c)];
        hn[size_t(r)] = last ? acc : activate_d(b.cfg, b.cfg.act, acc);
      }
      std::swap(h, hn);
    }
    y = {y.x + h[0], y.y + h[1], y.z + h[2]};
  }
  return y;
}

}  // namespace phrit::nets
