#include "phrit/prochand.hpp"

#include <algorithm>
#include <cmath>

#include "phrit/errors.hpp"
#include "phrit/rng.hpp"

namespace phrit::prochand {

namespace {

// Base hand dimensions (mm), finger order thumb..pinky.
constexpr double kPalmarLen[5] = {42, 92, 88, 82, 74};
constexpr double kProxLen[5] = {40, 48, 52, 48, 38};
constexpr double kMidLen[5] = {30, 28, 32, 30, 24};
constexpr double kDistLen[5] = {26, 24, 25, 24, 22};
// Fan angle about +z, measured from +y (middle finger).
constexpr double kFanAngle[5] = {0.90, 0.32, 0.0, -0.30, -0.62};
// Capsule radii (head, tail) before identity scaling.
constexpr double kPalmarR[5][2] = {{11.0, 9.0}, {13.0, 9.0}, {13.5, 9.5}, {13.0, 9.0}, {11.5, 8.0}};
constexpr double kProxR[2] = {8.5, 7.6};
constexpr double kMidR[2] = {7.4, 6.6};
constexpr double kDistR[2] = {6.4, 5.2};
constexpr double kFingerRScale[5] = {1.15, 1.0, 1.05, 1.0, 0.85};

double smoothstep(double a, double b, double x) {
  const double t = clamp1((x - a) / (b - a), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

HandIdentity HandIdentity::from_seed(uint64_t seed) {
  HandIdentity id;
  id.seed = seed;
  Rng rng(seed);
  id.scale = rng.uniform(0.9, 1.1);
  id.palm_width = rng.uniform(0.85, 1.15);
  for (int f = 0; f < 5; ++f) id.thickness[size_t(f)] = rng.uniform(0.85, 1.15);
  for (int f = 0; f < 5; ++f) id.length[size_t(f)] = rng.uniform(0.85, 1.15);
  return id;
}

HandIdentity HandIdentity::mean() { return HandIdentity{}; }

ProcHandModel ProcHandModel::make(const HandIdentity& id) {
  ProcHandModel m;
  m.identity = id;

  auto& kp = m.canonical.keypoints;
  kp[0] = {0, 0, 0};
  for (int f = 0; f < 5; ++f) {
    const double angle = kFanAngle[f] * id.palm_width;
    const Vec3 dir{std::sin(angle), std::cos(angle), 0.0};
    const double lf = id.scale * id.length[size_t(f)];
    Vec3 p = dir * (kPalmarLen[f] * id.scale);
    kp[size_t(1 + 4 * f)] = p;
    p += dir * (kProxLen[f] * lf);
    kp[size_t(2 + 4 * f)] = p;
    p += dir * (kMidLen[f] * lf);
    kp[size_t(3 + 4 * f)] = p;
    p += dir * (kDistLen[f] * lf);
    kp[size_t(4 + 4 * f)] = p;
  }
  m.canonical.validate();

  for (int b = 0; b < skel::kBones; ++b) {
    const int f = b / 4, seg = b % 4;
    const auto e = skel::bone_endpoints(b);
    m.head[size_t(b)] = kp[size_t(e.head)];
    m.tail[size_t(b)] = kp[size_t(e.tail)];
    double rh = 0, rt = 0;
    if (seg == 0) {
      rh = kPalmarR[f][0] * id.scale * id.palm_width;
      rt = kPalmarR[f][1] * id.scale * id.palm_width;
    } else {
      const double th = id.scale * id.thickness[size_t(f)] * kFingerRScale[f];
      const double* base = seg == 1 ? kProxR : (seg == 2 ? kMidR : kDistR);
      rh = base[0] * th;
      rt = base[1] * th;
    }
    // Keep the taper well below the segment length so the round-cone SDF is
    // exact (|r1 - r2| < len).
    const double len = norm(m.tail[size_t(b)] - m.head[size_t(b)]);
    const double max_dr = 0.45 * len;
    if (std::abs(rh - rt) > max_dr) rt = rh - max_dr * (rh > rt ? 1.0 : -1.0);
    m.r_head[size_t(b)] = rh;
    m.r_tail[size_t(b)] = rt;
  }
  return m;
}

geom::Aabb ProcHandModel::aabb() const {
  geom::Aabb box{canonical.keypoints[0], canonical.keypoints[0]};
  for (int b = 0; b < skel::kBones; ++b) {
    const double r = std::max(r_head[size_t(b)], r_tail[size_t(b)]);
    const Vec3 rr{r, r, r};
    box.expand(head[size_t(b)] - rr);
    box.expand(head[size_t(b)] + rr);
    box.expand(tail[size_t(b)] - rr);
    box.expand(tail[size_t(b)] + rr);
  }
  return box;
}

CapsuleSet posed_capsules(const ProcHandModel& model, const skel::Skeleton& posed) {
  CapsuleSet c;
  for (int b = 0; b < skel::kBones; ++b) {
    const auto e = skel::bone_endpoints(b);
    c.head[size_t(b)] = posed.keypoints[size_t(e.head)];
    c.tail[size_t(b)] = posed.keypoints[size_t(e.tail)];
  }
  c.r_head = model.r_head;
  c.r_tail = model.r_tail;
  c.k = model.smooth_k;
  return c;
}

DistGrad round_cone_sdf(const Vec3& p, const Vec3& a, const Vec3& b, double r1, double r2) {
  // The tapered capsule is the union of spheres c(t) = a + t (b-a) with radius
  // r(t) = r1 + t (r2-r1); phi(t) = |p - c(t)| - r(t) is convex in t, so the
  // closest sphere is found in closed form and clamped to [0,1].
  const Vec3 ba = b - a;
  const double L2 = dot(ba, ba);
  const double L = std::sqrt(L2);
  const Vec3 pa = p - a;
  const double u = dot(pa, ba) / L2;                  // unclamped axis parameter
  const Vec3 perp = pa - ba * u;
  const double rho2 = dot(perp, perp);
  const double rho = std::sqrt(rho2);

  const double s = (r1 - r2) / L;  // |s| < 1 by construction
  double t;
  if (rho < 1e-12) {
    t = clamp1(u, 0.0, 1.0);
  } else {
    const double w = rho * s / std::sqrt(std::max(1.0 - s * s, 1e-12));
    t = clamp1(u - w / L, 0.0, 1.0);
  }
  const Vec3 c = a + ba * t;
  const Vec3 d = p - c;
  const double dist = norm(d);
  const double r = r1 + t * (r2 - r1);
  DistGrad out;
  out.d = dist - r;
  if (dist > 1e-9) {
    out.grad = d / dist;
  } else {
    // On the axis: radial direction undefined; fall back to any unit vector
    // orthogonal to the axis.
    Vec3 axis = ba / L;
    Vec3 ref = std::abs(axis.x) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    out.grad = normalized(cross(axis, ref));
  }
  return out;
}

namespace {

struct UnionEval {
  std::array<double, skel::kBones> d;
  std::array<Vec3, skel::kBones> grad;
  double dmin = 0;
  int argmin = 0;
};

UnionEval eval_capsules(const CapsuleSet& caps, const Vec3& x) {
  UnionEval e;
  e.dmin = 1e300;
  for (int b = 0; b < skel::kBones; ++b) {
    const DistGrad dg = round_cone_sdf(x, caps.head[size_t(b)], caps.tail[size_t(b)],
                                       caps.r_head[size_t(b)], caps.r_tail[size_t(b)]);
    e.d[size_t(b)] = dg.d;
    e.grad[size_t(b)] = dg.grad;
    if (dg.d < e.dmin) {
      e.dmin = dg.d;
      e.argmin = b;
    }
  }
  return e;
}

// Quadratic smooth minimum, folded in fixed bone order. Only values within
// kappa of the running minimum blend at all; the derivative of one fold is
// exactly (h, 1-h), so gradients propagate as convex interpolation.
double poly_smin(double a, double b, double kappa, double* h_out) {
  const double h = clamp1(0.5 + 0.5 * (b - a) / kappa, 0.0, 1.0);
  *h_out = h;
  return b + (a - b) * h - kappa * h * (1.0 - h);
}

// Blend radius fades with distance from the surface: full k within 3k of the
// hand, zero beyond 10k, so the far field matches the nearest capsule.
double kappa_of(double k, double m) { return k * (1.0 - smoothstep(3.0 * k, 10.0 * k, m)); }

double smin_fold(const UnionEval& e, double kappa, std::array<double, skel::kBones>* w) {
  double acc = e.d[0];
  if (w) (*w)[0] = 1.0;
  for (int b = 1; b < skel::kBones; ++b) {
    double h;
    acc = poly_smin(acc, e.d[size_t(b)], kappa, &h);
    if (w) {
      for (int j = 0; j < b; ++j) (*w)[size_t(j)] *= h;
      (*w)[size_t(b)] = 1.0 - h;
    }
  }
  return acc;
}

}  // namespace

double sdf(const CapsuleSet& caps, const Vec3& x) {
  const UnionEval e = eval_capsules(caps, x);
  const double kappa = kappa_of(caps.k, e.dmin);
  if (kappa < 1e-9) return e.dmin;
  return smin_fold(e, kappa, nullptr);
}

DistGrad sdf_grad(const CapsuleSet& caps, const Vec3& x) {
  const UnionEval e = eval_capsules(caps, x);
  const double kappa = kappa_of(caps.k, e.dmin);
  if (kappa < 1e-9) return {e.dmin, e.grad[size_t(e.argmin)]};
  std::array<double, skel::kBones> w;
  const double value = smin_fold(e, kappa, &w);
  // The variation of kappa with the nearest distance is ignored here; it only
  // matters inside the fade band (3k..10k from the surface) and stays below a
  // few percent of a unit gradient.
  Vec3 g{0, 0, 0};
  for (int b = 0; b < skel::kBones; ++b) g += e.grad[size_t(b)] * w[size_t(b)];
  return {value, g};
}

std::array<double, skel::kParts> part_distances(const CapsuleSet& caps, const Vec3& x) {
  const UnionEval e = eval_capsules(caps, x);
  std::array<double, skel::kParts> out;
  out.fill(1e300);
  // Palm: smooth union of the five palmar capsules at constant sharpness.
  double acc = e.d[0];
  for (int f = 1; f < 5; ++f) {
    double h;
    acc = poly_smin(acc, e.d[size_t(4 * f)], caps.k, &h);
  }
  out[0] = acc;
  for (int b = 0; b < skel::kBones; ++b) {
    if (b % 4 == 0) continue;
    out[size_t(capsule_part(b))] = e.d[size_t(b)];
  }
  return out;
}

std::array<double, skel::kParts> skinning_weights(const CapsuleSet& caps, const Vec3& x) {
  const auto d = part_distances(caps, x);
  double m = 1e300;
  for (const double v : d) m = std::min(m, v);
  std::array<double, skel::kParts> w;
  double s = 0;
  for (int p = 0; p < skel::kParts; ++p) {
    w[size_t(p)] = std::exp(-(d[size_t(p)] - m) / caps.k);
    s += w[size_t(p)];
  }
  for (auto& v : w) v /= s;
  return w;
}

int part_label(const CapsuleSet& caps, const Vec3& x) {
  const auto d = part_distances(caps, x);
  int best = 0;
  for (int p = 1; p < skel::kParts; ++p)
    if (d[size_t(p)] < d[size_t(best)]) best = p;
  return best;
}

double posed_sdf(const ProcHandModel& model, const skel::Skeleton& posed, const Vec3& x) {
  return sdf(posed_capsules(model, posed), x);
}

std::optional<Vec3> project_to_surface(const CapsuleSet& caps, Vec3 x, double tol,
                                       int max_steps) {
  for (int it = 0; it < max_steps; ++it) {
    const DistGrad dg = sdf_grad(caps, x);
    if (std::abs(dg.d) < tol) return x;
    const double g2 = dot(dg.grad, dg.grad);
    if (g2 < 0.04) return std::nullopt;
    x -= dg.grad * (dg.d / g2);
  }
  return std::nullopt;
}

OracleTemplate template_with_skinning(const ProcHandModel& model, int grid_res, int threads) {
  if (grid_res < 32) throw ConfigError("template grid resolution must be >= 32");
  const geom::Aabb box = model.aabb().inflated(0.10);
  const Vec3 ext = box.extent();
  const double longest = std::max({ext.x, ext.y, ext.z});
  const double cell = longest / (grid_res - 1);
  mc::GridSpec grid;
  grid.bounds = box;
  grid.nx = std::max(2, int(std::ceil(ext.x / cell)) + 1);
  grid.ny = std::max(2, int(std::ceil(ext.y / cell)) + 1);
  grid.nz = std::max(2, int(std::ceil(ext.z / cell)) + 1);

  const CapsuleSet caps = canonical_capsules(model);
  OracleTemplate out;
  out.mesh = mc::marching_cubes([&](const Vec3& p) { return sdf(caps, p); }, grid, 0.0,
                                threads);
  out.weights.reserve(out.mesh.vertices.size());
  for (const auto& v : out.mesh.vertices) out.weights.push_back(skinning_weights(caps, v));
  return out;
}

geom::TriMesh lbs_pose(const geom::TriMesh& mesh,
                       const std::vector<std::array<double, skel::kParts>>& weights,
                       const std::array<geom::Rigid, skel::kParts>& canonical_frames,
                       const std::array<geom::Rigid, skel::kParts>& posed_frames) {
  if (weights.size() != mesh.vertices.size())
    throw DimMismatch("lbs_pose: weight rows != vertex count");
  std::array<geom::Rigid, skel::kParts> transport;
  for (int p = 0; p < skel::kParts; ++p)
    transport[size_t(p)] =
        geom::compose(posed_frames[size_t(p)], geom::invert(canonical_frames[size_t(p)]));
  geom::TriMesh out = mesh;
  for (std::size_t v = 0; v < mesh.vertices.size(); ++v) {
    Vec3 acc{0, 0, 0};
    for (int p = 0; p < skel::kParts; ++p) {
      const double w = weights[v][size_t(p)];
      if (w == 0.0) continue;
      acc += transport[size_t(p)].apply(mesh.vertices[v]) * w;
    }
    out.vertices[v] = acc;
  }
  out.normals.clear();
  return out;
}

skel::Skeleton PoseSampler::sample(const skel::Skeleton& canonical, uint64_t pose_index) const {
  Rng rng = Rng(seed).split(pose_index);
  skel::Skeleton s = canonical;
  const Vec3 palm_ref = skel::detail::palm_reference<double>(canonical.keypoints);

  // Per-level motion ranges: full at the MCP, reduced down the chain.
  const double abd_scale[3] = {1.0, 0.15, 0.10};
  const double flex_scale[3] = {1.0, 0.90, 0.70};

  for (int f = 0; f < 5; ++f) {
    Vec3 pos = canonical.keypoints[size_t(1 + 4 * f)];
    Mat3 parent_R =
        skel::detail::frame_from_dir(skel::detail::bone_dir(canonical.keypoints, 4 * f),
                                     palm_ref);
    for (int m = 0; m < 3; ++m) {
      const double abd = rng.uniform(-abd_max * abd_scale[m], abd_max * abd_scale[m]);
      const double flex =
          rng.uniform(flex_min * flex_scale[m], flex_max * flex_scale[m]);
      const Vec3 d_local{std::sin(abd), std::cos(abd) * std::cos(flex),
                         -std::cos(abd) * std::sin(flex)};
      const Vec3 dir = parent_R * d_local;
      const auto e = skel::bone_endpoints(4 * f + 1 + m);
      const double len =
          norm(canonical.keypoints[size_t(e.tail)] - canonical.keypoints[size_t(e.head)]);
      pos += dir * len;
      s.keypoints[size_t(e.tail)] = pos;
      parent_R = skel::detail::frame_from_dir(dir, palm_ref);
    }
  }
  s.validate();
  return s;
}

SyntheticScan sample_scan(const ProcHandModel& model, const skel::Skeleton& posed,
                          const OracleTemplate& mean_template,
                          const std::array<geom::Rigid, skel::kParts>& mean_canonical_frames,
                          int n_points, int n_corr, uint64_t seed) {
  if (n_points < 1) throw ConfigError("sample_scan: n_points must be >= 1");
  const CapsuleSet caps = posed_capsules(model, posed);
  Rng rng(seed);

  // Capsule pick weights ~ lateral surface area.
  std::array<double, skel::kBones> area_cdf;
  double acc = 0;
  for (int b = 0; b < skel::kBones; ++b) {
    const double len = norm(caps.tail[size_t(b)] - caps.head[size_t(b)]);
    const double r = 0.5 * (caps.r_head[size_t(b)] + caps.r_tail[size_t(b)]);
    acc += 6.283185307179586 * r * (len + 2 * r);
    area_cdf[size_t(b)] = acc;
  }

  SyntheticScan scan;
  scan.skeleton = posed;
  scan.identity = model.identity;
  scan.seed = seed;
  scan.surface.points.reserve(size_t(n_points));
  scan.surface.normals.reserve(size_t(n_points));
  scan.labels.reserve(size_t(n_points));

  int placed = 0;
  int attempts = 0;
  const int max_attempts = n_points * 50;
  while (placed < n_points) {
    if (++attempts > max_attempts)
      throw ProjectionDiverged("sample_scan: surface projection kept failing");
    const double pick = rng.uniform() * acc;
    int b = 0;
    while (b + 1 < skel::kBones && area_cdf[size_t(b)] < pick) ++b;
    const double t = rng.uniform();
    // Random unit direction.
    const double z = rng.uniform(-1.0, 1.0);
    const double phi = rng.uniform(0.0, 6.283185307179586);
    const double rxy = std::sqrt(std::max(0.0, 1.0 - z * z));
    const Vec3 u{rxy * std::cos(phi), rxy * std::sin(phi), z};
    const Vec3 c = caps.head[size_t(b)] + (caps.tail[size_t(b)] - caps.head[size_t(b)]) * t;
    const double r = caps.r_head[size_t(b)] + t * (caps.r_tail[size_t(b)] - caps.r_head[size_t(b)]);
    const std::optional<Vec3> p = project_to_surface(caps, c + u * r);
    if (!p) continue;
    const DistGrad dg = sdf_grad(caps, *p);
    scan.surface.points.push_back(*p);
    scan.surface.normals.push_back(normalized(dg.grad));
    scan.labels.push_back(uint8_t(part_label(caps, *p)));
    ++placed;
  }

  // Sparse correspondences: seeded subset of mean-template vertices, carried
  // to the posed skeleton by per-part rigid transport (LBS).
  const auto posed_frames = skel::part_frames(posed);
  std::array<geom::Rigid, skel::kParts> transport;
  for (int p = 0; p < skel::kParts; ++p)
    transport[size_t(p)] =
        geom::compose(posed_frames[size_t(p)], geom::invert(mean_canonical_frames[size_t(p)]));

  const std::size_t nv = mean_template.mesh.vertices.size();
  const int m = std::min<int>(n_corr, int(nv));
  std::vector<uint32_t> idx(nv);
  for (std::size_t i = 0; i < nv; ++i) idx[i] = uint32_t(i);
  for (std::size_t i = 0; i < size_t(m); ++i) {
    const std::size_t j = i + size_t(rng.below(uint64_t(nv - i)));
    std::swap(idx[i], idx[j]);
  }
  scan.corr_canonical.reserve(size_t(m));
  scan.corr_posed.reserve(size_t(m));
  scan.corr_part.reserve(size_t(m));
  for (int i = 0; i < m; ++i) {
    const uint32_t v = idx[size_t(i)];
    const auto& w = mean_template.weights[v];
    Vec3 acc_p{0, 0, 0};
    int best = 0;
    for (int p = 0; p < skel::kParts; ++p) {
      acc_p += transport[size_t(p)].apply(mean_template.mesh.vertices[v]) * w[size_t(p)];
      if (w[size_t(p)] > w[size_t(best)]) best = p;
    }
    scan.corr_canonical.push_back(mean_template.mesh.vertices[v]);
    scan.corr_posed.push_back(acc_p);
    scan.corr_part.push_back(uint8_t(best));
  }
  return scan;
}

}  // namespace phrit::prochand
