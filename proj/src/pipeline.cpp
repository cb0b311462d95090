#include "phrit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "phrit/errors.hpp"
#include "phrit/field.hpp"
#include "phrit/metrics.hpp"
#include "phrit/parallel.hpp"
#include "phrit/rng.hpp"

namespace phrit::pipeline {

uint64_t template_provenance(const nets::NetworkBundle& bundle, const mc::GridSpec& grid) {
  uint64_t h = bundle.param_hash();
  const double desc[6] = {grid.bounds.min.x, grid.bounds.min.y, grid.bounds.min.z,
                          grid.bounds.max.x, grid.bounds.max.y, grid.bounds.max.z};
  h = ad::fnv1a64(desc, sizeof(desc), h);
  const int res[3] = {grid.nx, grid.ny, grid.nz};
  return ad::fnv1a64(res, sizeof(res), h);
}

namespace {

// Barycentric coordinates of p (assumed on the triangle's plane).
std::array<double, 3> barycentric(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 v0 = b - a, v1 = c - a, v2 = p - a;
  const double d00 = dot(v0, v0), d01 = dot(v0, v1), d11 = dot(v1, v1);
  const double d20 = dot(v2, v0), d21 = dot(v2, v1);
  const double denom = d00 * d11 - d01 * d01;
  if (std::abs(denom) < 1e-18) return {1.0, 0.0, 0.0};
  const double v = (d11 * d20 - d01 * d21) / denom;
  const double w = (d00 * d21 - d01 * d20) / denom;
  return {1.0 - v - w, v, w};
}

void finalize_influences(CanonicalTemplate& tpl) {
  tpl.influences.clear();
  tpl.influences.resize(tpl.mesh.vertices.size());
  for (std::size_t v = 0; v < tpl.mesh.vertices.size(); ++v) {
    for (int p = 0; p < skel::kParts; ++p) {
      const double w = tpl.weights[v][size_t(p)];
      if (w <= kWeightCutoff) continue;
      tpl.influences[v].push_back(
          {p, w, tpl.canonical_frames[size_t(p)].apply_inverse(tpl.mesh.vertices[v])});
    }
    if (tpl.influences[v].empty()) {
      // Extremely diffuse vertex: keep the argmax part.
      int best = 0;
      for (int p = 1; p < skel::kParts; ++p)
        if (tpl.weights[v][size_t(p)] > tpl.weights[v][size_t(best)]) best = p;
      tpl.influences[v].push_back(
          {best, tpl.weights[v][size_t(best)],
           tpl.canonical_frames[size_t(best)].apply_inverse(tpl.mesh.vertices[v])});
    }
  }
}

}  // namespace

CanonicalTemplate extract_template(const nets::NetworkBundle& bundle, const mc::GridSpec& grid,
                                   const SkinningSource& source, const std::string& cache_path,
                                   int threads) {
  const uint64_t provenance = template_provenance(bundle, grid);
  if (!cache_path.empty() && std::filesystem::exists(cache_path)) {
    CanonicalTemplate cached = load_template(cache_path);
    if (cached.provenance == provenance) return cached;
  }

  CanonicalTemplate tpl;
  tpl.grid = grid;
  tpl.provenance = provenance;
  tpl.mesh = mc::marching_cubes(
      [&](const Vec3& p) { return nets::refnet_eval_d(bundle, p); }, grid, 0.0, threads);

  // Transfer skinning weights from the source template: nearest surface
  // point, barycentric interpolation, renormalization.
  const metrics::TriGrid locator(source.mesh);
  tpl.weights.resize(tpl.mesh.vertices.size());
  parallel_for(tpl.mesh.vertices.size(), threads, [&](std::size_t v) {
    const auto hit = locator.nearest(tpl.mesh.vertices[v]);
    const auto& face = source.mesh.faces[hit.face];
    const auto bc = barycentric(hit.point, source.mesh.vertices[size_t(face[0])],
                                source.mesh.vertices[size_t(face[1])],
                                source.mesh.vertices[size_t(face[2])]);
    std::array<double, skel::kParts> w{};
    double total = 0;
    for (int p = 0; p < skel::kParts; ++p) {
      double acc = 0;
      for (int k = 0; k < 3; ++k)
        acc += bc[size_t(k)] * source.weights[size_t(face[size_t(k)])][size_t(p)];
      acc = std::max(acc, 0.0);
      w[size_t(p)] = acc;
      total += acc;
    }
    for (auto& wv : w) wv /= total;
    tpl.weights[v] = w;
  });

  tpl.canonical_frames = field::CanonicalSpace::make().frames;
  finalize_influences(tpl);
  if (!cache_path.empty()) save_template(tpl, cache_path);
  return tpl;
}

void save_template(const CanonicalTemplate& tpl, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f.write("PHRITCTL", 8);
  const uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  f.write(reinterpret_cast<const char*>(&tpl.provenance), 8);
  const double bounds[6] = {tpl.grid.bounds.min.x, tpl.grid.bounds.min.y, tpl.grid.bounds.min.z,
                            tpl.grid.bounds.max.x, tpl.grid.bounds.max.y, tpl.grid.bounds.max.z};
  f.write(reinterpret_cast<const char*>(bounds), sizeof(bounds));
  const int32_t res[3] = {tpl.grid.nx, tpl.grid.ny, tpl.grid.nz};
  f.write(reinterpret_cast<const char*>(res), sizeof(res));
  const uint32_t nv = uint32_t(tpl.mesh.vertices.size());
  const uint32_t nf = uint32_t(tpl.mesh.faces.size());
  f.write(reinterpret_cast<const char*>(&nv), 4);
  f.write(reinterpret_cast<const char*>(&nf), 4);
  f.write(reinterpret_cast<const char*>(tpl.mesh.vertices.data()),
          std::streamsize(nv * sizeof(Vec3)));
  for (const auto& face : tpl.mesh.faces) {
    const int32_t idx[3] = {face[0], face[1], face[2]};
    f.write(reinterpret_cast<const char*>(idx), sizeof(idx));
  }
  for (const auto& w : tpl.weights)
    f.write(reinterpret_cast<const char*>(w.data()), std::streamsize(16 * sizeof(double)));
  for (const auto& frame : tpl.canonical_frames) {
    f.write(reinterpret_cast<const char*>(frame.R.m.data()), 9 * sizeof(double));
    f.write(reinterpret_cast<const char*>(&frame.t), sizeof(Vec3));
  }
  if (!f) throw DataError("write failed: " + path);
}

CanonicalTemplate load_template(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::strncmp(magic, "PHRITCTL", 8) != 0) throw DataError("not a template cache");
  uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), 4);
  if (version != 1) throw DataError("unsupported template cache version");
  CanonicalTemplate tpl;
  f.read(reinterpret_cast<char*>(&tpl.provenance), 8);
  double bounds[6];
  f.read(reinterpret_cast<char*>(bounds), sizeof(bounds));
  tpl.grid.bounds = {{bounds[0], bounds[1], bounds[2]}, {bounds[3], bounds[4], bounds[5]}};
  int32_t res[3];
  f.read(reinterpret_cast<char*>(res), sizeof(res));
  tpl.grid.nx = res[0];
  tpl.grid.ny = res[1];
  tpl.grid.nz = res[2];
  uint32_t nv = 0, nf = 0;
  f.read(reinterpret_cast<char*>(&nv), 4);
  f.read(reinterpret_cast<char*>(&nf), 4);
  tpl.mesh.vertices.resize(nv);
  f.read(reinterpret_cast<char*>(tpl.mesh.vertices.data()), std::streamsize(nv * sizeof(Vec3)));
  tpl.mesh.faces.resize(nf);
  for (auto& face : tpl.mesh.faces) {
    int32_t idx[3];
    f.read(reinterpret_cast<char*>(idx), sizeof(idx));
    face = {idx[0], idx[1], idx[2]};
  }
  tpl.weights.resize(nv);
  for (auto& w : tpl.weights)
    f.read(reinterpret_cast<char*>(w.data()), std::streamsize(16 * sizeof(double)));
  for (auto& frame : tpl.canonical_frames) {
    f.read(reinterpret_cast<char*>(frame.R.m.data()), 9 * sizeof(double));
    f.read(reinterpret_cast<char*>(&frame.t), sizeof(Vec3));
  }
  if (!f) throw DataError("truncated template cache " + path);
  finalize_influences(tpl);
  return tpl;
}

// ---- Plain-double inference ----

namespace {

struct PartEval {
  geom::Rigid frame;
  nets::DeformCache cache;
  bool used = false;
};

std::array<PartEval, skel::kParts> prepare_parts(const nets::NetworkBundle& bundle,
                                                 const skel::Skeleton& skeleton,
                                                 std::span<const double> gamma) {
  if (int(gamma.size()) != bundle.cfg.dgamma) throw DimMismatch("gamma size mismatch");
  const auto frames = skel::part_frames(skeleton);
  const skel::LocalPose pose = skel::local_pose(skeleton);
  const skel::BoneLengths lengths = skel::bone_length_features(skeleton);
  std::array<double, 20> raw{};
  for (int b = 0; b < skel::kBones; ++b) raw[size_t(b)] = lengths.raw[size_t(b)];
  const auto fg = nets::encoder_eval_d(bundle, raw);

  std::array<PartEval, skel::kParts> out;
  for (int p = 0; p < skel::kParts; ++p) {
    out[size_t(p)].frame = frames[size_t(p)];
    const auto cond = nets::make_cond(bundle, p, pose.theta[size_t(p)], gamma, fg, lengths);
    out[size_t(p)].cache = nets::make_deform_cache(bundle, p, false, cond);
    out[size_t(p)].used = true;
  }
  return out;
}

Vec3 eval_vertex(const nets::NetworkBundle& bundle,
                 const std::array<PartEval, skel::kParts>& parts,
                 const std::vector<VertexInfluence>& infl, bool rigid_only) {
  Vec3 acc{0, 0, 0};
  double total = 0;
  for (const auto& vi : infl) {
    const auto& pe = parts[size_t(vi.part)];
    const Vec3 y =
        rigid_only ? vi.local : nets::deform_point_d(bundle, pe.cache, vi.local);
    acc += pe.frame.apply(y) * vi.weight;
    total += vi.weight;
  }
  return acc / total;
}

}  // namespace

Reconstruction infer(const CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                     const skel::Skeleton& skeleton, std::span<const double> gamma,
                     const InferOptions& opt) {
  if (tpl.influences.size() != tpl.mesh.vertices.size())
    throw TopologyMismatch("template influences out of sync with mesh");
  const auto parts = prepare_parts(bundle, skeleton, gamma);
  Reconstruction rec;
  rec.mesh = tpl.mesh;
  rec.mesh.normals.clear();
  rec.skeleton = skeleton;
  rec.gamma.assign(gamma.begin(), gamma.end());
  parallel_for(tpl.mesh.vertices.size(), opt.threads, [&](std::size_t v) {
    rec.mesh.vertices[v] = eval_vertex(bundle, parts, tpl.influences[v], opt.rigid_only);
  });
  return rec;
}

std::vector<Vec3> infer_vertices(const CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                                 const skel::Skeleton& skeleton, std::span<const double> gamma,
                                 std::span<const uint32_t> subset, bool rigid_only) {
  const auto parts = prepare_parts(bundle, skeleton, gamma);
  std::vector<Vec3> out(subset.size());
  for (std::size_t i = 0; i < subset.size(); ++i)
    out[i] = eval_vertex(bundle, parts, tpl.influences[subset[i]], rigid_only);
  return out;
}

// ---- Tape-backed inference ----

InferGraph build_infer_graph(ad::Tape& tape, const CanonicalTemplate& tpl,
                             const nets::NetworkBundle& bundle, const skel::Skeleton& skeleton,
                             std::span<const double> gamma,
                             std::span<const uint32_t> subset) {
  using ad::Scalar;
  if (int(gamma.size()) != bundle.cfg.dgamma) throw DimMismatch("gamma size mismatch");

  InferGraph g;
  skel::Keypoints<Scalar> kp;
  for (int i = 0; i < skel::kKeypoints; ++i) {
    const Vec3& p = skeleton.keypoints[size_t(i)];
    g.keypoints[size_t(3 * i + 0)] = tape.input1(p.x);
    g.keypoints[size_t(3 * i + 1)] = tape.input1(p.y);
    g.keypoints[size_t(3 * i + 2)] = tape.input1(p.z);
    kp[size_t(i)] = {Scalar(&tape, g.keypoints[size_t(3 * i)]),
                     Scalar(&tape, g.keypoints[size_t(3 * i + 1)]),
                     Scalar(&tape, g.keypoints[size_t(3 * i + 2)])};
  }
  g.gamma = tape.input(gamma);

  const auto bones = skel::bone_transforms_t<Scalar>(kp);
  const auto frames = skel::part_frames_t<Scalar>(bones);
  const auto pose = skel::local_pose_t<Scalar>(kp);
  const auto lengths = skel::bone_lengths_t<Scalar>(kp);

  std::array<ad::Val, skel::kBones> len_vals;
  for (int b = 0; b < skel::kBones; ++b) len_vals[size_t(b)] = lengths.raw[size_t(b)].materialize(tape);
  const ad::Val len_vec = tape.pack(len_vals);
  const ad::Val fg = nets::encoder_eval(tape, bundle, len_vec);

  std::array<ad::Val, skel::kParts> conds;
  std::array<bool, skel::kParts> part_used{};
  for (const uint32_t v : subset)
    for (const auto& vi : tpl.influences[v]) part_used[size_t(vi.part)] = true;

  for (int p = 0; p < skel::kParts; ++p) {
    if (!part_used[size_t(p)]) continue;
    std::vector<ad::Val> theta_vals;
    for (const Scalar& s : pose.theta[size_t(p)]) theta_vals.push_back(s.materialize(tape));
    const ad::Val theta = tape.pack(theta_vals);
    ad::Val beta = tape.concat(g.gamma, fg);
    if (p == 0) {
      const auto palmar = lengths.palmar();
      std::array<ad::Val, 5> pv;
      for (int k = 0; k < 5; ++k) pv[size_t(k)] = palmar[size_t(k)].materialize(tape);
      beta = tape.concat(beta, tape.pack(pv));
    } else {
      std::array<ad::Val, 1> lv = {lengths.part_length(p).materialize(tape)};
      beta = tape.concat(beta, tape.pack(lv));
    }
    conds[size_t(p)] = tape.concat(theta, beta);
  }

  g.vertices.reserve(subset.size());
  for (const uint32_t v : subset) {
    ad::SVec3 acc{Scalar(0.0), Scalar(0.0), Scalar(0.0)};
    double total = 0;
    for (const auto& vi : tpl.influences[v]) {
      const double d[3] = {vi.local.x, vi.local.y, vi.local.z};
      const ad::Val x = tape.constant(std::span<const double>(d, 3));
      const ad::Val y = nets::deform_eval(tape, bundle, vi.part, false, x, conds[size_t(vi.part)]);
      const ad::SVec3 ylocal = ad::unpack3(tape, y);
      const auto& F = frames[size_t(vi.part)];
      const ad::SVec3 world = F.R * ylocal + F.t;
      acc += world * vi.weight;
      total += vi.weight;
    }
    g.vertices.push_back(acc * (1.0 / total));
  }
  return g;
}

GradCheckReport infer_grad_check(const CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                                 const skel::Skeleton& skeleton, std::span<const double> gamma,
                                 int probe_vertices, uint64_t seed, double rel_tol) {
  // Deterministic vertex subset.
  const std::size_t nv = tpl.mesh.vertices.size();
  std::vector<uint32_t> subset;
  Rng rng(seed ^ 0x9E3779B97F4A7C15ULL);
  const std::size_t take = std::min<std::size_t>(size_t(probe_vertices), nv);
  const std::size_t stride = std::max<std::size_t>(1, nv / take);
  for (std::size_t v = rng.below(stride); v < nv && subset.size() < take; v += stride)
    subset.push_back(uint32_t(v));

  // Objective: mean displacement from the canonical template vertex.
  auto objective = [&](const skel::Skeleton& s, std::span<const double> gm) {
    const auto pos = infer_vertices(tpl, bundle, s, gm, subset);
    double acc = 0;
    for (std::size_t i = 0; i < pos.size(); ++i)
      acc += norm(pos[i] - tpl.mesh.vertices[subset[i]]);
    return acc / double(pos.size());
  };

  ad::Tape tape;
  tape.bind(bundle.params.data.data(), bundle.params.data.size());
  InferGraph graph = build_infer_graph(tape, tpl, bundle, skeleton, gamma, subset);
  ad::Val loss{};
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const Vec3& v0 = tpl.mesh.vertices[subset[i]];
    const ad::Val d = tape.pack(std::array<ad::Val, 3>{
        (graph.vertices[i].x - ad::Scalar(v0.x)).val(),
        (graph.vertices[i].y - ad::Scalar(v0.y)).val(),
        (graph.vertices[i].z - ad::Scalar(v0.z)).val()});
    const ad::Val n = tape.norm(d);
    loss = loss.valid() ? tape.add(loss, n) : n;
  }
  loss = tape.scale(loss, 1.0 / double(subset.size()));
  tape.backward(loss);

  GradCheckReport rep;
  std::vector<double> ad_kp(skel::kKeypoints * 3);
  for (std::size_t k = 0; k < ad_kp.size(); ++k) {
    ad_kp[k] = tape.adjoint1(graph.keypoints[k]);
    rep.grad_inf_norm = std::max(rep.grad_inf_norm, std::abs(ad_kp[k]));
  }
  const auto gadj = tape.adjoint(graph.gamma);

  const double h = 1e-3;
  double fd_scale = 0;
  std::vector<double> fd_kp(ad_kp.size());
  for (std::size_t k = 0; k < ad_kp.size(); ++k) {
    skel::Skeleton sp = skeleton, sm = skeleton;
    sp.keypoints[k / 3][int(k % 3)] += h;
    sm.keypoints[k / 3][int(k % 3)] -= h;
    fd_kp[k] = (objective(sp, gamma) - objective(sm, gamma)) / (2 * h);
    fd_scale = std::max(fd_scale, std::abs(fd_kp[k]));
  }
  for (std::size_t k = 0; k < ad_kp.size(); ++k)
    rep.max_rel_err_keypoints =
        std::max(rep.max_rel_err_keypoints,
                 std::abs(ad_kp[k] - fd_kp[k]) / std::max(fd_scale, 1e-9));

  std::vector<double> gmut(gamma.begin(), gamma.end());
  double fd_gscale = 0;
  std::vector<double> fd_g(gmut.size());
  for (std::size_t k = 0; k < gmut.size(); ++k) {
    const double saved = gmut[k];
    gmut[k] = saved + h;
    const double fp = objective(skeleton, gmut);
    gmut[k] = saved - h;
    const double fm = objective(skeleton, gmut);
    gmut[k] = saved;
    fd_g[k] = (fp - fm) / (2 * h);
    fd_gscale = std::max(fd_gscale, std::abs(fd_g[k]));
  }
  for (std::size_t k = 0; k < gmut.size(); ++k)
    rep.max_rel_err_gamma = std::max(
        rep.max_rel_err_gamma, std::abs(gadj[k] - fd_g[k]) / std::max(fd_gscale, 1e-9));

  rep.pass = rep.max_rel_err_keypoints < rel_tol && rep.max_rel_err_gamma < rel_tol;
  return rep;
}

// ---- Point-cloud fitting ----

FitResult fit_to_pointcloud(const CanonicalTemplate& tpl, const nets::NetworkBundle& bundle,
                            const geom::PointCloud& cloud, const skel::Skeleton& init_skeleton,
                            const FitOptions& opt) {
  if (cloud.points.size() < 100) throw EmptyCloud("fit_to_pointcloud needs >= 100 points");
  init_skeleton.validate();

  // Deterministic subsets.
  const std::size_t nv = tpl.mesh.vertices.size();
  std::vector<uint32_t> subset;
  const std::size_t take_v = std::min<std::size_t>(size_t(opt.recon_subsample), nv);
  const std::size_t stride = std::max<std::size_t>(1, nv / take_v);
  for (std::size_t v = 0; v < nv && subset.size() < take_v; v += stride)
    subset.push_back(uint32_t(v));

  std::vector<Vec3> cpts;
  {
    Rng rng(opt.seed ^ 0x51ed2701);
    std::vector<uint32_t> idx(cloud.points.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = uint32_t(i);
    const std::size_t take_c = std::min<std::size_t>(size_t(opt.cloud_subsample), idx.size());
    for (std::size_t i = 0; i < take_c; ++i) {
      const std::size_t j = i + size_t(rng.below(uint64_t(idx.size() - i)));
      std::swap(idx[i], idx[j]);
    }
    cpts.reserve(take_c);
    for (std::size_t i = 0; i < take_c; ++i) cpts.push_back(cloud.points[idx[i]]);
  }
  const metrics::PointGrid cloud_grid(cpts);

  std::vector<double> kp = [&] {
    const auto flat = init_skeleton.flat();
    return std::vector<double>(flat.begin(), flat.end());
  }();
  std::vector<double> gm = bundle.mean_gamma();

  ad::AdamState adam_kp(kp.size());
  ad::AdamState adam_gm(gm.size());

  FitResult best;
  best.best_loss = 1e300;
  FitResult out;

  auto current_objective_and_step = [&](bool do_step) -> double {
    const skel::Skeleton s = skel::Skeleton::from_flat(kp.data());
    s.validate();
    const auto pos = infer_vertices(tpl, bundle, s, gm, subset);

    // Pairings at the current iterate.
    std::vector<uint32_t> vert_to_cloud(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i)
      vert_to_cloud[i] = uint32_t(cloud_grid.nearest(pos[i]).index);
    std::vector<uint32_t> cloud_to_vert(cpts.size());
    for (std::size_t c = 0; c < cpts.size(); ++c) {
      double bd = 1e300;
      uint32_t bi = 0;
      for (std::size_t i = 0; i < pos.size(); ++i) {
        const double d = norm2(pos[i] - cpts[c]);
        if (d < bd) {
          bd = d;
          bi = uint32_t(i);
        }
      }
      cloud_to_vert[c] = bi;
    }

    ad::Tape tape;
    tape.bind(bundle.params.data.data(), bundle.params.data.size());
    InferGraph graph = build_infer_graph(tape, tpl, bundle, s, gm, subset);

    auto vert_val = [&](std::size_t i) {
      return tape.pack(std::array<ad::Val, 3>{graph.vertices[i].x.materialize(tape),
                                              graph.vertices[i].y.materialize(tape),
                                              graph.vertices[i].z.materialize(tape)});
    };
    std::vector<ad::Val> vert_nodes(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) vert_nodes[i] = vert_val(i);

    ad::Val to_cloud{};
    for (std::size_t i = 0; i < pos.size(); ++i) {
      const Vec3& c = cpts[vert_to_cloud[i]];
      const double d[3] = {c.x, c.y, c.z};
      const ad::Val diff = tape.sub(vert_nodes[i], tape.constant(std::span<const double>(d, 3)));
      const ad::Val n = tape.norm(diff);
      to_cloud = to_cloud.valid() ? tape.add(to_cloud, n) : n;
    }
    ad::Val to_recon{};
    for (std::size_t c = 0; c < cpts.size(); ++c) {
      const double d[3] = {cpts[c].x, cpts[c].y, cpts[c].z};
      const ad::Val diff =
          tape.sub(vert_nodes[cloud_to_vert[c]], tape.constant(std::span<const double>(d, 3)));
      const ad::Val n = tape.norm(diff);
      to_recon = to_recon.valid() ? tape.add(to_recon, n) : n;
    }
    ad::Val loss = tape.add(tape.scale(to_cloud, 0.5 / double(pos.size())),
                            tape.scale(to_recon, 0.5 / double(cpts.size())));
    if (opt.w_regu > 0)
      loss = tape.add(loss, tape.scale(tape.norm(graph.gamma), opt.w_regu));

    const double value = tape.value1(loss);
    if (!std::isfinite(value)) throw Diverged("fit_to_pointcloud: non-finite objective");
    if (!do_step) return value;

    tape.backward(loss);
    if (opt.optimize_keypoints) {
      std::vector<double> gkp(kp.size());
      for (std::size_t k = 0; k < kp.size(); ++k)
        gkp[k] = tape.adjoint1(graph.keypoints[k]);
      ad::adam_step(kp, gkp, adam_kp, opt.lr_keypoints);
    }
    if (opt.optimize_gamma) {
      const auto ga = tape.adjoint(graph.gamma);
      std::vector<double> gg(ga.begin(), ga.end());
      ad::adam_step(gm, gg, adam_gm, opt.lr_gamma);
    }
    return value;
  };

  std::vector<double> trace, best_trace;
  double best_loss = 1e300;
  std::vector<double> best_kp = kp, best_gm = gm;
  for (int step = 0; step < opt.steps; ++step) {
    // The objective is evaluated at the pre-step iterate; keep that snapshot
    // when it is the best seen so far.
    const std::vector<double> kp_snap = kp, gm_snap = gm;
    const double value = current_objective_and_step(true);
    trace.push_back(value);
    if (value < best_loss) {
      best_loss = value;
      best_kp = kp_snap;
      best_gm = gm_snap;
    }
    best_trace.push_back(best_loss);
  }
  if (opt.steps == 0) best_loss = current_objective_and_step(false);

  out.skeleton = skel::Skeleton::from_flat(best_kp.data());
  out.gamma = best_gm;
  out.recon = infer(tpl, bundle, out.skeleton, out.gamma, {false, opt.threads});
  out.loss_trace = std::move(trace);
  out.best_trace = std::move(best_trace);
  out.best_loss = best_loss == 1e300 ? 0.0 : best_loss;
  return out;
}

}  // namespace phrit::pipeline
