#include "phrit/field.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "phrit/parallel.hpp"
#include "phrit/rng.hpp"

namespace phrit::field {

CanonicalSpace CanonicalSpace::make() {
  CanonicalSpace c;
  const prochand::ProcHandModel mean = prochand::ProcHandModel::mean();
  c.skeleton = mean.canonical;
  c.frames = skel::part_frames(mean.canonical);
  c.omega = mean.aabb().inflated(0.20);
  return c;
}

void TermSums::accumulate(const TermSums& o) {
  sdf += o.sdf; norm += o.norm; cycle += o.cycle; mano += o.mano;
  regu += o.regu; off += o.off; igr += o.igr;
  n_sdf += o.n_sdf; n_norm += o.n_norm; n_cycle += o.n_cycle; n_mano += o.n_mano;
  n_regu += o.n_regu; n_off += o.n_off; n_igr += o.n_igr;
}

TermMeans means_of(const TermSums& s, const LossWeights&) {
  TermMeans m;
  m.sdf = s.n_sdf ? s.sdf / double(s.n_sdf) : 0.0;
  m.norm = s.n_norm ? s.norm / double(s.n_norm) : 0.0;
  m.cycle = s.n_cycle ? s.cycle / double(s.n_cycle) : 0.0;
  m.mano = s.n_mano ? s.mano / double(s.n_mano) : 0.0;
  m.regu = s.n_regu ? s.regu / double(s.n_regu) : 0.0;
  m.off = s.n_off ? s.off / double(s.n_off) : 0.0;
  m.igr = s.n_igr ? s.igr / double(s.n_igr) : 0.0;
  return m;
}

double TermMeans::total(const LossWeights& w) const {
  return w.sdf * sdf + w.norm * norm + w.cycle * cycle + w.mano * mano + w.regu * regu +
         w.off * off + w.igr * igr;
}

ScanBatch build_scan_batch(const prochand::SyntheticScan& scan, int scan_index, int gamma_row,
                           const CanonicalSpace& canonical, const TrainConfig& cfg, int epoch,
                           const io::Dataset* dataset_for_dense) {
  ScanBatch batch;
  batch.scan_index = scan_index;
  batch.gamma_row = gamma_row;
  batch.lengths = skel::bone_length_features(scan.skeleton);

  const auto posed_frames = skel::part_frames(scan.skeleton);
  const skel::LocalPose pose = skel::local_pose(scan.skeleton);
  for (int p = 0; p < skel::kParts; ++p) batch.parts[size_t(p)].theta = pose.theta[size_t(p)];

  Rng rng = Rng(cfg.seed).split(2000).split(uint64_t(epoch)).split(uint64_t(scan_index));

  // Surface points grouped by part label, seeded subsample per part.
  std::array<std::vector<uint32_t>, skel::kParts> by_part;
  for (std::size_t i = 0; i < scan.labels.size(); ++i)
    by_part[scan.labels[i]].push_back(uint32_t(i));
  for (int p = 0; p < skel::kParts; ++p) {
    auto& idx = by_part[size_t(p)];
    const std::size_t take = std::min<std::size_t>(size_t(cfg.points_per_part), idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + size_t(rng.below(uint64_t(idx.size() - i)));
      std::swap(idx[i], idx[j]);
    }
    auto& pb = batch.parts[size_t(p)];
    const auto& F = posed_frames[size_t(p)];
    for (std::size_t i = 0; i < take; ++i) {
      const uint32_t k = idx[i];
      pb.x_local.push_back(F.apply_inverse(scan.surface.points[k]));
      pb.n_local.push_back(F.R.tmul(scan.surface.normals[k]));
    }
  }

  // Correspondences, optionally densified by barycentric template sampling.
  if (cfg.flags.dense_mano_plus && dataset_for_dense != nullptr) {
    const auto& tpl = dataset_for_dense->mean_template;
    const std::size_t target = scan.corr_canonical.size() * size_t(cfg.dense_factor);
    const geom::FaceGeometry fg = geom::face_normals_and_areas(tpl.mesh);
    std::vector<double> cdf(fg.areas.size());
    double acc = 0;
    for (std::size_t i = 0; i < fg.areas.size(); ++i) {
      acc += fg.areas[i];
      cdf[i] = acc;
    }
    std::array<geom::Rigid, skel::kParts> transport;
    for (int p = 0; p < skel::kParts; ++p)
      transport[size_t(p)] =
          geom::compose(posed_frames[size_t(p)], geom::invert(canonical.frames[size_t(p)]));
    Rng drng = Rng(scan.seed).split(99);
    for (std::size_t s = 0; s < target; ++s) {
      const double r = drng.uniform() * acc;
      std::size_t fi = size_t(std::lower_bound(cdf.begin(), cdf.end(), r) - cdf.begin());
      fi = std::min(fi, cdf.size() - 1);
      double u = drng.uniform(), v = drng.uniform();
      if (u + v > 1.0) {
        u = 1.0 - u;
        v = 1.0 - v;
      }
      const auto& face = tpl.mesh.faces[fi];
      const Vec3 x_bar = tpl.mesh.vertices[size_t(face[0])] * (1.0 - u - v) +
                         tpl.mesh.vertices[size_t(face[1])] * u +
                         tpl.mesh.vertices[size_t(face[2])] * v;
      std::array<double, skel::kParts> w{};
      int best = 0;
      for (int p = 0; p < skel::kParts; ++p) {
        w[size_t(p)] = tpl.weights[size_t(face[0])][size_t(p)] * (1.0 - u - v) +
                       tpl.weights[size_t(face[1])][size_t(p)] * u +
                       tpl.weights[size_t(face[2])][size_t(p)] * v;
        if (w[size_t(p)] > w[size_t(best)]) best = p;
      }
      Vec3 y_bar{0, 0, 0};
      for (int p = 0; p < skel::kParts; ++p)
        if (w[size_t(p)] > 0) y_bar += transport[size_t(p)].apply(x_bar) * w[size_t(p)];
      auto& pb = batch.parts[size_t(best)];
      pb.corr_posed_local.push_back(posed_frames[size_t(best)].apply_inverse(y_bar));
      pb.corr_canon_local.push_back(canonical.frames[size_t(best)].apply_inverse(x_bar));
    }
  } else {
    for (std::size_t i = 0; i < scan.corr_canonical.size(); ++i) {
      const int p = scan.corr_part[i];
      auto& pb = batch.parts[size_t(p)];
      pb.corr_posed_local.push_back(
          posed_frames[size_t(p)].apply_inverse(scan.corr_posed[i]));
      pb.corr_canon_local.push_back(
          canonical.frames[size_t(p)].apply_inverse(scan.corr_canonical[i]));
    }
  }

  // Off-surface and eikonal samples in Omega; E_O samples keep 2 mm away
  // from the scan's canonical-side correspondences.
  const geom::Aabb& om = canonical.omega;
  auto draw = [&]() -> Vec3 {
    return {rng.uniform(om.min.x, om.max.x), rng.uniform(om.min.y, om.max.y),
            rng.uniform(om.min.z, om.max.z)};
  };
  int guard = 0;
  while (int(batch.off_samples.size()) < cfg.off_per_scan && guard < cfg.off_per_scan * 50) {
    ++guard;
    const Vec3 x = draw();
    bool near = false;
    for (const auto& c : scan.corr_canonical) {
      if (norm2(x - c) < 4.0) {
        near = true;
        break;
      }
    }
    if (!near) batch.off_samples.push_back(x);
  }
  for (int i = 0; i < cfg.igr_per_scan; ++i) batch.igr_samples.push_back(draw());
  return batch;
}

// ---- Tape loss ----

namespace {

struct PartCond {
  ad::Val cond;  // theta ⊕ gamma ⊕ F_g ⊕ L_i
  bool present = false;
};

std::array<PartCond, skel::kParts> build_conditioning(ad::Tape& tape,
                                                      const nets::NetworkBundle& bundle,
                                                      const ScanBatch& batch) {
  const ad::Val gamma = tape.param(
      bundle.gamma_off + int64_t(batch.gamma_row) * bundle.cfg.dgamma, bundle.cfg.dgamma);
  const ad::Val lengths =
      tape.constant(std::span<const double>(batch.lengths.raw.data(), skel::kBones));
  const ad::Val fg = nets::encoder_eval(tape, bundle, lengths);

  std::array<PartCond, skel::kParts> out;
  for (int p = 0; p < skel::kParts; ++p) {
    const auto& pb = batch.parts[size_t(p)];
    if (pb.x_local.empty() && pb.corr_posed_local.empty()) continue;
    const ad::Val theta =
        tape.constant(std::span<const double>(pb.theta.data(), pb.theta.size()));
    ad::Val beta = tape.concat(gamma, fg);
    if (p == 0) {
      const auto palmar = batch.lengths.palmar();
      beta = tape.concat(beta, tape.constant(std::span<const double>(palmar.data(), 5)));
    } else {
      const double l = batch.lengths.part_length(p);
      beta = tape.concat(beta, tape.constant1(l));
    }
    out[size_t(p)].cond = tape.concat(theta, beta);
    out[size_t(p)].present = true;
  }
  return out;
}

ad::Val const3(ad::Tape& t, const Vec3& v) {
  const double d[3] = {v.x, v.y, v.z};
  return t.constant(std::span<const double>(d, 3));
}

}  // namespace

ScanLoss build_scan_loss(ad::Tape& tape, const nets::NetworkBundle& bundle,
                         const ScanBatch& batch, const CanonicalSpace& canonical,
                         const LossWeights& weights, bool disable_norm, double alpha_o,
                         const TermSums& counts) {
  const auto conds = build_conditioning(tape, bundle, batch);
  const ad::Val gamma = tape.param(
      bundle.gamma_off + int64_t(batch.gamma_row) * bundle.cfg.dgamma, bundle.cfg.dgamma);

  ScanLoss out;
  ad::Val sdf_sum{}, norm_sum{}, cycle_sum{}, mano_sum{}, off_sum{}, igr_sum{};
  auto acc = [&tape](ad::Val& sum, ad::Val term) {
    sum = sum.valid() ? tape.add(sum, term) : term;
  };

  const bool use_norm = !disable_norm && weights.norm != 0.0;
  for (int p = 0; p < skel::kParts; ++p) {
    const auto& pb = batch.parts[size_t(p)];
    if (!conds[size_t(p)].present) continue;
    const ad::Val cond = conds[size_t(p)].cond;
    const Mat3& Rc = canonical.frames[size_t(p)].R;
    const Vec3& tc = canonical.frames[size_t(p)].t;

    for (std::size_t i = 0; i < pb.x_local.size(); ++i) {
      const ad::Val x = const3(tape, pb.x_local[i]);
      ad::Val canon_local;
      if (use_norm) {
        ad::Dual3 xd;
        xd.p = x;
        const double e0[3] = {1, 0, 0}, e1[3] = {0, 1, 0}, e2[3] = {0, 0, 1};
        xd.t[0] = tape.constant(std::span<const double>(e0, 3));
        xd.t[1] = tape.constant(std::span<const double>(e1, 3));
        xd.t[2] = tape.constant(std::span<const double>(e2, 3));
        ad::Dual3 inv = nets::deform_eval_dual(tape, bundle, p, true, xd, cond);
        canon_local = inv.p;
        ad::Dual3 world;
        world.p = tape.const_affine(Rc, tc, inv.p);
        for (int k = 0; k < 3; ++k)
          world.t[size_t(k)] = tape.const_affine(Rc, {0, 0, 0}, inv.t[size_t(k)]);
        ad::Dual3 f = nets::refnet_eval_dual(tape, bundle, world);
        acc(sdf_sum, tape.abs_(f.p));
        const ad::Val grad = tape.pack(f.t);
        acc(norm_sum, tape.norm(tape.sub(grad, const3(tape, pb.n_local[i]))));
      } else {
        canon_local = nets::deform_eval(tape, bundle, p, true, x, cond);
        const ad::Val world = tape.const_affine(Rc, tc, canon_local);
        acc(sdf_sum, tape.abs_(nets::refnet_eval(tape, bundle, world)));
      }
      const ad::Val back = nets::deform_eval(tape, bundle, p, false, canon_local, cond);
      acc(cycle_sum, tape.norm(tape.sub(back, x)));
    }

    for (std::size_t i = 0; i < pb.corr_posed_local.size(); ++i) {
      const ad::Val y = const3(tape, pb.corr_posed_local[i]);
      const ad::Val mapped = nets::deform_eval(tape, bundle, p, true, y, cond);
      acc(mano_sum, tape.norm(tape.sub(mapped, const3(tape, pb.corr_canon_local[i]))));
    }
  }

  const ad::Val regu_term = tape.norm(gamma);

  for (const auto& x : batch.off_samples) {
    const ad::Val f = nets::refnet_eval(tape, bundle, const3(tape, x));
    acc(off_sum, tape.exp_(tape.scale(tape.abs_(f), -alpha_o)));
  }
  for (const auto& x : batch.igr_samples) {
    ad::Dual3 xd;
    xd.p = const3(tape, x);
    const double e0[3] = {1, 0, 0}, e1[3] = {0, 1, 0}, e2[3] = {0, 0, 1};
    xd.t[0] = tape.constant(std::span<const double>(e0, 3));
    xd.t[1] = tape.constant(std::span<const double>(e1, 3));
    xd.t[2] = tape.constant(std::span<const double>(e2, 3));
    ad::Dual3 f = nets::refnet_eval_dual(tape, bundle, xd);
    const ad::Val g = tape.pack(f.t);
    const ad::Val d = tape.add_const(tape.norm(g), -1.0);
    acc(igr_sum, tape.mul(d, d));
  }

  // Raw sums for logging.
  auto sum_of = [&](ad::Val v) { return v.valid() ? tape.value1(v) : 0.0; };
  out.sums.sdf = sum_of(sdf_sum);
  out.sums.norm = sum_of(norm_sum);
  out.sums.cycle = sum_of(cycle_sum);
  out.sums.mano = sum_of(mano_sum);
  out.sums.regu = tape.value1(regu_term);
  out.sums.off = sum_of(off_sum);
  out.sums.igr = sum_of(igr_sum);
  long long n_surface = 0, n_mano = 0;
  for (const auto& pb : batch.parts) {
    n_surface += (long long)pb.x_local.size();
    n_mano += (long long)pb.corr_posed_local.size();
  }
  out.sums.n_sdf = n_surface;
  out.sums.n_norm = use_norm ? n_surface : 0;
  out.sums.n_cycle = n_surface;
  out.sums.n_mano = n_mano;
  out.sums.n_regu = 1;
  out.sums.n_off = (long long)batch.off_samples.size();
  out.sums.n_igr = (long long)batch.igr_samples.size();

  // Weighted scalar loss against the batch-wide counts.
  ad::Val loss{};
  auto addw = [&](ad::Val sum, double w, long long count) {
    if (!sum.valid() || w == 0.0 || count == 0) return;
    const ad::Val term = tape.scale(sum, w / double(count));
    loss = loss.valid() ? tape.add(loss, term) : term;
  };
  addw(sdf_sum, weights.sdf, counts.n_sdf);
  if (use_norm) addw(norm_sum, weights.norm, counts.n_norm);
  addw(cycle_sum, weights.cycle, counts.n_cycle);
  addw(mano_sum, weights.mano, counts.n_mano);
  addw(regu_term, weights.regu, counts.n_regu);
  addw(off_sum, weights.off, counts.n_off);
  addw(igr_sum, weights.igr, counts.n_igr);
  if (!loss.valid()) loss = tape.constant1(0.0);
  out.loss = loss;
  return out;
}

TermMeans loss_terms(const nets::NetworkBundle& bundle, const ScanBatch& batch,
                     const CanonicalSpace& canonical, double alpha_o, bool with_norm) {
  ad::Tape tape;
  tape.bind(bundle.params.data.data(), bundle.params.data.size());
  TermSums ones;
  ones.n_sdf = ones.n_norm = ones.n_cycle = ones.n_mano = ones.n_regu = ones.n_off =
      ones.n_igr = 1;
  LossWeights w;
  const ScanLoss sl =
      build_scan_loss(tape, bundle, batch, canonical, w, !with_norm, alpha_o, ones);
  return means_of(sl.sums, w);
}

double total_loss(const nets::NetworkBundle& bundle, const ScanBatch& batch,
                  const CanonicalSpace& canonical, const LossWeights& weights,
                  bool disable_norm, double alpha_o) {
  const TermMeans m = loss_terms(bundle, batch, canonical, alpha_o, !disable_norm);
  LossWeights w = weights;
  if (disable_norm) w.norm = 0.0;
  return m.total(w);
}

// ---- Oracle evaluation path ----

TermMeans loss_terms_oracle(const FieldOracle& f, const DeformOracle& maps,
                            const ScanBatch& batch, const CanonicalSpace& canonical,
                            double alpha_o) {
  TermSums s;
  for (int p = 0; p < skel::kParts; ++p) {
    const auto& pb = batch.parts[size_t(p)];
    const auto& F = canonical.frames[size_t(p)];
    for (std::size_t i = 0; i < pb.x_local.size(); ++i) {
      const Vec3 x = pb.x_local[i];
      const Vec3 canon_local = maps.inv(p, x);
      const Vec3 world = F.apply(canon_local);
      s.sdf += std::abs(f.value(world));
      ++s.n_sdf;
      // Gradient through the composition: J(inv)^T R^T grad(f).
      const double h = 1e-4;
      Mat3 J;  // J(r,c) = d inv_r / d x_c
      for (int c = 0; c < 3; ++c) {
        Vec3 xp = x, xm = x;
        xp[c] += h;
        xm[c] -= h;
        const Vec3 d = (maps.inv(p, xp) - maps.inv(p, xm)) / (2 * h);
        J(0, c) = d.x;
        J(1, c) = d.y;
        J(2, c) = d.z;
      }
      const Vec3 g_world = f.grad(world);
      const Vec3 g_local = J.tmul(F.R.tmul(g_world));
      s.norm += norm(g_local - pb.n_local[i]);
      ++s.n_norm;
      s.cycle += norm(maps.fwd(p, canon_local) - x);
      ++s.n_cycle;
    }
    for (std::size_t i = 0; i < pb.corr_posed_local.size(); ++i) {
      s.mano += norm(maps.inv(p, pb.corr_posed_local[i]) - pb.corr_canon_local[i]);
      ++s.n_mano;
    }
  }
  s.regu = 0;
  s.n_regu = 1;
  for (const auto& x : batch.off_samples) {
    s.off += std::exp(-alpha_o * std::abs(f.value(x)));
    ++s.n_off;
  }
  for (const auto& x : batch.igr_samples) {
    const double d = norm(f.grad(x)) - 1.0;
    s.igr += d * d;
    ++s.n_igr;
  }
  return means_of(s, LossWeights{});
}

// ---- Training ----

std::vector<uint64_t> unique_identity_seeds(const io::Dataset& ds) {
  std::vector<uint64_t> ids;
  for (const auto& scan : ds.train) {
    bool seen = false;
    for (uint64_t id : ids)
      if (id == scan.identity.seed) {
        seen = true;
        break;
      }
    if (!seen) ids.push_back(scan.identity.seed);
  }
  return ids;
}

std::vector<EpochLog> train(const io::Dataset& ds, nets::NetworkBundle& bundle,
                            const TrainConfig& cfg, const TrainCallbacks& cb) {
  if (ds.train.empty()) throw DataError("train: empty dataset");
  const CanonicalSpace canonical = CanonicalSpace::make();

  std::vector<int> gamma_rows(ds.train.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const int row = bundle.gamma_row(ds.train[i].identity.seed);
    if (row < 0) throw DataError("scan identity not registered in the latent table");
    gamma_rows[i] = row;
  }

  ad::AdamState adam(bundle.params.data.size());
  std::vector<EpochLog> logs;
  logs.reserve(size_t(cfg.epochs));

  // Tapes and gradient buffers are pooled across steps; clear() keeps their
  // arena capacity so steady-state steps allocate nothing.
  std::vector<ad::Tape> tape_pool(size_t(cfg.batch_scans));
  std::vector<std::vector<double>> grads(size_t(cfg.batch_scans));

  const int n = int(ds.train.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  const auto t_start = std::chrono::steady_clock::now();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.lr;
    for (int de : cfg.decay_epochs)
      if (epoch >= de) lr *= 0.5;

    for (int i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng shuffle = Rng(cfg.seed).split(1000).split(uint64_t(epoch));
    for (int i = 0; i < n - 1; ++i) {
      const int j = i + int(shuffle.below(uint64_t(n - i)));
      std::swap(order[size_t(i)], order[size_t(j)]);
    }

    TermSums epoch_sums;
    for (int start = 0; start < n; start += cfg.batch_scans) {
      const int bsize = std::min(cfg.batch_scans, n - start);

      std::vector<ScanBatch> batches(static_cast<std::size_t>(bsize));
      parallel_for(size_t(bsize), cfg.threads, [&](std::size_t bi) {
        const int si = order[size_t(start) + bi];
        batches[bi] = build_scan_batch(ds.train[size_t(si)], si, gamma_rows[size_t(si)],
                                       canonical, cfg, epoch, &ds);
      });

      TermSums counts;
      for (const auto& b : batches) {
        TermSums c;
        for (const auto& pb : b.parts) {
          c.n_sdf += (long long)pb.x_local.size();
          c.n_mano += (long long)pb.corr_posed_local.size();
        }
        c.n_norm = cfg.flags.disable_norm ? 0 : c.n_sdf;
        c.n_cycle = c.n_sdf;
        c.n_regu = 1;
        c.n_off = (long long)b.off_samples.size();
        c.n_igr = (long long)b.igr_samples.size();
        counts.accumulate(c);
      }

      std::vector<TermSums> sums(static_cast<std::size_t>(bsize));
      parallel_for(size_t(bsize), cfg.threads, [&](std::size_t bi) {
        ad::Tape& tape = tape_pool[bi];
        tape.clear();
        tape.bind(bundle.params.data.data(), bundle.params.data.size());
        const ScanLoss sl =
            build_scan_loss(tape, bundle, batches[bi], canonical, cfg.weights,
                            cfg.flags.disable_norm, cfg.alpha_o, counts);
        grads[bi].assign(bundle.params.data.size(), 0.0);
        tape.backward(sl.loss, grads[bi]);
        sums[bi] = sl.sums;
      });

      // Fixed-order reduction keeps training deterministic.
      std::vector<double> grad(bundle.params.data.size(), 0.0);
      for (int bi = 0; bi < bsize; ++bi) {
        const auto& g = grads[size_t(bi)];
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += g[k];
        epoch_sums.accumulate(sums[size_t(bi)]);
      }

      const TermMeans step_means = means_of(sums.empty() ? TermSums{} : [&] {
        TermSums t;
        for (const auto& s : sums) t.accumulate(s);
        return t;
      }(), cfg.weights);
      auto check = [&](double v, const char* name) {
        if (!std::isfinite(v))
          throw NonFiniteLoss(std::string("non-finite loss term: ") + name);
      };
      check(step_means.sdf, "E_SDF");
      check(step_means.norm, "E_norm");
      check(step_means.cycle, "E_cycle");
      check(step_means.mano, "E_mano");
      check(step_means.regu, "E_regu");
      check(step_means.off, "E_O");
      check(step_means.igr, "E_IGR");

      ad::adam_step(bundle.params.data, grad, adam, lr);
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.means = means_of(epoch_sums, cfg.weights);
    LossWeights w = cfg.weights;
    if (cfg.flags.disable_norm) w.norm = 0.0;
    log.total = log.means.total(w);
    log.wall_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    logs.push_back(log);
    if (cb.on_epoch) cb.on_epoch(log);
    if (cb.on_checkpoint && cfg.checkpoint_interval > 0 &&
        (epoch + 1) % cfg.checkpoint_interval == 0)
      cb.on_checkpoint(epoch + 1, bundle);
  }
  return logs;
}

}  // namespace phrit::field
