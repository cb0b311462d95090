#include <doctest.h>

#include <cmath>

#include "phrit/field.hpp"
#include "phrit/rng.hpp"
#include "testutil.hpp"

using namespace phrit;
using namespace phrit::field;

namespace {

nets::NetConfig tiny_net_config() {
  nets::NetConfig cfg;
  cfg.refnet_hidden = {24, 24};
  cfg.deform_hidden = {12, 12};
  cfg.encoder_hidden = {8};
  cfg.dgamma = 4;
  cfg.skip_stages = 1;
  cfg.input_center = prochand::ProcHandModel::mean().aabb().center();
  return cfg;
}

io::Dataset tiny_dataset(int identities = 2, int poses = 2, int test_pairs = 1) {
  io::SynthSettings s;
  s.train_identities = identities;
  s.train_poses = poses;
  s.test_pairs = test_pairs;
  s.points_per_scan = 256;
  s.corr_per_scan = 24;
  s.template_grid = 32;
  s.seed = 5;
  return io::synthesize_dataset(s);
}

TrainConfig tiny_train_config() {
  TrainConfig cfg;
  cfg.batch_scans = 4;
  cfg.points_per_part = 4;
  cfg.off_per_scan = 16;
  cfg.igr_per_scan = 16;
  cfg.epochs = 3;
  cfg.seed = 21;
  return cfg;
}

// A batch of on-sphere surface points at the canonical pose: with identity
// deformation nets the SDF term reduces to |f| on the sphere itself.
ScanBatch sphere_batch(const CanonicalSpace& canonical, const Vec3& center, double radius,
                       int per_part) {
  ScanBatch batch;
  batch.gamma_row = 0;
  batch.lengths = skel::bone_length_features(canonical.skeleton);
  const skel::LocalPose pose = skel::local_pose(canonical.skeleton);
  Rng rng(3);
  for (int p = 0; p < skel::kParts; ++p) {
    auto& pb = batch.parts[size_t(p)];
    pb.theta = pose.theta[size_t(p)];
    for (int i = 0; i < per_part; ++i) {
      const Vec3 u = testutil::random_unit(rng);
      const Vec3 world = center + u * radius;
      pb.x_local.push_back(canonical.frames[size_t(p)].apply_inverse(world));
      pb.n_local.push_back(canonical.frames[size_t(p)].R.tmul(u));
    }
  }
  return batch;
}

}  // namespace

TEST_CASE("loss_sdf on a sphere construction") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  nets::NetConfig ncfg = tiny_net_config();
  // Geometric init makes f approximately |x - center| - r0; identity nets.
  nets::NetworkBundle bundle = nets::init_networks(ncfg, {1}, 3);

  FieldOracle f;
  f.value = [&](const Vec3& x) { return norm(x - ncfg.input_center) - ncfg.geo_init_radius; };
  f.grad = [&](const Vec3& x) { return normalized(x - ncfg.input_center); };
  DeformOracle maps;
  maps.fwd = [](int, const Vec3& x) { return x; };
  maps.inv = [](int, const Vec3& x) { return x; };

  ScanBatch batch = sphere_batch(canonical, ncfg.input_center, ncfg.geo_init_radius, 6);
  const TermMeans oracle = loss_terms_oracle(f, maps, batch, canonical, 100.0);
  CHECK(oracle.sdf < 1e-3);
  CHECK(oracle.cycle == doctest::Approx(0.0));
  CHECK(oracle.norm < 1e-6);  // analytic normals match exactly

  // Mean property: duplicating every point leaves the means unchanged.
  ScanBatch doubled = batch;
  for (int p = 0; p < skel::kParts; ++p) {
    auto& pb = doubled.parts[size_t(p)];
    const auto xs = pb.x_local, ns = pb.n_local;
    pb.x_local.insert(pb.x_local.end(), xs.begin(), xs.end());
    pb.n_local.insert(pb.n_local.end(), ns.begin(), ns.end());
  }
  const TermMeans doubled_means = loss_terms_oracle(f, maps, doubled, canonical, 100.0);
  CHECK(doubled_means.sdf == doctest::Approx(oracle.sdf).epsilon(1e-12));

  // Tape path with the identity-initialized bundle: nonnegative, close to the
  // geometric-init sphere residual.
  const TermMeans tape = loss_terms(bundle, batch, canonical, 100.0);
  CHECK(tape.sdf >= 0.0);
  CHECK(tape.cycle == doctest::Approx(0.0));
}

TEST_CASE("loss_norm against the capsule oracle") {
  // Identity deformation, f = the exact canonical oracle SDF: the loss only
  // sees the smooth-min's deviation from a perfect distance field.
  const CanonicalSpace canonical = CanonicalSpace::make();
  const prochand::ProcHandModel mean = prochand::ProcHandModel::mean();
  const prochand::CapsuleSet caps = prochand::canonical_capsules(mean);

  FieldOracle f;
  f.value = [&](const Vec3& x) { return prochand::sdf(caps, x); };
  f.grad = [&](const Vec3& x) { return prochand::sdf_grad(caps, x).grad; };
  DeformOracle maps;
  maps.fwd = [](int, const Vec3& x) { return x; };
  maps.inv = [](int, const Vec3& x) { return x; };

  // Batch from a canonical-pose scan of the mean identity.
  prochand::OracleTemplate tpl = prochand::template_with_skinning(mean, 32);
  const auto scan = prochand::sample_scan(mean, mean.canonical, tpl,
                                          skel::part_frames(mean.canonical), 512, 32, 11);
  TrainConfig tcfg = tiny_train_config();
  tcfg.points_per_part = 16;
  const ScanBatch batch = build_scan_batch(scan, 0, 0, canonical, tcfg, 0);
  const TermMeans means = loss_terms_oracle(f, maps, batch, canonical, 100.0);
  CHECK(means.norm < 0.05);
  CHECK(means.sdf < 1e-3);

  // Replacing the target normal with the computed gradient zeroes the term.
  ScanBatch self = batch;
  for (int p = 0; p < skel::kParts; ++p) {
    auto& pb = self.parts[size_t(p)];
    for (std::size_t i = 0; i < pb.x_local.size(); ++i) {
      const Vec3 world = canonical.frames[size_t(p)].apply(pb.x_local[i]);
      pb.n_local[i] = canonical.frames[size_t(p)].R.tmul(f.grad(world));
    }
  }
  CHECK(loss_terms_oracle(f, maps, self, canonical, 100.0).norm < 1e-9);
}

TEST_CASE("loss_norm invariant to point order") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  nets::NetworkBundle bundle = nets::init_networks(tiny_net_config(), {1}, 3);
  Rng rng(5);
  for (auto& p : bundle.params.data) p += rng.normal(0.0, 0.02);
  ScanBatch batch = sphere_batch(canonical, bundle.cfg.input_center, 60.0, 5);
  const double base = loss_terms(bundle, batch, canonical, 100.0).norm;
  for (int p = 0; p < skel::kParts; ++p) {
    auto& pb = batch.parts[size_t(p)];
    std::reverse(pb.x_local.begin(), pb.x_local.end());
    std::reverse(pb.n_local.begin(), pb.n_local.end());
  }
  CHECK(loss_terms(bundle, batch, canonical, 100.0).norm ==
        doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("loss_cycle constructions") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  FieldOracle f;
  f.value = [](const Vec3&) { return 1.0; };
  f.grad = [](const Vec3&) { return Vec3{1, 0, 0}; };

  ScanBatch batch = sphere_batch(canonical, {0, 90, 0}, 50.0, 4);
  const Vec3 delta{1.5, -2.0, 0.5};
  DeformOracle shifted;
  shifted.fwd = [&](int, const Vec3& x) { return x + delta; };
  shifted.inv = [](int, const Vec3& x) { return x; };
  CHECK(loss_terms_oracle(f, shifted, batch, canonical, 100.0).cycle ==
        doctest::Approx(norm(delta)).epsilon(1e-9));

  DeformOracle identity;
  identity.fwd = [](int, const Vec3& x) { return x; };
  identity.inv = [](int, const Vec3& x) { return x; };
  CHECK(loss_terms_oracle(f, identity, batch, canonical, 100.0).cycle ==
        doctest::Approx(0.0));
}

TEST_CASE("loss_mano constructions and densification") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  const io::Dataset ds = tiny_dataset();

  // Identity pose of the mean identity with identity nets: pairs coincide.
  const prochand::ProcHandModel mean = prochand::ProcHandModel::mean();
  const auto scan = prochand::sample_scan(mean, mean.canonical, ds.mean_template,
                                          skel::part_frames(mean.canonical), 64, 48, 3);
  TrainConfig tcfg = tiny_train_config();
  const ScanBatch batch = build_scan_batch(scan, 0, 0, canonical, tcfg, 0);

  FieldOracle f;
  f.value = [](const Vec3&) { return 0.0; };
  f.grad = [](const Vec3&) { return Vec3{1, 0, 0}; };
  DeformOracle identity;
  identity.fwd = [](int, const Vec3& x) { return x; };
  identity.inv = [](int, const Vec3& x) { return x; };
  CHECK(loss_terms_oracle(f, identity, batch, canonical, 100.0).mano < 1e-9);

  // Known offset between the pair sides shows up exactly.
  ScanBatch offset = batch;
  const Vec3 delta{2.0, 1.0, -0.5};
  for (int p = 0; p < skel::kParts; ++p)
    for (auto& y : offset.parts[size_t(p)].corr_posed_local) y += delta;
  CHECK(loss_terms_oracle(f, identity, offset, canonical, 100.0).mano ==
        doctest::Approx(norm(delta)).epsilon(1e-9));

  // Densified variant produces >= 9x more pairs.
  TrainConfig dense_cfg = tcfg;
  dense_cfg.flags.dense_mano_plus = true;
  const ScanBatch dense = build_scan_batch(scan, 0, 0, canonical, dense_cfg, 0, &ds);
  auto count_pairs = [](const ScanBatch& b) {
    std::size_t n = 0;
    for (const auto& pb : b.parts) n += pb.corr_posed_local.size();
    return n;
  };
  CHECK(count_pairs(dense) >= 9 * count_pairs(batch));
}

TEST_CASE("regularizer and field-only terms") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  nets::NetworkBundle bundle = nets::init_networks(tiny_net_config(), {1}, 3);
  // Force gamma to zero: E_regu vanishes.
  for (int k = 0; k < bundle.cfg.dgamma; ++k)
    bundle.params.data[size_t(bundle.gamma_off + k)] = 0.0;
  ScanBatch batch = sphere_batch(canonical, bundle.cfg.input_center, 40.0, 2);
  batch.off_samples = {{0, 0, 300}, {250, 0, 0}};
  batch.igr_samples = {{10, 80, 10}, {0, 150, 0}};
  const TermMeans means = loss_terms(bundle, batch, canonical, 100.0);
  CHECK(means.regu == doctest::Approx(0.0));

  // Closed forms for E_O on constant fields.
  FieldOracle fc;
  fc.value = [](const Vec3&) { return 42.0; };
  fc.grad = [](const Vec3&) { return Vec3{0, 0, 0}; };
  DeformOracle identity;
  identity.fwd = [](int, const Vec3& x) { return x; };
  identity.inv = [](int, const Vec3& x) { return x; };
  ScanBatch off_only;
  off_only.lengths = batch.lengths;
  for (int p = 0; p < skel::kParts; ++p) off_only.parts[size_t(p)].theta = batch.parts[size_t(p)].theta;
  off_only.off_samples = batch.off_samples;
  CHECK(loss_terms_oracle(fc, identity, off_only, canonical, 100.0).off ==
        doctest::Approx(std::exp(-100.0 * 42.0)));
  FieldOracle fz;
  fz.value = [](const Vec3&) { return 0.0; };
  fz.grad = [](const Vec3&) { return Vec3{0, 0, 0}; };
  CHECK(loss_terms_oracle(fz, identity, off_only, canonical, 100.0).off ==
        doctest::Approx(1.0));

  // Exact eikonal field zeroes E_IGR.
  FieldOracle sphere;
  sphere.value = [](const Vec3& x) { return norm(x) - 80.0; };
  sphere.grad = [](const Vec3& x) { return normalized(x); };
  ScanBatch igr_only = off_only;
  igr_only.off_samples.clear();
  igr_only.igr_samples = batch.igr_samples;
  CHECK(loss_terms_oracle(sphere, identity, igr_only, canonical, 100.0).igr <
        1e-12);
}

TEST_CASE("total loss recomposition and weight linearity") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  nets::NetworkBundle bundle = nets::init_networks(tiny_net_config(), {1}, 3);
  Rng rng(7);
  for (auto& p : bundle.params.data) p += rng.normal(0.0, 0.02);

  const io::Dataset ds = tiny_dataset();
  TrainConfig tcfg = tiny_train_config();
  const ScanBatch batch = build_scan_batch(ds.train[0], 0, 0, canonical, tcfg, 0);

  LossWeights zero{};
  zero.sdf = zero.norm = zero.cycle = zero.mano = zero.regu = zero.off = zero.igr = 0;
  CHECK(total_loss(bundle, batch, canonical, zero, false, 100.0) == doctest::Approx(0.0));

  LossWeights w;  // defaults
  const TermMeans means = loss_terms(bundle, batch, canonical, 100.0);
  const double total = total_loss(bundle, batch, canonical, w, false, 100.0);
  const double recomposed = w.sdf * means.sdf + w.norm * means.norm + w.cycle * means.cycle +
                            w.mano * means.mano + w.regu * means.regu + w.off * means.off +
                            w.igr * means.igr;
  CHECK(std::abs(total - recomposed) < 1e-12);

  // Affine in each weight.
  LossWeights w2 = w;
  w2.cycle += 0.25;
  const double bumped = total_loss(bundle, batch, canonical, w2, false, 100.0);
  CHECK(bumped - total == doctest::Approx(0.25 * means.cycle).epsilon(1e-9));
}

TEST_CASE("tape losses match the oracle path on the same networks") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  nets::NetworkBundle bundle = nets::init_networks(tiny_net_config(), {1}, 3);
  Rng rng(9);
  for (auto& p : bundle.params.data) p += rng.normal(0.0, 0.02);

  const io::Dataset ds = tiny_dataset();
  TrainConfig tcfg = tiny_train_config();
  ScanBatch batch = build_scan_batch(ds.train[1], 1, 0, canonical, tcfg, 0);
  batch.gamma_row = 0;

  const TermMeans tape = loss_terms(bundle, batch, canonical, 100.0);

  // Wrap the bundle as oracle callbacks; Jacobians fall back to differences.
  FieldOracle f;
  f.value = [&](const Vec3& x) { return nets::refnet_eval_d(bundle, x); };
  f.grad = [&](const Vec3& x) { return nets::refnet_grad_d(bundle, x).grad; };

  const skel::LocalPose pose = skel::local_pose(batch.parts[0].theta.empty()
                                                    ? ds.train[1].skeleton
                                                    : ds.train[1].skeleton);
  const skel::BoneLengths lengths = skel::bone_length_features(ds.train[1].skeleton);
  std::array<double, 20> raw{};
  for (int b = 0; b < 20; ++b) raw[size_t(b)] = lengths.raw[size_t(b)];
  const auto fg = nets::encoder_eval_d(bundle, raw);
  std::array<nets::DeformCache, skel::kParts> fwd_cache, inv_cache;
  for (int p = 0; p < skel::kParts; ++p) {
    const auto cond = nets::make_cond(bundle, p, pose.theta[size_t(p)], bundle.gamma(0), fg, lengths);
    fwd_cache[size_t(p)] = nets::make_deform_cache(bundle, p, false, cond);
    inv_cache[size_t(p)] = nets::make_deform_cache(bundle, p, true, cond);
  }
  DeformOracle maps;
  maps.fwd = [&](int p, const Vec3& x) { return nets::deform_point_d(bundle, fwd_cache[size_t(p)], x); };
  maps.inv = [&](int p, const Vec3& x) { return nets::deform_point_d(bundle, inv_cache[size_t(p)], x); };

  const TermMeans oracle = loss_terms_oracle(f, maps, batch, canonical, 100.0);
  CHECK(tape.sdf == doctest::Approx(oracle.sdf).epsilon(1e-6));
  CHECK(tape.norm == doctest::Approx(oracle.norm).epsilon(1e-4));
  CHECK(tape.cycle == doctest::Approx(oracle.cycle).epsilon(1e-6));
  CHECK(tape.mano == doctest::Approx(oracle.mano).epsilon(1e-6));
  CHECK(tape.off == doctest::Approx(oracle.off).epsilon(1e-6));
  CHECK(tape.igr == doctest::Approx(oracle.igr).epsilon(1e-6));
}

TEST_CASE("gradient flows into the latent codes") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  nets::NetworkBundle bundle = nets::init_networks(tiny_net_config(), {1}, 3);
  Rng rng(13);
  for (auto& p : bundle.params.data) p += rng.normal(0.0, 0.05);
  const io::Dataset ds = tiny_dataset();
  TrainConfig tcfg = tiny_train_config();
  const ScanBatch batch = build_scan_batch(ds.train[0], 0, 0, canonical, tcfg, 0);

  ad::Tape tape;
  tape.bind(bundle.params.data.data(), bundle.params.data.size());
  TermSums counts;
  counts.n_sdf = counts.n_norm = counts.n_cycle = counts.n_mano = counts.n_regu =
      counts.n_off = counts.n_igr = 1;
  const ScanLoss sl = build_scan_loss(tape, bundle, batch, canonical, LossWeights{}, false,
                                      100.0, counts);
  std::vector<double> grad(bundle.params.data.size(), 0.0);
  tape.backward(sl.loss, grad);
  double gnorm = 0;
  for (int k = 0; k < bundle.cfg.dgamma; ++k)
    gnorm += std::abs(grad[size_t(bundle.gamma_off + k)]);
  CHECK(gnorm > 0.0);
}

TEST_CASE("off-surface samples avoid canonical correspondences") {
  const CanonicalSpace canonical = CanonicalSpace::make();
  const io::Dataset ds = tiny_dataset();
  TrainConfig tcfg = tiny_train_config();
  tcfg.off_per_scan = 64;
  const ScanBatch batch = build_scan_batch(ds.train[0], 0, 0, canonical, tcfg, 0);
  for (const auto& x : batch.off_samples) {
    CHECK(canonical.omega.contains(x));
    for (const auto& c : ds.train[0].corr_canonical) CHECK(norm(x - c) >= 2.0);
  }
  for (const auto& x : batch.igr_samples) CHECK(canonical.omega.contains(x));
}

TEST_CASE("train smoke: overfit one scan by an order of magnitude") {
  // One mean-identity scan at a mild pose; the template field has to morph
  // from the init sphere to the hand, which takes on the order of a thousand
  // steps at these widths.
  prochand::ProcHandModel model = prochand::ProcHandModel::mean();
  prochand::OracleTemplate tpl = prochand::template_with_skinning(model, 40);
  prochand::PoseSampler sampler;
  sampler.flex_max = 0.6;
  sampler.seed = 3;
  const skel::Skeleton posed = sampler.sample(model.canonical, 0);
  io::Dataset ds;
  ds.mean_template = tpl;
  ds.train.push_back(prochand::sample_scan(model, posed, tpl,
                                           skel::part_frames(model.canonical), 512, 48, 9));

  nets::NetConfig ncfg;
  ncfg.refnet_hidden = {64, 64, 64};
  ncfg.deform_hidden = {16, 16};
  ncfg.encoder_hidden = {8};
  ncfg.dgamma = 4;
  ncfg.skip_stages = 1;
  ncfg.softplus_beta = 60.0;
  ncfg.input_center = model.aabb().center();

  TrainConfig tcfg;
  tcfg.batch_scans = 1;
  tcfg.points_per_part = 16;
  tcfg.off_per_scan = 32;
  tcfg.igr_per_scan = 32;
  tcfg.epochs = 1500;
  tcfg.lr = 5e-3;
  tcfg.decay_epochs = {900, 1350};
  tcfg.seed = 77;
  tcfg.threads = 4;

  nets::NetworkBundle bundle =
      nets::init_networks(ncfg, field::unique_identity_seeds(ds), 1234);
  const auto logs = train(ds, bundle, tcfg);
  REQUIRE(int(logs.size()) == tcfg.epochs);
  CHECK(logs.back().total < logs.front().total / 10.0);
}

TEST_CASE("train determinism and ablation flag") {
  io::Dataset ds = tiny_dataset(1, 2, 0);
  nets::NetConfig ncfg = tiny_net_config();
  TrainConfig tcfg;
  tcfg.batch_scans = 2;
  tcfg.points_per_part = 6;
  tcfg.off_per_scan = 24;
  tcfg.igr_per_scan = 24;
  tcfg.epochs = 12;
  tcfg.lr = 2e-3;
  tcfg.seed = 77;

  auto run = [&](TrainConfig cfg, int threads) {
    cfg.threads = threads;
    nets::NetworkBundle bundle =
        nets::init_networks(ncfg, field::unique_identity_seeds(ds), 1234);
    return train(ds, bundle, cfg);
  };
  const auto logs = run(tcfg, 2);
  const auto logs2 = run(tcfg, 4);  // thread count must not change results
  REQUIRE(logs.size() == logs2.size());
  for (std::size_t e = 0; e < logs.size(); ++e)
    CHECK(logs[e].total == logs2[e].total);

  // disable_norm zeroes the logged norm term at every epoch.
  TrainConfig ab = tcfg;
  ab.epochs = 3;
  ab.flags.disable_norm = true;
  const auto ablogs = run(ab, 2);
  for (const auto& log : ablogs) CHECK(log.means.norm == 0.0);
}
