#include <doctest.h>

#include <cmath>

#include "phrit/prochand.hpp"
#include "phrit/rng.hpp"
#include "testutil.hpp"

using namespace phrit;
using namespace phrit::prochand;

TEST_CASE("identity factors stay in documented ranges") {
  for (uint64_t seed = 0; seed < 200; ++seed) {
    HandIdentity id = HandIdentity::from_seed(seed);
    CHECK(id.scale >= 0.9);
    CHECK(id.scale <= 1.1);
    CHECK(id.palm_width >= 0.85);
    CHECK(id.palm_width <= 1.15);
    for (int f = 0; f < 5; ++f) {
      CHECK(id.thickness[size_t(f)] >= 0.85);
      CHECK(id.thickness[size_t(f)] <= 1.15);
      CHECK(id.length[size_t(f)] >= 0.85);
      CHECK(id.length[size_t(f)] <= 1.15);
    }
  }
}

TEST_CASE("round cone sdf against a plain capsule") {
  // Equal radii reduce to the classic capsule distance.
  const Vec3 a{0, 0, 0}, b{0, 40, 0};
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    Vec3 p{rng.uniform(-60, 60), rng.uniform(-40, 90), rng.uniform(-60, 60)};
    DistGrad dg = round_cone_sdf(p, a, b, 7.0, 7.0);
    const double t = clamp1(p.y / 40.0, 0.0, 1.0);
    const Vec3 c{0, 40.0 * t, 0};
    CHECK(dg.d == doctest::Approx(norm(p - c) - 7.0).epsilon(1e-12));
  }
  // Gradient is unit and matches central differences.
  for (int i = 0; i < 100; ++i) {
    Vec3 p{rng.uniform(-60, 60), rng.uniform(-40, 90), rng.uniform(-60, 60)};
    DistGrad dg = round_cone_sdf(p, a, b, 9.0, 5.0);
    CHECK(std::abs(norm(dg.grad) - 1.0) < 1e-9);
    const double h = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Vec3 pp = p, pm = p;
      pp[k] += h;
      pm[k] -= h;
      const double fd = (round_cone_sdf(pp, a, b, 9.0, 5.0).d -
                         round_cone_sdf(pm, a, b, 9.0, 5.0).d) /
                        (2 * h);
      CHECK(std::abs(dg.grad[k] - fd) < 1e-6);
    }
  }
}

TEST_CASE("posed sdf far field matches nearest capsule") {
  ProcHandModel model = ProcHandModel::mean();
  CapsuleSet caps = canonical_capsules(model);
  Rng rng(8);
  for (int i = 0; i < 100; ++i) {
    const Vec3 dir = testutil::random_unit(rng);
    const Vec3 center = model.aabb().center();
    const Vec3 x = center + dir * rng.uniform(550.0, 1500.0);
    double nearest = 1e300;
    for (int b = 0; b < skel::kBones; ++b)
      nearest = std::min(nearest, round_cone_sdf(x, caps.head[size_t(b)], caps.tail[size_t(b)],
                                                 caps.r_head[size_t(b)], caps.r_tail[size_t(b)]).d);
    CHECK(std::abs(sdf(caps, x) - nearest) < 1.0);
  }
}

TEST_CASE("posed sdf interior at palmar midpoints") {
  ProcHandModel model = ProcHandModel::mean();
  CapsuleSet caps = canonical_capsules(model);
  for (int f = 0; f < 5; ++f) {
    const int b = 4 * f;
    const Vec3 mid = (caps.head[size_t(b)] + caps.tail[size_t(b)]) * 0.5;
    const double r_mid = 0.5 * (caps.r_head[size_t(b)] + caps.r_tail[size_t(b)]);
    CHECK(sdf(caps, mid) <= -(r_mid - caps.k));
  }
}

TEST_CASE("canonical pose equals canonical sdf exactly") {
  ProcHandModel model = ProcHandModel::make(HandIdentity::from_seed(5));
  Rng rng(12);
  const geom::Aabb box = model.aabb().inflated(0.5);
  for (int i = 0; i < 1000; ++i) {
    const Vec3 x{rng.uniform(box.min.x, box.max.x), rng.uniform(box.min.y, box.max.y),
                 rng.uniform(box.min.z, box.max.z)};
    CHECK(posed_sdf(model, model.canonical, x) ==
          sdf(canonical_capsules(model), x));
  }
}

TEST_CASE("sdf gradient matches finite differences near surface") {
  ProcHandModel model = ProcHandModel::mean();
  CapsuleSet caps = canonical_capsules(model);
  Rng rng(4);
  int checked = 0;
  for (int i = 0; i < 300 && checked < 100; ++i) {
    const geom::Aabb box = model.aabb();
    Vec3 x{rng.uniform(box.min.x, box.max.x), rng.uniform(box.min.y, box.max.y),
           rng.uniform(box.min.z, box.max.z)};
    auto proj = project_to_surface(caps, x);
    if (!proj) continue;
    const Vec3 p = *proj + testutil::random_unit(rng) * rng.uniform(0.0, 3.0);
    const DistGrad dg = sdf_grad(caps, p);
    const double h = 1e-5;
    for (int k = 0; k < 3; ++k) {
      Vec3 pp = p, pm = p;
      pp[k] += h;
      pm[k] -= h;
      const double fd = (sdf(caps, pp) - sdf(caps, pm)) / (2 * h);
      CHECK(std::abs(dg.grad[k] - fd) < 1e-5);
    }
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("eikonal property near the surface") {
  ProcHandModel model = ProcHandModel::mean();
  CapsuleSet caps = canonical_capsules(model);
  Rng rng(19);
  int total = 0, good = 0;
  while (total < 2000) {
    const geom::Aabb box = model.aabb();
    Vec3 x{rng.uniform(box.min.x, box.max.x), rng.uniform(box.min.y, box.max.y),
           rng.uniform(box.min.z, box.max.z)};
    auto proj = project_to_surface(caps, x);
    if (!proj) continue;
    const Vec3 p = *proj + testutil::random_unit(rng) * rng.uniform(-2.0, 2.0);
    const DistGrad dg = sdf_grad(caps, p);
    if (std::abs(norm(dg.grad) - 1.0) < 0.05) ++good;
    ++total;
  }
  CHECK(double(good) / double(total) >= 0.95);
}

TEST_CASE("identity monotonicity in thickness") {
  HandIdentity id = HandIdentity::mean();
  for (int f = 0; f < 5; ++f) {
    HandIdentity thicker = id;
    thicker.thickness[size_t(f)] = 1.15;
    HandIdentity thinner = id;
    thinner.thickness[size_t(f)] = 0.85;
    ProcHandModel big = ProcHandModel::make(thicker);
    ProcHandModel small = ProcHandModel::make(thinner);
    for (int m = 1; m <= 3; ++m) {
      const int b = 4 * f + m;
      const Vec3 mid = (big.head[size_t(b)] + big.tail[size_t(b)]) * 0.5;
      CHECK(sdf(canonical_capsules(big), mid) < sdf(canonical_capsules(small), mid));
    }
  }
}

TEST_CASE("pose equivariance of the zero level set") {
  ProcHandModel model = ProcHandModel::mean();
  skel::Skeleton posed = testutil::random_posed_skeleton(42);
  CapsuleSet caps = posed_capsules(model, posed);
  Rng rng(5);
  geom::Rigid g = testutil::random_rigid(rng);
  skel::Skeleton moved = testutil::transformed(posed, g);
  CapsuleSet moved_caps = posed_capsules(model, moved);
  int count = 0;
  for (int i = 0; i < 400 && count < 100; ++i) {
    const geom::Aabb box = model.aabb();
    Vec3 x{rng.uniform(box.min.x, box.max.x), rng.uniform(box.min.y, box.max.y),
           rng.uniform(box.min.z, box.max.z)};
    auto proj = project_to_surface(caps, x);
    if (!proj) continue;
    CHECK(std::abs(sdf(moved_caps, g.apply(*proj)) - sdf(caps, *proj)) < 1e-6);
    ++count;
  }
  CHECK(count == 100);
}

TEST_CASE("pose sampler round trips through local_pose") {
  skel::Skeleton canonical = testutil::reference_flat_skeleton();
  PoseSampler sampler;
  sampler.seed = 99;
  for (uint64_t pose = 0; pose < 5; ++pose) {
    skel::Skeleton s = sampler.sample(canonical, pose);
    s.validate();
    // Palm untouched.
    CHECK(norm(s.keypoints[0] - canonical.keypoints[0]) == 0.0);
    for (int f = 0; f < 5; ++f)
      CHECK(norm(s.keypoints[size_t(1 + 4 * f)] - canonical.keypoints[size_t(1 + 4 * f)]) == 0.0);
    // Bone lengths preserved.
    auto l0 = skel::bone_length_features(canonical);
    auto l1 = skel::bone_length_features(s);
    for (int b = 0; b < skel::kBones; ++b)
      CHECK(l1.raw[size_t(b)] == doctest::Approx(l0.raw[size_t(b)]).epsilon(1e-9));
    // Flexion within the sampler ranges (recovered via local_pose).
    skel::LocalPose pose_angles = skel::local_pose(s);
    for (int k = 7; k < 17; k += 2)  // MCP abductions
      CHECK(std::abs(pose_angles.theta[0][size_t(k)]) <= sampler.abd_max + 1e-9);
    for (int k = 8; k < 17; k += 2)  // MCP flexions
      CHECK(pose_angles.theta[0][size_t(k)] <= sampler.flex_max + 1e-9);
  }
}

TEST_CASE("scan sampling postconditions") {
  ProcHandModel model = ProcHandModel::make(HandIdentity::from_seed(21));
  PoseSampler sampler;
  sampler.seed = 7;
  skel::Skeleton posed = sampler.sample(model.canonical, 0);

  ProcHandModel mean_model = ProcHandModel::mean();
  OracleTemplate tpl = template_with_skinning(mean_model, 40);
  auto mean_frames = skel::part_frames(mean_model.canonical);

  SyntheticScan scan = sample_scan(model, posed, tpl, mean_frames, 500, 64, 1234);
  CapsuleSet caps = posed_capsules(model, posed);
  REQUIRE(scan.surface.points.size() == 500);
  REQUIRE(scan.labels.size() == 500);
  for (std::size_t i = 0; i < scan.surface.points.size(); ++i) {
    CHECK(std::abs(sdf(caps, scan.surface.points[i])) < 1e-4);
    CHECK(scan.labels[i] < skel::kParts);
    CHECK(std::abs(norm(scan.surface.normals[i]) - 1.0) < 1e-9);
    // Normal vs central-difference gradient: angle < 0.5 degrees.
    const double h = 1e-4;
    Vec3 fd;
    for (int k = 0; k < 3; ++k) {
      Vec3 pp = scan.surface.points[i], pm = pp;
      pp[k] += h;
      pm[k] -= h;
      fd[k] = (sdf(caps, pp) - sdf(caps, pm)) / (2 * h);
    }
    const double cosang = dot(scan.surface.normals[i], normalized(fd));
    CHECK(cosang > std::cos(0.5 * 3.14159265358979 / 180.0));
  }

  // Determinism.
  SyntheticScan scan2 = sample_scan(model, posed, tpl, mean_frames, 500, 64, 1234);
  for (std::size_t i = 0; i < scan.surface.points.size(); ++i)
    CHECK(norm(scan.surface.points[i] - scan2.surface.points[i]) == 0.0);
  for (std::size_t i = 0; i < scan.corr_posed.size(); ++i)
    CHECK(norm(scan.corr_posed[i] - scan2.corr_posed[i]) == 0.0);
}

TEST_CASE("template skinning weights") {
  ProcHandModel model = ProcHandModel::mean();
  OracleTemplate tpl = template_with_skinning(model, 48);
  REQUIRE(!tpl.mesh.vertices.empty());
  for (const auto& w : tpl.weights) {
    double sum = 0;
    for (double v : w) {
      CHECK(v >= 0.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }

  // A fingertip vertex is dominated by its distal part; use middle fingertip.
  const Vec3 tip = model.canonical.keypoints[12];
  std::size_t best = 0;
  double bd = 1e300;
  for (std::size_t v = 0; v < tpl.mesh.vertices.size(); ++v) {
    const double d = norm(tpl.mesh.vertices[v] - tip);
    if (d < bd) {
      bd = d;
      best = v;
    }
  }
  CHECK(tpl.weights[best][9] >= 0.95);  // middle distal = part 9

  // A palm-center vertex has the palm as argmax.
  const Vec3 palm_center = (model.canonical.keypoints[0] + model.canonical.keypoints[9]) * 0.5;
  best = 0;
  bd = 1e300;
  for (std::size_t v = 0; v < tpl.mesh.vertices.size(); ++v) {
    const double d = norm(tpl.mesh.vertices[v] - palm_center);
    if (d < bd) {
      bd = d;
      best = v;
    }
  }
  int argmax = 0;
  for (int p = 1; p < skel::kParts; ++p)
    if (tpl.weights[best][size_t(p)] > tpl.weights[best][size_t(argmax)]) argmax = p;
  CHECK(argmax == 0);
}

TEST_CASE("lbs pose") {
  ProcHandModel model = ProcHandModel::mean();
  OracleTemplate tpl = template_with_skinning(model, 40);
  auto canon_frames = skel::part_frames(model.canonical);

  // Canonical pose leaves the mesh unchanged.
  geom::TriMesh same = lbs_pose(tpl.mesh, tpl.weights, canon_frames, canon_frames);
  for (std::size_t v = 0; v < same.vertices.size(); ++v)
    CHECK(norm(same.vertices[v] - tpl.mesh.vertices[v]) < 1e-9);

  // One-hot weights transport rigidly.
  PoseSampler sampler;
  sampler.seed = 3;
  skel::Skeleton posed = sampler.sample(model.canonical, 1);
  auto posed_frames = skel::part_frames(posed);
  std::vector<std::array<double, skel::kParts>> onehot(1);
  onehot[0].fill(0.0);
  onehot[0][5] = 1.0;
  geom::TriMesh single;
  single.vertices = {model.canonical.keypoints[6]};
  geom::TriMesh out = lbs_pose(single, onehot, canon_frames, posed_frames);
  const Vec3 expect = geom::compose(posed_frames[5], geom::invert(canon_frames[5]))
                          .apply(model.canonical.keypoints[6]);
  CHECK(norm(out.vertices[0] - expect) < 1e-9);

  // Posed vertices stay within the inflated posed-skeleton bounds.
  geom::TriMesh posed_mesh = lbs_pose(tpl.mesh, tpl.weights, canon_frames, posed_frames);
  geom::Aabb box{posed.keypoints[0], posed.keypoints[0]};
  for (const auto& p : posed.keypoints) box.expand(p);
  double max_r = 0;
  for (int b = 0; b < skel::kBones; ++b)
    max_r = std::max({max_r, model.r_head[size_t(b)], model.r_tail[size_t(b)]});
  const Vec3 pad{3 * max_r, 3 * max_r, 3 * max_r};
  box.min -= pad;
  box.max += pad;
  for (const auto& v : posed_mesh.vertices) {
    CHECK(finite(v));
    CHECK(box.contains(v));
  }
}
