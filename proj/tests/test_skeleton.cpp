#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "phrit/skeleton.hpp"
#include "testutil.hpp"

using namespace phrit;
using namespace phrit::skel;

TEST_CASE("bone indexing conventions") {
  CHECK(bone_endpoints(0).head == 0);
  CHECK(bone_endpoints(0).tail == 1);
  CHECK(bone_endpoints(8).head == 0);   // middle palmar bone
  CHECK(bone_endpoints(8).tail == 9);   // middle MCP
  CHECK(bone_endpoints(19).head == 19);
  CHECK(bone_endpoints(19).tail == 20);
  CHECK(part_bone(0) == kMiddlePalmarBone);
  CHECK(part_bone(1) == 1);   // thumb proximal
  CHECK(part_bone(15) == 19); // pinky distal
  CHECK(theta_dim_total() == 67);
}

TEST_CASE("bone transforms midpoint and axis") {
  Skeleton s = testutil::reference_flat_skeleton();
  auto bones = bone_transforms(s);
  for (int b = 0; b < kBones; ++b) {
    const auto e = bone_endpoints(b);
    const Vec3 mid = (s.keypoints[size_t(e.head)] + s.keypoints[size_t(e.tail)]) * 0.5;
    CHECK(norm(bones[size_t(b)].t - mid) < 1e-9);
    // Local +y axis along the bone.
    const Vec3 dir = normalized(s.keypoints[size_t(e.tail)] - s.keypoints[size_t(e.head)]);
    CHECK(norm(bones[size_t(b)].R.col(1) - dir) < 1e-9);
    CHECK(geom::orthonormality_error(bones[size_t(b)].R) < 1e-9);
  }

  // Thumb distal bone midpoint is exactly the keypoint average.
  const auto e = bone_endpoints(3);
  const Vec3 mid = (s.keypoints[size_t(e.head)] + s.keypoints[size_t(e.tail)]) * 0.5;
  CHECK(bones[3].t.x == mid.x);
  CHECK(bones[3].t.y == mid.y);
  CHECK(bones[3].t.z == mid.z);

  // Axis-aligned bone: (0,0,0) -> (0,40,0).
  Skeleton tiny = s;
  tiny.keypoints[0] = {0, 0, 0};
  tiny.keypoints[9] = {0, 40, 0};
  auto bt = bone_transforms(tiny);
  CHECK(norm(bt[8].t - Vec3{0, 20, 0}) < 1e-12);
  CHECK(norm(bt[8].R.col(1) - Vec3{0, 1, 0}) < 1e-12);
}

TEST_CASE("bone transform equivariance under rigid maps") {
  Skeleton s = testutil::random_posed_skeleton(123);
  auto base = bone_transforms(s);
  Rng rng(77);
  for (int trial = 0; trial < 100; ++trial) {
    geom::Rigid g = testutil::random_rigid(rng);
    auto moved = bone_transforms(testutil::transformed(s, g));
    for (int b = 0; b < kBones; ++b) {
      geom::Rigid expect = geom::compose(g, base[size_t(b)]);
      for (int k = 0; k < 9; ++k)
        CHECK(std::abs(moved[size_t(b)].R.m[size_t(k)] - expect.R.m[size_t(k)]) < 1e-9);
      CHECK(norm(moved[size_t(b)].t - expect.t) < 1e-9);
    }
  }
}

TEST_CASE("part frames") {
  Skeleton s = testutil::random_posed_skeleton(9);
  auto bones = bone_transforms(s);
  auto parts = part_frames(bones);
  // Palm frame is B_9 (0-based bone 8), bitwise.
  for (int k = 0; k < 9; ++k) CHECK(parts[0].R.m[size_t(k)] == bones[8].R.m[size_t(k)]);
  CHECK(parts[0].t.x == bones[8].t.x);
  for (int p = 0; p < kParts; ++p)
    CHECK(geom::orthonormality_error(parts[size_t(p)].R) < 1e-9);
}

TEST_CASE("local pose dimensions and zero pose") {
  Skeleton flat = testutil::reference_flat_skeleton();
  LocalPose pose = local_pose(flat);
  CHECK(pose.theta[0].size() == 17);
  for (int p = 1; p < kParts; ++p)
    CHECK(int(pose.theta[size_t(p)].size()) == theta_dim(p));

  // Straight finger chains aligned with their palmar bones: all joint angles 0.
  for (int k = 7; k < 17; ++k) CHECK(std::abs(pose.theta[0][size_t(k)]) < 1e-12);
  for (int p = 1; p < kParts; ++p)
    for (double v : pose.theta[size_t(p)]) CHECK(std::abs(v) < 1e-12);
  // Flat palm: arching dihedrals are zero.
  for (int k = 4; k < 7; ++k) CHECK(std::abs(pose.theta[0][size_t(k)]) < 1e-12);
}

TEST_CASE("spread angle from crafted palmar bones") {
  // Thumb and index palmar directions (10,40,0) and (-10,40,0):
  // angle = arccos(1500/1700).
  Skeleton s = testutil::reference_flat_skeleton();
  s.keypoints[0] = {0, 0, 0};
  s.keypoints[1] = {10, 40, 0};
  s.keypoints[5] = {-10, 40, 0};
  // Keep the index chain straight beyond the new MCP so invariants hold.
  const Vec3 d = normalized(s.keypoints[5]);
  s.keypoints[6] = s.keypoints[5] + d * 48.0;
  s.keypoints[7] = s.keypoints[6] + d * 28.0;
  s.keypoints[8] = s.keypoints[7] + d * 24.0;
  const Vec3 dt = normalized(s.keypoints[1]);
  s.keypoints[2] = s.keypoints[1] + dt * 40.0;
  s.keypoints[3] = s.keypoints[2] + dt * 30.0;
  s.keypoints[4] = s.keypoints[3] + dt * 26.0;
  LocalPose pose = local_pose(s);
  CHECK(pose.theta[0][0] == doctest::Approx(std::acos(1500.0 / 1700.0)).epsilon(1e-9));
}

TEST_CASE("local pose and lengths invariant under rigid maps") {
  Skeleton s = testutil::random_posed_skeleton(31);
  LocalPose base = local_pose(s);
  BoneLengths lens = bone_length_features(s);
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    geom::Rigid g = testutil::random_rigid(rng);
    Skeleton moved = testutil::transformed(s, g);
    LocalPose mp = local_pose(moved);
    for (int p = 0; p < kParts; ++p)
      for (std::size_t k = 0; k < base.theta[size_t(p)].size(); ++k)
        CHECK(std::abs(mp.theta[size_t(p)][k] - base.theta[size_t(p)][k]) < 1e-6);
    BoneLengths ml = bone_lengths_t<double>(moved.keypoints);
    for (int b = 0; b < kBones; ++b)
      CHECK(std::abs(ml.raw[size_t(b)] - lens.raw[size_t(b)]) < 1e-9);
  }
}

TEST_CASE("bone length features") {
  Skeleton s = testutil::reference_flat_skeleton();
  BoneLengths lens = bone_length_features(s);
  // Palmar L1[2] is the middle palmar bone length (finger order).
  CHECK(lens.palmar()[2] == doctest::Approx(norm(s.keypoints[9] - s.keypoints[0])));

  // Scaling about the wrist doubles every length.
  Skeleton doubled = s;
  for (auto& p : doubled.keypoints) p = s.keypoints[0] + (p - s.keypoints[0]) * 2.0;
  BoneLengths dl = bone_length_features(doubled);
  for (int b = 0; b < kBones; ++b)
    CHECK(dl.raw[size_t(b)] == doctest::Approx(2.0 * lens.raw[size_t(b)]).epsilon(1e-12));

  // Raw entries match independently recomputed pairwise distances.
  Skeleton posed = testutil::random_posed_skeleton(4);
  BoneLengths pl = bone_length_features(posed);
  for (int b = 0; b < kBones; ++b) {
    const auto e = bone_endpoints(b);
    const Vec3 d = posed.keypoints[size_t(e.tail)] - posed.keypoints[size_t(e.head)];
    CHECK(std::abs(pl.raw[size_t(b)] - std::sqrt(d.x * d.x + d.y * d.y + d.z * d.z)) < 1e-12);
  }
}

TEST_CASE("to_local/from_local round trip") {
  geom::Rigid f;
  f.t = {0, 20, 0};
  CHECK(norm(to_local(f, {0, 20, 0})) < 1e-12);
  CHECK(norm(from_local(f, to_local(f, {3, 4, 5})) - Vec3{3, 4, 5}) < 1e-12);

  Rng rng(21);
  for (int i = 0; i < 1000; ++i) {
    geom::Rigid g = testutil::random_rigid(rng);
    Vec3 p{rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100)};
    CHECK(norm(from_local(g, to_local(g, p)) - p) < 1e-9);
  }
}

TEST_CASE("degenerate inputs raise") {
  Skeleton s = testutil::reference_flat_skeleton();
  s.keypoints[2] = s.keypoints[1];  // zero-length thumb proximal
  CHECK_THROWS_AS(s.validate(), DegenerateBone);
  CHECK_THROWS_AS(bone_transforms(s), DegenerateBone);

  // Collinear palmar triple.
  Skeleton c = testutil::reference_flat_skeleton();
  const Vec3 dir = normalized(c.keypoints[9]);
  c.keypoints[1] = dir * 40.0;
  c.keypoints[5] = dir * 60.0;
  for (int f = 0; f < 2; ++f) {
    const int mcp = 1 + 4 * f;
    for (int j = 1; j < 4; ++j)
      c.keypoints[size_t(mcp + j)] = c.keypoints[size_t(mcp)] + dir * (12.0 * j);
  }
  CHECK_THROWS_AS(local_pose(c), CollinearPalm);
}

TEST_CASE("skeleton json io") {
  Skeleton s = testutil::random_posed_skeleton(55);
  const std::string path =
      (std::filesystem::temp_directory_path() / "phrit_test_skel.json").string();
  save_skeleton_json(s, path);
  Skeleton back = load_skeleton_json(path);
  for (int i = 0; i < kKeypoints; ++i)
    CHECK(norm(back.keypoints[size_t(i)] - s.keypoints[size_t(i)]) < 1e-9);

  std::ofstream bad(path);
  bad << "{\"keypoints_mm\": [[0,0,0]]}\n";
  bad.close();
  CHECK_THROWS_AS(load_skeleton_json(path), DataError);
  std::remove(path.c_str());
}
